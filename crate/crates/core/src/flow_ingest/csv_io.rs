use std::io::{Read, Write};

use super::FlowRecord;
use crate::error::Result;

/// Column order of the canonical flow CSV. Absent optionals are empty cells.
pub const CSV_COLUMNS: [&str; 16] = [
    "ts",
    "uid",
    "orig_host",
    "orig_port",
    "resp_host",
    "resp_port",
    "proto",
    "service",
    "duration",
    "orig_bytes",
    "resp_bytes",
    "conn_state",
    "orig_pkts",
    "resp_pkts",
    "label_raw",
    "label",
];

pub fn write_flows_csv<W: Write>(records: &[FlowRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_flows_csv<R: Read>(input: R) -> Result<Vec<FlowRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(crate::Error::Incompatible(format!(
            "flow CSV header does not match the canonical columns: {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
