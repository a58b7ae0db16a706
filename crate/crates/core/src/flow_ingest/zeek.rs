use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{canonical_label, FlowRecord, Proto, BENIGN};
use crate::error::{Error, Result};

/// A data line that could not be turned into a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ZeekParse {
    pub records: Vec<FlowRecord>,
    /// Skipped lines. Parsing continues past these.
    pub errors: Vec<LineError>,
}

const REQUIRED: [&str; 7] = ["ts", "uid", "id.orig_h", "id.orig_p", "id.resp_h", "id.resp_p", "proto"];

struct Header {
    fields: Vec<String>,
    /// Number of names packed into the final tab-separated `#fields` entry
    /// (IoT-23 writes `tunnel_parents   label   detailed-label` as one field).
    packed_tail: usize,
    separator: String,
    unset: String,
    empty: String,
}

impl Header {
    fn column(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f == name)
    }
}

struct Columns {
    ts: usize,
    uid: usize,
    orig_h: usize,
    orig_p: usize,
    resp_h: usize,
    resp_p: usize,
    proto: usize,
    service: Option<usize>,
    duration: Option<usize>,
    orig_bytes: Option<usize>,
    resp_bytes: Option<usize>,
    conn_state: Option<usize>,
    orig_pkts: Option<usize>,
    resp_pkts: Option<usize>,
    label: Option<usize>,
    detailed: Option<usize>,
}

impl Columns {
    fn resolve(h: &Header, line: usize) -> Result<Self> {
        for name in REQUIRED {
            if h.column(name).is_none() {
                return Err(Error::ZeekHeader {
                    line,
                    message: format!("#fields is missing required column `{name}`"),
                });
            }
        }
        let label = h.column("label");
        let detailed = h.column("detailed-label");
        if label.is_none() && detailed.is_none() {
            return Err(Error::ZeekHeader {
                line,
                message: "#fields has no `label` or `detailed-label` column".into(),
            });
        }
        let req = |n: &str| h.column(n).expect("checked above");
        Ok(Columns {
            ts: req("ts"),
            uid: req("uid"),
            orig_h: req("id.orig_h"),
            orig_p: req("id.orig_p"),
            resp_h: req("id.resp_h"),
            resp_p: req("id.resp_p"),
            proto: req("proto"),
            service: h.column("service"),
            duration: h.column("duration"),
            orig_bytes: h.column("orig_bytes"),
            resp_bytes: h.column("resp_bytes"),
            conn_state: h.column("conn_state"),
            orig_pkts: h.column("orig_pkts"),
            resp_pkts: h.column("resp_pkts"),
            label,
            detailed,
        })
    }
}

fn unescape_separator(raw: &str) -> String {
    // `#separator \x09`
    let mut out = String::new();
    let mut rest = raw;
    while let Some(pos) = rest.find("\\x") {
        out.push_str(&rest[..pos]);
        let hex = rest.get(pos + 2..pos + 4).unwrap_or("");
        match u8::from_str_radix(hex, 16) {
            Ok(b) => {
                out.push(b as char);
                rest = &rest[pos + 4..];
            }
            Err(_) => {
                out.push_str("\\x");
                rest = &rest[pos + 2..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Parses a Zeek TSV connection log.
///
/// Fails only when no usable `#fields` header precedes the data. Lines with
/// the wrong column count, or with unparseable or out-of-range values, are
/// skipped and reported in [`ZeekParse::errors`].
pub fn parse_zeek_log<R: BufRead>(input: R) -> Result<ZeekParse> {
    let mut header: Option<(Header, Columns)> = None;
    let mut separator = "\t".to_string();
    let mut unset = "-".to_string();
    let mut empty = "(empty)".to_string();
    let mut out = ZeekParse::default();
    let mut line_no = 0;

    for line in input.lines() {
        line_no += 1;
        let line = line.map_err(|e| Error::ZeekHeader {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some(sep) = meta.strip_prefix("separator ") {
                separator = unescape_separator(sep.trim());
            } else if let Some(v) = meta.strip_prefix("unset_field") {
                unset = v.trim_start_matches(separator.as_str()).trim().to_string();
            } else if let Some(v) = meta.strip_prefix("empty_field") {
                empty = v.trim_start_matches(separator.as_str()).trim().to_string();
            } else if let Some(v) = meta.strip_prefix("fields") {
                let mut fields: Vec<String> = v
                    .split(separator.as_str())
                    .filter(|f| !f.is_empty())
                    .map(str::to_string)
                    .collect();
                let mut packed_tail = 1;
                if let Some(last) = fields.pop() {
                    let parts: Vec<String> = last.split_whitespace().map(str::to_string).collect();
                    packed_tail = parts.len().max(1);
                    fields.extend(parts);
                }
                let h = Header {
                    fields,
                    packed_tail,
                    separator: separator.clone(),
                    unset: unset.clone(),
                    empty: empty.clone(),
                };
                let cols = Columns::resolve(&h, line_no)?;
                header = Some((h, cols));
            }
            continue;
        }
        let Some((h, cols)) = header.as_ref() else {
            return Err(Error::ZeekHeader {
                line: line_no,
                message: "data line before any #fields header".into(),
            });
        };
        match parse_line(line, h, cols) {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(LineError { line: line_no, message }),
        }
    }
    if header.is_none() {
        return Err(Error::ZeekHeader {
            line: line_no,
            message: "no #fields header found".into(),
        });
    }
    if !out.errors.is_empty() {
        log::warn!("zeek log: skipped {} malformed line(s)", out.errors.len());
    }
    Ok(out)
}

pub fn parse_zeek_str(input: &str) -> Result<ZeekParse> {
    parse_zeek_log(input.as_bytes())
}

/// Parses several files concurrently; results are concatenated in the given order.
pub fn parse_zeek_files(paths: &[PathBuf]) -> Result<ZeekParse> {
    let parsed: Vec<Result<ZeekParse>> = paths
        .par_iter()
        .map(|p: &PathBuf| {
            let file = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
            parse_zeek_log(std::io::BufReader::new(file)).map_err(|e| annotate(p, e))
        })
        .collect();
    let mut all = ZeekParse::default();
    for part in parsed {
        let part = part?;
        all.records.extend(part.records);
        all.errors.extend(part.errors);
    }
    Ok(all)
}

fn annotate(path: &Path, e: Error) -> Error {
    match e {
        Error::ZeekHeader { line, message } => Error::ZeekHeader {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

fn parse_line(line: &str, h: &Header, cols: &Columns) -> std::result::Result<FlowRecord, String> {
    let mut values: Vec<&str> = line.split(h.separator.as_str()).collect();
    if values.len() != h.fields.len() {
        let tab_fields = h.fields.len() + 1 - h.packed_tail;
        if h.packed_tail > 1 && values.len() == tab_fields {
            let last = values.pop().unwrap_or("");
            let parts: Vec<&str> = last.split_whitespace().collect();
            if parts.len() != h.packed_tail {
                return Err(format!(
                    "packed label field has {} tokens, expected {}",
                    parts.len(),
                    h.packed_tail
                ));
            }
            values.extend(parts);
        } else {
            return Err(format!("expected {} columns, found {}", h.fields.len(), values.len()));
        }
    }

    let present = |i: usize| -> Option<&str> {
        let v = values[i];
        (v != h.unset && v != h.empty && !v.is_empty()).then_some(v)
    };
    let opt = |i: Option<usize>| i.and_then(present);
    let field_name = |i: usize| h.fields[i].as_str();

    let parse_f64 = |i: usize| -> std::result::Result<Option<f64>, String> {
        present(i)
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| format!("`{}` is not a number: {v:?}", field_name(i)))
            })
            .transpose()
    };
    let parse_u64 = |i: Option<usize>| -> std::result::Result<Option<u64>, String> {
        match i {
            None => Ok(None),
            Some(i) => present(i)
                .map(|v| {
                    v.parse::<u64>()
                        .map_err(|_| format!("`{}` is not a non-negative count: {v:?}", field_name(i)))
                })
                .transpose(),
        }
    };
    let parse_port = |i: usize| -> std::result::Result<u16, String> {
        let v = present(i).ok_or_else(|| format!("`{}` is unset", field_name(i)))?;
        v.parse::<u16>()
            .map_err(|_| format!("`{}` is not a port in 0-65535: {v:?}", field_name(i)))
    };

    let ts = parse_f64(cols.ts)?.ok_or("`ts` is unset")?;
    let duration = match cols.duration {
        Some(i) => parse_f64(i)?,
        None => None,
    };
    if duration.is_some_and(|d| d < 0.0) {
        return Err("`duration` is negative".into());
    }

    let label_tok = opt(cols.label);
    let detailed_tok = opt(cols.detailed);
    // the detailed label names the attack family; fall back to the coarse label
    let label_raw = match (detailed_tok, label_tok) {
        (Some(d), _) => d,
        (None, Some(l)) => l,
        (None, None) => return Err("no label on line".into()),
    };
    let label = canonical_label(label_raw);
    if label.is_empty() {
        return Err("label is empty after normalization".into());
    }

    Ok(FlowRecord {
        ts,
        uid: values[cols.uid].to_string(),
        orig_host: values[cols.orig_h].to_string(),
        orig_port: parse_port(cols.orig_p)?,
        resp_host: values[cols.resp_h].to_string(),
        resp_port: parse_port(cols.resp_p)?,
        proto: Proto::parse(values[cols.proto]),
        service: opt(cols.service).map(str::to_string),
        duration,
        orig_bytes: parse_u64(cols.orig_bytes)?,
        resp_bytes: parse_u64(cols.resp_bytes)?,
        conn_state: opt(cols.conn_state).unwrap_or("-").to_string(),
        orig_pkts: parse_u64(cols.orig_pkts)?,
        resp_pkts: parse_u64(cols.resp_pkts)?,
        label_raw: label_raw.to_string(),
        label,
    })
}

const WRITE_FIELDS: [&str; 16] = [
    "ts",
    "uid",
    "id.orig_h",
    "id.orig_p",
    "id.resp_h",
    "id.resp_p",
    "proto",
    "service",
    "duration",
    "orig_bytes",
    "resp_bytes",
    "conn_state",
    "orig_pkts",
    "resp_pkts",
    "label",
    "detailed-label",
];

/// Writes records back out as a labeled Zeek TSV log.
///
/// Absent optionals are written as `-`; floats use the shortest text that
/// parses back to the same value.
pub fn write_zeek_log<W: Write>(records: &[FlowRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "#separator \\x09")?;
    writeln!(out, "#unset_field\t-")?;
    writeln!(out, "#empty_field\t(empty)")?;
    writeln!(out, "#fields\t{}", WRITE_FIELDS.join("\t"))?;
    fn opt<T: ToString>(v: &Option<T>) -> String {
        v.as_ref().map_or_else(|| "-".to_string(), T::to_string)
    }
    for r in records {
        let (coarse, detailed) = if r.label == BENIGN {
            (r.label_raw.as_str(), "-")
        } else {
            ("Malicious", r.label_raw.as_str())
        };
        let row = [
            r.ts.to_string(),
            r.uid.clone(),
            r.orig_host.clone(),
            r.orig_port.to_string(),
            r.resp_host.clone(),
            r.resp_port.to_string(),
            r.proto.as_str().to_string(),
            opt(&r.service),
            opt(&r.duration),
            opt(&r.orig_bytes),
            opt(&r.resp_bytes),
            r.conn_state.clone(),
            opt(&r.orig_pkts),
            opt(&r.resp_pkts),
            coarse.to_string(),
            detailed.to_string(),
        ];
        writeln!(out, "{}", row.join("\t"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "#separator \\x09\n#set_separator\t,\n#empty_field\t(empty)\n#unset_field\t-\n#path\tconn\n\
#fields\tts\tuid\tid.orig_h\tid.orig_p\tid.resp_h\tid.resp_p\tproto\tservice\tduration\torig_bytes\tresp_bytes\tconn_state\tlocal_orig\tlocal_resp\tmissed_bytes\thistory\torig_pkts\torig_ip_bytes\tresp_pkts\tresp_ip_bytes\ttunnel_parents   label   detailed-label\n\
#types\ttime\tstring\taddr\tport\taddr\tport\tenum\tstring\tinterval\tcount\tcount\tstring\tbool\tbool\tcount\tstring\tcount\tcount\tcount\tcount\tset[string]   string   string\n";

    fn line(ts: &str, uid: &str, duration: &str, tail: &str) -> String {
        format!(
            "{ts}\t{uid}\t192.168.100.103\t51524\t65.127.233.163\t23\ttcp\t-\t{duration}\t0\t0\tS0\t-\t-\t0\tS\t1\t40\t0\t0\t{tail}\n"
        )
    }

    fn five_line_fixture() -> String {
        let mut s = HEADER.to_string();
        s += &line("1545403816.962094", "CrDn63WjJEmrWGjqf", "3.139211", "-   Benign   -");
        s += &line(
            "1545403824.181240",
            "CY9lJW3gh1Eje4usP",
            "-",
            "-   Malicious   PartOfAHorizontalPortScan",
        );
        s += &line(
            "1545403828.201012",
            "CcFXLynukEDnUlvgl",
            "2.998796",
            "-   Malicious   PartOfAHorizontalPortScan",
        );
        s += &line("1545403835.003213", "CuZUvA2DKfaUG1TSx6", "-", "(empty)   Benign   -");
        s += &line(
            "1545403839.996312",
            "CQ3u3E1Z4lbk7SnBD",
            "0.000002",
            "-   Malicious   PartOfAHorizontalPortScan",
        );
        s += "#close\t2018-12-21-15-50-14\n";
        s
    }

    #[test]
    fn parses_packed_label_fixture() {
        let p = parse_zeek_str(&five_line_fixture()).unwrap();
        assert!(p.errors.is_empty(), "{:?}", p.errors);
        assert_eq!(p.records.len(), 5);
        let labels: Vec<&str> = p.records.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels.iter().filter(|l| **l == "Benign").count(), 2);
        assert_eq!(labels.iter().filter(|l| **l == "PartOfAHorizontalPortScan").count(), 3);
        assert_eq!(p.records[0].uid, "CrDn63WjJEmrWGjqf");
        assert_eq!(p.records[1].duration, None);
        assert_eq!(p.records[0].duration, Some(3.139211));
        assert_eq!(p.records[0].service, None);
        assert_eq!(p.records[0].resp_port, 23);
        assert_eq!(p.records[0].proto, Proto::Tcp);
    }

    #[test]
    fn header_only_is_empty() {
        let p = parse_zeek_str(HEADER).unwrap();
        assert!(p.records.is_empty());
        assert!(p.errors.is_empty());
    }

    #[test]
    fn missing_fields_header_names_the_line() {
        let err = parse_zeek_str("#separator \\x09\n1.0\tabc\n").unwrap_err();
        match err {
            Error::ZeekHeader { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(parse_zeek_str(""), Err(Error::ZeekHeader { .. })));
    }

    #[test]
    fn wrong_column_count_is_skipped_and_counted() {
        let mut s = five_line_fixture();
        s += "1.0\tshort\tline\n";
        s += &line("1545403840.0", "Cbad", "abc", "-   Benign   -");
        s += &line("1545403841.0", "Cneg", "-1.5", "-   Benign   -");
        let p = parse_zeek_str(&s).unwrap();
        assert_eq!(p.records.len(), 5);
        assert_eq!(p.errors.len(), 3);
        assert!(p.errors[0].message.contains("columns"));
    }

    #[test]
    fn tab_separated_label_columns_also_parse() {
        let s = "#separator \\x09\n#fields\tts\tuid\tid.orig_h\tid.orig_p\tid.resp_h\tid.resp_p\tproto\tlabel\tdetailed-label\n\
1.5\tC1\t10.0.0.1\t1\t10.0.0.2\t80\tudp\tMalicious\tC&C-HeartBeat\n";
        let p = parse_zeek_str(s).unwrap();
        assert_eq!(p.records[0].label, "C&C-HeartBeat");
        assert_eq!(p.records[0].proto, Proto::Udp);
        assert_eq!(p.records[0].conn_state, "-");
    }

    #[test]
    fn port_out_of_range_is_rejected() {
        let s = "#fields\tts\tuid\tid.orig_h\tid.orig_p\tid.resp_h\tid.resp_p\tproto\tlabel\n\
1.5\tC1\t10.0.0.1\t70000\t10.0.0.2\t80\tudp\tBenign\n";
        let p = parse_zeek_str(s).unwrap();
        assert!(p.records.is_empty());
        assert_eq!(p.errors.len(), 1);
    }

    #[test]
    fn write_then_parse_round_trips_values() {
        let p = parse_zeek_str(&five_line_fixture()).unwrap();
        let mut buf = Vec::new();
        write_zeek_log(&p.records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(4).unwrap().contains("\t-\t"));
        let again = parse_zeek_str(&text).unwrap();
        assert_eq!(again.records, p.records);
    }
}
