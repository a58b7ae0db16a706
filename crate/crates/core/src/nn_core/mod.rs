//! Dense numeric kernel shared by every differentiable layer.

mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::{grad_check, relative_error};
pub use matrix::{sigmoid, sigmoid_scalar, softmax_rows, tanh_m, xavier_init, Matrix};
pub use rng::Rng;

/// A bundle of named parameter matrices in a fixed declaration order.
///
/// Gradient bundles reuse the parameter types, so the same order drives
/// flattening, optimizer updates and checkpoint payloads.
pub trait Parameters {
    fn blocks(&self) -> Vec<(String, &Matrix)>;

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, m) in self.blocks() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Overwrites every block from a flat vector in declaration order.
    fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for (_, m) in self.blocks_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    fn zero(&mut self) {
        for (_, m) in self.blocks_mut() {
            m.as_mut_slice().fill(0.0);
        }
    }
}
