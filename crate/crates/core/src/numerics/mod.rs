//! Dense 2-D arrays with a reverse-mode differentiation tape.
//!
//! Every value is a row-major matrix; vectors are `1 x n` rows and scalars
//! are `1 x 1`. Batched token activations are `tokens x features`.

mod attention;
mod gradcheck;
mod graph;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

pub use gradcheck::{finite_difference_check, GradCheckReport, ParamCheck};
pub use graph::{CustomBackward, CustomForward, Graph, Var};
pub use tensor::Tensor;

/// Floating point element type the engine is generic over.
pub trait Scalar: NdFloat + FromPrimitive + Sum + Default + Debug {
    /// Name recorded in checkpoint indexes.
    const DTYPE: &'static str;
    /// Bytes per element in the checkpoint encoding.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from an f64 literal.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
}

/// Indices of the `k` largest entries, largest first. Ties go to the lower
/// index.
pub fn top_k_indices<S: Scalar>(values: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// 0-based argmax with lowest-index tie breaking.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of a slice.
pub fn softmax<S: Scalar>(values: &[S]) -> Vec<S> {
    let max = values
        .iter()
        .copied()
        .fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<S> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_symmetric_input_is_uniform() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn top_k_breaks_ties_by_lowest_index() {
        assert_eq!(top_k_indices(&[1.0f64, 3.0, 3.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[2.0f64; 5], 3), vec![0, 1, 2]);
        assert_eq!(argmax(&[1.0f64, 1.0, 1.0]), 0);
    }

    #[test]
    fn scalar_bytes_round_trip() {
        let mut buf = Vec::new();
        (-1.25e-7f64).write_le(&mut buf);
        0.3f32.write_le(&mut buf);
        assert_eq!(f64::read_le(&buf[..8]), -1.25e-7);
        assert_eq!(f32::read_le(&buf[8..]), 0.3);
    }
}
