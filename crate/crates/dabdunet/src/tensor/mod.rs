//! Dense f64 tensors and the reverse-mode gradient tape.
//!
//! A [`Tensor`] is an immutable, contiguous, row-major array of `f64` with an
//! explicit shape. Layout convention for 4-D data is `[batch, channel,
//! height, width]`; any other rank is allowed. Tensors are cheap to clone
//! (the payload is reference counted) and their values never change after
//! creation — gradients accumulate on the [`Tape`], not in the tensor.
//!
//! All differentiable operations live on [`Tape`]; see that type for the
//! recording and backward-pass contract.

mod kernels;
mod tape;

pub use tape::{Reduce, Tape};

use std::rc::Rc;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// True when `DABDU_CHECKED=1`: every tape operation asserts that its output
/// is finite. Off by default; the check costs a full pass over each result.
pub fn checked_mode() -> bool {
    static CHECKED: OnceLock<bool> = OnceLock::new();
    *CHECKED.get_or_init(|| std::env::var("DABDU_CHECKED").map(|v| v == "1").unwrap_or(false))
}

/// Reference into a tape: which tape (by tag) and which node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape_tag: u64,
    pub id: usize,
}

/// Dense N-dimensional array of `f64`.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor from raw row-major data. Fails if the element count
    /// does not match the shape product.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "from_vec",
                format!("{} values do not fill shape {:?} ({} elements)", data.len(), shape, numel),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("from_vec", format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Rc::new(data), node: None })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        assert!(shape.iter().all(|&e| e > 0), "zero extent in shape {shape:?}");
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![value; numel]), node: None }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: Vec::new(), data: Rc::new(vec![value]), node: None }
    }

    pub fn zeros_like(other: &Tensor) -> Tensor {
        Tensor::zeros(other.shape())
    }

    /// Tensor of i.i.d. uniform samples from `[lo, hi)`, drawn in row-major
    /// order so the result is a pure function of the RNG state.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), data: Rc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Value at a full multi-index. Intended for tests and inspection.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} (extent {ext})");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Rc<Vec<f64>>, node: NodeRef) -> Tensor {
        Tensor { shape, data, node: Some(node) }
    }

    pub(crate) fn payload(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    /// A detached copy: same shape and values, no tape association.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Rc::clone(&self.data), node: None }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

/// Bitwise equality of shape and values; used by determinism tests.
pub fn bit_identical(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data().iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).is_ok());
        assert!(Tensor::from_vec(vec![], &[0]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(4.5);
        assert!(s.is_scalar());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.5);
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::from_vec((0..24).map(|v| v as f64).collect(), &[2, 3, 4]).unwrap();
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[1, 0, 2]), 14.0);
    }
}
