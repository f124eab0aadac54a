use std::sync::Arc;

/// Storage precision for tensor values.
///
/// `F32` is the default: every op result is rounded through `f32` before it
/// is stored, so checkpoints round-trip exactly. `F64` is the verification
/// mode used by the finite-difference oracles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub fn quantize_slice(self, values: &mut [f64]) {
        if self == Precision::F32 {
            for v in values.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Smallest positive value representable at this precision (normal range).
    pub fn min_positive(self) -> f64 {
        match self {
            Precision::F32 => f64::from(f32::MIN_POSITIVE),
            Precision::F64 => f64::MIN_POSITIVE,
        }
    }

    /// Largest representable value strictly below 1.
    pub fn below_one(self) -> f64 {
        match self {
            Precision::F32 => f64::from(f32::from_bits(0x3f7f_ffff)),
            Precision::F64 => f64::from_bits(0x3fef_ffff_ffff_ffff),
        }
    }
}

/// Identifies a node on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    pub(crate) tape_id: u64,
    pub(crate) index: usize,
}

/// Dense real-valued N-dimensional array, optionally attached to a tape.
///
/// Cloning is cheap (the value buffer is shared). A tensor with no
/// `tape_node` behaves as a constant: no gradient flows to its ancestors.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeRef>,
    requires_grad: bool,
}

impl Tensor {
    pub(crate) fn new(
        values: Arc<Vec<f64>>,
        shape: Vec<usize>,
        node: Option<NodeRef>,
        requires_grad: bool,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            values,
            node,
            requires_grad,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.as_ref().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape_node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    /// Same values, no tape node: downstream uses create no gradient path
    /// to this tensor's ancestors.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
            requires_grad: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detach_keeps_values_bit_identical() {
        let t = Tensor::new(
            Arc::new(vec![1.0, -2.5, 3.25]),
            vec![3],
            Some(NodeRef { tape_id: 1, index: 0 }),
            true,
        );
        let d = t.detach();
        assert!(d.tape_node().is_none());
        assert!(!d.requires_grad());
        for (a, b) in t.values().iter().zip(d.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn precision_bounds_are_strictly_inside_unit_interval() {
        for p in [Precision::F32, Precision::F64] {
            assert!(p.min_positive() > 0.0);
            assert!(p.below_one() < 1.0);
            assert_eq!(p.quantize(p.below_one()), p.below_one());
        }
    }
}
