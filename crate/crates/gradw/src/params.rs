//! Named parameter storage shared by the networks, the optimizer and the
//! checkpoint format.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Precision;

#[derive(Clone, Debug)]
pub struct Param {
    values: Arc<Vec<f64>>,
    shape: Vec<usize>,
}

impl Param {
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Param {
            values: Arc::new(values),
            shape,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
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
}

/// Ordered collection of trainable parameters plus non-trained buffers
/// (batch-norm running statistics). When frozen, every mutation fails, so
/// values are bit-identical across any number of forward/backward passes
/// or training steps.
#[derive(Clone, Debug)]
pub struct ParamSet {
    params: IndexMap<String, Param>,
    buffers: IndexMap<String, Param>,
    frozen: bool,
    precision: Precision,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new(Precision::F32)
    }
}

impl ParamSet {
    pub fn new(precision: Precision) -> Self {
        ParamSet {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            frozen: false,
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn insert_param(&mut self, name: &str, mut values: Vec<f64>, shape: Vec<usize>) {
        debug_assert!(!self.frozen, "inserting into a frozen ParamSet");
        self.precision.quantize_slice(&mut values);
        self.params.insert(name.to_string(), Param::new(values, shape));
    }

    pub fn insert_buffer(&mut self, name: &str, mut values: Vec<f64>, shape: Vec<usize>) {
        debug_assert!(!self.frozen, "inserting into a frozen ParamSet");
        self.precision.quantize_slice(&mut values);
        self.buffers.insert(name.to_string(), Param::new(values, shape));
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Param> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a parameter's values, rounding to the set's storage
    /// precision so checkpoints round-trip exactly.
    pub fn set_param_values(&mut self, name: &str, mut values: Vec<f64>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(name.to_string()));
        }
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        debug_assert_eq!(values.len(), p.len());
        self.precision.quantize_slice(&mut values);
        p.values = Arc::new(values);
        Ok(())
    }

    pub fn set_buffer_values(&mut self, name: &str, mut values: Vec<f64>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(name.to_string()));
        }
        let b = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        debug_assert_eq!(values.len(), b.len());
        self.precision.quantize_slice(&mut values);
        b.values = Arc::new(values);
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(Param::len).sum::<usize>()
            + self.buffers.values().map(Param::len).sum::<usize>()
    }

    /// Bit-exact snapshot of every parameter and buffer, for freeze checks.
    pub fn snapshot_bits(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.total_values());
        for (_, p) in self.iter_params() {
            out.extend(p.values().iter().map(|v| v.to_bits()));
        }
        for (_, b) in self.iter_buffers() {
            out.extend(b.values().iter().map(|v| v.to_bits()));
        }
        out
    }
}

/// Standard normal via Box-Muller; stable across platforms given the
/// pinned rng version.
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He-normal initialization for a tensor with the given fan-in.
pub(crate) fn he_normal(
    rng: &mut ChaCha8Rng,
    n: usize,
    fan_in: usize,
    precision: Precision,
) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n).map(|_| precision.quantize(normal(rng) * std)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn frozen_set_rejects_updates() {
        let mut set = ParamSet::new(Precision::F64);
        set.insert_param("w", vec![1.0, 2.0], vec![2]);
        set.freeze();
        assert!(matches!(
            set.set_param_values("w", vec![0.0, 0.0]),
            Err(Error::Frozen(_))
        ));
        assert_eq!(set.param("w").unwrap().values(), &[1.0, 2.0]);
    }

    #[test]
    fn he_normal_scale_tracks_fan_in() {
        let mut rng = seeds::rng_tagged("he", &[0]);
        let v = he_normal(&mut rng, 4096, 8, Precision::F64);
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 0.25).abs() < 0.05, "observed variance {var}");
    }
}
