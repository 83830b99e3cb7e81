//! Frozen chunk descriptor `Φ`: a seeded random tanh MLP that is never trained.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::rng;
use crate::smallgrad::{Activation, Architecture, ForwardTrace, Mlp};
use crate::student::Chunk;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub hidden: Vec<usize>,
    pub descriptor_dim: usize,
    /// Chunk coordinates are multiplied by this before the first layer.
    pub input_scale: f64,
    pub seed: u64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            descriptor_dim: 8,
            input_scale: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    net: Mlp,
    input_scale: f64,
}

/// Descriptor plus what is needed to pull a cotangent back to the chunk.
pub struct Descriptor {
    pub features: Vec<f64>,
    trace: ForwardTrace,
}

impl FeatureExtractor {
    pub fn new(chunk_width: usize, spec: &FeatureSpec) -> Self {
        let arch = Architecture::tanh_mlp(chunk_width, &spec.hidden, spec.descriptor_dim, Activation::Tanh);
        Self {
            net: Mlp::init(&arch, &mut rng::stream(spec.seed, "feature-extractor")),
            input_scale: spec.input_scale,
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn descriptor_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn scaled(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter().map(|v| v * self.input_scale).collect()
    }

    pub fn extract(&self, chunk: &Chunk) -> Result<Vec<f64>> {
        self.extract_flat(&chunk.flat())
    }

    pub fn extract_flat(&self, flat: &[f64]) -> Result<Vec<f64>> {
        check_dim("feature input", self.net.input_dim(), flat.len())?;
        self.net.forward(&self.scaled(flat))
    }

    pub fn describe(&self, flat: &[f64]) -> Result<Descriptor> {
        check_dim("feature input", self.net.input_dim(), flat.len())?;
        let trace = self.net.forward_trace(&self.scaled(flat))?;
        Ok(Descriptor {
            features: trace.output().to_vec(),
            trace,
        })
    }

    /// `(∂Φ/∂chunk)ᵀ · cotangent`
    pub fn pullback(&self, desc: &Descriptor, cotangent: &[f64]) -> Result<Vec<f64>> {
        let (_, grad) = self.net.backward(&desc.trace, cotangent)?;
        Ok(grad.into_iter().map(|g| g * self.input_scale).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn chunk(states: Vec<Vec<f64>>) -> Chunk {
        Chunk { states, index: 1, event: 0, condition: 0 }
    }

    #[test]
    fn identical_chunks_identical_descriptors() {
        let phi = FeatureExtractor::new(8, &FeatureSpec::default());
        let a = chunk(vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 3.0], vec![-4.0, 0.0]]);
        assert_eq!(phi.extract(&a).unwrap(), phi.extract(&a.clone()).unwrap());
        assert_eq!(phi.extract(&a).unwrap().len(), 8);
    }

    #[test]
    fn frozen_across_many_calls() {
        let phi = FeatureExtractor::new(8, &FeatureSpec::default());
        let params = phi.net().params();
        let a = chunk(vec![vec![0.1, 0.2]; 4]);
        let first = phi.extract(&a).unwrap();
        for _ in 0..1000 {
            assert_eq!(phi.extract(&a).unwrap(), first);
        }
        assert_eq!(phi.net().params(), params);
        assert_eq!(FeatureExtractor::new(8, &FeatureSpec::default()), phi);
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let phi = FeatureExtractor::new(8, &FeatureSpec::default());
        let mut r = rng::stream(1, "phi-fd");
        let x: Vec<f64> = (0..8).map(|_| r.random_range(-4.0..4.0)).collect();
        let cot: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let d = phi.describe(&x).unwrap();
        let analytic = phi.pullback(&d, &cot).unwrap();
        let h = 1e-5;
        for i in 0..8 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = phi.extract_flat(&xp).unwrap();
            let fm = phi.extract_flat(&xm).unwrap();
            let num: f64 = fp.iter().zip(&fm).zip(&cot).map(|((a, b), c)| (a - b) / (2.0 * h) * c).sum();
            assert!((num - analytic[i]).abs() <= 1e-4 * num.abs().max(1e-8) + 1e-10, "{num} vs {}", analytic[i]);
        }
    }
}
