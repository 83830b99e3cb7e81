//! One generator update: gated blend of the DMD and continuity objectives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dmd::{dmd_loss, generator_gradient};
use super::features::FeatureExtractor;
use super::gate::TrustGateState;
use crate::diffusion::{NoiseSchedule, ScoreField};
use crate::error::{Error, Result};
use crate::smallgrad::GradientTape;
use crate::student::{Generated, StudentGenerator};

/// Ablation switches. `no_cont` drops the `(1 − w)·L_cont` term;
/// `no_gate` removes `w` from the DMD term while the continuity term keeps its
/// `(1 − w)` weight. Both together give plain streaming DMD.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_gate: bool,
    pub no_cont: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self { no_gate: false, no_cont: false };
    pub const PLAIN_DMD: Self = Self { no_gate: true, no_cont: true };

    /// Coefficients on `(L_DMD, L_cont)` for gate weight `w`.
    pub fn coefficients(self, w: f64, has_continuity: bool) -> (f64, f64) {
        let dmd = if self.no_gate { 1.0 } else { w };
        let cont = if self.no_cont || !has_continuity { 0.0 } else { 1.0 - w };
        (dmd, cont)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// 1-based chunk index within the rollout.
    pub chunk_k: usize,
    pub event_e: usize,
    pub loss_dmd: f64,
    pub loss_cont: f64,
    /// Discrepancy, absent on the first chunk of a rollout.
    pub rho: Option<f64>,
    pub w: f64,
    pub dmd_weight: f64,
    pub cont_weight: f64,
    pub loss_total: f64,
    pub grad_norm_dmd: f64,
    pub grad_norm_cont: f64,
    pub grad_norm: f64,
}

impl LossBreakdown {
    pub fn summary(&self) -> String {
        format!(
            "L_DMD={} L_cont={} rho={:?} w={} L={} |g|={}",
            self.loss_dmd, self.loss_cont, self.rho, self.w, self.loss_total, self.grad_norm
        )
    }
}

/// `‖f_k − f_prev‖²` with `f_prev` a constant.
pub fn continuity_loss(f_k: &[f64], f_prev: &[f64]) -> Result<f64> {
    if f_k.len() != f_prev.len() {
        return Err(Error::Structure(format!(
            "continuity loss between descriptors of length {} and {}",
            f_k.len(),
            f_prev.len()
        )));
    }
    Ok(f_k.iter().zip(f_prev).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityTerm {
    pub loss: f64,
    pub features: Vec<f64>,
    /// Gradient of the loss with respect to the flattened chunk.
    pub output_grad: Vec<f64>,
}

/// Continuity loss of a chunk against the previous fake descriptor and its
/// pullback to the chunk; no score field is involved.
pub fn continuity_term(phi: &FeatureExtractor, chunk_flat: &[f64], f_prev: &[f64]) -> Result<ContinuityTerm> {
    let desc = phi.describe(chunk_flat)?;
    let loss = continuity_loss(&desc.features, f_prev)?;
    let cot: Vec<f64> = desc.features.iter().zip(f_prev).map(|(a, b)| 2.0 * (a - b)).collect();
    let output_grad = phi.pullback(&desc, &cot)?;
    Ok(ContinuityTerm {
        loss,
        features: desc.features,
        output_grad,
    })
}

/// Generator parameter gradient of the continuity term alone.
pub fn continuity_gradient(
    gen: &StudentGenerator,
    phi: &FeatureExtractor,
    generated: &Generated,
    f_prev: &[f64],
) -> Result<(f64, GradientTape)> {
    let term = continuity_term(phi, &generated.chunk.flat(), f_prev)?;
    Ok((term.loss, generator_gradient(gen, generated, &term.output_grad)?))
}

/// `a·g + c·h`, leaving out terms whose coefficient is zero so the
/// single-term limits are exact.
fn blend(a: f64, g: &[f64], c: f64, h: Option<&[f64]>) -> Vec<f64> {
    match (a != 0.0, h.filter(|_| c != 0.0)) {
        (true, Some(h)) => g.iter().zip(h).map(|(x, y)| a * x + c * y).collect(),
        (true, None) => g.iter().map(|x| a * x).collect(),
        (false, Some(h)) => h.iter().map(|y| c * y).collect(),
        (false, None) => vec![0.0; g.len()],
    }
}

fn blend_scalar(a: f64, x: f64, c: f64, y: f64) -> f64 {
    match (a != 0.0, c != 0.0) {
        (true, true) => a * x + c * y,
        (true, false) => a * x,
        (false, true) => c * y,
        (false, false) => 0.0,
    }
}

/// Scores the freshly generated chunk, updates the gate, blends the two
/// objectives and applies one SGD step to the generator.
///
/// The gate's previous descriptors decide whether a continuity term exists:
/// on the first chunk of a rollout the gate is only primed and `w = 1`.
#[allow(clippy::too_many_arguments)]
pub fn delta_forcing_step<R: Rng + ?Sized>(
    gen: &mut StudentGenerator,
    critic: &dyn ScoreField,
    phi: &FeatureExtractor,
    gate: &mut TrustGateState,
    teacher: &dyn ScoreField,
    generated: &Generated,
    flags: AblationFlags,
    schedule: &NoiseSchedule,
    learning_rate: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let chunk = &generated.chunk;
    let dmd = dmd_loss(teacher, critic, chunk, schedule, rng)?;
    let f_real = phi.extract(&dmd.x_hat_real)?;

    let (cont, rho, w) = match gate.previous_fake().map(<[f64]>::to_vec) {
        Some(prev) => {
            let term = continuity_term(phi, &chunk.flat(), &prev)?;
            let reading = gate.update(&term.features, &f_real)?;
            (Some(term), Some(reading.rho), reading.w)
        }
        None => {
            gate.prime(&phi.extract(chunk)?, &f_real);
            (None, None, 1.0)
        }
    };

    let (a, c) = flags.coefficients(w, cont.is_some());
    let cont_grad = cont.as_ref().map(|t| t.output_grad.as_slice());
    let combined = blend(a, &dmd.output_grad, c, cont_grad);
    let tape = generator_gradient(gen, generated, &combined)?;
    let grad_norm_dmd = generator_gradient(gen, generated, &dmd.output_grad)?.norm();
    let grad_norm_cont = match cont_grad {
        Some(h) => generator_gradient(gen, generated, h)?.norm(),
        None => 0.0,
    };
    let loss_cont = cont.as_ref().map_or(0.0, |t| t.loss);
    let breakdown = LossBreakdown {
        chunk_k: chunk.index,
        event_e: chunk.event,
        loss_dmd: dmd.loss,
        loss_cont,
        rho,
        w,
        dmd_weight: a,
        cont_weight: c,
        loss_total: blend_scalar(a, dmd.loss, c, loss_cont),
        grad_norm_dmd,
        grad_norm_cont,
        grad_norm: tape.norm(),
    };
    if !breakdown.loss_total.is_finite() || !tape.is_finite() {
        return Err(Error::NonFinite(Box::new(breakdown)));
    }
    gen.net_mut().sgd_step(&tape, learning_rate)?;
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn continuity_loss_values() {
        assert_eq!(continuity_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(continuity_loss(&[1.0, 0.0, 0.0], &[0.0; 3]).unwrap(), 1.0);
        assert!(matches!(continuity_loss(&[1.0], &[1.0, 2.0]), Err(Error::Structure(_))));
    }

    #[test]
    fn continuity_loss_matches_loop() {
        use rand::Rng;
        let mut r = rng::stream(2, "cont");
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| r.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| r.random_range(-2.0..2.0)).collect();
            let mut expected = 0.0;
            for i in 0..8 {
                let d = a[i] - b[i];
                expected += d * d;
            }
            assert!((continuity_loss(&a, &b).unwrap() - expected).abs() <= 1e-14 * expected.max(1.0));
        }
    }

    #[test]
    fn coefficient_table() {
        let w = 0.3;
        assert_eq!(AblationFlags::FULL.coefficients(w, true), (0.3, 0.7));
        assert_eq!(AblationFlags { no_gate: false, no_cont: true }.coefficients(w, true), (0.3, 0.0));
        assert_eq!(AblationFlags { no_gate: true, no_cont: false }.coefficients(w, true), (1.0, 0.7));
        assert_eq!(AblationFlags::PLAIN_DMD.coefficients(w, true), (1.0, 0.0));
        assert_eq!(AblationFlags::FULL.coefficients(1.0, false), (1.0, 0.0));
    }

    #[test]
    fn blend_limits_are_exact() {
        let g = [0.1, -0.7, 3.3];
        let h = [1.9, 0.2, -0.4];
        assert_eq!(blend(1.0, &g, 0.0, Some(&h)), g.to_vec());
        assert_eq!(blend(0.0, &g, 1.0, Some(&h)), h.to_vec());
        assert_eq!(blend(1.0, &g, 0.5, None), g.to_vec());
    }
}
