//! Trust gate from the discrepancy between teacher and student feature deltas.
//!
//! `δ_k = f_k − f_{k−1}` for both the student's clean chunks and the teacher's
//! denoised chunks, `ρ_k = ‖δ^real_k − δ^fake_k‖₂` and
//! `w_k = sigmoid(−(ρ_k − μ)·s)`. Everything here is a constant to the loss.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::smallgrad::{norm, sub};
use crate::stats;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gate_weight(rho: f64, mu: f64, sharpness: f64) -> f64 {
    sigmoid(-(rho - mu) * sharpness)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub mu: f64,
    pub sharpness: f64,
}

impl GateParams {
    /// `μ = median(ρ)`, `s = numerator / max(IQR(ρ), floor)`.
    pub fn calibrate(rhos: &[f64], numerator: f64, iqr_floor: f64) -> Result<Self> {
        let finite: Vec<f64> = rhos.iter().copied().filter(|r| r.is_finite()).collect();
        let mu = stats::median(&finite)
            .ok_or_else(|| Error::Usage("gate calibration needs at least one discrepancy sample".into()))?;
        let spread = stats::iqr(&finite).unwrap_or(0.0).max(iqr_floor);
        Ok(Self {
            mu,
            sharpness: numerator / spread,
        })
    }

    pub fn weight(&self, rho: f64) -> f64 {
        gate_weight(rho, self.mu, self.sharpness)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateReading {
    pub delta_fake: Vec<f64>,
    pub delta_real: Vec<f64>,
    pub rho: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustGateState {
    pub params: GateParams,
    prev_fake: Option<Vec<f64>>,
    prev_real: Option<Vec<f64>>,
    last: Option<GateReading>,
}

impl TrustGateState {
    pub fn new(params: GateParams) -> Self {
        Self {
            params,
            prev_fake: None,
            prev_real: None,
            last: None,
        }
    }

    /// Forget the previous descriptors, as at the start of a rollout.
    pub fn reset(&mut self) {
        self.prev_fake = None;
        self.prev_real = None;
        self.last = None;
    }

    pub fn has_previous(&self) -> bool {
        self.prev_fake.is_some()
    }

    pub fn previous_fake(&self) -> Option<&[f64]> {
        self.prev_fake.as_deref()
    }

    pub fn last(&self) -> Option<&GateReading> {
        self.last.as_ref()
    }

    /// Stores the first descriptors of a rollout; no deltas exist yet.
    pub fn prime(&mut self, f_fake: &[f64], f_real: &[f64]) {
        self.prev_fake = Some(f_fake.to_vec());
        self.prev_real = Some(f_real.to_vec());
        self.last = None;
    }

    /// Deltas, discrepancy and weight for chunk `k`, then rotate the stored
    /// descriptors.
    pub fn update(&mut self, f_fake: &[f64], f_real: &[f64]) -> Result<GateReading> {
        let (prev_fake, prev_real) = match (&self.prev_fake, &self.prev_real) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Usage("gate update needs descriptors from the previous chunk".into())),
        };
        check_dim("fake descriptor", prev_fake.len(), f_fake.len())?;
        check_dim("real descriptor", prev_real.len(), f_real.len())?;
        let delta_fake = sub(f_fake, prev_fake);
        let delta_real = sub(f_real, prev_real);
        let rho = norm(&sub(&delta_real, &delta_fake));
        let reading = GateReading {
            w: self.params.weight(rho),
            delta_fake,
            delta_real,
            rho,
        };
        self.prev_fake = Some(f_fake.to_vec());
        self.prev_real = Some(f_real.to_vec());
        self.last = Some(reading.clone());
        Ok(reading)
    }
}
