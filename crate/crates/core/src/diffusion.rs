//! Variance-exploding noise schedule, isotropic Gaussian mixtures with exact
//! noised scores, and the Tweedie posterior-mean denoiser.
//!
//! Perturbation at level `t` is `x_t = x_0 + σ_t ε`. Convolving a component
//! `N(m_k, v_k I)` with that noise gives `N(m_k, (v_k + σ_t²) I)`, so every
//! score here is available in closed form.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// One noise level of a schedule (1-based `index`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub index: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one level".into()));
        }
        if !(sigmas[0] > 0.0) || sigmas.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("noise levels must be finite and positive".into()));
        }
        if sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("noise levels must be strictly increasing".into()));
        }
        Ok(Self { sigmas })
    }

    /// `levels` values spaced geometrically from `min` to `max` inclusive.
    pub fn geometric(min: f64, max: f64, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("noise schedule needs at least one level".into()));
        }
        if levels == 1 {
            return Self::new(vec![min]);
        }
        let ratio = (max / min).ln() / (levels - 1) as f64;
        let mut sigmas: Vec<f64> = (0..levels).map(|i| min * (ratio * i as f64).exp()).collect();
        sigmas[levels - 1] = max;
        Self::new(sigmas)
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn level(&self, index: usize) -> Result<NoiseLevel> {
        if index == 0 || index > self.sigmas.len() {
            return Err(Error::Structure(format!(
                "noise level {index} outside 1..={}",
                self.sigmas.len()
            )));
        }
        Ok(NoiseLevel {
            index,
            sigma: self.sigmas[index - 1],
        })
    }

    /// Uniform draw over the levels.
    pub fn sample_level<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseLevel {
        let index = rng.random_range(1..=self.sigmas.len());
        NoiseLevel {
            index,
            sigma: self.sigmas[index - 1],
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::geometric(0.05, 2.0, 8).expect("valid default schedule")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub weight: f64,
}

/// Isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixtureComponent>", into = "Vec<MixtureComponent>")]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
}

impl TryFrom<Vec<MixtureComponent>> for GaussianMixture {
    type Error = Error;

    fn try_from(components: Vec<MixtureComponent>) -> Result<Self> {
        Self::new(components)
    }
}

impl From<GaussianMixture> for Vec<MixtureComponent> {
    fn from(m: GaussianMixture) -> Self {
        m.components
    }
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("mixture needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Config("mixture components need a nonempty mean".into()));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::Config(format!(
                    "component {k} has dimension {}, expected {dim}",
                    c.mean.len()
                )));
            }
            if !(c.variance > 0.0) || !c.variance.is_finite() {
                return Err(Error::Config(format!("component {k} variance must be positive")));
            }
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::Config(format!("component {k} weight must be nonnegative")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config(format!("component {k} mean must be finite")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    /// A single Gaussian `N(mean, variance I)`.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent {
            mean,
            variance,
            weight: 1.0,
        }])
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Per-component `log w_k + log N(x; m_k, (v_k + σ²) I)`; `None` for
    /// zero-weight components.
    fn log_joint(&self, x: &[f64], sigma: f64) -> Vec<Option<f64>> {
        let d = x.len() as f64;
        self.components
            .iter()
            .map(|c| {
                if c.weight == 0.0 {
                    return None;
                }
                let var = c.variance + sigma * sigma;
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                Some(c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var)
            })
            .collect()
    }

    /// Log-density of the mixture convolved with `N(0, σ² I)`.
    pub fn log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        check_dim("mixture point", self.dim(), x.len())?;
        let terms = self.log_joint(x, sigma);
        let max = terms.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().flatten().map(|t| (t - max).exp()).sum();
        Ok(max + sum.ln())
    }

    /// Posterior component probabilities at `x`, via log-sum-exp.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim("mixture point", self.dim(), x.len())?;
        let terms = self.log_joint(x, sigma);
        let max = terms.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = terms
            .iter()
            .map(|t| t.map_or(0.0, |t| (t - max).exp()))
            .collect();
        let z: f64 = unnorm.iter().sum();
        Ok(unnorm.into_iter().map(|u| u / z).collect())
    }

    /// `∇ₓ log p_σ(x) = Σ_k r_k(x) (m_k − x) / (v_k + σ²)`.
    pub fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let r = self.responsibilities(x, sigma)?;
        let mut out = vec![0.0; x.len()];
        for (c, rk) in self.components.iter().zip(r) {
            if rk == 0.0 {
                continue;
            }
            let var = c.variance + sigma * sigma;
            for ((o, m), xi) in out.iter_mut().zip(&c.mean).zip(x) {
                *o += rk * (m - xi) / var;
            }
        }
        Ok(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let c = &self.components[chosen];
        let sd = c.variance.sqrt();
        c.mean
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// A clean state perturbed at one noise level, with the noise recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x: Vec<f64>,
    pub level: NoiseLevel,
    pub source: Vec<f64>,
    pub noise: Vec<f64>,
}

pub fn perturb<R: Rng + ?Sized>(
    x0: &[f64],
    schedule: &NoiseSchedule,
    level: usize,
    rng: &mut R,
) -> Result<NoisySample> {
    let level = schedule.level(level)?;
    Ok(perturb_at(x0, level, rng))
}

pub(crate) fn perturb_at<R: Rng + ?Sized>(x0: &[f64], level: NoiseLevel, rng: &mut R) -> NoisySample {
    let noise: Vec<f64> = x0.iter().map(|_| rng.sample(StandardNormal)).collect();
    let x = x0.iter().zip(&noise).map(|(a, e)| a + level.sigma * e).collect();
    NoisySample {
        x,
        level,
        source: x0.to_vec(),
        noise,
    }
}

pub fn mixture_score(mix: &GaussianMixture, schedule: &NoiseSchedule, x: &[f64], level: usize) -> Result<Vec<f64>> {
    mix.score(x, schedule.level(level)?.sigma)
}

/// Tweedie's posterior mean under VE noise: `x̂ = x + σ² ∇ log p_σ(x)`.
pub fn tweedie_denoise(score: &[f64], x: &[f64], sigma: f64) -> Vec<f64> {
    x.iter().zip(score).map(|(xi, s)| xi + sigma * sigma * s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRole {
    TeacherHistoryAware,
    TeacherMarginalized,
    FakeCritic,
}

/// Anything that evaluates a score vector at a noised point.
pub trait ScoreField {
    fn role(&self) -> ScoreRole;
    fn score(&self, x: &[f64], level: NoiseLevel) -> Vec<f64>;
}

/// A fixed mixture used directly as a score field.
#[derive(Debug, Clone)]
pub struct MixtureField {
    pub mixture: GaussianMixture,
    pub role: ScoreRole,
}

impl ScoreField for MixtureField {
    fn role(&self) -> ScoreRole {
        self.role
    }

    fn score(&self, x: &[f64], level: NoiseLevel) -> Vec<f64> {
        self.mixture.score(x, level.sigma).expect("point dimension matches mixture")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn comp(mean: Vec<f64>, variance: f64, weight: f64) -> MixtureComponent {
        MixtureComponent { mean, variance, weight }
    }

    fn random_mixture(r: &mut rng::Rng, k: usize, d: usize) -> GaussianMixture {
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut comps: Vec<_> = raw
            .iter()
            .map(|w| comp((0..d).map(|_| r.random_range(-3.0..3.0)).collect(), r.random_range(0.1..1.5), w / total))
            .collect();
        let s: f64 = comps.iter().map(|c| c.weight).sum();
        comps[0].weight += 1.0 - s;
        GaussianMixture::new(comps).unwrap()
    }

    #[test]
    fn default_schedule_is_geometric() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 8);
        assert_eq!(s.sigmas()[0], 0.05);
        assert_eq!(s.sigmas()[7], 2.0);
        let r = s.sigmas()[1] / s.sigmas()[0];
        for w in s.sigmas().windows(2) {
            assert!((w[1] / w[0] - r).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_rejects_non_increasing() {
        assert!(NoiseSchedule::new(vec![0.1, 0.1]).is_err());
        assert!(NoiseSchedule::new(vec![0.0, 0.1]).is_err());
        assert!(NoiseSchedule::default().level(0).is_err());
        assert!(NoiseSchedule::default().level(9).is_err());
    }

    #[test]
    fn perturb_vanishes_with_tiny_sigma() {
        let s = NoiseSchedule::new(vec![1e-300]).unwrap();
        let out = perturb(&[1.5, -2.0], &s, 1, &mut rng::stream(1, "p")).unwrap();
        assert_eq!(out.x, vec![1.5, -2.0]);
    }

    #[test]
    fn perturb_is_seeded() {
        let s = NoiseSchedule::default();
        let a = perturb(&[0.0, 0.0], &s, 3, &mut rng::stream(5, "p")).unwrap();
        let b = perturb(&[0.0, 0.0], &s, 3, &mut rng::stream(5, "p")).unwrap();
        assert_eq!(a, b);
        for i in 0..2 {
            assert_eq!(a.x[i], a.source[i] + a.level.sigma * a.noise[i]);
        }
    }

    #[test]
    fn perturb_rejects_bad_level() {
        let s = NoiseSchedule::default();
        assert!(matches!(perturb(&[0.0], &s, 0, &mut rng::stream(0, "p")), Err(Error::Structure(_))));
    }

    #[test]
    fn perturbation_variance_matches_sigma_squared() {
        let s = NoiseSchedule::default();
        let mut r = rng::stream(17, "mc");
        let level = 5;
        let sigma = s.level(level).unwrap().sigma;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let p = perturb(&[0.7], &s, level, &mut r).unwrap();
            let d = p.x[0] - 0.7;
            sum += d;
            sq += d * d;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn single_gaussian_score() {
        let m = GaussianMixture::gaussian(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(m.score(&[1.0, 0.0], 0.0).unwrap(), vec![-1.0, 0.0]);
    }

    #[test]
    fn symmetric_pair_has_zero_score_at_midpoint() {
        let m = GaussianMixture::new(vec![comp(vec![-2.0, 1.0], 0.5, 0.5), comp(vec![2.0, 1.0], 0.5, 0.5)]).unwrap();
        let s = m.score(&[0.0, 1.0], 0.3).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-15), "{s:?}");
    }

    #[test]
    fn score_matches_numeric_log_density_gradient() {
        let mut r = rng::stream(2, "score-oracle");
        let sched = NoiseSchedule::default();
        for _ in 0..50 {
            let mix = random_mixture(&mut r, 3, 2);
            let x: Vec<f64> = (0..2).map(|_| r.random_range(-4.0..4.0)).collect();
            let level = sched.sample_level(&mut r);
            let s = mixture_score(&mix, &sched, &x, level.index).unwrap();
            let h = 1e-6;
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let num = (mix.log_density(&xp, level.sigma).unwrap() - mix.log_density(&xm, level.sigma).unwrap()) / (2.0 * h);
                assert!((num - s[i]).abs() <= 1e-6, "{num} vs {}", s[i]);
            }
        }
    }

    #[test]
    fn responsibilities_survive_huge_log_gaps() {
        let m = GaussianMixture::new(vec![comp(vec![0.0], 0.01, 0.5), comp(vec![50.0], 0.01, 0.5)]).unwrap();
        // log-likelihood gap at x = 1 is far beyond 10^3
        let r = m.responsibilities(&[1.0], 0.0).unwrap();
        assert!(r.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(r[0], 1.0);
        let s = m.score(&[1.0], 0.0).unwrap();
        assert!((s[0] + 100.0).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_components_are_ignored() {
        let m = GaussianMixture::new(vec![comp(vec![0.0], 1.0, 1.0), comp(vec![5.0], 1.0, 0.0)]).unwrap();
        assert_eq!(m.responsibilities(&[5.0], 0.0).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::new(vec![comp(vec![0.0], 1.0, 0.6)]).is_err());
        assert!(GaussianMixture::new(vec![comp(vec![0.0], 0.0, 1.0)]).is_err());
        assert!(GaussianMixture::new(vec![comp(vec![0.0], 1.0, 0.5), comp(vec![0.0, 1.0], 1.0, 0.5)]).is_err());
    }

    #[test]
    fn tweedie_zero_score_is_identity() {
        assert_eq!(tweedie_denoise(&[0.0, 0.0], &[1.0, -3.0], 0.7), vec![1.0, -3.0]);
    }

    #[test]
    fn tweedie_vanishes_with_tiny_sigma() {
        let m = GaussianMixture::gaussian(vec![3.0], 0.5).unwrap();
        let x = [1.0];
        let s = m.score(&x, 1e-200).unwrap();
        assert_eq!(tweedie_denoise(&s, &x, 1e-200), vec![1.0]);
    }

    #[test]
    fn tweedie_is_gaussian_posterior_mean() {
        let mut r = rng::stream(4, "tweedie");
        let sched = NoiseSchedule::default();
        for _ in 0..100 {
            let m: Vec<f64> = (0..2).map(|_| r.random_range(-3.0..3.0)).collect();
            let v = r.random_range(0.1..2.0);
            let mix = GaussianMixture::gaussian(m.clone(), v).unwrap();
            let x: Vec<f64> = (0..2).map(|_| r.random_range(-5.0..5.0)).collect();
            let sigma = sched.sample_level(&mut r).sigma;
            let s2 = sigma * sigma;
            let denoised = tweedie_denoise(&mix.score(&x, sigma).unwrap(), &x, sigma);
            for i in 0..2 {
                // E[x0 | x] = (v x + σ² m) / (v + σ²)
                let post = (v * x[i] + s2 * m[i]) / (v + s2);
                assert!((denoised[i] - post).abs() <= 1e-12, "{} vs {post}", denoised[i]);
            }
        }
    }

    #[test]
    fn mixture_round_trips_through_serde_shape() {
        let m = GaussianMixture::new(vec![comp(vec![1.0, 2.0], 0.25, 0.25), comp(vec![-1.0, 0.5], 0.5, 0.75)]).unwrap();
        let v: Vec<MixtureComponent> = m.clone().into();
        assert_eq!(GaussianMixture::try_from(v).unwrap(), m);
    }
}
