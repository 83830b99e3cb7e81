//! Learnable fake score, trained by denoising score matching on the
//! generator's own chunks.
//!
//! The network `F` sees `(c_in·x, t-embedding, context)` and parameterizes a
//! denoiser `D = c_skip·x + c_out·F`, from which the score is
//! `(D − x)/σ²`. With `σ_ref` near the data scale the regression target for
//! `F` stays O(1) at every level.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{perturb_at, NoiseLevel, NoiseSchedule, ScoreField, ScoreRole};
use crate::error::{check_dim, Error, Result};
use crate::smallgrad::{sub, Activation, Architecture, GradientTape, Mlp};
use crate::student::Chunk;

pub const TIME_EMBEDDING_DIM: usize = 3;

pub fn time_embedding(sigma: f64) -> [f64; TIME_EMBEDDING_DIM] {
    let l = sigma.ln();
    [0.25 * l, l.sin(), l.cos()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSpec {
    pub hidden: Vec<usize>,
    pub sigma_ref: f64,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            sigma_ref: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FakeCritic {
    net: Mlp,
    dim: usize,
    context_dim: usize,
    sigma_ref: f64,
}

/// One clean training state with the context it was generated under.
#[derive(Debug, Clone, Copy)]
pub struct CriticSample<'a> {
    pub state: &'a [f64],
    pub context: &'a [f64],
}

impl FakeCritic {
    pub fn init<R: Rng + ?Sized>(dim: usize, context_dim: usize, spec: &CriticSpec, rng: &mut R) -> Self {
        let arch = Architecture::tanh_mlp(
            dim + TIME_EMBEDDING_DIM + context_dim,
            &spec.hidden,
            dim,
            Activation::Identity,
        );
        Self {
            net: Mlp::init(&arch, rng),
            dim,
            context_dim,
            sigma_ref: spec.sigma_ref,
        }
    }

    pub fn from_net(net: Mlp, dim: usize, context_dim: usize, sigma_ref: f64) -> Result<Self> {
        check_dim("critic input", dim + TIME_EMBEDDING_DIM + context_dim, net.input_dim())?;
        check_dim("critic output", dim, net.output_dim())?;
        Ok(Self {
            net,
            dim,
            context_dim,
            sigma_ref,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    fn preconditioning(&self, sigma: f64) -> Preconditioning {
        Preconditioning::new(sigma, self.sigma_ref)
    }

    fn input(&self, x: &[f64], sigma: f64, context: &[f64]) -> Vec<f64> {
        let c_in = self.preconditioning(sigma).c_in;
        let mut v = Vec::with_capacity(self.net.input_dim());
        v.extend(x.iter().map(|xi| c_in * xi));
        v.extend_from_slice(&time_embedding(sigma));
        v.extend_from_slice(context);
        v
    }

    pub fn score(&self, x: &[f64], level: NoiseLevel, context: &[f64]) -> Result<Vec<f64>> {
        check_dim("critic point", self.dim, x.len())?;
        check_dim("critic context", self.context_dim, context.len())?;
        let p = self.preconditioning(level.sigma);
        let f = self.net.forward(&self.input(x, level.sigma, context))?;
        Ok(p.score(x, &f))
    }

    /// The critic bound to one context, usable wherever a score field is.
    pub fn field<'a>(&'a self, context: &'a [f64]) -> CriticField<'a> {
        CriticField { critic: self, context }
    }

    /// Gradient of the batch DSM loss and the loss itself, without updating.
    pub fn dsm_gradient<R: Rng + ?Sized>(
        &self,
        batch: &[CriticSample<'_>],
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<(f64, GradientTape)> {
        if batch.is_empty() {
            return Err(Error::Usage("critic step needs a nonempty batch".into()));
        }
        let n = batch.len() as f64;
        let mut tape = GradientTape::zeros_like(&self.net);
        let mut loss = 0.0;
        for sample in batch {
            check_dim("critic context", self.context_dim, sample.context.len())?;
            let level = schedule.sample_level(rng);
            let noisy = perturb_at(sample.state, level, rng);
            let p = self.preconditioning(level.sigma);
            let trace = self.net.forward_trace(&self.input(&noisy.x, level.sigma, sample.context))?;
            // F* = (x0 − c_skip·x)/c_out, so the residual in F is the
            // weighted denoising error.
            let f_target: Vec<f64> = sample
                .state
                .iter()
                .zip(&noisy.x)
                .map(|(x0, x)| (x0 - p.c_skip * x) / p.c_out)
                .collect();
            let residual = sub(trace.output(), &f_target);
            loss += residual.iter().map(|r| r * r).sum::<f64>() / n;
            let cot: Vec<f64> = residual.iter().map(|r| 2.0 * r / n).collect();
            let (g, _) = self.net.backward(&trace, &cot)?;
            tape.add_scaled(&g, 1.0)?;
        }
        if !loss.is_finite() {
            return Err(Error::Training(format!("critic loss is {loss}")));
        }
        Ok((loss, tape))
    }
}

/// Weighted score residual `λ(σ)·σ⁴‖pred − target‖²` with
/// `λ(σ) = (σ² + σ_ref²)/(σ·σ_ref)²`; equal to the squared error of the
/// network output against its own target.
pub fn dsm_residual(pred: &[f64], target: &[f64], sigma: f64, sigma_ref: f64) -> f64 {
    let c_out = Preconditioning::new(sigma, sigma_ref).c_out;
    let scale = sigma * sigma / c_out;
    scale * scale * pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>()
}

/// Skip, output and input scalings of the denoiser parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Preconditioning {
    sigma: f64,
    c_skip: f64,
    c_out: f64,
    c_in: f64,
}

impl Preconditioning {
    fn new(sigma: f64, sigma_ref: f64) -> Self {
        let total = sigma * sigma + sigma_ref * sigma_ref;
        Self {
            sigma,
            c_skip: sigma_ref * sigma_ref / total,
            c_out: sigma * sigma_ref / total.sqrt(),
            c_in: 1.0 / total.sqrt(),
        }
    }

    fn score(&self, x: &[f64], f: &[f64]) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        x.iter()
            .zip(f)
            .map(|(xi, fi)| ((self.c_skip - 1.0) * xi + self.c_out * fi) / s2)
            .collect()
    }
}

/// One denoising-score-matching update on the clean states of `fake_chunks`:
/// perturb each state at a random level and regress the critic toward
/// `−ε/σ`. Returns the batch-mean weighted residual before the update.
pub fn critic_step<R: Rng + ?Sized>(
    critic: &mut FakeCritic,
    fake_chunks: &[(Chunk, Vec<f64>)],
    schedule: &NoiseSchedule,
    learning_rate: f64,
    rng: &mut R,
) -> Result<f64> {
    let batch: Vec<CriticSample<'_>> = fake_chunks
        .iter()
        .flat_map(|(chunk, ctx)| {
            chunk.states.iter().map(move |s| CriticSample {
                state: s,
                context: ctx,
            })
        })
        .collect();
    let (loss, tape) = critic.dsm_gradient(&batch, schedule, rng)?;
    critic.net.sgd_step(&tape, learning_rate)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy)]
pub struct CriticField<'a> {
    critic: &'a FakeCritic,
    context: &'a [f64],
}

impl ScoreField for CriticField<'_> {
    fn role(&self) -> ScoreRole {
        ScoreRole::FakeCritic
    }

    fn score(&self, x: &[f64], level: NoiseLevel) -> Vec<f64> {
        self.critic
            .score(x, level, self.context)
            .expect("critic evaluated at a point of its dimension")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::smallgrad::{finite_difference_check, Matrix};
    use rand_distr::StandardNormal;

    #[test]
    fn residual_vanishes_when_prediction_hits_target() {
        assert_eq!(dsm_residual(&[1.0, -2.0], &[1.0, -2.0], 0.7, 0.5), 0.0);
        // σ = σ_ref = 1: λ = 2, σ⁴ = 1
        assert!((dsm_residual(&[1.0], &[0.0], 1.0, 1.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut c = FakeCritic::init(2, 1, &CriticSpec::default(), &mut rng::stream(0, "c"));
        let err = critic_step(&mut c, &[], &NoiseSchedule::default(), 1e-3, &mut rng::stream(0, "s"));
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn dsm_gradient_matches_finite_differences_of_its_loss() {
        let critic = FakeCritic::init(2, 1, &CriticSpec { hidden: vec![5], sigma_ref: 0.5 }, &mut rng::stream(1, "c"));
        let states = [vec![0.3, -0.2], vec![1.0, 0.5]];
        let ctx = [0.7];
        let batch: Vec<_> = states.iter().map(|s| CriticSample { state: s, context: &ctx }).collect();
        let sched = NoiseSchedule::default();
        let (_, tape) = critic.dsm_gradient(&batch, &sched, &mut rng::stream(2, "n")).unwrap();
        let g = tape.flat();
        let h = 1e-6;
        let mut probe = critic.clone();
        for i in [0usize, 3, 7, g.len() - 1] {
            let orig = *probe.net.param_mut(i);
            *probe.net.param_mut(i) = orig + h;
            let (lp, _) = probe.dsm_gradient(&batch, &sched, &mut rng::stream(2, "n")).unwrap();
            *probe.net.param_mut(i) = orig - h;
            let (lm, _) = probe.dsm_gradient(&batch, &sched, &mut rng::stream(2, "n")).unwrap();
            *probe.net.param_mut(i) = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-6 * (1.0 + num.abs()), "{num} vs {}", g[i]);
        }
        // the underlying network gradient is exact as well
        assert!(finite_difference_check(critic.net(), &[0.1, 0.2, 0.0, 1.0, 0.0, 0.5], 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn zero_network_is_the_reference_gaussian_score() {
        let mut c = FakeCritic::init(2, 0, &CriticSpec { hidden: vec![], sigma_ref: 0.5 }, &mut rng::stream(0, "c"));
        c.net_mut().layers_mut()[0].weights = Matrix::zeros(2, 2 + TIME_EMBEDDING_DIM);
        c.net_mut().layers_mut()[0].bias = vec![0.0; 2];
        let x = [3.0, 1.0];
        let s = c.score(&x, NoiseLevel { index: 1, sigma: 0.3 }, &[]).unwrap();
        // N(0, 0.25) convolved with N(0, 0.09)
        for i in 0..2 {
            assert!((s[i] + x[i] / 0.34).abs() < 1e-12);
        }
    }

    fn train_on_gaussian(
        critic: &mut FakeCritic,
        mean: [f64; 2],
        var: f64,
        (steps, batch_size, lr): (usize, usize, f64),
        seed: u64,
    ) -> Vec<f64> {
        let sched = NoiseSchedule::default();
        let mut r = rng::stream(seed, "train");
        let sd = var.sqrt();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let states: Vec<Vec<f64>> = (0..batch_size)
                .map(|_| {
                    (0..2)
                        .map(|i| mean[i] + sd * r.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let ctx: [f64; 0] = [];
            let batch: Vec<_> = states.iter().map(|s| CriticSample { state: s, context: &ctx }).collect();
            let (loss, tape) = critic.dsm_gradient(&batch, &sched, &mut r).unwrap();
            critic.net.sgd_step(&tape, lr).unwrap();
            losses.push(loss);
        }
        losses
    }

    #[test]
    fn loss_trends_down_on_stationary_data() {
        let mut c = FakeCritic::init(2, 0, &CriticSpec { hidden: vec![32, 32], sigma_ref: 0.5 }, &mut rng::stream(3, "c"));
        let losses = train_on_gaussian(&mut c, [1.0, -0.5], 0.3, (500, 16, 2e-3), 4);
        let ma: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
        assert!(ma.last().unwrap() < ma.first().unwrap(), "{} -> {}", ma[0], ma.last().unwrap());
        // trend: later half of the moving average below the earlier half
        let half = ma.len() / 2;
        let early: f64 = ma[..half].iter().sum::<f64>() / half as f64;
        let late: f64 = ma[half..].iter().sum::<f64>() / (ma.len() - half) as f64;
        assert!(late < early);
    }

    #[test]
    fn converged_critic_matches_gaussian_score() {
        let mean = [1.0, -0.5];
        let var = 0.3;
        let mut c = FakeCritic::init(2, 0, &CriticSpec { hidden: vec![32, 32], sigma_ref: 0.5 }, &mut rng::stream(5, "c"));
        train_on_gaussian(&mut c, mean, var, (10000, 16, 2e-2), 6);
        train_on_gaussian(&mut c, mean, var, (4000, 64, 5e-3), 7);
        train_on_gaussian(&mut c, mean, var, (2000, 256, 1e-3), 8);
        let sched = NoiseSchedule::default();
        let mut worst: f64 = 0.0;
        for level in 4..=8 {
            let level = sched.level(level).unwrap();
            for x in [[1.0, -0.5], [1.3, -0.2], [0.7, -0.8], [1.2, -0.9]] {
                let got = c.score(&x, level, &[]).unwrap();
                for i in 0..2 {
                    let exact = (mean[i] - x[i]) / (var + level.sigma * level.sigma);
                    worst = worst.max((got[i] - exact).abs());
                }
            }
        }
        assert!(worst <= 0.05, "{worst}");
    }
}
