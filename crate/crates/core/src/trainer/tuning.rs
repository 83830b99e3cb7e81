//! Streaming long tuning: the student trains on its own rollouts, one
//! generator step per chunk, with condition switches mid-rollout.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::critic::{critic_step, CriticSpec, FakeCritic};
use super::features::{FeatureExtractor, FeatureSpec};
use super::gate::{GateParams, TrustGateState};
use super::step::{delta_forcing_step, AblationFlags};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng;
use crate::student::{Chunk, GeneratorSpec, HistoryCache, StudentGenerator, DEFAULT_WINDOW};
use crate::world::{sample_schedule, Condition, EventSchedule, HistorySummary, Teacher, TeacherKind, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// States per chunk.
    pub chunk_len: usize,
    /// States per rollout.
    pub video_len: usize,
    pub events: usize,
    /// Chunks contributing to the cache's running mean.
    pub window: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            chunk_len: 4,
            video_len: 24,
            events: 2,
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub levels: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.05,
            sigma_max: 2.0,
            levels: 8,
        }
    }
}

impl NoiseConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::geometric(self.sigma_min, self.sigma_max, self.levels)
    }
}

/// Gate hyperparameters. A missing `mu` or `sharpness` is calibrated from
/// the warm-up discrepancies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub mu: Option<f64>,
    pub sharpness: Option<f64>,
    pub sharpness_numerator: f64,
    pub iqr_floor: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            mu: None,
            sharpness: None,
            sharpness_numerator: 4.0,
            iqr_floor: 1e-3,
        }
    }
}

impl GateConfig {
    fn fixed(&self) -> Option<GateParams> {
        Some(GateParams {
            mu: self.mu?,
            sharpness: self.sharpness?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub generator_lr: f64,
    pub critic_lr: f64,
    /// Critic updates per generator update.
    pub critic_ratio: usize,
    /// Fresh chunks per critic update.
    pub critic_batch: usize,
    /// Generator steps run with the gate held open while discrepancies are
    /// collected for calibration.
    pub warmup_steps: usize,
    pub gate: GateConfig,
    pub teacher: TeacherKind,
    pub flags: AblationFlags,
    pub rollout: RolloutConfig,
    pub noise: NoiseConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            generator_lr: 1e-3,
            critic_lr: 2e-3,
            critic_ratio: 5,
            critic_batch: 8,
            warmup_steps: 200,
            gate: GateConfig::default(),
            teacher: TeacherKind::Marginalized,
            flags: AblationFlags::FULL,
            rollout: RolloutConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("generator_lr", self.generator_lr)?;
        positive("critic_lr", self.critic_lr)?;
        positive("gate.sharpness_numerator", self.gate.sharpness_numerator)?;
        positive("gate.iqr_floor", self.gate.iqr_floor)?;
        if let Some(s) = self.gate.sharpness {
            positive("gate.sharpness", s)?;
        }
        if self.critic_batch == 0 {
            return Err(Error::Config("critic_batch must be at least 1".into()));
        }
        if self.rollout.window == 0 {
            return Err(Error::Config("rollout.window must be at least 1".into()));
        }
        if self.gate.fixed().is_none() && self.warmup_steps == 0 && self.steps > 0 {
            return Err(Error::Config(
                "gate.mu and gate.sharpness must both be set when warmup_steps is 0".into(),
            ));
        }
        EventSchedule::new(
            vec![0; 1],
            vec![],
            self.rollout.chunk_len,
            self.rollout.video_len,
        )?;
        self.noise.schedule()?;
        Ok(())
    }
}

/// One generator step of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub rollout: usize,
    /// 1-based chunk index within the rollout.
    pub chunk_k: usize,
    /// 0-based event index within the rollout.
    pub event_e: usize,
    pub condition: usize,
    pub is_switch: bool,
    /// NaN on the first chunk of a rollout.
    pub rho: f64,
    pub w: f64,
    pub loss_dmd: f64,
    pub loss_cont: f64,
    pub loss_total: f64,
    /// 1 when the chunk ends nearest to the history-consistent mode.
    pub drift_mode_acc: f64,
    pub grad_norm: f64,
    pub grad_norm_dmd: f64,
    pub grad_norm_cont: f64,
    pub critic_loss: f64,
    pub terminal: Vec<f64>,
}

pub const TRAINING_LOG_HEADER: &str = "step,chunk_k,event_e,rho,w,loss_dmd,loss_cont,loss_total,drift_mode_acc,grad_norm";

/// Float formatting with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn training_log_csv(records: &[StepRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(TRAINING_LOG_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.chunk_k,
            r.event_e,
            fmt_f64(r.rho),
            fmt_f64(r.w),
            fmt_f64(r.loss_dmd),
            fmt_f64(r.loss_cont),
            fmt_f64(r.loss_total),
            fmt_f64(r.drift_mode_acc),
            fmt_f64(r.grad_norm),
        );
    }
    out
}

/// Result of a tuning run. The log covers every completed step even when
/// `error` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub log: Vec<StepRecord>,
    pub gate: Option<GateParams>,
    pub warmup_rho: Vec<f64>,
    pub error: Option<Error>,
}

/// Context handed to the critic: the active condition's embedding. The
/// critic models the student's per-condition distribution pooled over
/// histories.
pub fn critic_context(cond: &Condition, _cache: &HistoryCache) -> Vec<f64> {
    cond.embedding.clone()
}

pub fn critic_context_dim(embedding_dim: usize, _dim: usize) -> usize {
    embedding_dim
}

/// Whether `chunk` ends nearest to the mode the history favours.
pub fn mode_correct(world: &World, cond: &Condition, history: &HistorySummary, chunk: &Chunk) -> bool {
    world.nearest_mode(&cond.modes, chunk.terminal()) == world.consistent_mode(cond, history)
}

struct RolloutState {
    index: usize,
    schedule: EventSchedule,
    cache: HistoryCache,
    k: usize,
}

/// Runs `cfg.steps` generator steps. Rollouts are resampled whenever the
/// previous one is exhausted; the gate is reset with each rollout.
pub fn streaming_long_tuning<R: Rng + ?Sized>(
    gen: &mut StudentGenerator,
    critic: &mut FakeCritic,
    phi: &FeatureExtractor,
    world: &World,
    cfg: &TrainConfig,
    rng: &mut R,
) -> TrainingOutcome {
    let mut outcome = TrainingOutcome {
        log: Vec::with_capacity(cfg.steps),
        gate: cfg.gate.fixed(),
        warmup_rho: Vec::new(),
        error: None,
    };
    if let Err(e) = run(gen, critic, phi, world, cfg, rng, &mut outcome) {
        outcome.error = Some(e);
    }
    outcome
}

fn run<R: Rng + ?Sized>(
    gen: &mut StudentGenerator,
    critic: &mut FakeCritic,
    phi: &FeatureExtractor,
    world: &World,
    cfg: &TrainConfig,
    rng: &mut R,
    outcome: &mut TrainingOutcome,
) -> Result<()> {
    cfg.validate()?;
    let schedule = cfg.noise.schedule()?;
    let prompt_set: Vec<usize> = world.conditions().iter().map(|c| c.id).collect();
    let open = GateParams {
        mu: f64::INFINITY,
        sharpness: 1.0,
    };
    let calibrating = outcome.gate.is_none();
    let mut gate = TrustGateState::new(outcome.gate.unwrap_or(open));
    let mut current: Option<RolloutState> = None;
    let mut rollouts = 0;

    for step in 0..cfg.steps {
        let state = match current.as_mut() {
            Some(s) if s.k < s.schedule.num_chunks() => s,
            _ => {
                let schedule = sample_schedule(
                    &prompt_set,
                    cfg.rollout.events,
                    cfg.rollout.chunk_len,
                    cfg.rollout.video_len,
                    rng,
                )?;
                gate.reset();
                rollouts += 1;
                current.insert(RolloutState {
                    index: rollouts - 1,
                    schedule,
                    cache: gen.new_cache(cfg.rollout.window),
                    k: 0,
                })
            }
        };
        let k = state.k;
        let event = state.schedule.event_of(k);
        let cond = world.condition(state.schedule.condition_of(k))?;
        let is_switch = state.schedule.is_switch(k);
        if is_switch {
            state.cache.recache(cond);
        }
        let history = state.cache.history_for(world, cond);
        let context = critic_context(cond, &state.cache);
        let generated = gen.generate_next_chunk(&state.cache, cond, event, rng)?;

        let mut critic_loss = f64::NAN;
        for _ in 0..cfg.critic_ratio {
            let batch = (0..cfg.critic_batch)
                .map(|_| {
                    gen.generate_next_chunk(&state.cache, cond, event, rng)
                        .map(|g| (g.chunk, context.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            critic_loss = critic_step(critic, &batch, &schedule, cfg.critic_lr, rng)?;
        }

        let teacher = Teacher {
            kind: cfg.teacher,
            world,
            condition: cond,
            history: &history,
        };
        let breakdown = delta_forcing_step(
            gen,
            &critic.field(&context),
            phi,
            &mut gate,
            &teacher,
            &generated,
            cfg.flags,
            &schedule,
            cfg.generator_lr,
            rng,
        )?;

        if calibrating && step < cfg.warmup_steps {
            if let Some(rho) = breakdown.rho {
                outcome.warmup_rho.push(rho);
            }
            if step + 1 == cfg.warmup_steps {
                let mut params = GateParams::calibrate(
                    &outcome.warmup_rho,
                    cfg.gate.sharpness_numerator,
                    cfg.gate.iqr_floor,
                )?;
                if let Some(mu) = cfg.gate.mu {
                    params.mu = mu;
                }
                if let Some(s) = cfg.gate.sharpness {
                    params.sharpness = s;
                }
                gate.params = params;
                outcome.gate = Some(params);
            }
        }

        let chunk = &generated.chunk;
        outcome.log.push(StepRecord {
            step,
            rollout: state.index,
            chunk_k: chunk.index,
            event_e: event,
            condition: cond.id,
            is_switch,
            rho: breakdown.rho.unwrap_or(f64::NAN),
            w: breakdown.w,
            loss_dmd: breakdown.loss_dmd,
            loss_cont: breakdown.loss_cont,
            loss_total: breakdown.loss_total,
            drift_mode_acc: if mode_correct(world, cond, &history, chunk) { 1.0 } else { 0.0 },
            grad_norm: breakdown.grad_norm,
            grad_norm_dmd: breakdown.grad_norm_dmd,
            grad_norm_cont: breakdown.grad_norm_cont,
            critic_loss,
            terminal: chunk.terminal().to_vec(),
        });
        state.cache.append_chunk(chunk, cond)?;
        state.k += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub generator: GeneratorSpec,
    pub critic: CriticSpec,
    pub features: FeatureSpec,
}

/// Everything a training run needs besides the world and config.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub generator: StudentGenerator,
    pub critic: FakeCritic,
    pub phi: FeatureExtractor,
}

impl Models {
    /// Generator and critic are drawn from streams of `seed`; the feature
    /// extractor from its own fixed seed.
    pub fn init(world: &World, rollout: &RolloutConfig, spec: &ModelSpec, seed: u64) -> Self {
        let (d, e) = (world.dim(), world.embedding_dim());
        Self {
            generator: StudentGenerator::init(
                d,
                rollout.chunk_len,
                e,
                &spec.generator,
                &mut rng::stream(seed, "generator-init"),
            ),
            critic: FakeCritic::init(
                d,
                critic_context_dim(e, d),
                &spec.critic,
                &mut rng::stream(seed, "critic-init"),
            ),
            phi: FeatureExtractor::new(d * rollout.chunk_len, &spec.features),
        }
    }

    pub fn train<R: Rng + ?Sized>(&mut self, world: &World, cfg: &TrainConfig, rng: &mut R) -> TrainingOutcome {
        streaming_long_tuning(&mut self.generator, &mut self.critic, &self.phi, world, cfg, rng)
    }
}
