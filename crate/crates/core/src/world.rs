//! The synthetic multi-event world.
//!
//! A single global Gaussian mixture holds every mode; each condition owns a
//! disjoint subset of modes plus a prior over which of them a history lands
//! in. Two teachers are available in closed form:
//!
//! - history-aware: the score of the one mode that is consistent with the
//!   trajectory so far (nearest mode to the history's running mean);
//! - marginalized: that score averaged over the history prior,
//!   `Σ_k π_k (m_k − x) / (v_k + σ²)`.
//!
//! Their difference is the per-event bias field.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{GaussianMixture, MixtureComponent, NoiseLevel, ScoreField, ScoreRole};
use crate::error::{check_dim, Error, Result};

pub const MAX_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub id: usize,
    pub embedding: Vec<f64>,
    /// Indices into the world's global mixture, ascending.
    pub modes: Vec<usize>,
    /// `p(history basin | condition)`, aligned with `modes`.
    pub history_prior: Vec<f64>,
}

/// Geometric summary of a trajectory, as seen by the history-aware teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct HistorySummary {
    pub terminal: Vec<f64>,
    pub running_mean: Vec<f64>,
    /// Number of chunks the summary was built from; zero means no history.
    pub chunks: usize,
    pub active_mode: Option<usize>,
}

impl HistorySummary {
    pub fn empty(dim: usize) -> Self {
        Self {
            terminal: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            chunks: 0,
            active_mode: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.chunks == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasSample {
    pub x: Vec<f64>,
    pub level: NoiseLevel,
    pub condition: usize,
    pub s_aware: Vec<f64>,
    pub s_marginal: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    mixture: GaussianMixture,
    conditions: Vec<Condition>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl World {
    pub fn new(mixture: GaussianMixture, conditions: Vec<Condition>) -> Result<Self> {
        let dim = mixture.dim();
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::Config(format!("latent dimension {dim} outside 1..={MAX_DIM}")));
        }
        if conditions.is_empty() {
            return Err(Error::Config("world needs at least one condition".into()));
        }
        let emb_dim = conditions[0].embedding.len();
        let mut owner = vec![None; mixture.components().len()];
        for (i, c) in conditions.iter().enumerate() {
            if c.id != i {
                return Err(Error::Config(format!("condition at position {i} has id {}", c.id)));
            }
            if c.modes.is_empty() {
                return Err(Error::Structure(format!("condition {i} has an empty mode set")));
            }
            if c.embedding.len() != emb_dim {
                return Err(Error::Config(format!("condition {i} embedding has inconsistent length")));
            }
            if c.history_prior.len() != c.modes.len() {
                return Err(Error::Config(format!("condition {i} history prior does not match its modes")));
            }
            if c.history_prior.iter().any(|p| !(*p >= 0.0)) || (c.history_prior.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("condition {i} history prior must be a distribution")));
            }
            if c.modes.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(format!("condition {i} mode ids must be ascending and unique")));
            }
            for &m in &c.modes {
                let slot = owner.get_mut(m).ok_or_else(|| {
                    Error::Config(format!("condition {i} references missing mode {m}"))
                })?;
                if let Some(prev) = slot.replace(i) {
                    return Err(Error::Config(format!("mode {m} claimed by conditions {prev} and {i}")));
                }
            }
        }
        Ok(Self { mixture, conditions })
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn condition(&self, id: usize) -> Result<&Condition> {
        self.conditions
            .get(id)
            .ok_or_else(|| Error::Config(format!("unknown condition {id}")))
    }

    pub fn embedding_dim(&self) -> usize {
        self.conditions[0].embedding.len()
    }

    pub fn mode_mean(&self, mode: usize) -> &[f64] {
        &self.mixture.components()[mode].mean
    }

    /// Mode among `modes` whose mean is closest to `point`; ties go to the
    /// lowest id.
    pub fn nearest_mode(&self, modes: &[usize], point: &[f64]) -> usize {
        let mut best = modes[0];
        let mut best_d = sq_dist(self.mode_mean(best), point);
        for &m in &modes[1..] {
            let d = sq_dist(self.mode_mean(m), point);
            if d < best_d || (d == best_d && m < best) {
                best = m;
                best_d = d;
            }
        }
        best
    }

    /// The trajectory-consistent mode of `cond` given `hist`. Without
    /// history, the mode with the largest prior weight.
    pub fn consistent_mode(&self, cond: &Condition, hist: &HistorySummary) -> usize {
        if hist.is_empty() {
            let mut best = 0;
            for (i, p) in cond.history_prior.iter().enumerate() {
                if *p > cond.history_prior[best] {
                    best = i;
                }
            }
            return cond.modes[best];
        }
        self.nearest_mode(&cond.modes, &hist.running_mean)
    }

    fn component_score(&self, mode: usize, x: &[f64], sigma: f64) -> Vec<f64> {
        let c = &self.mixture.components()[mode];
        let var = c.variance + sigma * sigma;
        c.mean.iter().zip(x).map(|(m, xi)| (m - xi) / var).collect()
    }

    /// `s*(x, t | h, c)`: score of the trajectory-consistent mode alone.
    pub fn history_aware_score(&self, cond: &Condition, hist: &HistorySummary, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if cond.modes.is_empty() {
            return Err(Error::Structure(format!("condition {} has an empty mode set", cond.id)));
        }
        check_dim("world point", self.dim(), x.len())?;
        Ok(self.component_score(self.consistent_mode(cond, hist), x, sigma))
    }

    /// `s̄(x, t | c) = E_{h ~ p(h|c)} s*(x, t | h, c)`.
    pub fn marginalized_score(&self, cond: &Condition, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim("world point", self.dim(), x.len())?;
        let mut out = vec![0.0; x.len()];
        for (&m, &p) in cond.modes.iter().zip(&cond.history_prior) {
            if p == 0.0 {
                continue;
            }
            for (o, s) in out.iter_mut().zip(self.component_score(m, x, sigma)) {
                *o += p * s;
            }
        }
        Ok(out)
    }

    pub fn bias_field(&self, cond: &Condition, hist: &HistorySummary, x: &[f64], level: NoiseLevel) -> Result<BiasSample> {
        let s_aware = self.history_aware_score(cond, hist, x, level.sigma)?;
        let s_marginal = self.marginalized_score(cond, x, level.sigma)?;
        let b = s_aware.iter().zip(&s_marginal).map(|(a, m)| a - m).collect();
        Ok(BiasSample {
            x: x.to_vec(),
            level,
            condition: cond.id,
            s_aware,
            s_marginal,
            b,
        })
    }

    /// Median distance over all pairs of mode means.
    pub fn median_mode_spacing(&self) -> f64 {
        let comps = self.mixture.components();
        let mut d = Vec::new();
        for i in 0..comps.len() {
            for j in i + 1..comps.len() {
                d.push(sq_dist(&comps[i].mean, &comps[j].mean).sqrt());
            }
        }
        crate::stats::median(&d).unwrap_or(0.0)
    }

    /// Mean per-coordinate standard deviation of the modes.
    pub fn mode_std(&self) -> f64 {
        let comps = self.mixture.components();
        comps.iter().map(|c| c.variance.sqrt()).sum::<f64>() / comps.len() as f64
    }
}

/// Which closed-form teacher supervises the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    HistoryAware,
    Marginalized,
}

/// A teacher bound to one condition and one history.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub kind: TeacherKind,
    pub world: &'a World,
    pub condition: &'a Condition,
    pub history: &'a HistorySummary,
}

impl ScoreField for Teacher<'_> {
    fn role(&self) -> ScoreRole {
        match self.kind {
            TeacherKind::HistoryAware => ScoreRole::TeacherHistoryAware,
            TeacherKind::Marginalized => ScoreRole::TeacherMarginalized,
        }
    }

    fn score(&self, x: &[f64], level: NoiseLevel) -> Vec<f64> {
        match self.kind {
            TeacherKind::HistoryAware => self.world.history_aware_score(self.condition, self.history, x, level.sigma),
            TeacherKind::Marginalized => self.world.marginalized_score(self.condition, x, level.sigma),
        }
        .expect("teacher evaluated at a point of the world's dimension")
    }
}

/// Ordered events of one rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSchedule {
    /// Condition id per event.
    pub conditions: Vec<usize>,
    /// Chunk index (0-based) at which each event after the first begins.
    pub switches: Vec<usize>,
    pub chunk_len: usize,
    pub video_len: usize,
}

impl EventSchedule {
    pub fn new(conditions: Vec<usize>, switches: Vec<usize>, chunk_len: usize, video_len: usize) -> Result<Self> {
        let s = Self {
            conditions,
            switches,
            chunk_len,
            video_len,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn single(condition: usize, chunk_len: usize, video_len: usize) -> Result<Self> {
        Self::new(vec![condition], vec![], chunk_len, video_len)
    }

    fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.video_len == 0 || self.video_len % self.chunk_len != 0 {
            return Err(Error::Config(format!(
                "video length {} must be a positive multiple of chunk length {}",
                self.video_len, self.chunk_len
            )));
        }
        if self.conditions.len() != self.switches.len() + 1 {
            return Err(Error::Config("one switch index per event boundary required".into()));
        }
        let n = self.num_chunks();
        if self.switches.windows(2).any(|w| w[1] <= w[0]) || self.switches.iter().any(|&t| t == 0 || t >= n) {
            return Err(Error::Config(format!("switch indices must be increasing within 1..{n}")));
        }
        Ok(())
    }

    pub fn num_chunks(&self) -> usize {
        self.video_len / self.chunk_len
    }

    pub fn num_events(&self) -> usize {
        self.conditions.len()
    }

    /// 0-based event index of chunk `k` (0-based).
    pub fn event_of(&self, k: usize) -> usize {
        self.switches.iter().filter(|&&t| t <= k).count()
    }

    pub fn condition_of(&self, k: usize) -> usize {
        self.conditions[self.event_of(k)]
    }

    /// True when chunk `k` opens a new event.
    pub fn is_switch(&self, k: usize) -> bool {
        self.switches.contains(&k)
    }
}

/// Draws conditions and switch points for one rollout. With two events this
/// is an ordered pair without replacement and `τ` uniform on
/// `1..=n_chunks − 1`; with more events, consecutive conditions differ and
/// the switch points are a uniform subset.
pub fn sample_schedule<R: Rng + ?Sized>(
    prompt_set: &[usize],
    events: usize,
    chunk_len: usize,
    video_len: usize,
    rng: &mut R,
) -> Result<EventSchedule> {
    if prompt_set.len() < 2 {
        return Err(Error::Config(format!(
            "prompt set needs at least 2 conditions, has {}",
            prompt_set.len()
        )));
    }
    if events < 1 {
        return Err(Error::Config("at least one event required".into()));
    }
    if chunk_len == 0 || video_len % chunk_len != 0 {
        return Err(Error::Config("video length must be a multiple of chunk length".into()));
    }
    let n = video_len / chunk_len;
    if events > n {
        return Err(Error::Config(format!("{events} events do not fit in {n} chunks")));
    }
    let mut conditions = Vec::with_capacity(events);
    conditions.push(prompt_set[rng.random_range(0..prompt_set.len())]);
    for _ in 1..events {
        let prev = *conditions.last().unwrap();
        let others: Vec<usize> = prompt_set.iter().copied().filter(|&c| c != prev).collect();
        conditions.push(others[rng.random_range(0..others.len())]);
    }
    let mut switches: Vec<usize> = if events == 2 {
        vec![rng.random_range(1..n)]
    } else {
        sample_indices(rng, n - 1, events - 1).into_iter().map(|i| i + 1).collect()
    };
    switches.sort_unstable();
    EventSchedule::new(conditions, switches, chunk_len, video_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub modes: Vec<usize>,
    /// Uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_prior: Option<Vec<f64>>,
}

/// Declarative world description, as carried in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub modes: Vec<ModeSpec>,
    pub conditions: Vec<ConditionSpec>,
}

impl WorldSpec {
    /// `conditions × modes_per_condition` modes evenly spaced on a circle of
    /// `radius` in the plane; condition `c` owns consecutive modes.
    pub fn circle(conditions: usize, modes_per_condition: usize, radius: f64, variance: f64) -> Self {
        let total = conditions * modes_per_condition;
        let modes = (0..total)
            .map(|j| {
                let a = std::f64::consts::TAU * j as f64 / total as f64;
                ModeSpec {
                    mean: vec![radius * a.cos(), radius * a.sin()],
                    variance,
                }
            })
            .collect();
        let conditions = (0..conditions)
            .map(|c| ConditionSpec {
                modes: (c * modes_per_condition..(c + 1) * modes_per_condition).collect(),
                history_prior: None,
            })
            .collect();
        Self { modes, conditions }
    }
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self::circle(3, 2, 4.0, 0.25)
    }
}

/// Builds the global mixture and condition catalog. Global weights are the
/// history priors scaled by a uniform weight over conditions; embeddings are
/// one-hot.
pub fn make_benchmark_world(spec: &WorldSpec) -> Result<World> {
    let n_cond = spec.conditions.len();
    if n_cond == 0 {
        return Err(Error::Config("world spec needs at least one condition".into()));
    }
    let mut weights = vec![0.0; spec.modes.len()];
    let mut claimed = vec![false; spec.modes.len()];
    let mut conditions = Vec::with_capacity(n_cond);
    for (i, cs) in spec.conditions.iter().enumerate() {
        let mut modes = cs.modes.clone();
        modes.sort_unstable();
        if modes.is_empty() {
            return Err(Error::Config(format!("conditions[{i}].modes is empty")));
        }
        for &m in &modes {
            match claimed.get_mut(m) {
                None => return Err(Error::Config(format!("conditions[{i}].modes references missing mode {m}"))),
                Some(true) => return Err(Error::Config(format!("conditions[{i}].modes: mode {m} overlaps another condition"))),
                Some(c) => *c = true,
            }
        }
        let prior = match &cs.history_prior {
            None => vec![1.0 / modes.len() as f64; modes.len()],
            Some(p) => {
                if p.len() != modes.len() {
                    return Err(Error::Config(format!("conditions[{i}].history_prior length mismatch")));
                }
                // prior follows the listed order; re-align after sorting
                let mut paired: Vec<(usize, f64)> = cs.modes.iter().copied().zip(p.iter().copied()).collect();
                paired.sort_by_key(|(m, _)| *m);
                paired.into_iter().map(|(_, w)| w).collect()
            }
        };
        for (&m, &p) in modes.iter().zip(&prior) {
            weights[m] = p / n_cond as f64;
        }
        let mut embedding = vec![0.0; n_cond];
        embedding[i] = 1.0;
        conditions.push(Condition {
            id: i,
            embedding,
            modes,
            history_prior: prior,
        });
    }
    if let Some(m) = claimed.iter().position(|c| !c) {
        return Err(Error::Config(format!("mode {m} belongs to no condition")));
    }
    // absorb rounding so the weights sum to one within tolerance
    let total: f64 = weights.iter().sum();
    let components = spec
        .modes
        .iter()
        .zip(&weights)
        .map(|(m, &w)| MixtureComponent {
            mean: m.mean.clone(),
            variance: m.variance,
            weight: w / total,
        })
        .collect();
    World::new(GaussianMixture::new(components)?, conditions)
}
