//! Latent-trajectory analysis: deterministic PCA, per-event aggregation and
//! transition metrics, and a rule-based failure label.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::smallgrad::{dot, norm, sub};
use crate::stats;
use crate::student::{Chunk, HistoryCache, DEFAULT_WINDOW};
use crate::trainer::EvalChunk;
use crate::world::World;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    /// Global state index.
    pub step: usize,
    pub rollout: usize,
    /// 1-based chunk index within the rollout.
    pub chunk_k: usize,
    /// 0-based event index within the rollout.
    pub event_e: usize,
    pub condition: usize,
    pub z: Vec<f64>,
}

/// Ordered latent states of one or more rollouts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    rows: Vec<TrajectoryRow>,
}

impl TrajectoryRecord {
    pub fn new(rows: Vec<TrajectoryRow>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.z.len());
        for (i, r) in rows.iter().enumerate() {
            check_dim("trajectory state", dim, r.z.len())?;
            if r.chunk_k == 0 {
                return Err(Error::Structure(format!("row {i}: chunk indices start at 1")));
            }
            if i == 0 {
                continue;
            }
            let p = &rows[i - 1];
            if r.step <= p.step {
                return Err(Error::Structure(format!("row {i}: step {} after {}", r.step, p.step)));
            }
            if r.rollout == p.rollout && (r.event_e < p.event_e || r.chunk_k < p.chunk_k) {
                return Err(Error::Structure(format!(
                    "row {i}: chunk/event order goes backwards within rollout {}",
                    r.rollout
                )));
            }
            if r.rollout < p.rollout {
                return Err(Error::Structure(format!("row {i}: rollout index decreases")));
            }
        }
        Ok(Self { rows })
    }

    /// One row per state of every evaluated chunk, in order.
    pub fn from_eval(chunks: &[EvalChunk]) -> Result<Self> {
        let mut rows = Vec::new();
        for c in chunks {
            for z in &c.states {
                rows.push(TrajectoryRow {
                    step: rows.len(),
                    rollout: c.rollout,
                    chunk_k: c.chunk_k,
                    event_e: c.event_e,
                    condition: c.condition,
                    z: z.clone(),
                });
            }
        }
        Self::new(rows)
    }

    pub fn rows(&self) -> &[TrajectoryRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.z.len())
    }

    /// Chunks in order, regrouped from consecutive rows sharing
    /// `(rollout, chunk_k)`.
    pub fn chunks(&self) -> Vec<Chunk> {
        let mut out: Vec<Chunk> = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for r in &self.rows {
            if last == Some((r.rollout, r.chunk_k)) {
                out.last_mut().expect("chunk opened").states.push(r.z.clone());
            } else {
                out.push(Chunk {
                    states: vec![r.z.clone()],
                    index: r.chunk_k,
                    event: r.event_e,
                    condition: r.condition,
                });
                last = Some((r.rollout, r.chunk_k));
            }
        }
        out
    }

    fn rollout_of_chunks(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut last = None;
        for r in &self.rows {
            if last != Some((r.rollout, r.chunk_k)) {
                out.push(r.rollout);
                last = Some((r.rollout, r.chunk_k));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("step,rollout,chunk_k,event_e,condition");
        for i in 0..d {
            let _ = write!(out, ",z{i}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{}", r.step, r.rollout, r.chunk_k, r.event_e, r.condition);
            for v in &r.z {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty trajectory file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 6 || cols[..5] != ["step", "rollout", "chunk_k", "event_e", "condition"] {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header {header:?}"),
            });
        }
        let d = cols.len() - 5;
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 + d {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} fields, found {}", 5 + d, fields.len()),
                });
            }
            let int = |s: &str| {
                s.parse::<usize>().map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("{s:?}: {e}"),
                })
            };
            let z = fields[5..]
                .iter()
                .map(|s| {
                    s.parse::<f64>().map_err(|e| Error::Parse {
                        line: line_no,
                        message: format!("{s:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(TrajectoryRow {
                step: int(fields[0])?,
                rollout: int(fields[1])?,
                chunk_k: int(fields[2])?,
                event_e: int(fields[3])?,
                condition: int(fields[4])?,
                z,
            });
        }
        Self::new(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Top two principal directions, unit length and mutually orthogonal.
    pub directions: [Vec<f64>; 2],
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: [f64; 2],
    pub points: Vec<[f64; 2]>,
}

impl PcaProjection {
    pub fn project(&self, z: &[f64]) -> [f64; 2] {
        let c = sub(z, &self.mean);
        [dot(&self.directions[0], &c), dot(&self.directions[1], &c)]
    }

    pub fn reconstruct(&self, p: [f64; 2]) -> Vec<f64> {
        self.mean
            .iter()
            .enumerate()
            .map(|(i, m)| m + p[0] * self.directions[0][i] + p[1] * self.directions[1][i])
            .collect()
    }

    /// `pc1,pc2,chunk_k,event_e` per state.
    pub fn to_csv(&self, traj: &TrajectoryRecord) -> String {
        let mut out = String::from("pc1,pc2,chunk_k,event_e\n");
        for (p, r) in self.points.iter().zip(traj.rows()) {
            let _ = writeln!(out, "{:?},{:?},{},{}", p[0], p[1], r.chunk_k, r.event_e);
        }
        out
    }
}

/// Makes the largest-magnitude component positive; the earliest index wins
/// ties.
fn fix_sign(v: &mut [f64]) {
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Exact PCA of the empirical covariance (1/n normalization).
pub fn fit_pca(traj: &TrajectoryRecord) -> Result<PcaProjection> {
    let n = traj.len();
    let d = traj.dim();
    if n < 3 {
        return Err(Error::Degenerate(format!("PCA needs at least 3 states, got {n}")));
    }
    if d < 2 {
        return Err(Error::Degenerate(format!("PCA to two components needs dimension ≥ 2, got {d}")));
    }
    let mut mean = vec![0.0; d];
    for r in traj.rows() {
        for (m, v) in mean.iter_mut().zip(&r.z) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in traj.rows() {
        let c = sub(&r.z, &mean);
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let trace = cov.trace();
    if trace <= 1e-20 * dot(&mean, &mean).max(1.0) {
        return Err(Error::Degenerate("trajectory has zero variance".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let direction = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let len = norm(&v);
        v.iter_mut().for_each(|x| *x /= len);
        fix_sign(&mut v);
        v
    };
    let directions = [direction(0), direction(1)];
    let total: f64 = eigenvalues.iter().sum();
    let mut proj = PcaProjection {
        mean,
        directions,
        explained_variance_ratio: [eigenvalues[0] / total, eigenvalues[1] / total],
        eigenvalues,
        points: Vec::with_capacity(n),
    };
    proj.points = traj.rows().iter().map(|r| proj.project(&r.z)).collect();
    Ok(proj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStats {
    pub rollout: usize,
    pub event_e: usize,
    pub condition: usize,
    pub centroid: Vec<f64>,
    /// Mean distance of the event's states to its centroid.
    pub scatter: f64,
    pub states: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub events: Vec<EventStats>,
    /// Mean within-event scatter.
    pub scatter: f64,
    /// Mean distance between consecutive event centroids of a rollout;
    /// absent without an event boundary.
    pub displacement: Option<f64>,
    /// Largest consecutive step over the median step.
    pub smoothness: Option<f64>,
    /// Mean cosine between consecutive step directions, ignoring event
    /// boundaries.
    pub direction_autocorrelation: Option<f64>,
    /// Fraction of chunks ending nearest to the history-consistent mode.
    pub accuracy: f64,
    pub chunks: usize,
    /// World scales the failure thresholds are expressed in.
    pub mode_spacing: f64,
    pub mode_std: f64,
}

/// Per-rollout sequences of consecutive step vectors.
fn steps_by_rollout(traj: &TrajectoryRecord) -> Vec<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
    for (i, r) in traj.rows().iter().enumerate() {
        if i == 0 || traj.rows()[i - 1].rollout != r.rollout {
            out.push(Vec::new());
            continue;
        }
        out.last_mut()
            .expect("rollout opened")
            .push(sub(&r.z, &traj.rows()[i - 1].z));
    }
    out
}

pub fn trajectory_metrics(traj: &TrajectoryRecord, world: &World, window: usize) -> Result<TrajectoryMetrics> {
    if traj.is_empty() {
        return Err(Error::Degenerate("empty trajectory".into()));
    }
    check_dim("trajectory state", world.dim(), traj.dim())?;

    let mut groups: BTreeMap<(usize, usize), (usize, Vec<&[f64]>)> = BTreeMap::new();
    for r in traj.rows() {
        groups
            .entry((r.rollout, r.event_e))
            .or_insert_with(|| (r.condition, Vec::new()))
            .1
            .push(&r.z);
    }
    let events: Vec<EventStats> = groups
        .into_iter()
        .map(|((rollout, event_e), (condition, zs))| {
            let mut centroid = vec![0.0; traj.dim()];
            for z in &zs {
                for (c, v) in centroid.iter_mut().zip(z.iter()) {
                    *c += v;
                }
            }
            centroid.iter_mut().for_each(|c| *c /= zs.len() as f64);
            let scatter = zs.iter().map(|z| norm(&sub(z, &centroid))).sum::<f64>() / zs.len() as f64;
            EventStats {
                rollout,
                event_e,
                condition,
                centroid,
                scatter,
                states: zs.len(),
            }
        })
        .collect();
    let scatter = events.iter().map(|e| e.scatter).sum::<f64>() / events.len() as f64;
    let jumps: Vec<f64> = events
        .windows(2)
        .filter(|w| w[0].rollout == w[1].rollout)
        .map(|w| norm(&sub(&w[1].centroid, &w[0].centroid)))
        .collect();
    let displacement = stats::mean(&jumps);

    let steps = steps_by_rollout(traj);
    let lengths: Vec<f64> = steps.iter().flatten().map(|s| norm(s)).collect();
    let smoothness = stats::median(&lengths).map(|med| {
        let max = lengths.iter().copied().fold(0.0, f64::max);
        if med > 0.0 {
            max / med
        } else if max == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    });
    let mut cosines = Vec::new();
    for seq in &steps {
        for w in seq.windows(2) {
            let (a, b) = (norm(&w[0]), norm(&w[1]));
            if a > 0.0 && b > 0.0 {
                cosines.push(dot(&w[0], &w[1]) / (a * b));
            }
        }
    }
    let direction_autocorrelation = stats::mean(&cosines);

    let chunks = traj.chunks();
    let rollouts = traj.rollout_of_chunks();
    let mut correct = 0usize;
    let mut cache: Option<(usize, HistoryCache)> = None;
    for (chunk, &rollout) in chunks.iter().zip(&rollouts) {
        let cond = world.condition(chunk.condition)?;
        if cache.as_ref().is_none_or(|(r, _)| *r != rollout) {
            cache = Some((rollout, HistoryCache::new(world.dim(), world.embedding_dim(), window)));
        }
        let (_, c) = cache.as_mut().expect("cache opened");
        let history = c.history();
        if world.nearest_mode(&cond.modes, chunk.terminal()) == world.consistent_mode(cond, &history) {
            correct += 1;
        }
        let mut renumbered = chunk.clone();
        renumbered.index = c.k() + 1;
        c.append_chunk(&renumbered, cond)?;
    }

    Ok(TrajectoryMetrics {
        scatter,
        displacement,
        smoothness,
        direction_autocorrelation,
        accuracy: correct as f64 / chunks.len() as f64,
        chunks: chunks.len(),
        mode_spacing: world.median_mode_spacing(),
        mode_std: world.mode_std(),
        events,
    })
}

pub fn trajectory_metrics_default(traj: &TrajectoryRecord, world: &World) -> Result<TrajectoryMetrics> {
    trajectory_metrics(traj, world, DEFAULT_WINDOW)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureLabel {
    Healthy,
    UnderReactive,
    UnstructuredDrift,
    ModeSeeking,
}

impl FailureLabel {
    pub fn name(self) -> &'static str {
        match self {
            Self::Healthy => "healthy",
            Self::UnderReactive => "under_reactive",
            Self::UnstructuredDrift => "unstructured_drift",
            Self::ModeSeeking => "mode_seeking",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureThresholds {
    /// Under-reactive below this fraction of the median mode spacing.
    pub displacement_fraction: f64,
    /// Drift above this multiple of the mode standard deviation...
    pub scatter_factor: f64,
    /// ...together with accuracy below this.
    pub drift_accuracy: f64,
    /// Mode-seeking above this step-direction autocorrelation.
    pub autocorrelation: f64,
}

impl Default for FailureThresholds {
    fn default() -> Self {
        Self {
            displacement_fraction: 0.25,
            scatter_factor: 1.5,
            drift_accuracy: 0.5,
            autocorrelation: 0.8,
        }
    }
}

/// Rules are tried in order: under-reactive, unstructured drift,
/// mode-seeking; otherwise healthy.
pub fn classify_failure(m: &TrajectoryMetrics, t: &FailureThresholds) -> FailureLabel {
    if m.displacement.is_some_and(|d| d < t.displacement_fraction * m.mode_spacing) {
        FailureLabel::UnderReactive
    } else if m.scatter > t.scatter_factor * m.mode_std && m.accuracy < t.drift_accuracy {
        FailureLabel::UnstructuredDrift
    } else if m.direction_autocorrelation.is_some_and(|a| a > t.autocorrelation) {
        FailureLabel::ModeSeeking
    } else {
        FailureLabel::Healthy
    }
}

/// Three hand-built trajectories, one per failure label, on `world`.
pub mod fixtures {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::rng;

    const CHUNK_LEN: usize = 4;
    const CHUNKS_PER_EVENT: usize = 3;

    fn record(events: &[(usize, Vec<Vec<f64>>)]) -> TrajectoryRecord {
        let mut rows = Vec::new();
        for (e, (condition, states)) in events.iter().enumerate() {
            for (i, z) in states.iter().enumerate() {
                rows.push(TrajectoryRow {
                    step: rows.len(),
                    rollout: 0,
                    chunk_k: e * CHUNKS_PER_EVENT + i / CHUNK_LEN + 1,
                    event_e: e,
                    condition: *condition,
                    z: z.clone(),
                });
            }
        }
        TrajectoryRecord::new(rows).expect("fixture rows are ordered")
    }

    fn jitter<R: Rng>(center: &[f64], scale: f64, rng: &mut R) -> Vec<f64> {
        center
            .iter()
            .map(|c| c + scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// The trajectory stays put across a condition change.
    pub fn under_reactive(world: &World) -> TrajectoryRecord {
        let mut r = rng::stream(0, "fixture-under-reactive");
        let a = &world.conditions()[0];
        let b = &world.conditions()[1];
        let anchor = world.mode_mean(a.modes[0]).to_vec();
        let n = CHUNK_LEN * CHUNKS_PER_EVENT;
        let states = |r: &mut rng::Rng| (0..n).map(|_| jitter(&anchor, 0.05, r)).collect::<Vec<_>>();
        let first = states(&mut r);
        let second = states(&mut r);
        record(&[(a.id, first), (b.id, second)])
    }

    /// Every chunk lands far from the mode its history favours.
    pub fn unstructured_drift(world: &World) -> TrajectoryRecord {
        let mut r = rng::stream(0, "fixture-drift");
        let conds = [&world.conditions()[0], &world.conditions()[1]];
        let mut cache = HistoryCache::new(world.dim(), world.embedding_dim(), DEFAULT_WINDOW);
        let mut events = Vec::new();
        for (e, cond) in conds.iter().enumerate() {
            let mut states = Vec::new();
            for i in 0..CHUNKS_PER_EVENT {
                let favoured = world.consistent_mode(cond, &cache.history());
                let other = *cond.modes.iter().find(|&&m| m != favoured).expect("two modes");
                let target = world.mode_mean(other).to_vec();
                let mut chunk_states: Vec<Vec<f64>> = (0..CHUNK_LEN).map(|_| jitter(&target, 1.5, &mut r)).collect();
                chunk_states[CHUNK_LEN - 1] = target.clone();
                let chunk = Chunk {
                    states: chunk_states.clone(),
                    index: e * CHUNKS_PER_EVENT + i + 1,
                    event: e,
                    condition: cond.id,
                };
                cache.append_chunk(&chunk, cond).expect("fixture chunk in order");
                states.extend(chunk_states);
            }
            events.push((cond.id, states));
        }
        record(&events)
    }

    /// A small constant step in one direction, regardless of events.
    pub fn mode_seeking(world: &World) -> TrajectoryRecord {
        let a = &world.conditions()[0];
        let b = &world.conditions()[1];
        let start = world.mode_mean(a.modes[0]).to_vec();
        let dir: Vec<f64> = (0..world.dim()).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        let step = 0.2;
        let n = CHUNK_LEN * CHUNKS_PER_EVENT;
        let line = |offset: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    start
                        .iter()
                        .zip(&dir)
                        .map(|(s, d)| s + step * (offset + i) as f64 * d)
                        .collect()
                })
                .collect()
        };
        record(&[(a.id, line(0)), (b.id, line(n))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{make_benchmark_world, WorldSpec};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn row(step: usize, chunk_k: usize, event_e: usize, condition: usize, z: Vec<f64>) -> TrajectoryRow {
        TrajectoryRow {
            step,
            rollout: 0,
            chunk_k,
            event_e,
            condition,
            z,
        }
    }

    fn world() -> World {
        make_benchmark_world(&WorldSpec::default()).unwrap()
    }

    #[test]
    fn rank_one_direction_recovered() {
        let rows = (0..10)
            .map(|i| {
                let t = i as f64 - 4.5;
                row(i, 1 + i / 4, 0, 0, vec![t, t])
            })
            .collect();
        let p = fit_pca(&TrajectoryRecord::new(rows).unwrap()).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.directions[0][0] - s).abs() < 1e-12 && (p.directions[0][1] - s).abs() < 1e-12);
        assert!(p.eigenvalues[1].abs() < 1e-12);
        assert!(dot(&p.directions[0], &p.directions[1]).abs() < 1e-10);
    }

    #[test]
    fn isotropic_cloud_splits_variance() {
        let mut r = crate::rng::stream(0, "iso");
        let rows = (0..20000)
            .map(|i| row(i, 1 + i / 4, 0, 0, vec![r.sample(StandardNormal), r.sample(StandardNormal)]))
            .collect();
        let p = fit_pca(&TrajectoryRecord::new(rows).unwrap()).unwrap();
        assert!((p.explained_variance_ratio[0] - 0.5).abs() < 0.02, "{:?}", p.explained_variance_ratio);
    }

    #[test]
    fn refit_is_bitwise_identical_and_residual_orthogonal() {
        let mut r = crate::rng::stream(1, "pca");
        let rows: Vec<_> = (0..50)
            .map(|i| row(i, 1 + i / 4, 0, 0, (0..5).map(|_| r.random_range(-3.0..3.0)).collect()))
            .collect();
        let t = TrajectoryRecord::new(rows).unwrap();
        let a = fit_pca(&t).unwrap();
        assert_eq!(a, fit_pca(&t.clone()).unwrap());
        for (p, row) in a.points.iter().zip(t.rows()) {
            let resid = sub(&row.z, &a.reconstruct(*p));
            for w in &a.directions {
                assert!(dot(&resid, w).abs() < 1e-10);
            }
        }
        for w in &a.directions {
            assert!((norm(w) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let rows = (0..5).map(|i| row(i, 1, 0, 0, vec![1.0, 2.0])).collect();
        assert!(matches!(fit_pca(&TrajectoryRecord::new(rows).unwrap()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn constant_events_have_zero_scatter() {
        let w = world();
        let a = vec![1.0, 1.0];
        let b = vec![4.0, 5.0];
        let mut rows = Vec::new();
        for i in 0..8 {
            rows.push(row(i, 1 + i / 4, 0, 0, a.clone()));
        }
        for i in 8..16 {
            rows.push(row(i, 1 + i / 4, 1, 1, b.clone()));
        }
        let m = trajectory_metrics_default(&TrajectoryRecord::new(rows).unwrap(), &w).unwrap();
        assert_eq!(m.scatter, 0.0);
        assert_eq!(m.displacement, Some(5.0));
    }

    #[test]
    fn single_event_has_no_displacement() {
        let rows = (0..8).map(|i| row(i, 1 + i / 4, 0, 0, vec![i as f64, 0.0])).collect();
        let m = trajectory_metrics_default(&TrajectoryRecord::new(rows).unwrap(), &world()).unwrap();
        assert_eq!(m.displacement, None);
    }

    #[test]
    fn smoothness_matches_loop() {
        let mut r = crate::rng::stream(2, "walk");
        let mut z = vec![0.0, 0.0];
        let mut rows = Vec::new();
        for i in 0..40 {
            rows.push(row(i, 1 + i / 4, 0, 0, z.clone()));
            z = z.iter().map(|v| v + r.sample::<f64, _>(StandardNormal)).collect();
        }
        let t = TrajectoryRecord::new(rows).unwrap();
        let m = trajectory_metrics_default(&t, &world()).unwrap();
        let mut steps = Vec::new();
        for i in 1..t.len() {
            let a = &t.rows()[i - 1].z;
            let b = &t.rows()[i].z;
            steps.push(((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt());
        }
        let mut sorted = steps.clone();
        sorted.sort_by(f64::total_cmp);
        let med = sorted[19];
        let max = sorted[38];
        assert!((m.smoothness.unwrap() - max / med).abs() < 1e-12);
    }

    #[test]
    fn terminals_on_consistent_modes_score_full_accuracy() {
        let w = world();
        let cond = &w.conditions()[0];
        let mut cache = HistoryCache::new(w.dim(), w.embedding_dim(), DEFAULT_WINDOW);
        let mut rows = Vec::new();
        for k in 1..=4 {
            let mode = w.consistent_mode(cond, &cache.history());
            let z = w.mode_mean(mode).to_vec();
            let states = vec![z.clone(); 2];
            for s in &states {
                rows.push(row(rows.len(), k, 0, cond.id, s.clone()));
            }
            cache
                .append_chunk(&Chunk { states, index: k, event: 0, condition: cond.id }, cond)
                .unwrap();
        }
        let m = trajectory_metrics_default(&TrajectoryRecord::new(rows).unwrap(), &w).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn rules_on_constructed_metrics() {
        let base = TrajectoryMetrics {
            events: vec![],
            scatter: 0.1,
            displacement: Some(0.0),
            smoothness: Some(1.0),
            direction_autocorrelation: Some(0.0),
            accuracy: 1.0,
            chunks: 6,
            mode_spacing: 4.0,
            mode_std: 0.5,
        };
        let t = FailureThresholds::default();
        assert_eq!(classify_failure(&base, &t), FailureLabel::UnderReactive);
        let healthy = TrajectoryMetrics { displacement: Some(2.0), ..base.clone() };
        assert_eq!(classify_failure(&healthy, &t), FailureLabel::Healthy);
        let drift = TrajectoryMetrics { scatter: 2.0, accuracy: 0.2, ..healthy.clone() };
        assert_eq!(classify_failure(&drift, &t), FailureLabel::UnstructuredDrift);
        let seeking = TrajectoryMetrics { direction_autocorrelation: Some(0.95), ..healthy };
        assert_eq!(classify_failure(&seeking, &t), FailureLabel::ModeSeeking);
    }

    #[test]
    fn fixtures_get_their_labels() {
        let w = world();
        let t = FailureThresholds::default();
        let label = |r: &TrajectoryRecord| classify_failure(&trajectory_metrics_default(r, &w).unwrap(), &t);
        assert_eq!(label(&fixtures::under_reactive(&w)), FailureLabel::UnderReactive);
        assert_eq!(label(&fixtures::unstructured_drift(&w)), FailureLabel::UnstructuredDrift);
        assert_eq!(label(&fixtures::mode_seeking(&w)), FailureLabel::ModeSeeking);
    }

    #[test]
    fn csv_round_trip() {
        let rows = (0..6).map(|i| row(i, 1 + i / 3, 0, 2, vec![0.1 * i as f64, -1.0 / 3.0])).collect();
        let t = TrajectoryRecord::new(rows).unwrap();
        assert_eq!(TrajectoryRecord::from_csv(&t.to_csv()).unwrap(), t);
        assert!(matches!(
            TrajectoryRecord::from_csv("step,rollout,chunk_k,event_e,condition,z0\n0,0,1,0,0,abc\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn out_of_order_rows_rejected() {
        let rows = vec![row(1, 1, 0, 0, vec![0.0]), row(0, 1, 0, 0, vec![0.0])];
        assert!(matches!(TrajectoryRecord::new(rows), Err(Error::Structure(_))));
    }
}
