//! Causal chunk-wise generator and its history cache.
//!
//! The generator is a one-step MLP `G_θ(z, c, summary(C_k)) → chunk` where the
//! cache summary is a fixed-width vector `terminal ⧺ running_mean ⧺ embedding`.
//! Recaching swaps the embedding for the new condition's and leaves the
//! geometric part alone.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::smallgrad::{Activation, Architecture, Mlp};
use crate::world::{Condition, EventSchedule, HistorySummary, World};

pub const DEFAULT_WINDOW: usize = 3;

/// `l_chunk` latent states produced in one generation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub states: Vec<Vec<f64>>,
    /// 1-based position in the rollout.
    pub index: usize,
    /// 0-based event index.
    pub event: usize,
    pub condition: usize,
}

impl Chunk {
    pub fn from_flat(flat: &[f64], dim: usize, index: usize, event: usize, condition: usize) -> Self {
        Self {
            states: flat.chunks(dim).map(<[f64]>::to_vec).collect(),
            index,
            event,
            condition,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.states.concat()
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("chunks are nonempty")
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.states[0].len()];
        for s in &self.states {
            for (a, b) in m.iter_mut().zip(s) {
                *a += b;
            }
        }
        let n = self.states.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RetainedChunk {
    index: usize,
    event: usize,
    terminal: Vec<f64>,
    states: Vec<Vec<f64>>,
}

/// Accumulated history `C_k` of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryCache {
    dim: usize,
    window: usize,
    embedding: Vec<f64>,
    retained: Vec<RetainedChunk>,
    terminal: Vec<f64>,
    running_mean: Vec<f64>,
}

impl HistoryCache {
    pub fn new(dim: usize, embedding_dim: usize, window: usize) -> Self {
        Self {
            dim,
            window: window.max(1),
            embedding: vec![0.0; embedding_dim],
            retained: Vec::new(),
            terminal: vec![0.0; dim],
            running_mean: vec![0.0; dim],
        }
    }

    /// Number of chunks appended so far.
    pub fn k(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn terminal(&self) -> &[f64] {
        &self.terminal
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    /// Event index of every retained chunk, in order.
    pub fn event_map(&self) -> Vec<usize> {
        self.retained.iter().map(|c| c.event).collect()
    }

    pub fn summary_dim(&self) -> usize {
        2 * self.dim + self.embedding.len()
    }

    /// `terminal ⧺ running_mean ⧺ embedding`
    pub fn summary_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.summary_dim());
        v.extend_from_slice(&self.terminal);
        v.extend_from_slice(&self.running_mean);
        v.extend_from_slice(&self.embedding);
        v
    }

    pub fn history(&self) -> HistorySummary {
        HistorySummary {
            terminal: self.terminal.clone(),
            running_mean: self.running_mean.clone(),
            chunks: self.retained.len(),
            active_mode: None,
        }
    }

    /// History annotated with the mode `world` considers trajectory-consistent
    /// under `cond`.
    pub fn history_for(&self, world: &World, cond: &Condition) -> HistorySummary {
        let mut h = self.history();
        h.active_mode = Some(world.consistent_mode(cond, &h));
        h
    }

    pub fn append_chunk(&mut self, chunk: &Chunk, cond: &Condition) -> Result<()> {
        if chunk.index != self.k() + 1 {
            return Err(Error::Usage(format!(
                "chunk {} appended to a cache holding {} chunks",
                chunk.index,
                self.k()
            )));
        }
        for s in &chunk.states {
            check_dim("chunk state", self.dim, s.len())?;
        }
        check_dim("condition embedding", self.embedding.len(), cond.embedding.len())?;
        self.retained.push(RetainedChunk {
            index: chunk.index,
            event: chunk.event,
            terminal: chunk.terminal().to_vec(),
            states: chunk.states.clone(),
        });
        self.embedding = cond.embedding.clone();
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        let start = self.retained.len().saturating_sub(self.window);
        let recent = &self.retained[start..];
        let mut mean = vec![0.0; self.dim];
        let mut n = 0usize;
        for c in recent {
            for s in &c.states {
                for (m, v) in mean.iter_mut().zip(s) {
                    *m += v;
                }
                n += 1;
            }
        }
        if n > 0 {
            mean.iter_mut().for_each(|m| *m /= n as f64);
        }
        self.running_mean = mean;
        self.terminal = self
            .retained
            .last()
            .map_or_else(|| vec![0.0; self.dim], |c| c.terminal.clone());
    }

    /// Refreshes the active-condition embedding at an event boundary; the
    /// retained chunks and geometric summary are untouched.
    pub fn recache(&mut self, new_cond: &Condition) {
        self.embedding.clone_from(&new_cond.embedding);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub hidden: Vec<usize>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

/// `G_θ`: seed noise, condition embedding and cache summary in, one chunk out.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGenerator {
    net: Mlp,
    dim: usize,
    chunk_len: usize,
    embedding_dim: usize,
}

/// A freshly generated chunk together with the generator input that produced
/// it, for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub chunk: Chunk,
    pub noise: Vec<f64>,
    pub input: Vec<f64>,
}

impl StudentGenerator {
    pub fn input_dim(dim: usize, chunk_len: usize, embedding_dim: usize) -> usize {
        dim * chunk_len + embedding_dim + (2 * dim + embedding_dim)
    }

    pub fn architecture(dim: usize, chunk_len: usize, embedding_dim: usize, spec: &GeneratorSpec) -> Architecture {
        Architecture::tanh_mlp(
            Self::input_dim(dim, chunk_len, embedding_dim),
            &spec.hidden,
            dim * chunk_len,
            Activation::Identity,
        )
    }

    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        chunk_len: usize,
        embedding_dim: usize,
        spec: &GeneratorSpec,
        rng: &mut R,
    ) -> Self {
        let net = Mlp::init(&Self::architecture(dim, chunk_len, embedding_dim, spec), rng);
        Self {
            net,
            dim,
            chunk_len,
            embedding_dim,
        }
    }

    pub fn from_net(net: Mlp, dim: usize, chunk_len: usize, embedding_dim: usize) -> Result<Self> {
        check_dim("generator input", Self::input_dim(dim, chunk_len, embedding_dim), net.input_dim())?;
        check_dim("generator output", dim * chunk_len, net.output_dim())?;
        Ok(Self {
            net,
            dim,
            chunk_len,
            embedding_dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn noise_dim(&self) -> usize {
        self.dim * self.chunk_len
    }

    pub fn new_cache(&self, window: usize) -> HistoryCache {
        HistoryCache::new(self.dim, self.embedding_dim, window)
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.noise_dim()).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn assemble_input(&self, noise: &[f64], cond: &Condition, cache: &HistoryCache) -> Result<Vec<f64>> {
        check_dim("generator noise", self.noise_dim(), noise.len())?;
        check_dim("condition embedding", self.embedding_dim, cond.embedding.len())?;
        check_dim("cache summary", 2 * self.dim + self.embedding_dim, cache.summary_dim())?;
        let mut input = Vec::with_capacity(self.net.input_dim());
        input.extend_from_slice(noise);
        input.extend_from_slice(&cond.embedding);
        input.extend(cache.summary_vector());
        Ok(input)
    }

    /// Deterministic generation from explicit noise.
    pub fn generate(&self, noise: &[f64], cond: &Condition, cache: &HistoryCache, event: usize) -> Result<Generated> {
        let input = self.assemble_input(noise, cond, cache)?;
        let flat = self.net.forward(&input)?;
        Ok(Generated {
            chunk: Chunk::from_flat(&flat, self.dim, cache.k() + 1, event, cond.id),
            noise: noise.to_vec(),
            input,
        })
    }

    /// Samples `z ~ N(0, I)` and generates the next chunk; the cache is not
    /// updated.
    pub fn generate_next_chunk<R: Rng + ?Sized>(
        &self,
        cache: &HistoryCache,
        cond: &Condition,
        event: usize,
        rng: &mut R,
    ) -> Result<Generated> {
        let noise = self.sample_noise(rng);
        self.generate(&noise, cond, cache, event)
    }
}

/// Full generation path of one rollout. `caches[k]` is the cache chunk `k`
/// was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub chunks: Vec<Chunk>,
    pub caches: Vec<HistoryCache>,
    pub noises: Vec<Vec<f64>>,
}

/// Runs the schedule without training: switch conditions at each boundary,
/// recache there, append every chunk.
pub fn rollout<R: Rng + ?Sized>(
    gen: &StudentGenerator,
    world: &World,
    schedule: &EventSchedule,
    window: usize,
    rng: &mut R,
) -> Result<Rollout> {
    check_dim("schedule chunk length", gen.chunk_len(), schedule.chunk_len)?;
    let mut cache = gen.new_cache(window);
    let n = schedule.num_chunks();
    let mut out = Rollout {
        chunks: Vec::with_capacity(n),
        caches: Vec::with_capacity(n),
        noises: Vec::with_capacity(n),
    };
    for k in 0..n {
        let cond = world.condition(schedule.condition_of(k))?;
        if schedule.is_switch(k) {
            cache.recache(cond);
        }
        let g = gen.generate_next_chunk(&cache, cond, schedule.event_of(k), rng)?;
        out.caches.push(cache.clone());
        cache.append_chunk(&g.chunk, cond)?;
        out.chunks.push(g.chunk);
        out.noises.push(g.noise);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::smallgrad::finite_difference_check;
    use rand::Rng;
    use crate::world::{make_benchmark_world, WorldSpec};

    fn setup() -> (World, StudentGenerator) {
        let world = make_benchmark_world(&WorldSpec::default()).unwrap();
        let gen = StudentGenerator::init(2, 4, 3, &GeneratorSpec { hidden: vec![16] }, &mut rng::stream(1, "gen"));
        (world, gen)
    }

    fn chunk(index: usize, states: Vec<Vec<f64>>) -> Chunk {
        Chunk { states, index, event: 0, condition: 0 }
    }

    #[test]
    fn zero_weight_generator_emits_bias() {
        let (world, mut gen) = setup();
        for l in gen.net_mut().layers_mut() {
            l.weights.as_mut_slice().fill(0.0);
        }
        let bias = gen.net().layers().last().unwrap().bias.clone();
        let cache = gen.new_cache(3);
        let c = &world.conditions()[0];
        let a = gen.generate_next_chunk(&cache, c, 0, &mut rng::stream(1, "z")).unwrap();
        let b = gen.generate_next_chunk(&cache, c, 0, &mut rng::stream(2, "z")).unwrap();
        assert_ne!(a.noise, b.noise);
        assert_eq!(a.chunk.flat(), bias);
        assert_eq!(b.chunk.flat(), bias);
    }

    #[test]
    fn generation_is_seeded() {
        let (world, gen) = setup();
        let cache = gen.new_cache(3);
        let c = &world.conditions()[1];
        let a = gen.generate_next_chunk(&cache, c, 0, &mut rng::stream(5, "z")).unwrap();
        let b = gen.generate_next_chunk(&cache, c, 0, &mut rng::stream(5, "z")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.chunk.states.len(), 4);
        assert_eq!(a.chunk.index, 1);
    }

    #[test]
    fn chunk_gradient_matches_finite_differences() {
        let (world, gen) = setup();
        let mut cache = gen.new_cache(3);
        let c = &world.conditions()[2];
        let first = gen.generate_next_chunk(&cache, c, 0, &mut rng::stream(2, "z")).unwrap();
        cache.append_chunk(&first.chunk, c).unwrap();
        let g = gen.generate_next_chunk(&cache, c, 0, &mut rng::stream(3, "z")).unwrap();
        let err = finite_difference_check(gen.net(), &g.input, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn first_append_sets_running_mean_to_chunk_mean() {
        let (world, gen) = setup();
        let mut cache = gen.new_cache(3);
        let ch = chunk(1, vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0], vec![-1.0, 2.0]]);
        cache.append_chunk(&ch, &world.conditions()[0]).unwrap();
        assert_eq!(cache.running_mean(), ch.mean().as_slice());
        assert_eq!(cache.terminal(), &[-1.0, 2.0]);
        assert_eq!(cache.k(), 1);
    }

    #[test]
    fn running_mean_covers_last_window_only() {
        let (world, gen) = setup();
        let mut cache = gen.new_cache(3);
        let c = &world.conditions()[0];
        for i in 1..=4 {
            let v = i as f64;
            cache.append_chunk(&chunk(i, vec![vec![v, -v]; 4]), c).unwrap();
        }
        assert_eq!(cache.running_mean(), &[3.0, -3.0]);
    }

    #[test]
    fn summary_matches_recomputation_from_raw_chunks() {
        let (world, gen) = setup();
        let mut cache = gen.new_cache(3);
        let mut r = rng::stream(6, "raw");
        let mut raw: Vec<Chunk> = Vec::new();
        for i in 1..=7 {
            let c = &world.conditions()[i % 3];
            let ch = chunk(i, (0..4).map(|_| vec![r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)]).collect());
            cache.append_chunk(&ch, c).unwrap();
            raw.push(ch);
            // oracle: flat average over the states of the last three chunks
            let recent = &raw[raw.len().saturating_sub(3)..];
            let states: Vec<&Vec<f64>> = recent.iter().flat_map(|c| c.states.iter()).collect();
            let mut mean = [0.0; 2];
            for s in &states {
                mean[0] += s[0] / states.len() as f64;
                mean[1] += s[1] / states.len() as f64;
            }
            let mut expected = raw.last().unwrap().terminal().to_vec();
            expected.extend_from_slice(&mean);
            expected.extend_from_slice(&c.embedding);
            for (a, b) in cache.summary_vector().iter().zip(&expected) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn out_of_order_append_is_rejected() {
        let (world, gen) = setup();
        let mut cache = gen.new_cache(3);
        let err = cache.append_chunk(&chunk(2, vec![vec![0.0, 0.0]; 4]), &world.conditions()[0]);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn recache_swaps_only_embedding() {
        let (world, gen) = setup();
        let mut cache = gen.new_cache(3);
        let c0 = &world.conditions()[0];
        let c1 = &world.conditions()[1];
        cache.append_chunk(&chunk(1, vec![vec![1.0, 1.0]; 4]), c0).unwrap();
        let before = cache.clone();
        cache.recache(c0);
        assert_eq!(cache, before);
        cache.recache(c1);
        assert_eq!(cache.terminal(), before.terminal());
        assert_eq!(cache.running_mean(), before.running_mean());
        assert_eq!(cache.k(), before.k());
        assert_eq!(cache.embedding(), c1.embedding.as_slice());
    }

    #[test]
    fn recache_changes_generation_iff_embedding_changes() {
        let (world, gen) = setup();
        let c0 = &world.conditions()[0];
        let c1 = &world.conditions()[1];
        let mut cache = gen.new_cache(3);
        cache.append_chunk(&chunk(1, vec![vec![2.0, 0.5]; 4]), c0).unwrap();
        let z = gen.sample_noise(&mut rng::stream(9, "z"));
        let plain = gen.generate(&z, c1, &cache, 1).unwrap();
        let mut same = cache.clone();
        same.recache(c0);
        assert_eq!(gen.generate(&z, c1, &same, 1).unwrap(), plain);
        let mut switched = cache.clone();
        switched.recache(c1);
        assert_ne!(gen.generate(&z, c1, &switched, 1).unwrap().chunk, plain.chunk);
    }

    #[test]
    fn single_chunk_rollout() {
        let (world, gen) = setup();
        let s = EventSchedule::single(0, 4, 4).unwrap();
        let r = rollout(&gen, &world, &s, 3, &mut rng::stream(0, "r")).unwrap();
        assert_eq!(r.chunks.len(), 1);
    }

    #[test]
    fn rollout_event_map_and_determinism() {
        let (world, gen) = setup();
        let s = EventSchedule::new(vec![0, 2], vec![3], 4, 24).unwrap();
        let a = rollout(&gen, &world, &s, 3, &mut rng::stream(4, "r")).unwrap();
        let b = rollout(&gen, &world, &s, 3, &mut rng::stream(4, "r")).unwrap();
        assert_eq!(a, b);
        let events: Vec<usize> = a.chunks.iter().map(|c| c.event + 1).collect();
        assert_eq!(events, vec![1, 1, 1, 2, 2, 2]);
        assert_eq!(a.caches[3].embedding(), world.conditions()[2].embedding.as_slice());
        let mut next = a.caches[2].clone();
        next.append_chunk(&a.chunks[2], &world.conditions()[0]).unwrap();
        assert_eq!(a.caches[3].running_mean(), next.running_mean());
    }

    #[test]
    fn earlier_chunks_do_not_see_later_ones() {
        let (world, gen) = setup();
        let s = EventSchedule::new(vec![1, 0], vec![2], 4, 24).unwrap();
        let r = rollout(&gen, &world, &s, 3, &mut rng::stream(8, "r")).unwrap();
        let mut mutated = r.chunks.clone();
        for v in mutated[4].states.iter_mut().flatten() {
            *v += 100.0;
        }
        for k in 0..4 {
            let c = world.condition(s.condition_of(k)).unwrap();
            let again = gen.generate(&r.noises[k], c, &r.caches[k], s.event_of(k)).unwrap();
            assert_eq!(again.chunk, r.chunks[k]);
            assert_eq!(again.chunk, mutated[k]);
        }
    }
}
