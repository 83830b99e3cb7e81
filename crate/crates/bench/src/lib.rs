//! Shared fixtures for the kernel benchmarks.

use deltalab_core::rng;
use deltalab_core::smallgrad::{Activation, Architecture, Mlp};
use deltalab_core::student::{Generated, GeneratorSpec, StudentGenerator};
use deltalab_core::trainer::{critic_context_dim, CriticSpec, FakeCritic, FeatureExtractor, FeatureSpec};
use deltalab_core::world::{make_benchmark_world, World, WorldSpec};
use rand::Rng;

pub fn random_net(input: usize, hidden: &[usize], output: usize, seed: u64) -> Mlp {
    Mlp::init(
        &Architecture::tanh_mlp(input, hidden, output, Activation::Identity),
        &mut rng::stream(seed, "bench-net"),
    )
}

pub fn random_input(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "bench-input");
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Default world with freshly initialized generator, critic and features,
/// plus one generated chunk.
pub struct StepBench {
    pub world: World,
    pub generator: StudentGenerator,
    pub critic: FakeCritic,
    pub phi: FeatureExtractor,
    pub generated: Generated,
}

impl StepBench {
    pub fn new(seed: u64) -> Self {
        let world = make_benchmark_world(&WorldSpec::default()).expect("default world");
        let mut r = rng::stream(seed, "bench-step");
        let generator = StudentGenerator::init(2, 4, world.embedding_dim(), &GeneratorSpec::default(), &mut r);
        let critic = FakeCritic::init(2, critic_context_dim(world.embedding_dim(), 2), &CriticSpec::default(), &mut r);
        let phi = FeatureExtractor::new(8, &FeatureSpec::default());
        let cache = generator.new_cache(3);
        let generated = generator
            .generate_next_chunk(&cache, &world.conditions()[0], 0, &mut r)
            .expect("chunk generation");
        Self { world, generator, critic, phi, generated }
    }
}
