//! Distribution-matching gradient in score-difference form.
//!
//! For one generated chunk a single noise level is drawn, every state is
//! perturbed with its own `ε`, and the cotangent on the generator output is
//! `s_fake(x_t) − s*(x_t)` with both scores held constant. Descending along it
//! moves the student's samples toward the teacher's distribution.

use rand::Rng;

use crate::diffusion::{perturb_at, tweedie_denoise, NoiseLevel, NoiseSchedule, ScoreField};
use crate::error::{check_dim, Result};
use crate::smallgrad::GradientTape;
use crate::student::{Chunk, Generated, StudentGenerator};

#[derive(Debug, Clone, PartialEq)]
pub struct DmdOutput {
    /// Teacher's Tweedie estimate of the clean chunk.
    pub x_hat_real: Chunk,
    pub level: NoiseLevel,
    /// Noisy states the scores were evaluated at, flattened.
    pub noisy: Vec<f64>,
    /// `s_fake − s*` per state, flattened like the chunk.
    pub output_grad: Vec<f64>,
    /// `½ Σ ‖s* − s_fake‖²`, the value of the stop-gradient surrogate.
    pub loss: f64,
}

/// Scores at a fixed noisy chunk; the random part of the DMD step is kept
/// separate so the same draw can be replayed against different fields.
pub fn score_difference(
    teacher: &dyn ScoreField,
    critic: &dyn ScoreField,
    chunk: &Chunk,
    noisy_states: &[Vec<f64>],
    level: NoiseLevel,
) -> Result<DmdOutput> {
    check_dim("noisy chunk", chunk.states.len(), noisy_states.len())?;
    let mut output_grad = Vec::with_capacity(chunk.states.len() * chunk.states.first().map_or(0, Vec::len));
    let mut noisy = Vec::with_capacity(output_grad.capacity());
    let mut denoised = Vec::with_capacity(chunk.states.len());
    let mut loss = 0.0;
    for x_t in noisy_states {
        let s_real = teacher.score(x_t, level);
        let s_fake = critic.score(x_t, level);
        check_dim("teacher score", x_t.len(), s_real.len())?;
        check_dim("critic score", x_t.len(), s_fake.len())?;
        for (f, r) in s_fake.iter().zip(&s_real) {
            let g = f - r;
            loss += 0.5 * g * g;
            output_grad.push(g);
        }
        noisy.extend_from_slice(x_t);
        denoised.push(tweedie_denoise(&s_real, x_t, level.sigma));
    }
    Ok(DmdOutput {
        x_hat_real: Chunk {
            states: denoised,
            index: chunk.index,
            event: chunk.event,
            condition: chunk.condition,
        },
        level,
        noisy,
        output_grad,
        loss,
    })
}

/// Draws the noise level and per-state noise, then forms the score
/// difference.
pub fn dmd_loss<R: Rng + ?Sized>(
    teacher: &dyn ScoreField,
    critic: &dyn ScoreField,
    chunk: &Chunk,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<DmdOutput> {
    let level = schedule.sample_level(rng);
    let noisy: Vec<Vec<f64>> = chunk.states.iter().map(|s| perturb_at(s, level, rng).x).collect();
    score_difference(teacher, critic, chunk, &noisy, level)
}

/// Parameter gradient of the generator for an arbitrary cotangent on its
/// flattened output chunk.
pub fn generator_gradient(gen: &StudentGenerator, generated: &Generated, output_grad: &[f64]) -> Result<GradientTape> {
    check_dim("generator cotangent", gen.noise_dim(), output_grad.len())?;
    let (tape, _) = gen.net().backward_from(&generated.input, output_grad)?;
    Ok(tape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{GaussianMixture, MixtureField, ScoreRole};
    use crate::rng;
    use crate::smallgrad::dot;
    use crate::student::GeneratorSpec;
    use crate::world::{make_benchmark_world, WorldSpec};

    struct Zero(usize);

    impl ScoreField for Zero {
        fn role(&self) -> ScoreRole {
            ScoreRole::FakeCritic
        }
        fn score(&self, _x: &[f64], _level: NoiseLevel) -> Vec<f64> {
            vec![0.0; self.0]
        }
    }

    fn field(mean: Vec<f64>, var: f64, role: ScoreRole) -> MixtureField {
        MixtureField {
            mixture: GaussianMixture::gaussian(mean, var).unwrap(),
            role,
        }
    }

    fn setup(chunk_len: usize) -> (StudentGenerator, Generated) {
        let world = make_benchmark_world(&WorldSpec::default()).unwrap();
        let gen = StudentGenerator::init(2, chunk_len, world.embedding_dim(), &GeneratorSpec { hidden: vec![6] }, &mut rng::stream(3, "g"));
        let cache = gen.new_cache(3);
        let g = gen
            .generate_next_chunk(&cache, &world.conditions()[1], 0, &mut rng::stream(4, "z"))
            .unwrap();
        (gen, g)
    }

    #[test]
    fn equal_scores_give_zero_gradient() {
        let (gen, g) = setup(3);
        let f = field(vec![1.0, 2.0], 0.3, ScoreRole::TeacherMarginalized);
        let out = dmd_loss(&f, &f, &g.chunk, &NoiseSchedule::default(), &mut rng::stream(0, "n")).unwrap();
        assert!(out.output_grad.iter().all(|v| *v == 0.0));
        assert_eq!(out.loss, 0.0);
        assert!(generator_gradient(&gen, &g, &out.output_grad).unwrap().flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn descent_moves_a_single_state_toward_the_teacher_mean() {
        let (gen, g) = setup(1);
        let m = vec![3.0, -2.0];
        let teacher = field(m.clone(), 0.25, ScoreRole::TeacherHistoryAware);
        let sched = NoiseSchedule::default();
        for seed in 0..20 {
            let out = dmd_loss(&teacher, &Zero(2), &g.chunk, &sched, &mut rng::stream(seed, "n")).unwrap();
            let tape = generator_gradient(&gen, &g, &out.output_grad).unwrap();
            let mut stepped = gen.clone();
            stepped.net_mut().sgd_step(&tape, 1e-4).unwrap();
            let before = g.chunk.terminal().to_vec();
            let after = stepped.net().forward(&g.input).unwrap();
            let moved: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
            let toward: Vec<f64> = m.iter().zip(&before).map(|(a, b)| a - b).collect();
            assert!(dot(&moved, &toward) > 0.0, "seed {seed}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_of_the_surrogate() {
        let (gen, g) = setup(3);
        let teacher = field(vec![1.0, 2.0], 0.3, ScoreRole::TeacherMarginalized);
        let critic = field(vec![-1.0, 0.5], 0.7, ScoreRole::FakeCritic);
        let out = dmd_loss(&teacher, &critic, &g.chunk, &NoiseSchedule::default(), &mut rng::stream(9, "n")).unwrap();
        let analytic = generator_gradient(&gen, &g, &out.output_grad).unwrap().flat();
        // surrogate ⟨stopgrad(s_fake − s*), G_θ(z)⟩
        let surrogate = |net: &StudentGenerator| dot(&out.output_grad, &net.net().forward(&g.input).unwrap());
        let h = 1e-6;
        let mut probe = gen.clone();
        for i in 0..analytic.len() {
            let orig = *probe.net_mut().param_mut(i);
            *probe.net_mut().param_mut(i) = orig + h;
            let fp = surrogate(&probe);
            *probe.net_mut().param_mut(i) = orig - h;
            let fm = surrogate(&probe);
            *probe.net_mut().param_mut(i) = orig;
            let num = (fp - fm) / (2.0 * h);
            let rel = (num - analytic[i]).abs() / num.abs().max(1e-8);
            assert!(rel <= 1e-4 || (num - analytic[i]).abs() <= 1e-9, "param {i}: {num} vs {}", analytic[i]);
        }
    }

    #[test]
    fn tweedie_estimate_uses_the_teacher_score() {
        let (_, g) = setup(2);
        let m = vec![0.5, 0.5];
        let v = 0.2;
        let teacher = field(m.clone(), v, ScoreRole::TeacherMarginalized);
        let out = dmd_loss(&teacher, &Zero(2), &g.chunk, &NoiseSchedule::default(), &mut rng::stream(1, "n")).unwrap();
        let s2 = out.level.sigma * out.level.sigma;
        for (j, state) in out.x_hat_real.states.iter().enumerate() {
            for i in 0..2 {
                let x = out.noisy[2 * j + i];
                let posterior = (v * x + s2 * m[i]) / (v + s2);
                assert!((state[i] - posterior).abs() < 1e-12);
            }
        }
    }
}
