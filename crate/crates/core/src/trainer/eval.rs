//! Held-out rollouts of a trained generator, scored by mode assignment.

use rand::Rng;

use super::tuning::{mode_correct, RolloutConfig};
use crate::error::Result;
use crate::student::{rollout, StudentGenerator};
use crate::world::{sample_schedule, World};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalChunk {
    pub rollout: usize,
    pub chunk_k: usize,
    pub event_e: usize,
    pub condition: usize,
    pub is_switch: bool,
    pub correct: bool,
    pub states: Vec<Vec<f64>>,
}

/// Generates `n_rollouts` fresh rollouts without updating anything.
pub fn evaluate<R: Rng + ?Sized>(
    gen: &StudentGenerator,
    world: &World,
    cfg: &RolloutConfig,
    n_rollouts: usize,
    rng: &mut R,
) -> Result<Vec<EvalChunk>> {
    let prompt_set: Vec<usize> = world.conditions().iter().map(|c| c.id).collect();
    let mut out = Vec::new();
    for r in 0..n_rollouts {
        let schedule = sample_schedule(&prompt_set, cfg.events, cfg.chunk_len, cfg.video_len, rng)?;
        let run = rollout(gen, world, &schedule, cfg.window, rng)?;
        for (k, (chunk, cache)) in run.chunks.into_iter().zip(&run.caches).enumerate() {
            let cond = world.condition(chunk.condition)?;
            let history = cache.history_for(world, cond);
            out.push(EvalChunk {
                rollout: r,
                chunk_k: chunk.index,
                event_e: chunk.event,
                condition: chunk.condition,
                is_switch: schedule.is_switch(k),
                correct: mode_correct(world, cond, &history, &chunk),
                states: chunk.states,
            });
        }
    }
    Ok(out)
}

/// Fraction of chunks ending nearest to their history-consistent mode.
pub fn mode_accuracy(chunks: &[EvalChunk]) -> Option<f64> {
    if chunks.is_empty() {
        return None;
    }
    Some(chunks.iter().filter(|c| c.correct).count() as f64 / chunks.len() as f64)
}
