//! Minibatch sampling and the gradient/optimizer loop shared by every stage.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{forward_backward, DropoutCtx, GradAccumulator, GradSelect, Grads};
use crate::datastore::DatasetStore;
use crate::error::{Error, Result};
use crate::model::{build_input, dt_loss, forward, ModelConfig, Normalizer, TokenSequence};
use crate::moe::Routing;
use crate::optim::{clip_grad_norm, AdamState};
use crate::params::{Component, ParamSet};
use crate::tasks::{sample_prompt_with, Trajectory};
use crate::tensor::hash_keys;

/// A segment of up to `k` steps ending at a uniformly drawn step, so early
/// (shorter, left-padded) contexts are seen as often as they occur at
/// rollout time.
pub fn sample_segment(traj: &Trajectory, k: usize, rng: &mut impl Rng) -> Trajectory {
    let end = rng.random_range(0..traj.len());
    let start = (end + 1).saturating_sub(k);
    traj.window(start, end + 1 - start)
}

/// One training example from task `task_id`: a prompt from the task's
/// top-return quartile and a segment from a uniformly drawn trajectory.
pub fn sample_example(
    store: &DatasetStore,
    cfg: &ModelConfig,
    norm: &Normalizer,
    task_id: usize,
    rng: &mut impl Rng,
) -> Result<TokenSequence> {
    let data = store.dataset(task_id)?;
    let prompt = sample_prompt_with(data, cfg.prompt_kstar, rng)?;
    let traj = &data[rng.random_range(0..data.len())];
    let segment = sample_segment(traj, cfg.context_k, rng);
    build_input(cfg, norm, &prompt, &segment)
}

/// `batch_size` examples, each from a task drawn uniformly from `task_ids`.
pub fn sample_batch(
    store: &DatasetStore,
    cfg: &ModelConfig,
    norm: &Normalizer,
    task_ids: &[usize],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TokenSequence>> {
    if task_ids.is_empty() {
        return Err(Error::InvalidArgument("no tasks to sample from".into()));
    }
    (0..batch_size)
        .map(|_| {
            let id = task_ids[rng.random_range(0..task_ids.len())];
            sample_example(store, cfg, norm, id, rng)
        })
        .collect()
}

/// Which parameters a gradient computation differentiates.
#[derive(Clone, Copy)]
pub enum Select<'a> {
    Trainable,
    Filter(&'a (dyn Fn(&str, Component) -> bool + Sync)),
}

/// Mean loss and mean gradient over a batch. Samples are differentiated in
/// parallel and accumulated in index order, so results do not depend on
/// thread scheduling.
pub fn batch_gradients(
    params: &ParamSet,
    cfg: &ModelConfig,
    batch: &[TokenSequence],
    routing: &Routing,
    select: Select<'_>,
    dropout: Option<(u64, u64)>,
) -> Result<(f64, Grads<f32>)> {
    let per_sample: Vec<(f32, Grads<f32>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let sel = match select {
                Select::Trainable => GradSelect::Trainable,
                Select::Filter(f) => GradSelect::Custom(Box::new(f)),
            };
            let ctx = dropout.filter(|_| cfg.dropout > 0.0).map(|(seed, step)| DropoutCtx {
                rate: cfg.dropout,
                seed,
                step,
                sample: i as u64,
            });
            forward_backward(params, sel, ctx, |g| {
                let pred = forward(g, cfg, seq, routing)?;
                dt_loss(g, pred, seq)
            })
        })
        .collect::<Result<_>>()?;
    let mut acc = GradAccumulator::new();
    let mut loss = 0.0f64;
    for (l, g) in per_sample {
        loss += l as f64;
        acc.add(g);
    }
    Ok((loss / batch.len().max(1) as f64, acc.mean()))
}

/// Mean loss over a batch without gradients.
pub fn batch_loss(params: &ParamSet, cfg: &ModelConfig, batch: &[TokenSequence], routing: &Routing) -> Result<f64> {
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|seq| {
            let mut g = crate::autograd::Graph::new(params, GradSelect::Custom(Box::new(|_, _| false)));
            let pred = forward(&mut g, cfg, seq, routing)?;
            let l = dt_loss(&mut g, pred, seq)?;
            Ok(g.value(l)[0] as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Settings of one optimisation phase.
#[derive(Clone, Debug)]
pub struct Phase {
    pub steps: u64,
    pub batch_size: usize,
    pub grad_clip: Option<f32>,
    pub routing: Routing,
    /// Tasks sampled uniformly for every batch.
    pub task_ids: Vec<usize>,
    /// Seeds batch sampling and dropout.
    pub seed: u64,
}

/// Run up to `phase.steps` Adam steps on the trainable parameters. `on_step`
/// sees the 1-based step, the batch loss and the updated parameters, and
/// returns whether to continue. Returns the number of steps taken.
pub fn run_phase(
    params: &mut ParamSet,
    adam: &mut AdamState,
    store: &DatasetStore,
    cfg: &ModelConfig,
    norm: &Normalizer,
    phase: &Phase,
    mut on_step: impl FnMut(u64, f64, &ParamSet) -> Result<bool>,
) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_keys(&[phase.seed, 0xba7c4]));
    for step in 1..=phase.steps {
        let batch = sample_batch(store, cfg, norm, &phase.task_ids, phase.batch_size, &mut rng)?;
        let (loss, mut grads) = batch_gradients(
            params,
            cfg,
            &batch,
            &phase.routing,
            Select::Trainable,
            Some((phase.seed, step)),
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        if let Some(max) = phase.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        adam.step(params, &grads)?;
        if !on_step(step, loss, params)? {
            return Ok(step);
        }
    }
    Ok(phase.steps)
}
