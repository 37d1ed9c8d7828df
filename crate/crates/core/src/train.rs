//! The SGD training loop.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, Prefetcher, SamplingParams};
use crate::error::{Error, Result};
use crate::model::SeparationModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub snrs: Vec<f64>,
    /// Batches generated ahead of the optimizer.
    pub prefetch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 0.1,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            snrs: crate::datagen::TRAIN_SNRS.to_vec(),
            prefetch: 2,
        }
    }
}

/// Runs `opts.steps` SGD steps, calling `on_step(step, loss, model)` after
/// each one (steps count from 1). Returns the per-step losses.
///
/// Batches depend only on `opts.seed`, `opts.batch_size` and the corpus, so
/// two runs with equal inputs produce identical losses.
pub fn train(
    model: &mut SeparationModel<f32>,
    corpus: Arc<Corpus>,
    opts: &TrainOptions,
    mut on_step: impl FnMut(usize, f64, &mut SeparationModel<f32>) -> Result<()>,
) -> Result<Vec<f64>> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(opts.lr > 0.0) {
        return Err(Error::Config(format!("learning rate {} must be positive", opts.lr)));
    }
    let params = SamplingParams {
        segment_frames: model.config().segment_frames,
        context_frames: model.config().context_frames,
        snrs: opts.snrs.clone(),
    };
    let batches = Prefetcher::spawn(corpus, params, opts.seed, opts.batch_size, opts.steps, opts.prefetch);
    let mut losses = Vec::with_capacity(opts.steps);
    for (i, batch) in batches.enumerate() {
        let step = i + 1;
        let loss = model.training_step(&batch?, opts.lr)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        on_step(step, loss, model)?;
    }
    Ok(losses)
}
