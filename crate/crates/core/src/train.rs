//! Training loop and in-memory evaluation shared by the CLI and tests.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, AugmentConfig, Augmentation};
use crate::config::TrainConfig;
use crate::data::Sample;
use crate::decoder::DecodeConfig;
use crate::error::{ensure, Result};
use crate::eval::{average_precision, ApResult, EvalConfig, Frame};
use crate::network::Model;
use crate::par;
use crate::targets::{LossComponents, LossConfig};
use crate::tensor::Real;

/// What the loop reports after every optimiser step.
#[derive(Clone, Debug)]
pub struct StepReport {
    /// One-based step number.
    pub step: usize,
    pub epoch: usize,
    pub loss: LossComponents,
}

/// Runs `cfg.steps` optimiser steps over `samples`.
///
/// Each epoch visits the samples in a fresh seeded permutation, cut into
/// consecutive batches; the last batch of an epoch may be short. With
/// augmentation enabled every visit draws a new augmentation from the same
/// seeded stream. `on_step` may stop the loop early.
pub fn train<T, F>(
    model: &mut Model<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    loss: &LossConfig,
    mut on_step: F,
) -> Result<()>
where
    T: Real,
    F: FnMut(&StepReport, &Model<T>) -> Result<ControlFlow<()>>,
{
    ensure!(!samples.is_empty(), Contract, "no training samples");
    ensure!(cfg.batch_size > 0, Config, "batch size must be positive");
    aug.validate()?;
    let multiple = model.config().coarsest_scale();
    let mut optim = model.optimizer(cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    let mut epoch = 0;
    while step < cfg.steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step == cfg.steps {
                break;
            }
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    if aug.enabled {
                        let a = Augmentation::sample(aug, s.image.width, s.image.height, &mut rng);
                        augment(s, &a, multiple)
                    } else {
                        Ok(s.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = model.train_step(&batch, &mut optim, loss)?;
            step += 1;
            let report = StepReport { step, epoch, loss };
            if on_step(&report, model)?.is_break() {
                return Ok(());
            }
        }
        epoch += 1;
    }
    Ok(())
}

/// Detects on every sample and scores the detections against its objects.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample], decode: &DecodeConfig, eval: &EvalConfig) -> Result<ApResult> {
    let frames = par::map_range(samples.len(), |i| -> Result<Frame> {
        let s = &samples[i];
        Ok(Frame {
            predictions: model.detect(s, decode)?,
            ground_truth: s.objects.iter().map(|&o| o.into()).collect(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    average_precision(&frames, eval)
}
