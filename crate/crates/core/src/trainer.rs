//! Epoch-level training and evaluation loops.
//!
//! Every clip builds a fresh tape; gradients accumulate across a batch
//! into the shared parameter set, then one optimizer step runs. All
//! iteration orders and reductions are fixed, so results are
//! reproducible bit for bit given the same configuration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MsfError, Result};
use crate::model::{self, ModelConfig, ModelParams, OptState, TrainConfig};
use crate::ops;
use crate::tape::{ParamSet, Tape};
use crate::tensor::Tensor;
use crate::tokenizer::VideoClip;

/// One metrics row, in the exact column order of the metrics CSV.
#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.top1, self.top5, self.lr
        )
    }
}

pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// Parameter values at the best validation top-1 seen so far.
    pub best_set: ParamSet,
    pub best_top1: f64,
    pub best_epoch: usize,
    pub final_top1: f64,
    pub reached_floor: bool,
}

fn top5_k(classes: usize) -> usize {
    classes.min(5)
}

/// Mean loss, top-1 and top-k accuracy over a labeled split. No
/// gradients are computed.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParams,
    data: &[(VideoClip, usize)],
) -> Result<(f64, f64, f64)> {
    if data.is_empty() {
        return Err(MsfError::Contract("evaluate needs at least one clip".into()));
    }
    let mut rows = Vec::with_capacity(data.len() * cfg.classes);
    let mut labels = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    for (clip, label) in data {
        let mut tape = Tape::new();
        let (logits, _) = model::forward(&mut tape, clip, cfg, params)?;
        let loss = model::cross_entropy(&mut tape, logits, *label)?;
        loss_sum += tape.value(loss).item();
        rows.extend_from_slice(tape.value(logits).data());
        labels.push(*label);
    }
    let logit_rows = Tensor::new(vec![data.len(), cfg.classes], rows)?;
    let top1 = model::topk_accuracy(&logit_rows, &labels, 1)?;
    let top5 = model::topk_accuracy(&logit_rows, &labels, top5_k(cfg.classes))?;
    Ok((loss_sum / data.len() as f64, top1, top5))
}

/// Run the full schedule, mutating `params` in place. `on_epoch` fires
/// once per metrics row as it is produced. When `top1_floor` is set,
/// training stops at the end of the first epoch whose validation top-1
/// reaches it.
pub fn train(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    params: &mut ModelParams,
    train_data: &[(VideoClip, usize)],
    val_data: &[(VideoClip, usize)],
    top1_floor: Option<f64>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(MsfError::Contract(
            "training needs nonempty train and val splits".into(),
        ));
    }
    for (clip, label) in train_data.iter().chain(val_data.iter()) {
        let (t, h, w) = clip.dims();
        if (t, h, w) != (cfg.frames, cfg.height, cfg.width) {
            return Err(MsfError::Config(format!(
                "dataset clip {t}x{h}x{w} does not match configured {}x{}x{}",
                cfg.frames, cfg.height, cfg.width
            )));
        }
        if *label >= cfg.classes {
            return Err(MsfError::Config(format!(
                "label {label} out of range for {} classes",
                cfg.classes
            )));
        }
    }

    let steps_per_epoch = (train_data.len() + tc.batch - 1) / tc.batch;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = OptState::new(&params.set);
    let mut metrics = Vec::new();
    let mut best_set = params.set.clone();
    let mut best_top1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut final_top1 = 0.0;
    let mut reached_floor = false;
    let mut global_step = 0usize;

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_rows = Vec::with_capacity(train_data.len() * cfg.classes);
        let mut epoch_labels = Vec::with_capacity(train_data.len());
        let mut last_lr = 0.0;

        for chunk in order.chunks(tc.batch) {
            let lr = model::lr_at(global_step, tc, steps_per_epoch);
            last_lr = lr;
            params.set.zero_grads();
            let inv = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let (clip, label) = &train_data[idx];
                let mut tape = Tape::new();
                let (logits, _) = model::forward(&mut tape, clip, cfg, params)?;
                let loss = model::cross_entropy(&mut tape, logits, *label)?;
                let raw = tape.value(loss).item();
                if !raw.is_finite() {
                    return Err(MsfError::Contract(format!(
                        "non-finite loss at step {global_step} (epoch {epoch})"
                    )));
                }
                epoch_loss += raw;
                epoch_rows.extend_from_slice(tape.value(logits).data());
                epoch_labels.push(*label);
                let scaled = ops::scale(&mut tape, loss, inv);
                tape.backward(scaled, &mut params.set)?;
            }
            model::opt_step(&mut params.set, &mut opt, tc, lr);
            global_step += 1;
        }

        let train_rows = Tensor::new(vec![epoch_labels.len(), cfg.classes], epoch_rows)?;
        let train_row = EpochMetrics {
            epoch,
            split: "train",
            loss: epoch_loss / train_data.len() as f64,
            top1: model::topk_accuracy(&train_rows, &epoch_labels, 1)?,
            top5: model::topk_accuracy(&train_rows, &epoch_labels, top5_k(cfg.classes))?,
            lr: last_lr,
        };
        on_epoch(&train_row);
        metrics.push(train_row);

        let (vl, v1, v5) = evaluate(cfg, params, val_data)?;
        let val_row = EpochMetrics {
            epoch,
            split: "val",
            loss: vl,
            top1: v1,
            top5: v5,
            lr: last_lr,
        };
        on_epoch(&val_row);
        metrics.push(val_row);
        final_top1 = v1;

        if v1 > best_top1 {
            best_top1 = v1;
            best_epoch = epoch;
            best_set = params.set.clone();
        }
        if let Some(floor) = top1_floor {
            if v1 >= floor {
                reached_floor = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        metrics,
        best_set,
        best_top1,
        best_epoch,
        final_top1,
        reached_floor,
    })
}
