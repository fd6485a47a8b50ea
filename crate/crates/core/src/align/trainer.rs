use std::fmt;

use serde::{Deserialize, Serialize};

use super::checkpoint::AlignmentCheckpoint;
use super::loss::{contrastive_loss, text_text_loss};
use crate::corpus::{generate_scene, render_image, AlignmentDataset, Variant};
use crate::encoders::{GroupAdam, ParamGroup, TokenBatch};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Global step at which encoders unfreeze; `None` means half of the
    /// first epoch.
    pub thaw_step: Option<usize>,
    pub lr_head: f64,
    /// Text encoder rate after thawing.
    pub lr_encoder: f64,
    /// Vision encoder rate after thawing. The patch encoder starts from
    /// random weights, so it gets a larger rate than the pretrained text side.
    pub lr_vision: f64,
    pub lr_temperature: f64,
    pub symmetric: bool,
    /// Stop after this many steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            thaw_step: None,
            lr_head: 1e-3,
            lr_encoder: 1e-4,
            lr_vision: 1e-3,
            lr_temperature: 1e-3,
            symmetric: true,
            max_steps: None,
        }
    }
}

impl TrainSchedule {
    pub fn steps_per_epoch(&self, n_items: usize) -> usize {
        n_items / self.batch_size.max(1)
    }

    pub fn resolved_thaw_step(&self, n_items: usize) -> usize {
        self.thaw_step
            .unwrap_or(self.steps_per_epoch(n_items) / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Frozen,
    Thawed,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Frozen => "frozen",
            Phase::Thawed => "thawed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    /// Temperature after the step's update and clamp.
    pub t: f64,
    pub phase: Phase,
}

/// Contrastive alignment. Before the thaw step only projection heads and the
/// temperature update; afterwards every parameter does. Batches come from a
/// seeded shuffle per epoch and the incomplete last batch is dropped.
pub fn train_alignment<T: Scalar>(
    dataset: &AlignmentDataset,
    init: AlignmentCheckpoint<T>,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<(AlignmentCheckpoint<T>, Vec<LogRow>)> {
    let n = dataset.items.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let b = schedule.batch_size;
    if b == 0 || n < b {
        return Err(Error::InvalidDataset(format!(
            "{n} items cannot fill a batch of {b}"
        )));
    }
    let pivot = dataset.variant == Variant::EngPivot;
    if !pivot && (init.vision.is_none() || init.image_head.is_none()) {
        return Err(Error::InvalidDataset(format!(
            "{} needs a vision encoder",
            dataset.variant
        )));
    }
    let mut ck = init;
    let thaw = schedule.resolved_thaw_step(n);
    let mut opt = GroupAdam::new(&ck.store, |g| match g {
        ParamGroup::TextEncoder => schedule.lr_encoder,
        ParamGroup::VisionEncoder => schedule.lr_vision,
        ParamGroup::Temperature => schedule.lr_temperature,
        ParamGroup::Head | ParamGroup::Aux => schedule.lr_head,
    });
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    'epochs: for epoch in 0..schedule.epochs {
        let mut rng = SplitMix64::derive(seed, &[0xA71E, epoch as u64]);
        rng.shuffle(&mut order);
        for chunk in order.chunks_exact(b) {
            if schedule.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let phase = if step >= thaw {
                Phase::Thawed
            } else {
                Phase::Frozen
            };
            let mut tape = Tape::new();
            let bound = ck
                .store
                .bind(&mut tape, |g| phase == Phase::Thawed || !g.is_encoder());
            let items: Vec<_> = chunk.iter().map(|&i| &dataset.items[i]).collect();
            let captions = TokenBatch::from_sequences(
                &items.iter().map(|it| &it.caption.tokens).collect::<Vec<_>>(),
            )?;
            let nonfinite = |e: Error| match e {
                Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss(step),
                e => e,
            };
            let log_t = bound.var(ck.log_t);
            let t = tape.exp(log_t).map_err(|e| nonfinite(e.into()))?;
            let ec = ck
                .text
                .encode(&mut tape, &bound, &ck.text_head, &captions)
                .map_err(nonfinite)?;
            let loss = if pivot {
                let partners = items
                    .iter()
                    .map(|it| {
                        it.partner
                            .as_ref()
                            .map(|p| &p.tokens)
                            .ok_or_else(|| Error::InvalidDataset("pivot item without partner".into()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let other = TokenBatch::from_sequences(&partners)?;
                let ex = ck
                    .text
                    .encode(&mut tape, &bound, &ck.text_head, &other)
                    .map_err(nonfinite)?;
                text_text_loss(&mut tape, ec, ex, t).map_err(nonfinite)?
            } else {
                let images: Vec<Tensor<T>> = items
                    .iter()
                    .map(|it| render_image(&generate_scene(it.scene_id)))
                    .collect();
                let refs: Vec<&Tensor<T>> = images.iter().collect();
                let (vision, head) = (ck.vision.as_ref(), ck.image_head.as_ref());
                let ei = vision
                    .zip(head)
                    .map(|(v, h)| v.encode(&mut tape, &bound, h, &refs))
                    .expect("checked above")
                    .map_err(nonfinite)?;
                contrastive_loss(&mut tape, ec, ei, t, schedule.symmetric).map_err(nonfinite)?
            };
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut ck.store, &bound, &grads)?;
            ck.clamp_temperature();
            if !ck.store.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            log.push(LogRow {
                step,
                loss: lv,
                t: ck.temperature(),
                phase,
            });
            step += 1;
        }
    }
    ck.meta.step += step as u64;
    Ok((ck, log))
}
