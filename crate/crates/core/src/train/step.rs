//! Gradient computation over a partitioned volume.
//!
//! Pass one forwards every sub-cube without recording, assembles the
//! detached full prediction, and differentiates the loss with respect to it.
//! Pass two re-forwards each sub-cube on a fresh tape and back-propagates the
//! matching slice of that gradient, accumulating into the parameters.

use crate::encoder::CubeContext;
use crate::error::{Error, Result};
use crate::loss::{dice_ce_loss, LossConfig};
use crate::model::Model;
use crate::partition::Partition;
use crate::tensor::{Element, MemoryMeter, Tape, Tensor};

use super::optim::{clip_grad_norm, AdamW};

/// One training volume: image and binary target, both `(1, 1, D, H, W)`.
#[derive(Debug, Clone)]
pub struct Sample<T: Element> {
    pub subject: String,
    pub image: Tensor<T>,
    pub label: Tensor<T>,
}

impl<T: Element> Sample<T> {
    pub fn new(subject: &str, image: Tensor<T>, label: Tensor<T>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 5 || s[0] != 1 || s[1] != 1 {
            return Err(Error::invalid(
                "sample",
                format!("image must be (1,1,D,H,W), got {s:?}"),
            ));
        }
        if label.shape() != s {
            return Err(Error::shape("sample", s, label.shape()));
        }
        Ok(Sample {
            subject: subject.to_string(),
            image,
            label,
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[2], s[3], s[4]]
    }
}

fn check_partition(extents: [usize; 3], partition: &Partition) -> Result<()> {
    if partition.volume_extents() != extents {
        return Err(Error::Partition(format!(
            "partition covers {:?}, volume is {:?}",
            partition.volume_extents(),
            extents
        )));
    }
    Ok(())
}

fn cube_context(subject: &str, offset: [usize; 3], volume: [usize; 3]) -> CubeContext {
    CubeContext {
        subject: subject.to_string(),
        offset,
        volume_extents: volume,
    }
}

fn cube_input<T: Element>(x: &Tensor<T>, offset: [usize; 3], cube: [usize; 3]) -> Result<Tensor<T>> {
    Tape::suspended().slice_view(
        x,
        &[0, 0, offset[0], offset[1], offset[2]],
        &[1, 1, cube[0], cube[1], cube[2]],
    )
}

/// Assembled logits of every sub-cube, forwarded without recording.
pub fn predict_logits<T: Element>(
    model: &Model<T>,
    image: &Tensor<T>,
    subject: &str,
    partition: &Partition,
) -> Result<Tensor<T>> {
    let s = image.shape();
    check_partition([s[2], s[3], s[4]], partition)?;
    let tape = Tape::suspended();
    let cube = partition.cube_extents();
    let blocks = partition
        .offsets()
        .iter()
        .map(|&o| {
            let x = cube_input(image, o, cube)?;
            model.forward(&tape, &x, &cube_context(subject, o, partition.volume_extents()))
        })
        .collect::<Result<Vec<_>>>()?;
    tape.assemble(&blocks, partition)
}

/// Accumulate two-pass gradients into the model parameters and return the
/// loss. Each tape records into `meter`.
pub fn two_pass_gradients<T: Element>(
    model: &Model<T>,
    sample: &Sample<T>,
    partition: &Partition,
    loss: &LossConfig,
    meter: &MemoryMeter,
) -> Result<f64> {
    check_partition(sample.extents(), partition)?;
    let full = predict_logits(model, &sample.image, &sample.subject, partition)?.detach_as_leaf();

    let grad_full = {
        let tape = Tape::with_meter(meter.clone());
        let l = dice_ce_loss(&tape, &full, &sample.label, loss)?;
        let value = l.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value} for subject {}", sample.subject)));
        }
        tape.backward(&l, &Tensor::scalar(T::one()))?;
        let g = full
            .grad()
            .ok_or_else(|| Error::Backward("loss did not reach the prediction".into()))?;
        (Tensor::new(g, full.shape())?, value)
    };
    let (grad_full, value) = grad_full;
    drop(full);

    let cube = partition.cube_extents();
    let suspended = Tape::suspended();
    for &o in partition.offsets() {
        let tape = Tape::with_meter(meter.clone());
        let x = cube_input(&sample.image, o, cube)?;
        let logits = model.forward(&tape, &x, &cube_context(&sample.subject, o, partition.volume_extents()))?;
        let seed = suspended.slice_view(&grad_full, &[0, 0, o[0], o[1], o[2]], logits.shape())?;
        tape.backward(&logits, &seed)?;
    }
    Ok(value)
}

/// Reference gradients from one tape holding every sub-cube's forward, the
/// assembly and the loss. Mathematically identical to [`two_pass_gradients`].
pub fn single_tape_gradients<T: Element>(
    model: &Model<T>,
    sample: &Sample<T>,
    partition: &Partition,
    loss: &LossConfig,
    meter: &MemoryMeter,
) -> Result<f64> {
    check_partition(sample.extents(), partition)?;
    let tape = Tape::with_meter(meter.clone());
    let cube = partition.cube_extents();
    let blocks = partition
        .offsets()
        .iter()
        .map(|&o| {
            let x = cube_input(&sample.image, o, cube)?;
            model.forward(&tape, &x, &cube_context(&sample.subject, o, partition.volume_extents()))
        })
        .collect::<Result<Vec<_>>>()?;
    let full = tape.assemble(&blocks, partition)?;
    let l = dice_ce_loss(&tape, &full, &sample.label, loss)?;
    let value = l.item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value} for subject {}", sample.subject)));
    }
    tape.backward(&l, &Tensor::scalar(T::one()))?;
    Ok(value)
}

/// Ordinary whole-volume forward and backward, no partition.
pub fn plain_gradients<T: Element>(model: &Model<T>, sample: &Sample<T>, loss: &LossConfig) -> Result<f64> {
    let tape = Tape::new();
    let ctx = CubeContext::whole(&sample.subject, sample.extents());
    let logits = model.forward(&tape, &sample.image, &ctx)?;
    let l = dice_ce_loss(&tape, &logits, &sample.label, loss)?;
    let value = l.item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value} for subject {}", sample.subject)));
    }
    tape.backward(&l, &Tensor::scalar(T::one()))?;
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

fn finish_step<T: Element>(
    model: &mut Model<T>,
    optim: &mut AdamW<T>,
    loss: Result<f64>,
    lr: f64,
    clip: f64,
) -> Result<StepOutcome> {
    let outcome = loss.and_then(|loss| {
        let (grad_norm, clip_scale) = clip_grad_norm(&model.parameters(), clip)?;
        optim.step(&mut model.slots(), lr)?;
        Ok(StepOutcome {
            loss,
            grad_norm,
            clip_scale,
        })
    });
    model.zero_grad();
    outcome
}

/// Two-pass gradients, clipping, then exactly one optimizer step. Gradients
/// are cleared afterwards, also when the step is aborted.
pub fn two_pass_step<T: Element>(
    model: &mut Model<T>,
    optim: &mut AdamW<T>,
    sample: &Sample<T>,
    partition: &Partition,
    loss: &LossConfig,
    lr: f64,
    clip_max_norm: f64,
) -> Result<StepOutcome> {
    let value = two_pass_gradients(model, sample, partition, loss, &MemoryMeter::new());
    finish_step(model, optim, value, lr, clip_max_norm)
}

/// Whole-volume counterpart of [`two_pass_step`].
pub fn plain_step<T: Element>(
    model: &mut Model<T>,
    optim: &mut AdamW<T>,
    sample: &Sample<T>,
    loss: &LossConfig,
    lr: f64,
    clip_max_norm: f64,
) -> Result<StepOutcome> {
    let value = plain_gradients(model, sample, loss);
    finish_step(model, optim, value, lr, clip_max_norm)
}
