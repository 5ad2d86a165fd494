use super::head::{softmax_xent, DecoderHead};
use crate::error::{invalid, Error, Result};
use crate::image::ClassId;
use serde::{Deserialize, Serialize};

/// Polynomial learning-rate decay from `initial_lr` to `final_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    pub final_lr: f64,
    pub power: f64,
    pub total_steps: usize,
    /// Images per batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr >= self.final_lr && self.final_lr >= 0.0) {
            return Err(invalid(format!(
                "need initial_lr >= final_lr >= 0, got {} and {}",
                self.initial_lr, self.final_lr
            )));
        }
        if self.power.is_nan() || self.power <= 0.0 {
            return Err(invalid("power must be positive"));
        }
        if self.total_steps == 0 {
            return Err(invalid("total_steps must be at least 1"));
        }
        Ok(())
    }
}

/// `final + (initial - final) * (1 - step/total)^power`.
pub fn poly_lr(step: usize, schedule: &TrainSchedule) -> Result<f64> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(invalid(format!(
            "step {step} beyond total {}",
            schedule.total_steps
        )));
    }
    let progress = 1.0 - step as f64 / schedule.total_steps as f64;
    Ok(schedule.final_lr + (schedule.initial_lr - schedule.final_lr) * progress.powf(schedule.power))
}

/// Sampled training pixels: features (pixel-major) and their target classes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelBatch {
    pub dim: usize,
    pub feats: Vec<f32>,
    pub targets: Vec<ClassId>,
}

impl PixelBatch {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn push(&mut self, feature: &[f32], target: ClassId) {
        debug_assert_eq!(feature.len(), self.dim);
        self.feats.extend_from_slice(feature);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// Stepwise SGD over a decoder head. Owning the head for the whole run lets
/// callers rewrite their data between steps.
#[derive(Debug)]
pub struct HeadTrainer {
    head: DecoderHead,
    schedule: TrainSchedule,
    step: usize,
    trace: LossTrace,
    grad_w: Vec<f32>,
    grad_b: Vec<f32>,
}

impl HeadTrainer {
    pub fn new(head: DecoderHead, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        let (nw, nb) = (head.weights().len(), head.bias().len());
        Ok(Self {
            head,
            schedule,
            step: 0,
            trace: LossTrace::default(),
            grad_w: vec![0.0; nw],
            grad_b: vec![0.0; nb],
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn head(&self) -> &DecoderHead {
        &self.head
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    /// One SGD update; returns the batch loss before the update.
    pub fn step(&mut self, batch: &PixelBatch) -> Result<f64> {
        if self.is_done() {
            return Err(invalid("training budget exhausted"));
        }
        if batch.dim != self.head.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("feature dim {}", self.head.dim()),
                actual: format!("feature dim {}", batch.dim),
            });
        }
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let targets = batch
            .targets
            .iter()
            .map(|&c| self.head.index_of(c).ok_or(Error::UnknownClass(c)))
            .collect::<Result<Vec<_>>>()?;
        let lr = poly_lr(self.step, &self.schedule)?;
        let dim = self.head.dim();
        let loss = softmax_xent(
            self.head.weights(),
            self.head.bias(),
            dim,
            &batch.feats,
            &targets,
            Some((&mut self.grad_w, &mut self.grad_b)),
        ) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss,
            });
        }
        let (w, b) = self.head.params_mut();
        let lr32 = lr as f32;
        for (p, g) in w.iter_mut().zip(&self.grad_w) {
            *p -= lr32 * g;
        }
        for (p, g) in b.iter_mut().zip(&self.grad_b) {
            *p -= lr32 * g;
        }
        self.trace.losses.push(loss);
        self.trace.learning_rates.push(lr);
        self.step += 1;
        Ok(loss)
    }

    pub fn finish(mut self) -> (DecoderHead, LossTrace) {
        self.head.mark_trained();
        (self.head, self.trace)
    }
}

/// Runs SGD over `batches` until the schedule's budget or the stream ends.
pub fn train_head<I>(head: DecoderHead, batches: I, schedule: &TrainSchedule) -> Result<(DecoderHead, LossTrace)>
where
    I: IntoIterator<Item = PixelBatch>,
{
    let mut trainer = HeadTrainer::new(head, schedule.clone())?;
    for batch in batches {
        if trainer.is_done() {
            break;
        }
        trainer.step(&batch)?;
    }
    Ok(trainer.finish())
}
