//! Small from-scratch segmentation model: a frozen local-filter encoder and
//! per-pixel linear softmax decoders trained with SGD.

pub mod checkpoint;
mod encoder;
mod head;
mod train;

pub use encoder::{raw_features, Encoder, FeatureMap, FEATURE_DIM, RECEPTIVE_RADIUS};
pub use head::{argmax_restricted, cross_entropy, DecoderHead, LogitMap};
pub use train::{poly_lr, train_head, HeadTrainer, LossTrace, PixelBatch, TrainSchedule};

pub(crate) use head::softmax_xent;

/// Mean cross-entropy and its gradient, evaluated in `f64`; exposed for
/// finite-difference checks.
pub fn cross_entropy_grad_f64(
    weights: &[f64],
    bias: &[f64],
    dim: usize,
    feats: &[f64],
    targets: &[usize],
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; bias.len()];
    let loss = softmax_xent(weights, bias, dim, feats, targets, Some((&mut gw, &mut gb)));
    (loss, gw, gb)
}
