//! Replay image selection: adversarial filtering against a discriminator
//! that separates training images from web images, core replay sets, and
//! per-class size thresholds taken from the empirical CDF of class areas.

mod cdf;
mod discriminator;

pub use cdf::{
    class_size_cdf, class_size_cdf_from_labels, semantic_filter, size_threshold, EmpiricalCdf, SemanticRule,
    SizeThreshold, FIXED_THRESHOLD,
};
pub use discriminator::{
    adversarial_filter, adversarial_select, core_select, core_set, disc_features, disc_loss_f64,
    disc_loss_grad_f64, disc_score, train_discriminator, CoreSetRule, DiscSchedule, DiscScore, DiscTrainReport,
    Discriminator, DISC_FEATURE_DIM,
};
