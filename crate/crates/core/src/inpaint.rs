//! Self-teaching label rewrites. Background inpainting fills unlabeled
//! pixels of current-step labels with the previous model's old-class
//! predictions; knowledge inpainting fills background pixels of replay
//! pseudo-labels with the current model's new-class predictions.

use crate::error::{invalid, Error, Result};
use crate::image::{ClassId, Image, LabelMap, BACKGROUND};
use crate::segmodel::{DecoderHead, Encoder, FeatureMap};
use serde::{Deserialize, Serialize};

/// Models and class sets at step `k`.
#[derive(Debug, Clone)]
pub struct InpaintContext<'a> {
    pub encoder: &'a Encoder,
    /// `M_{k-1}`, over `C_{0→k-1}` (background included).
    pub previous: &'a DecoderHead,
    /// `M_k`, over `C_{0→k}`.
    pub current: &'a DecoderHead,
    old: Vec<ClassId>,
    new: Vec<ClassId>,
}

impl<'a> InpaintContext<'a> {
    pub fn new(
        encoder: &'a Encoder,
        previous: &'a DecoderHead,
        current: &'a DecoderHead,
        new_classes: &[ClassId],
    ) -> Result<Self> {
        let old = previous.classes().to_vec();
        if old.first() != Some(&BACKGROUND) {
            return Err(invalid("previous model must cover the background class"));
        }
        let mut new = new_classes.to_vec();
        new.sort_unstable();
        new.dedup();
        if new.is_empty() {
            return Err(invalid("current class set is empty"));
        }
        if let Some(c) = new.iter().find(|c| old.binary_search(c).is_ok()) {
            return Err(invalid(format!("class {c} is both old and new")));
        }
        let mut all = [old.as_slice(), new.as_slice()].concat();
        all.sort_unstable();
        if current.classes() != all.as_slice() {
            return Err(invalid(format!(
                "current model covers {:?}, expected {:?}",
                current.classes(),
                all
            )));
        }
        Ok(Self {
            encoder,
            previous,
            current,
            old,
            new,
        })
    }

    /// `C_{0→k-1}` with background.
    pub fn old_classes(&self) -> &[ClassId] {
        &self.old
    }

    /// `C_k`.
    pub fn new_classes(&self) -> &[ClassId] {
        &self.new
    }

    fn is_new(&self, c: ClassId) -> bool {
        self.new.binary_search(&c).is_ok()
    }

    fn is_old_foreground(&self, c: ClassId) -> bool {
        c != BACKGROUND && self.old.binary_search(&c).is_ok()
    }
}

fn check_dims(y: &LabelMap, f: &FeatureMap) -> Result<()> {
    if y.height() != f.height() || y.width() != f.width() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", f.height(), f.width()),
            actual: format!("{}x{}", y.height(), y.width()),
        });
    }
    Ok(())
}

/// Background inpainting on precomputed features.
pub fn background_inpaint_features(y: &LabelMap, features: &FeatureMap, ctx: &InpaintContext<'_>) -> Result<LabelMap> {
    check_dims(y, features)?;
    if let Some(&c) = y.data().iter().find(|&&c| c != BACKGROUND && !ctx.is_new(c)) {
        return Err(invalid(format!("current-step label holds class {c} outside C_k ∪ {{b}}")));
    }
    let old_pred = ctx.previous.predict_all(features)?;
    let mut out = y.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(old_pred.data()) {
        if !ctx.is_new(*o) {
            *o = p;
        }
    }
    Ok(out)
}

pub fn background_inpaint(y: &LabelMap, x: &Image, ctx: &InpaintContext<'_>) -> Result<LabelMap> {
    background_inpaint_features(y, &ctx.encoder.encode(x)?, ctx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeMode {
    Off,
    /// Old-class predictions on background pixels fall back to background.
    #[default]
    Constrained,
    /// Background pixels take the current model's raw argmax.
    Unconstrained,
}

impl std::str::FromStr for KnowledgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" | "none" => Ok(Self::Off),
            "on" | "constrained" => Ok(Self::Constrained),
            "unconstrained" => Ok(Self::Unconstrained),
            other => Err(invalid(format!("unknown knowledge-inpaint mode {other:?}"))),
        }
    }
}

/// Knowledge inpainting on precomputed features. `mode` must not be `Off`.
pub fn knowledge_inpaint_features(
    y_rp: &LabelMap,
    features: &FeatureMap,
    ctx: &InpaintContext<'_>,
    mode: KnowledgeMode,
) -> Result<LabelMap> {
    check_dims(y_rp, features)?;
    if mode == KnowledgeMode::Off {
        return Err(invalid("knowledge inpainting is switched off"));
    }
    if let Some(&c) = y_rp.data().iter().find(|&&c| ctx.is_new(c)) {
        return Err(invalid(format!("replay label already holds current class {c}")));
    }
    if let Some(&c) = y_rp.data().iter().find(|&&c| c != BACKGROUND && !ctx.is_old_foreground(c)) {
        return Err(Error::UnknownClass(c));
    }
    let y_max = ctx.current.predict_all(features)?;
    let mut out = y_rp.clone();
    for (o, &m) in out.data_mut().iter_mut().zip(y_max.data()) {
        if ctx.is_old_foreground(*o) {
            continue;
        }
        *o = if ctx.is_new(m) || mode == KnowledgeMode::Unconstrained {
            m
        } else {
            BACKGROUND
        };
    }
    Ok(out)
}

pub fn knowledge_inpaint(y_rp: &LabelMap, x: &Image, ctx: &InpaintContext<'_>, mode: KnowledgeMode) -> Result<LabelMap> {
    knowledge_inpaint_features(y_rp, &ctx.encoder.encode(x)?, ctx, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::FEATURE_DIM;

    fn feature_map(h: usize, w: usize) -> FeatureMap {
        let data = (0..h * w * FEATURE_DIM).map(|i| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect();
        FeatureMap::new(h, w, FEATURE_DIM, data).unwrap()
    }

    /// Head whose argmax is `winner` everywhere.
    fn biased(classes: &[ClassId], winner: ClassId) -> DecoderHead {
        let head = DecoderHead::zeroed(classes, FEATURE_DIM).unwrap();
        let mut bias = vec![0.0; classes.len()];
        bias[head.index_of(winner).unwrap()] = 1.0;
        DecoderHead::from_parts(head.classes().to_vec(), FEATURE_DIM, head.weights().to_vec(), bias, true).unwrap()
    }

    #[test]
    fn fully_new_labels_are_untouched() {
        let enc = Encoder::new(16, 16);
        let prev = DecoderHead::zeroed(&[0, 1, 2], FEATURE_DIM).unwrap();
        let cur = prev.expand(&[3]).unwrap();
        let ctx = InpaintContext::new(&enc, &prev, &cur, &[3]).unwrap();
        let y = LabelMap::new(4, 4, vec![3; 16]).unwrap();
        assert_eq!(background_inpaint_features(&y, &feature_map(4, 4), &ctx).unwrap(), y);
    }

    #[test]
    fn zero_previous_model_fills_lowest_old_class() {
        let enc = Encoder::new(16, 16);
        let prev = DecoderHead::zeroed(&[0, 1, 2], FEATURE_DIM).unwrap();
        let cur = prev.expand(&[3]).unwrap();
        let ctx = InpaintContext::new(&enc, &prev, &cur, &[3]).unwrap();
        let y = LabelMap::background(4, 4);
        let out = background_inpaint_features(&y, &feature_map(4, 4), &ctx).unwrap();
        assert!(out.data().iter().all(|&c| c == BACKGROUND));
        let prev = biased(&[0, 1, 2], 2);
        let cur = prev.expand(&[3]).unwrap();
        let ctx = InpaintContext::new(&enc, &prev, &cur, &[3]).unwrap();
        let out = background_inpaint_features(&y, &feature_map(4, 4), &ctx).unwrap();
        assert!(out.data().iter().all(|&c| c == 2));
    }

    #[test]
    fn background_inpaint_rejects_old_labels_in_input() {
        let enc = Encoder::new(16, 16);
        let prev = DecoderHead::zeroed(&[0, 1], FEATURE_DIM).unwrap();
        let cur = prev.expand(&[2]).unwrap();
        let ctx = InpaintContext::new(&enc, &prev, &cur, &[2]).unwrap();
        let y = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        assert!(background_inpaint_features(&y, &feature_map(2, 2), &ctx).is_err());
    }

    #[test]
    fn knowledge_cases() {
        let enc = Encoder::new(16, 16);
        let prev = DecoderHead::zeroed(&[0, 1, 2], FEATURE_DIM).unwrap();
        let y = LabelMap::new(1, 2, vec![1, 0]).unwrap();
        let f = feature_map(1, 2);

        // current model predicts a new class everywhere
        let cur = biased(&[0, 1, 2, 3], 3);
        let ctx = InpaintContext::new(&enc, &prev, &cur, &[3]).unwrap();
        let out = knowledge_inpaint_features(&y, &f, &ctx, KnowledgeMode::Constrained).unwrap();
        assert_eq!(out.data(), &[1, 3]);

        // current model predicts an old class everywhere
        let cur = biased(&[0, 1, 2, 3], 2);
        let ctx = InpaintContext::new(&enc, &prev, &cur, &[3]).unwrap();
        let out = knowledge_inpaint_features(&y, &f, &ctx, KnowledgeMode::Constrained).unwrap();
        assert_eq!(out.data(), &[1, 0]);
        let out = knowledge_inpaint_features(&y, &f, &ctx, KnowledgeMode::Unconstrained).unwrap();
        assert_eq!(out.data(), &[1, 2]);
        assert!(knowledge_inpaint_features(&y, &f, &ctx, KnowledgeMode::Off).is_err());

        let bad = LabelMap::new(1, 2, vec![3, 0]).unwrap();
        assert!(knowledge_inpaint_features(&bad, &f, &ctx, KnowledgeMode::Constrained).is_err());
    }

    #[test]
    fn context_rejects_inconsistent_class_sets() {
        let enc = Encoder::new(16, 16);
        let prev = DecoderHead::zeroed(&[0, 1, 2], FEATURE_DIM).unwrap();
        let cur = prev.expand(&[3]).unwrap();
        assert!(InpaintContext::new(&enc, &prev, &cur, &[2]).is_err());
        assert!(InpaintContext::new(&enc, &prev, &cur, &[4]).is_err());
        assert!(InpaintContext::new(&enc, &prev, &cur, &[]).is_err());
    }
}
