use crate::error::{invalid, Error, Result};
use crate::image::{ClassId, LabelMap};

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: ClassId, pred: ClassId) -> u64 {
        self.counts[truth as usize * self.n + pred as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", truth.height(), truth.width()),
                actual: format!("{}x{}", pred.height(), pred.width()),
            });
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if p as usize >= self.n {
                return Err(Error::UnknownClass(p));
            }
            if t as usize >= self.n {
                return Err(Error::UnknownClass(t));
            }
            self.counts[t as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(invalid(format!("cannot merge {}-class and {}-class matrices", self.n, other.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs in
    /// either prediction or truth.
    pub fn iou(&self, class: ClassId) -> Option<f64> {
        let c = class as usize;
        if c >= self.n {
            return None;
        }
        let tp = self.counts[c * self.n + c];
        let fn_: u64 = (0..self.n).map(|j| self.counts[c * self.n + j]).sum::<u64>() - tp;
        let fp: u64 = (0..self.n).map(|i| self.counts[i * self.n + c]).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        (union > 0).then(|| tp as f64 / union as f64)
    }
}

pub fn confusion(preds: &[LabelMap], truths: &[LabelMap], num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(invalid(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            truths.len()
        )));
    }
    let mut m = ConfusionMatrix::new(num_classes);
    for (p, t) in preds.iter().zip(truths) {
        m.add(p, t)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Miou {
    pub value: f64,
    /// Classes dropped from the mean because their union was empty.
    pub excluded: Vec<ClassId>,
}

pub fn miou(m: &ConfusionMatrix, subset: &[ClassId]) -> Result<Miou> {
    if subset.is_empty() {
        return Err(invalid("mIoU over an empty class set"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = Vec::new();
    for &c in subset {
        match m.iou(c) {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => excluded.push(c),
        }
    }
    if n == 0 {
        return Err(invalid(format!("no class of {subset:?} occurs in prediction or truth")));
    }
    Ok(Miou {
        value: sum / n as f64,
        excluded,
    })
}

/// `joint_all - incr_all`, signed.
pub fn delta(joint_all: f64, incr_all: f64) -> f64 {
    joint_all - incr_all
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(v: &[ClassId]) -> LabelMap {
        LabelMap::new(2, 2, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let a = map(&[0, 1, 2, 2]);
        let m = confusion(std::slice::from_ref(&a), std::slice::from_ref(&a), 3).unwrap();
        assert_eq!(m.get(2, 2), 2);
        assert_eq!(m.get(0, 1), 0);
        assert_eq!(miou(&m, &[0, 1, 2]).unwrap().value, 1.0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        let pred = map(&[0, 1, 1, 0]);
        let truth = map(&[0, 0, 1, 1]);
        let m = confusion(&[pred], &[truth], 2).unwrap();
        assert_eq!((m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1)), (1, 1, 1, 1));
        assert_eq!(m.iou(0), Some(1.0 / 3.0));
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn disjoint_predictions_score_zero_and_absent_classes_are_excluded() {
        let m = confusion(&[map(&[1, 1, 1, 1])], &[map(&[0, 0, 0, 0])], 4).unwrap();
        let r = miou(&m, &[0, 1, 3]).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.excluded, vec![3]);
        assert!(miou(&m, &[3]).is_err());
        assert!(miou(&m, &[]).is_err());
    }

    #[test]
    fn shape_and_class_errors() {
        let small = LabelMap::background(1, 1);
        assert!(confusion(&[small], &[map(&[0; 4])], 2).is_err());
        assert!(confusion(&[map(&[5; 4])], &[map(&[0; 4])], 2).is_err());
        assert!(confusion(&[], &[map(&[0; 4])], 2).is_err());
    }

    #[test]
    fn delta_values() {
        assert!((delta(0.755, 0.623) - 0.132).abs() < 1e-12);
        assert!((delta(0.754, 0.578) - 0.176).abs() < 1e-12);
        assert_eq!(delta(0.5, 0.5), 0.0);
    }

    fn maps(n: usize) -> impl Strategy<Value = Vec<(Vec<ClassId>, Vec<ClassId>)>> {
        prop::collection::vec(
            (prop::collection::vec(0u8..4, 4), prop::collection::vec(0u8..4, 4)),
            n,
        )
    }

    proptest! {
        #[test]
        fn additive_and_order_free(parts in maps(6), split in 0usize..6) {
            let preds: Vec<LabelMap> = parts.iter().map(|(p, _)| map(p)).collect();
            let truths: Vec<LabelMap> = parts.iter().map(|(_, t)| map(t)).collect();
            let whole = confusion(&preds, &truths, 4).unwrap();
            let mut a = confusion(&preds[..split], &truths[..split], 4).unwrap();
            a.merge(&confusion(&preds[split..], &truths[split..], 4).unwrap()).unwrap();
            prop_assert_eq!(&a, &whole);
            let rev = confusion(
                &preds.iter().rev().cloned().collect::<Vec<_>>(),
                &truths.iter().rev().cloned().collect::<Vec<_>>(),
                4,
            ).unwrap();
            prop_assert_eq!(rev, whole);
        }

        #[test]
        fn miou_matches_scalar_oracle(parts in maps(3)) {
            let preds: Vec<LabelMap> = parts.iter().map(|(p, _)| map(p)).collect();
            let truths: Vec<LabelMap> = parts.iter().map(|(_, t)| map(t)).collect();
            let m = confusion(&preds, &truths, 4).unwrap();
            let mut ious = Vec::new();
            for c in 0..4u8 {
                let (mut tp, mut union) = (0, 0);
                for (p, t) in preds.iter().zip(&truths) {
                    for (&a, &b) in p.data().iter().zip(t.data()) {
                        tp += (a == c && b == c) as u32;
                        union += (a == c || b == c) as u32;
                    }
                }
                if union > 0 {
                    ious.push(tp as f64 / union as f64);
                }
            }
            let expected = ious.iter().sum::<f64>() / ious.len() as f64;
            prop_assert!((miou(&m, &[0, 1, 2, 3]).unwrap().value - expected).abs() < 1e-12);
        }
    }
}
