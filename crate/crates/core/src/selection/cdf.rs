use crate::error::{invalid, Result};
use crate::image::{ClassId, LabelMap};
use crate::replay::ReplaySample;
use crate::shapeworld::TaskDataset;
use serde::{Deserialize, Serialize};

/// Area used by the fixed-threshold ablation.
pub const FIXED_THRESHOLD: f64 = 0.25;

/// Empirical distribution of per-image class pixel fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    class: ClassId,
    values: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn from_values(class: ClassId, mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid(format!("no samples for class {class}")));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("fraction {v} outside [0,1]")));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { class, values })
    }

    pub fn class(&self) -> ClassId {
        self.class
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `F(x)`: share of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.values.partition_point(|&v| v <= x) as f64 / self.values.len() as f64
    }

    /// Smallest sample `v` with `F(v) >= p`, for `p` in `(0, 1]`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(invalid(format!("quantile level {p} outside (0,1]")));
        }
        let n = self.values.len();
        let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
        Ok(self.values[rank - 1])
    }
}

/// One pixel-fraction sample per label map that contains `class`.
pub fn class_size_cdf_from_labels<'a, I>(labels: I, class: ClassId) -> Result<EmpiricalCdf>
where
    I: IntoIterator<Item = &'a LabelMap>,
{
    let values: Vec<f64> = labels
        .into_iter()
        .filter(|l| l.contains(class))
        .map(|l| l.fraction(class))
        .collect();
    if values.is_empty() {
        return Err(invalid(format!("no image contains class {class}")));
    }
    EmpiricalCdf::from_values(class, values)
}

/// CDF of `class` over the visible labels of `dataset`.
pub fn class_size_cdf(dataset: &TaskDataset, class: ClassId) -> Result<EmpiricalCdf> {
    class_size_cdf_from_labels(dataset.samples.iter().map(|s| &s.label), class)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeThreshold {
    pub class: ClassId,
    pub t_size: f64,
}

impl SizeThreshold {
    pub fn fixed(class: ClassId, t_size: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t_size) {
            return Err(invalid(format!("size threshold {t_size} outside [0,1]")));
        }
        Ok(Self { class, t_size })
    }

    pub fn passes(&self, labels: &LabelMap) -> bool {
        labels.fraction(self.class) >= self.t_size
    }
}

/// Lower empirical median: the smallest sample with `F(v) >= 0.5`.
pub fn size_threshold(cdf: &EmpiricalCdf) -> SizeThreshold {
    SizeThreshold {
        class: cdf.class,
        t_size: cdf.quantile(0.5).expect("0.5 is a valid level"),
    }
}

/// Keeps samples whose pseudo-label covers at least `t.t_size` of the image
/// with class `class`.
pub fn semantic_filter(samples: Vec<ReplaySample>, class: ClassId, t: &SizeThreshold) -> Result<Vec<ReplaySample>> {
    if t.class != class {
        return Err(invalid(format!(
            "threshold is for class {}, filter asked for class {class}",
            t.class
        )));
    }
    Ok(samples.into_iter().filter(|s| t.passes(&s.pseudo)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticRule {
    None,
    /// Per-class lower median of the training CDF.
    #[default]
    Cdf,
    /// One fixed area fraction for every class.
    Fixed,
}

impl std::str::FromStr for SemanticRule {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "off" => Ok(Self::None),
            "cdf" | "cth" => Ok(Self::Cdf),
            "fixed" | "fth" => Ok(Self::Fixed),
            other => Err(invalid(format!("unknown semantic rule {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn step_function_values() {
        let cdf = EmpiricalCdf::from_values(2, vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        assert_eq!(cdf.eval(0.25), 0.5);
        assert_eq!(cdf.eval(0.0), 0.0);
        assert_eq!(cdf.eval(1.0), 1.0);
        assert_eq!(cdf.eval(0.4), 1.0);
    }

    #[test]
    fn degenerate_cdf_steps_once() {
        let cdf = EmpiricalCdf::from_values(1, vec![0.3; 5]).unwrap();
        assert_eq!(cdf.eval(0.299), 0.0);
        assert_eq!(cdf.eval(0.3), 1.0);
        assert_eq!(size_threshold(&cdf).t_size, 0.3);
    }

    #[test]
    fn lower_median_convention() {
        let odd = EmpiricalCdf::from_values(1, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(size_threshold(&odd).t_size, 0.2);
        let even = EmpiricalCdf::from_values(1, vec![0.3, 0.1]).unwrap();
        assert_eq!(size_threshold(&even).t_size, 0.1);
    }

    #[test]
    fn rejects_missing_class_and_bad_values() {
        let l = LabelMap::background(4, 4);
        assert!(class_size_cdf_from_labels([&l], 3).is_err());
        assert!(EmpiricalCdf::from_values(1, vec![1.5]).is_err());
    }

    #[test]
    fn images_without_the_class_contribute_nothing() {
        let mut a = LabelMap::background(2, 2);
        a.set(0, 0, 5);
        let b = LabelMap::background(2, 2);
        let cdf = class_size_cdf_from_labels([&a, &b], 5).unwrap();
        assert_eq!(cdf.values(), &[0.25]);
    }

    proptest! {
        #[test]
        fn threshold_is_sorted_element_at_ceil_half(values in prop::collection::vec(0.0f64..=1.0, 1..60)) {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let idx = n.div_ceil(2) - 1;
            let cdf = EmpiricalCdf::from_values(1, values).unwrap();
            prop_assert_eq!(size_threshold(&cdf).t_size, sorted[idx]);
            prop_assert!(cdf.eval(sorted[idx]) >= 0.5);
        }

        #[test]
        fn cdf_is_monotone(values in prop::collection::vec(0.0f64..=1.0, 1..40), xs in prop::collection::vec(0.0f64..=1.0, 2)) {
            let cdf = EmpiricalCdf::from_values(1, values).unwrap();
            let (lo, hi) = if xs[0] <= xs[1] { (xs[0], xs[1]) } else { (xs[1], xs[0]) };
            prop_assert!(cdf.eval(lo) <= cdf.eval(hi));
            prop_assert_eq!(cdf.eval(1.0), 1.0);
        }
    }
}
