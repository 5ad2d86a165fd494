use super::encoder::FeatureMap;
use crate::error::{invalid, Error, Result};
use crate::image::{ClassId, LabelMap};
use num_traits::Float;

/// Per-pixel linear softmax classifier over a sorted class set.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead {
    classes: Vec<ClassId>,
    dim: usize,
    /// Row-major `classes.len() × dim`.
    weights: Vec<f32>,
    bias: Vec<f32>,
    trained: bool,
}

/// Raw scores, pixel-major: `logits[p * n_classes + j]` for class `classes[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassId>,
    pub data: Vec<f32>,
}

impl LogitMap {
    pub fn pixel(&self, i: usize) -> &[f32] {
        let n = self.classes.len();
        &self.data[i * n..(i + 1) * n]
    }
}

fn sorted_unique(classes: &[ClassId]) -> Result<Vec<ClassId>> {
    let mut c = classes.to_vec();
    c.sort_unstable();
    c.dedup();
    if c.len() != classes.len() {
        return Err(invalid("duplicate class ids"));
    }
    if c.is_empty() {
        return Err(invalid("class set must be non-empty"));
    }
    Ok(c)
}

impl DecoderHead {
    pub fn zeroed(classes: &[ClassId], dim: usize) -> Result<Self> {
        let classes = sorted_unique(classes)?;
        let n = classes.len();
        Ok(Self {
            classes,
            dim,
            weights: vec![0.0; n * dim],
            bias: vec![0.0; n],
            trained: false,
        })
    }

    pub fn from_parts(
        classes: Vec<ClassId>,
        dim: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
        trained: bool,
    ) -> Result<Self> {
        let classes = sorted_unique(&classes)?;
        if weights.len() != classes.len() * dim || bias.len() != classes.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} weights, {} biases", classes.len() * dim, classes.len()),
                actual: format!("{} weights, {} biases", weights.len(), bias.len()),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite head parameters"));
        }
        Ok(Self {
            classes,
            dim,
            weights,
            bias,
            trained,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    /// Appends zero-initialized rows for `new_classes`; existing rows are
    /// kept bit-exactly.
    pub fn expand(&self, new_classes: &[ClassId]) -> Result<Self> {
        if let Some(&c) = new_classes.iter().find(|c| self.classes.contains(c)) {
            return Err(invalid(format!("class {c} already in head")));
        }
        let mut all = self.classes.clone();
        all.extend_from_slice(new_classes);
        let all = sorted_unique(&all)?;
        let mut weights = Vec::with_capacity(all.len() * self.dim);
        let mut bias = Vec::with_capacity(all.len());
        for c in &all {
            match self.index_of(*c) {
                Some(j) => {
                    weights.extend_from_slice(&self.weights[j * self.dim..(j + 1) * self.dim]);
                    bias.push(self.bias[j]);
                }
                None => {
                    weights.extend(std::iter::repeat_n(0.0, self.dim));
                    bias.push(0.0);
                }
            }
        }
        Ok(Self {
            classes: all,
            dim: self.dim,
            weights,
            bias,
            trained: self.trained,
        })
    }

    fn check_features(&self, features: &FeatureMap) -> Result<()> {
        if features.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: format!("feature dim {}", self.dim),
                actual: format!("feature dim {}", features.dim()),
            });
        }
        Ok(())
    }

    fn logits_into(&self, x: &[f32], out: &mut [f32]) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.weights[j * self.dim..(j + 1) * self.dim];
            *o = self.bias[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>();
        }
    }

    pub fn predict_logits(&self, features: &FeatureMap) -> Result<LogitMap> {
        self.check_features(features)?;
        let n = self.classes.len();
        let mut data = vec![0f32; features.pixels() * n];
        for (i, out) in data.chunks_exact_mut(n).enumerate() {
            self.logits_into(features.pixel(i), out);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite logits"));
        }
        Ok(LogitMap {
            height: features.height(),
            width: features.width(),
            classes: self.classes.clone(),
            data,
        })
    }

    /// Per-pixel argmax over `restrict` (a subset of the head's classes).
    /// Ties go to the lowest class id.
    pub fn predict_labels(&self, features: &FeatureMap, restrict: &[ClassId]) -> Result<LabelMap> {
        let logits = self.predict_logits(features)?;
        argmax_restricted(&logits, restrict)
    }

    /// Argmax over the full class set.
    pub fn predict_all(&self, features: &FeatureMap) -> Result<LabelMap> {
        let classes = self.classes.clone();
        self.predict_labels(features, &classes)
    }
}

/// Restricted argmax over precomputed logits. Ties go to the lowest class id.
pub fn argmax_restricted(logits: &LogitMap, restrict: &[ClassId]) -> Result<LabelMap> {
    if restrict.is_empty() {
        return Err(invalid("restriction set must be non-empty"));
    }
    let mut idx: Vec<(ClassId, usize)> = restrict
        .iter()
        .map(|&c| {
            logits
                .classes
                .binary_search(&c)
                .map(|j| (c, j))
                .map_err(|_| Error::UnknownClass(c))
        })
        .collect::<Result<_>>()?;
    idx.sort_unstable();
    idx.dedup();
    let pixels = logits.height * logits.width;
    let labels = (0..pixels)
        .map(|p| {
            let row = logits.pixel(p);
            let mut best = idx[0];
            for &(c, j) in &idx[1..] {
                if row[j] > row[best.1] {
                    best = (c, j);
                }
            }
            best.0
        })
        .collect();
    LabelMap::new(logits.height, logits.width, labels)
}

/// Mean softmax cross-entropy over `targets` (class indices into the rows of
/// `weights`) and, when `grad` is given, its gradient with respect to the
/// weights and biases. Generic so gradient checks can run in `f64`.
pub(crate) fn softmax_xent<T: Float>(
    weights: &[T],
    bias: &[T],
    dim: usize,
    feats: &[T],
    targets: &[usize],
    mut grad: Option<(&mut [T], &mut [T])>,
) -> T {
    let n_cls = bias.len();
    let n = targets.len();
    if let Some((gw, gb)) = grad.as_mut() {
        gw.iter_mut().for_each(|g| *g = T::zero());
        gb.iter_mut().for_each(|g| *g = T::zero());
    }
    let inv_n = T::one() / T::from(n.max(1)).unwrap();
    let mut logits = vec![T::zero(); n_cls];
    let mut total = T::zero();
    for (p, &t) in targets.iter().enumerate() {
        let x = &feats[p * dim..(p + 1) * dim];
        for (j, l) in logits.iter_mut().enumerate() {
            let row = &weights[j * dim..(j + 1) * dim];
            *l = row
                .iter()
                .zip(x)
                .fold(bias[j], |acc, (&w, &v)| acc + w * v);
        }
        let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z = z + *l;
        }
        // logits now hold unnormalized probabilities
        total = total - (logits[t] / z).ln();
        if let Some((gw, gb)) = grad.as_mut() {
            for j in 0..n_cls {
                let mut d = logits[j] / z;
                if j == t {
                    d = d - T::one();
                }
                let d = d * inv_n;
                gb[j] = gb[j] + d;
                let row = &mut gw[j * dim..(j + 1) * dim];
                for (g, &v) in row.iter_mut().zip(x) {
                    *g = *g + d * v;
                }
            }
        }
    }
    total * inv_n
}

/// Mean over pixels of `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &LogitMap, target: &LabelMap) -> Result<f64> {
    if target.height() != logits.height || target.width() != logits.width {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", logits.height, logits.width),
            actual: format!("{}x{}", target.height(), target.width()),
        });
    }
    let mut total = 0f64;
    for (p, &c) in target.data().iter().enumerate() {
        let t = logits
            .classes
            .binary_search(&c)
            .map_err(|_| Error::UnknownClass(c))?;
        let row = logits.pixel(p);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[t] as f64;
    }
    Ok(total / target.pixels() as f64)
}
