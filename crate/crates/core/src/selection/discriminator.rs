use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng;
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// 64 joint color-histogram bins, 3 channel means, 3 channel deviations and
/// one edge density.
pub const DISC_FEATURE_DIM: usize = 71;
const BINS: usize = 4;
const EDGE_THRESHOLD: f32 = 0.1;

/// Fixed image statistics fed to the discriminator. The histogram entries are
/// square roots of bin frequencies so sparse bins still register.
pub fn disc_features(image: &Image) -> Vec<f32> {
    let n = image.pixels();
    let mut hist = [0u32; BINS * BINS * BINS];
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for px in image.data().chunks_exact(3) {
        let bin = |v: f32| ((v * BINS as f32) as usize).min(BINS - 1);
        hist[(bin(px[0]) * BINS + bin(px[1])) * BINS + bin(px[2])] += 1;
        for c in 0..3 {
            sum[c] += px[c] as f64;
            sq[c] += (px[c] as f64).powi(2);
        }
    }
    let mut out = Vec::with_capacity(DISC_FEATURE_DIM);
    out.extend(hist.iter().map(|&h| (h as f64 / n as f64).sqrt() as f32));
    let means: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    out.extend(means.iter().map(|&m| m as f32));
    out.extend(
        sq.iter()
            .zip(&means)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt() as f32),
    );
    out.push(edge_density(image));
    out
}

fn edge_density(image: &Image) -> f32 {
    let (h, w) = (image.height(), image.width());
    let luma = |y: usize, x: usize| {
        let p = image.get(y, x);
        (p[0] + p[1] + p[2]) / 3.0
    };
    let mut edges = 0usize;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let c = luma(y, x);
            if (luma(y, x + 1) - c).abs() + (luma(y + 1, x) - c).abs() > EDGE_THRESHOLD {
                edges += 1;
            }
        }
    }
    edges as f32 / ((h - 1) * (w - 1)) as f32
}

/// Logit pair `(z_p, z_rp)`: evidence that an image belongs to the training
/// distribution versus the web distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscScore {
    pub z_p: f32,
    pub z_rp: f32,
}

impl DiscScore {
    /// Strictly more in-distribution than web-like.
    pub fn fools(&self) -> bool {
        self.z_p > self.z_rp
    }

    pub fn is_core(&self, rule: &CoreSetRule) -> bool {
        self.z_p as f64 > rule.alpha * self.z_rp as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreSetRule {
    pub alpha: f64,
}

impl Default for CoreSetRule {
    fn default() -> Self {
        Self { alpha: 100.0 }
    }
}

impl CoreSetRule {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 1.0 {
            return Err(invalid(format!("core-set alpha must exceed 1, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

/// Indices whose scores fool the discriminator (`z_p > z_rp`), in order.
pub fn adversarial_select(scores: &[DiscScore]) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i].fools()).collect()
}

/// Indices with `z_p > alpha * z_rp`, in order.
pub fn core_select(scores: &[DiscScore], rule: &CoreSetRule) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i].is_core(rule)).collect()
}

/// Two-layer perceptron over [`disc_features`] with rectified outputs.
/// Parameters are stored flat as `[w1 (hidden × D), b1, w2 (2 × hidden), b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    hidden: usize,
    params: Vec<f32>,
}

pub(crate) fn param_count(hidden: usize) -> usize {
    hidden * DISC_FEATURE_DIM + hidden + 2 * hidden + 2
}

impl Discriminator {
    pub fn zeroed(hidden: usize) -> Result<Self> {
        Self::from_params(hidden, vec![0.0; param_count(hidden)])
    }

    /// Small random first layer and positive output biases so both outputs
    /// start in the rectifier's active region.
    pub fn initialized(hidden: usize, seed: u64) -> Result<Self> {
        let mut d = Self::zeroed(hidden)?;
        let mut rng = rng::stream(seed, "disc-init", &[hidden as u64]);
        let s1 = (6.0 / DISC_FEATURE_DIM as f32).sqrt();
        let s2 = (6.0 / hidden as f32).sqrt() * 0.1;
        let (w1, rest) = d.params.split_at_mut(hidden * DISC_FEATURE_DIM);
        w1.iter_mut().for_each(|w| *w = rng.gen_range(-s1..s1));
        let (b1, rest) = rest.split_at_mut(hidden);
        b1.iter_mut().for_each(|b| *b = 0.1);
        let (w2, b2) = rest.split_at_mut(2 * hidden);
        w2.iter_mut().for_each(|w| *w = rng.gen_range(-s2..s2));
        b2.iter_mut().for_each(|b| *b = 1.0);
        Ok(d)
    }

    pub fn from_params(hidden: usize, params: Vec<f32>) -> Result<Self> {
        if hidden == 0 {
            return Err(invalid("discriminator needs at least one hidden unit"));
        }
        if params.len() != param_count(hidden) {
            return Err(Error::DimensionMismatch {
                expected: format!("{} parameters", param_count(hidden)),
                actual: format!("{} parameters", params.len()),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("non-finite discriminator parameter"));
        }
        Ok(Self { hidden, params })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn score_features(&self, features: &[f32]) -> Result<DiscScore> {
        if features.len() != DISC_FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: format!("{DISC_FEATURE_DIM} features"),
                actual: format!("{} features", features.len()),
            });
        }
        let z = forward(&self.params, self.hidden, features, &mut vec![0.0; self.hidden]);
        Ok(DiscScore { z_p: z[0], z_rp: z[1] })
    }

    pub fn score(&self, image: &Image) -> DiscScore {
        self.score_features(&disc_features(image))
            .expect("feature extractor emits DISC_FEATURE_DIM values")
    }
}

pub fn disc_score(d: &Discriminator, image: &Image) -> DiscScore {
    d.score(image)
}

/// Images with `z_p > z_rp`, order preserved.
pub fn adversarial_filter<'a>(d: &Discriminator, pool: &'a [Image]) -> Vec<&'a Image> {
    pool.iter().filter(|im| d.score(im).fools()).collect()
}

/// Images with `z_p > alpha * z_rp`, order preserved.
pub fn core_set<'a>(d: &Discriminator, pool: &'a [Image], rule: &CoreSetRule) -> Vec<&'a Image> {
    pool.iter().filter(|im| d.score(im).is_core(rule)).collect()
}

fn forward<T: Float>(params: &[T], hidden: usize, x: &[T], h: &mut [T]) -> [T; 2] {
    let d = x.len();
    let (w1, rest) = params.split_at(hidden * d);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(2 * hidden);
    for (j, hj) in h.iter_mut().enumerate() {
        let a = w1[j * d..(j + 1) * d]
            .iter()
            .zip(x)
            .fold(b1[j], |acc, (&w, &v)| acc + w * v);
        *hj = a.max(T::zero());
    }
    let mut z = [T::zero(); 2];
    for (o, zo) in z.iter_mut().enumerate() {
        let a = w2[o * hidden..(o + 1) * hidden]
            .iter()
            .zip(h.iter())
            .fold(b2[o], |acc, (&w, &v)| acc + w * v);
        *zo = a.max(T::zero());
    }
    z
}

/// Mean two-way cross-entropy of `softmax(z_p, z_rp)` against `targets`
/// (0 = training distribution, 1 = web) and, optionally, its gradient.
pub(crate) fn mlp_xent<T: Float>(
    params: &[T],
    hidden: usize,
    dim: usize,
    xs: &[T],
    targets: &[usize],
    mut grad: Option<&mut [T]>,
) -> T {
    let n = targets.len();
    let inv_n = T::one() / T::from(n.max(1)).unwrap();
    if let Some(g) = grad.as_mut() {
        g.iter_mut().for_each(|v| *v = T::zero());
    }
    let w2_off = hidden * dim + hidden;
    let mut h = vec![T::zero(); hidden];
    let mut dh = vec![T::zero(); hidden];
    let mut total = T::zero();
    for (p, &t) in targets.iter().enumerate() {
        let x = &xs[p * dim..(p + 1) * dim];
        let z = forward(params, hidden, x, &mut h);
        let m = z[0].max(z[1]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp()];
        let s = e[0] + e[1];
        total = total - (e[t] / s).ln();
        let Some(g) = grad.as_mut() else { continue };
        // d loss / d pre-activation of each output; zero where the rectifier is off
        let mut dz = [T::zero(); 2];
        for o in 0..2 {
            if z[o] > T::zero() {
                let prob = e[o] / s;
                dz[o] = (if o == t { prob - T::one() } else { prob }) * inv_n;
            }
        }
        dh.iter_mut().for_each(|v| *v = T::zero());
        for o in 0..2 {
            if dz[o] == T::zero() {
                continue;
            }
            g[w2_off + 2 * hidden + o] = g[w2_off + 2 * hidden + o] + dz[o];
            for j in 0..hidden {
                let wi = w2_off + o * hidden + j;
                g[wi] = g[wi] + dz[o] * h[j];
                dh[j] = dh[j] + dz[o] * params[wi];
            }
        }
        for j in 0..hidden {
            if h[j] <= T::zero() || dh[j] == T::zero() {
                continue;
            }
            g[hidden * dim + j] = g[hidden * dim + j] + dh[j];
            let row = &mut g[j * dim..(j + 1) * dim];
            for (gv, &xv) in row.iter_mut().zip(x) {
                *gv = *gv + dh[j] * xv;
            }
        }
    }
    total * inv_n
}

/// Loss and gradient of [`mlp_xent`] in `f64`, for finite-difference checks.
pub fn disc_loss_grad_f64(
    params: &[f64],
    hidden: usize,
    xs: &[f64],
    targets: &[usize],
) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; params.len()];
    let loss = mlp_xent(params, hidden, DISC_FEATURE_DIM, xs, targets, Some(&mut g));
    (loss, g)
}

pub fn disc_loss_f64(params: &[f64], hidden: usize, xs: &[f64], targets: &[usize]) -> f64 {
    mlp_xent(params, hidden, DISC_FEATURE_DIM, xs, targets, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscSchedule {
    pub initial_lr: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    /// Training stops once held-out accuracy exceeds this value.
    pub accuracy_ceiling: Option<f64>,
    pub seed: u64,
}

impl Default for DiscSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 0.2,
            decay: 0.8,
            decay_every: 2,
            epochs: 10,
            batch_size: 16,
            holdout_fraction: 0.2,
            accuracy_ceiling: Some(0.9),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscTrainReport {
    pub holdout_accuracy: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub epoch_losses: Vec<f64>,
    pub train_size: usize,
    pub holdout_size: usize,
}

fn split_holdout(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "disc-holdout", &[n as u64]));
    let mut h = (n as f64 * fraction).round() as usize;
    if n >= 2 {
        h = h.clamp(1, n - 1);
    } else {
        h = 0;
    }
    let train = order.split_off(h);
    (train, order)
}

fn accuracy(d: &Discriminator, pos: &[&[f32]], neg: &[&[f32]]) -> Result<f64> {
    let mut correct = 0usize;
    for f in pos {
        correct += d.score_features(f)?.fools() as usize;
    }
    for f in neg {
        correct += !d.score_features(f)?.fools() as usize;
    }
    Ok(correct as f64 / (pos.len() + neg.len()).max(1) as f64)
}

/// SGD on the two-way cross-entropy with a step-decayed learning rate.
/// A seeded fraction of each class is held out to measure accuracy.
pub fn train_discriminator(
    d: &Discriminator,
    positives: &[Vec<f32>],
    negatives: &[Vec<f32>],
    schedule: &DiscSchedule,
) -> Result<(Discriminator, DiscTrainReport)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(invalid("discriminator training needs both positives and negatives"));
    }
    if let Some(bad) = positives.iter().chain(negatives).find(|f| f.len() != DISC_FEATURE_DIM) {
        return Err(Error::DimensionMismatch {
            expected: format!("{DISC_FEATURE_DIM} features"),
            actual: format!("{} features", bad.len()),
        });
    }
    if !(0.0..1.0).contains(&schedule.holdout_fraction) || schedule.batch_size == 0 || schedule.decay_every == 0 {
        return Err(invalid("invalid discriminator schedule"));
    }
    let (pos_train, pos_hold) = split_holdout(positives.len(), schedule.holdout_fraction, schedule.seed);
    let (neg_train, neg_hold) = split_holdout(negatives.len(), schedule.holdout_fraction, schedule.seed);
    let hold_p: Vec<&[f32]> = pos_hold.iter().map(|&i| positives[i].as_slice()).collect();
    let hold_n: Vec<&[f32]> = neg_hold.iter().map(|&i| negatives[i].as_slice()).collect();
    let mut train: Vec<(&[f32], usize)> = pos_train
        .iter()
        .map(|&i| (positives[i].as_slice(), 0))
        .chain(neg_train.iter().map(|&i| (negatives[i].as_slice(), 1)))
        .collect();
    let (eval_p, eval_n) = if hold_p.is_empty() && hold_n.is_empty() {
        (
            pos_train.iter().map(|&i| positives[i].as_slice()).collect(),
            neg_train.iter().map(|&i| negatives[i].as_slice()).collect(),
        )
    } else {
        (hold_p, hold_n)
    };

    let mut out = d.clone();
    let mut rng = rng::stream(schedule.seed, "disc-train", &[]);
    let mut grad = vec![0f32; out.params.len()];
    let mut xs = Vec::with_capacity(schedule.batch_size * DISC_FEATURE_DIM);
    let mut ts = Vec::with_capacity(schedule.batch_size);
    let mut report = DiscTrainReport {
        holdout_accuracy: accuracy(&out, &eval_p, &eval_n)?,
        epochs_run: 0,
        stopped_early: false,
        epoch_losses: Vec::new(),
        train_size: train.len(),
        holdout_size: eval_p.len() + eval_n.len(),
    };
    let mut step = 0usize;
    for epoch in 0..schedule.epochs {
        let lr = (schedule.initial_lr * schedule.decay.powi((epoch / schedule.decay_every) as i32)) as f32;
        train.shuffle(&mut rng);
        let mut epoch_loss = 0f64;
        for chunk in train.chunks(schedule.batch_size) {
            xs.clear();
            ts.clear();
            for (f, t) in chunk {
                xs.extend_from_slice(f);
                ts.push(*t);
            }
            let loss = mlp_xent(&out.params, out.hidden, DISC_FEATURE_DIM, &xs, &ts, Some(&mut grad)) as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            for (p, g) in out.params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            epoch_loss += loss * chunk.len() as f64;
            step += 1;
        }
        report.epoch_losses.push(epoch_loss / train.len().max(1) as f64);
        report.epochs_run = epoch + 1;
        report.holdout_accuracy = accuracy(&out, &eval_p, &eval_n)?;
        if schedule.accuracy_ceiling.is_some_and(|c| report.holdout_accuracy > c) {
            report.stopped_early = epoch + 1 < schedule.epochs;
            break;
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cloud(n: usize, centre: f32, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = rng::stream(seed, "cloud", &[]);
        let normal = Normal::new(0.0f32, 0.15).unwrap();
        (0..n)
            .map(|_| (0..DISC_FEATURE_DIM).map(|_| centre + normal.sample(&mut rng)).collect())
            .collect()
    }

    fn constant(z_p: f32, z_rp: f32) -> Discriminator {
        let mut params = vec![0.0; param_count(4)];
        let n = params.len();
        params[n - 2] = z_p;
        params[n - 1] = z_rp;
        Discriminator::from_params(4, params).unwrap()
    }

    fn image(seed: u64) -> Image {
        let mut rng = rng::stream(seed, "img", &[]);
        Image::new(16, 16, (0..16 * 16 * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn zero_discriminator_scores_zero() {
        let d = Discriminator::zeroed(32).unwrap();
        assert_eq!(d.score(&image(1)), DiscScore { z_p: 0.0, z_rp: 0.0 });
    }

    #[test]
    fn scores_are_nonnegative() {
        for s in 0..20 {
            let z = Discriminator::initialized(32, s).unwrap().score(&image(s));
            assert!(z.z_p >= 0.0 && z.z_rp >= 0.0);
        }
    }

    #[test]
    fn constant_discriminators_keep_all_or_nothing() {
        let pool: Vec<Image> = (0..5).map(image).collect();
        assert_eq!(adversarial_filter(&constant(1.0, 0.0), &pool).len(), 5);
        assert!(adversarial_filter(&constant(0.0, 1.0), &pool).is_empty());
        assert!(adversarial_filter(&constant(1.0, 1.0), &pool).is_empty());
    }

    #[test]
    fn core_rule_arithmetic() {
        let rule = CoreSetRule::default();
        assert!(DiscScore { z_p: 5.0, z_rp: 0.01 }.is_core(&rule));
        assert!(!DiscScore { z_p: 5.0, z_rp: 0.1 }.is_core(&rule));
        assert!(CoreSetRule::new(1.0).is_err());
        assert!(CoreSetRule::new(f64::NAN).is_err());
    }

    #[test]
    fn histogram_features_ignore_pixel_order() {
        let img = image(3);
        let mut px: Vec<[f32; 3]> = img.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        px.shuffle(&mut rng::stream(0, "perm", &[]));
        let shuffled = Image::new(16, 16, px.concat()).unwrap();
        let (a, b) = (disc_features(&img), disc_features(&shuffled));
        for i in 0..70 {
            assert!((a[i] - b[i]).abs() < 1e-5, "feature {i}");
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let hidden = 6;
        let mut rng = rng::stream(9, "disc-grad", &[]);
        let params: Vec<f64> = (0..param_count(hidden)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let mut params = params;
        let n = params.len();
        params[n - 2] = 1.0;
        params[n - 1] = 1.0;
        let xs: Vec<f64> = (0..8 * DISC_FEATURE_DIM).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ts: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let (_, g) = disc_loss_grad_f64(&params, hidden, &xs, &ts);
        let eps = 1e-5;
        for _ in 0..20 {
            let i = rng.gen_range(0..n);
            let (mut p, mut m) = (params.clone(), params.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (disc_loss_f64(&p, hidden, &xs, &ts) - disc_loss_f64(&m, hidden, &xs, &ts)) / (2.0 * eps);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(err < 1e-4 || (fd - g[i]).abs() < 1e-10, "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn separable_clouds_train_past_the_ceiling() {
        let pos = cloud(100, 0.7, 1);
        let neg = cloud(100, 0.3, 2);
        let d = Discriminator::initialized(32, 0).unwrap();
        let schedule = DiscSchedule::default();
        let (trained, report) = train_discriminator(&d, &pos, &neg, &schedule).unwrap();
        assert!(report.holdout_accuracy > 0.9, "{report:?}");
        assert!(report.stopped_early, "{report:?}");
        let mut uncapped = schedule.clone();
        uncapped.accuracy_ceiling = None;
        let (_, full) = train_discriminator(&d, &pos, &neg, &uncapped).unwrap();
        assert!(full.holdout_accuracy > 0.95, "{full:?}");
        assert_eq!(full.epochs_run, 10);
        let again = train_discriminator(&d, &pos, &neg, &schedule).unwrap();
        assert_eq!(again.0, trained);
    }

    #[test]
    fn indistinguishable_sets_give_chance_accuracy() {
        let pos = cloud(100, 0.5, 4);
        let d = Discriminator::initialized(32, 1).unwrap();
        let (_, report) = train_discriminator(&d, &pos, &pos, &DiscSchedule::default()).unwrap();
        assert!((report.holdout_accuracy - 0.5).abs() <= 0.05, "{report:?}");
    }

    #[test]
    fn rejects_empty_sets() {
        let d = Discriminator::zeroed(4).unwrap();
        assert!(train_discriminator(&d, &[], &cloud(3, 0.0, 0), &DiscSchedule::default()).is_err());
    }
}
