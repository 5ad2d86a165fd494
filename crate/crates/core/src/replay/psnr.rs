use crate::error::{invalid, Error, Result};
use crate::image::Image;

const BLOCK: usize = 8;

/// Peak signal-to-noise ratio in dB for unit-range intensities.
/// Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", a.height(), a.width()),
            actual: format!("{}x{}", b.height(), b.width()),
        });
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Per-channel 8×8 block means with their share of all values. Jensen's
/// inequality makes `Σ w_B (μa_B − μb_B)²` a lower bound on the MSE.
#[derive(Debug, Clone)]
struct BlockSignature {
    height: usize,
    width: usize,
    means: Vec<f64>,
    weights: Vec<f64>,
}

impl BlockSignature {
    fn new(image: &Image) -> Self {
        let (h, w) = (image.height(), image.width());
        let (by, bx) = (h.div_ceil(BLOCK), w.div_ceil(BLOCK));
        let mut sums = vec![0f64; by * bx * 3];
        let mut counts = vec![0usize; by * bx];
        for y in 0..h {
            for x in 0..w {
                let b = (y / BLOCK) * bx + x / BLOCK;
                counts[b] += 1;
                let p = image.get(y, x);
                for c in 0..3 {
                    sums[b * 3 + c] += p[c] as f64;
                }
            }
        }
        let total = (h * w * 3) as f64;
        let means = sums
            .iter()
            .enumerate()
            .map(|(i, s)| s / counts[i / 3] as f64)
            .collect();
        let weights = counts.iter().map(|&n| n as f64 / total).collect();
        Self {
            height: h,
            width: w,
            means,
            weights,
        }
    }

    fn mse_lower_bound(&self, other: &Self) -> f64 {
        self.means
            .iter()
            .zip(&other.means)
            .enumerate()
            .map(|(i, (a, b))| self.weights[i / 3] * (a - b).powi(2))
            .sum()
    }
}

/// Greedy PSNR deduplication as an ordered fold: each offered image is
/// compared against every image kept so far.
#[derive(Debug, Clone)]
pub struct Deduplicator {
    threshold_db: f64,
    mse_limit: f64,
    kept: Vec<(BlockSignature, Image)>,
    exact_checks: usize,
}

impl Deduplicator {
    pub fn new(threshold_db: f64) -> Result<Self> {
        if !threshold_db.is_finite() || threshold_db <= 0.0 {
            return Err(invalid(format!("dedup threshold must be positive, got {threshold_db}")));
        }
        Ok(Self {
            threshold_db,
            mse_limit: 10f64.powf(-threshold_db / 10.0),
            kept: Vec::new(),
            exact_checks: 0,
        })
    }

    /// Returns `true` and remembers the image unless it is a duplicate of an
    /// earlier kept image (PSNR strictly above the threshold).
    pub fn offer(&mut self, image: &Image) -> Result<bool> {
        let sig = BlockSignature::new(image);
        for (other_sig, other) in &self.kept {
            if other_sig.height != sig.height || other_sig.width != sig.width {
                return Err(Error::DimensionMismatch {
                    expected: format!("{}x{}", other_sig.height, other_sig.width),
                    actual: format!("{}x{}", sig.height, sig.width),
                });
            }
            // margin absorbs rounding in the bound itself
            if sig.mse_lower_bound(other_sig) >= self.mse_limit * (1.0 + 1e-9) {
                continue;
            }
            self.exact_checks += 1;
            if psnr(image, other)? > self.threshold_db {
                return Ok(false);
            }
        }
        self.kept.push((sig, image.clone()));
        Ok(true)
    }

    pub fn kept_len(&self) -> usize {
        self.kept.len()
    }

    /// Pairs that needed a full PSNR evaluation.
    pub fn exact_checks(&self) -> usize {
        self.exact_checks
    }
}

/// Indices of the images surviving greedy deduplication, in pool order.
pub fn dedup(pool: &[Image], threshold_db: f64) -> Result<Vec<usize>> {
    let mut d = Deduplicator::new(threshold_db)?;
    let mut out = Vec::new();
    for (i, im) in pool.iter().enumerate() {
        if d.offer(im)? {
            out.push(i);
        }
    }
    Ok(out)
}
