//! Fixed local-filter encoder. Features are computed from small box and
//! gradient filters; the only fitted parameters are the per-feature
//! standardization statistics, estimated once on the step-0 training images.

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use sha2::{Digest, Sha256};

/// Number of per-pixel features.
pub const FEATURE_DIM: usize = 20;

/// Largest filter half-width; a pixel influences features only within this
/// Chebyshev distance.
pub const RECEPTIVE_RADIUS: usize = 3;

/// `height × width` grid of `dim`-dimensional feature vectors, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::DimensionMismatch {
                expected: format!("{}", height * width * dim),
                actual: format!("{}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature map contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Replicate-padded plane with a summed-area table for O(1) box sums.
struct Integral {
    w: usize,
    sums: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(plane: &[f32], h: usize, w: usize, pad: usize) -> Self {
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        let mut sums = vec![0.0; (ph + 1) * (pw + 1)];
        let mut sq = vec![0.0; (ph + 1) * (pw + 1)];
        for y in 0..ph {
            let sy = (y as isize - pad as isize).clamp(0, h as isize - 1) as usize;
            let mut row = 0.0;
            let mut row_sq = 0.0;
            for x in 0..pw {
                let sx = (x as isize - pad as isize).clamp(0, w as isize - 1) as usize;
                let v = plane[sy * w + sx] as f64;
                row += v;
                row_sq += v * v;
                let i = (y + 1) * (pw + 1) + x + 1;
                sums[i] = sums[i - (pw + 1)] + row;
                sq[i] = sq[i - (pw + 1)] + row_sq;
            }
        }
        Self { w: pw, sums, sq }
    }

    /// Sum and sum of squares over the `(2r+1)²` window centered on the
    /// unpadded pixel `(y, x)`, given the padding used at construction.
    fn window(&self, y: usize, x: usize, r: usize, pad: usize) -> (f64, f64) {
        let (y0, x0) = (y + pad - r, x + pad - r);
        let (y1, x1) = (y + pad + r + 1, x + pad + r + 1);
        let s = |t: &[f64]| {
            t[y1 * (self.w + 1) + x1] - t[y0 * (self.w + 1) + x1] - t[y1 * (self.w + 1) + x0]
                + t[y0 * (self.w + 1) + x0]
        };
        (s(&self.sums), s(&self.sq))
    }
}

/// Unnormalized local features of an image.
pub fn raw_features(image: &Image) -> FeatureMap {
    let (h, w) = (image.height(), image.width());
    let pad = RECEPTIVE_RADIUS;
    let planes: Vec<Vec<f32>> = (0..3)
        .map(|c| image.data().iter().skip(c).step_by(3).copied().collect())
        .collect();
    let luma: Vec<f32> = image
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let tables: Vec<Integral> = planes.iter().map(|p| Integral::new(p, h, w, pad)).collect();
    let lum_at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        luma[yy * w + xx]
    };

    let mut data = Vec::with_capacity(h * w * FEATURE_DIM);
    for y in 0..h {
        for x in 0..w {
            let mut mean3 = [0f32; 3];
            let mut mean7 = [0f32; 3];
            let mut std7 = [0f32; 3];
            for c in 0..3 {
                let (s3, _) = tables[c].window(y, x, 1, pad);
                let (s7, q7) = tables[c].window(y, x, 3, pad);
                mean3[c] = (s3 / 9.0) as f32;
                let m = s7 / 49.0;
                mean7[c] = m as f32;
                std7[c] = (q7 / 49.0 - m * m).max(0.0).sqrt() as f32;
            }
            let (yi, xi) = (y as isize, x as isize);
            let gx = (lum_at(yi - 1, xi + 1) + 2.0 * lum_at(yi, xi + 1) + lum_at(yi + 1, xi + 1))
                - (lum_at(yi - 1, xi - 1) + 2.0 * lum_at(yi, xi - 1) + lum_at(yi + 1, xi - 1));
            let gy = (lum_at(yi + 1, xi - 1) + 2.0 * lum_at(yi + 1, xi) + lum_at(yi + 1, xi + 1))
                - (lum_at(yi - 1, xi - 1) + 2.0 * lum_at(yi - 1, xi) + lum_at(yi - 1, xi + 1));
            let px = image.get(y, x);
            let [r, g, b] = mean3;
            let chroma = r.max(g).max(b) - r.min(g).min(b);
            data.extend_from_slice(&px);
            data.extend_from_slice(&mean3);
            data.extend_from_slice(&mean7);
            data.extend_from_slice(&std7);
            data.push((gx * gx + gy * gy).sqrt() / 4.0);
            data.push(chroma);
            data.extend_from_slice(&[r * r, g * g, b * b, r * g, r * b, g * b]);
        }
    }
    FeatureMap {
        height: h,
        width: w,
        dim: FEATURE_DIM,
        data,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    height: usize,
    width: usize,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    frozen: bool,
}

impl Encoder {
    /// Identity standardization for `height × width` inputs.
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mean: vec![0.0; FEATURE_DIM],
            inv_std: vec![1.0; FEATURE_DIM],
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Estimates per-feature mean and standard deviation over all pixels of
    /// `images`.
    pub fn fit<'a>(&mut self, images: impl IntoIterator<Item = &'a Image>) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenEncoder);
        }
        let mut sum = [0f64; FEATURE_DIM];
        let mut sq = [0f64; FEATURE_DIM];
        let mut n = 0usize;
        for image in images {
            self.check(image)?;
            let f = raw_features(image);
            for px in f.data.chunks_exact(FEATURE_DIM) {
                for (d, &v) in px.iter().enumerate() {
                    sum[d] += v as f64;
                    sq[d] += (v as f64) * (v as f64);
                }
            }
            n += f.pixels();
        }
        if n == 0 {
            return Err(invalid("encoder fit needs at least one image"));
        }
        for d in 0..FEATURE_DIM {
            let m = sum[d] / n as f64;
            let var = (sq[d] / n as f64 - m * m).max(0.0);
            self.mean[d] = m as f32;
            self.inv_std[d] = (1.0 / var.sqrt().max(1e-4)) as f32;
        }
        Ok(())
    }

    fn check(&self, image: &Image) -> Result<()> {
        if image.height() != self.height || image.width() != self.width {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.height, self.width),
                actual: format!("{}x{}", image.height(), image.width()),
            });
        }
        Ok(())
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        self.check(image)?;
        let mut f = raw_features(image);
        for px in f.data.chunks_exact_mut(FEATURE_DIM) {
            for ((v, m), s) in px.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        Ok(f)
    }

    /// Hex SHA-256 over the parameters.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in self.mean.iter().chain(&self.inv_std) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
