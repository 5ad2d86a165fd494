//! Dense pixel grids: RGB intensity images and per-pixel class maps,
//! plus binary PPM/PGM codecs.

use crate::error::{invalid, Error, Result};
use std::io::{BufRead, Write};

/// Class identifier. Class 0 is always the background.
pub type ClassId = u8;

pub const BACKGROUND: ClassId = 0;

/// Smallest side accepted for an [`Image`].
pub const MIN_SIDE: usize = 16;

/// Three-channel image with intensities in `[0, 1]`, stored row-major and
/// channel-interleaved (`(y * width + x) * 3 + ch`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(invalid(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", height * width * 3),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("intensity {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for (c, v) in rgb.iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Applies `f` to every intensity, clamping the result into `[0, 1]`.
    pub fn map_pixels(&mut self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            let out = f([px[0], px[1], px[2]]);
            for c in 0..3 {
                px[c] = out[c].clamp(0.0, 1.0);
            }
        }
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Self> {
        let (width, height) = read_pnm_header(&mut r, "P6")?;
        let mut bytes = vec![0u8; width * height * 3];
        r.read_exact(&mut bytes)?;
        Self::new(
            height,
            width,
            bytes.into_iter().map(|b| b as f32 / 255.0).collect(),
        )
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<ClassId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<ClassId>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("label map must be non-empty"));
        }
        if data.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{} labels", height * width),
                actual: format!("{} labels", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![BACKGROUND; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[ClassId] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [ClassId] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: ClassId) {
        self.data[y * self.width + x] = c;
    }

    pub fn count(&self, class: ClassId) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    pub fn fraction(&self, class: ClassId) -> f64 {
        self.count(class) as f64 / self.pixels() as f64
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.data.contains(&class)
    }

    /// Distinct class ids present, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut seen = [false; 256];
        for &c in &self.data {
            seen[c as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn matches_image(&self, image: &Image) -> bool {
        self.height == image.height() && self.width == image.width()
    }

    /// Binary PGM (P5, maxval 255), one class id per pixel.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn read_pgm<R: BufRead>(mut r: R) -> Result<Self> {
        let (width, height) = read_pnm_header(&mut r, "P5")?;
        let mut data = vec![0u8; width * height];
        r.read_exact(&mut data)?;
        Self::new(height, width, data)
    }
}

fn read_pnm_header<R: BufRead>(r: &mut R, magic: &str) -> Result<(usize, usize)> {
    let mut tokens = Vec::with_capacity(4);
    let mut token = String::new();
    while tokens.len() < 4 {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let ch = byte[0] as char;
        if ch == '#' && token.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if !token.is_empty() {
                tokens.push(std::mem::take(&mut token));
            }
        } else {
            token.push(ch);
        }
    }
    if tokens[0] != magic {
        return Err(invalid(format!("expected {magic}, found {}", tokens[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| invalid(format!("bad PNM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(invalid(format!("unsupported maxval {maxval}")));
    }
    Ok((width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_out_of_range_images() {
        assert!(Image::filled(8, 32, [0.0; 3]).is_err());
        assert!(Image::new(16, 16, vec![1.5; 16 * 16 * 3]).is_err());
        assert!(Image::new(16, 16, vec![0.5; 10]).is_err());
    }

    #[test]
    fn pnm_round_trip_preserves_quantized_values() {
        let mut img = Image::filled(16, 20, [0.2, 0.4, 0.6]).unwrap();
        img.set(3, 4, [1.0, 0.0, 0.5]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        let back = Image::read_ppm(&buf[..]).unwrap();
        assert_eq!(back.height(), 16);
        assert_eq!(back.width(), 20);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }

        let mut labels = LabelMap::background(16, 20);
        labels.set(2, 2, 7);
        let mut buf = Vec::new();
        labels.write_pgm(&mut buf).unwrap();
        assert_eq!(LabelMap::read_pgm(&buf[..]).unwrap(), labels);
    }

    #[test]
    fn label_fractions() {
        let mut l = LabelMap::background(2, 2);
        l.set(0, 0, 3);
        assert_eq!(l.fraction(3), 0.25);
        assert_eq!(l.classes(), vec![0, 3]);
    }
}
