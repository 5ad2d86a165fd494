//! Deterministic synthetic segmentation world.
//!
//! Scenes are textured, low-saturation backgrounds with colored shapes
//! drawn back-to-front. Every foreground class has its own base hue, shape
//! kind and object-size distribution, so classes are separable from local
//! color statistics while per-class size distributions differ.
//!
//! The same renderer backs the supervised task datasets and the simulated
//! web source used for replay.

mod export;
mod protocol;
mod web;

pub use export::{export_samples, import_samples, ManifestRecord};
pub use protocol::{
    generate_joint_dataset, generate_joint_dataset_over, generate_task_dataset, generate_test_set,
    generate_test_set_over, LabeledSample, Mode, ProtocolSpec, TaskDataset,
};
pub use web::{web_query, CorruptionTag, StyleShift, WebNoiseProfile, WebSample, WebStream};

use crate::error::{invalid, Result};
use crate::image::{ClassId, Image, LabelMap, BACKGROUND};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
}

impl ShapeKind {
    const ALL: [ShapeKind; 6] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Bar,
    ];

    /// Characteristic length for a shape covering `area` pixels, and the
    /// distance from the center to its farthest point.
    fn geometry(self, area: f64) -> (f64, f64) {
        use std::f64::consts::PI;
        match self {
            ShapeKind::Disk => {
                let r = (area / PI).sqrt();
                (r, r)
            }
            ShapeKind::Square => {
                let s = area.sqrt();
                (s, s * std::f64::consts::FRAC_1_SQRT_2)
            }
            ShapeKind::Triangle => {
                let h = (2.0 * area).sqrt();
                (h, 2.0 * h / 3.0)
            }
            ShapeKind::Ring => {
                let r = (area / (0.75 * PI)).sqrt();
                (r, r)
            }
            ShapeKind::Cross => {
                let w = (area / 5.0).sqrt();
                (w, w * (1.5f64.powi(2) + 0.25).sqrt())
            }
            ShapeKind::Bar => {
                let w = area.sqrt() / 2.0;
                (w, w * (4.0f64 + 0.0625).sqrt())
            }
        }
    }

    /// Membership test in the shape's own frame (centered, unrotated).
    fn contains(self, len: f64, dx: f64, dy: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= len * len,
            ShapeKind::Square => dx.abs() <= len / 2.0 && dy.abs() <= len / 2.0,
            ShapeKind::Triangle => {
                let top = -2.0 * len / 3.0;
                dy >= top && dy <= len / 3.0 && dx.abs() <= (dy - top) / 2.0
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= len * len && d2 >= len * len / 4.0
            }
            ShapeKind::Cross => {
                (dx.abs() <= 1.5 * len && dy.abs() <= len / 2.0)
                    || (dx.abs() <= len / 2.0 && dy.abs() <= 1.5 * len)
            }
            ShapeKind::Bar => dx.abs() <= 2.0 * len && dy.abs() <= len / 2.0,
        }
    }
}

/// Object-size regime of a class, as a fraction of the image area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min: f64,
    pub max: f64,
}

impl SizeRange {
    pub const SMALL: SizeRange = SizeRange { min: 0.02, max: 0.12 };
    pub const MEDIUM: SizeRange = SizeRange { min: 0.06, max: 0.22 };
    pub const LARGE: SizeRange = SizeRange { min: 0.14, max: 0.36 };

    /// Log-uniform draw, so small objects dominate within each regime.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.gen();
        self.min * (self.max / self.min).powf(u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub class: ClassId,
    pub hue: f32,
    pub kind: ShapeKind,
    pub sizes: SizeRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Number of classes including background.
    pub num_classes: usize,
    pub image_size: usize,
    pub noise_amplitude: f32,
    pub texture_amplitude: f32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 9,
            image_size: 64,
            noise_amplitude: 0.03,
            texture_amplitude: 0.10,
        }
    }
}

/// The class universe and its rendering styles.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    config: WorldConfig,
    styles: Vec<ClassStyle>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        if !(2..=64).contains(&config.num_classes) {
            return Err(invalid(format!(
                "num_classes must be in 2..=64, got {}",
                config.num_classes
            )));
        }
        if config.image_size < crate::image::MIN_SIDE {
            return Err(invalid("image_size below minimum side"));
        }
        let fg = config.num_classes - 1;
        let regimes = [SizeRange::SMALL, SizeRange::LARGE, SizeRange::MEDIUM];
        let styles = (1..=fg)
            .map(|i| ClassStyle {
                class: i as ClassId,
                hue: ((i - 1) as f32 * 360.0 / fg as f32 + 15.0) % 360.0,
                kind: ShapeKind::ALL[(i - 1) % ShapeKind::ALL.len()],
                sizes: regimes[(i - 1) % regimes.len()],
            })
            .collect();
        Ok(Self { config, styles })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn size(&self) -> usize {
        self.config.image_size
    }

    pub fn foreground_classes(&self) -> Vec<ClassId> {
        self.styles.iter().map(|s| s.class).collect()
    }

    pub fn style(&self, class: ClassId) -> Result<&ClassStyle> {
        if class == BACKGROUND {
            return Err(invalid("background has no shape style"));
        }
        self.styles
            .get(class as usize - 1)
            .ok_or(crate::error::Error::UnknownClass(class))
    }

    pub fn check_class(&self, class: ClassId) -> Result<()> {
        if (class as usize) < self.config.num_classes {
            Ok(())
        } else {
            Err(crate::error::Error::UnknownClass(class))
        }
    }

    /// Random textured background.
    pub(crate) fn sample_background(&self, rng: &mut ChaCha8Rng) -> BackgroundSpec {
        let value = rng.gen_range(0.30..0.70f32);
        let sat = rng.gen_range(0.0..0.12f32);
        let hue = rng.gen_range(0.0..360.0f32);
        BackgroundSpec {
            base: hsv_to_rgb(hue, sat, value),
            texture_amplitude: self.config.texture_amplitude,
            texture_seed: rng.gen(),
        }
    }

    /// A shape of `class` with the given area fraction at a random pose.
    pub(crate) fn sample_shape(
        &self,
        class: ClassId,
        size_fraction: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ShapeSpec> {
        let style = self.style(class)?;
        let side = self.size() as f64;
        let area = size_fraction * side * side;
        let (_, reach) = style.kind.geometry(area);
        let margin = reach.min(side / 2.0);
        let cx = if margin * 2.0 >= side {
            side / 2.0
        } else {
            rng.gen_range(margin..side - margin)
        };
        let cy = if margin * 2.0 >= side {
            side / 2.0
        } else {
            rng.gen_range(margin..side - margin)
        };
        let hue = style.hue + rng.gen_range(-8.0..8.0f32);
        let sat = rng.gen_range(0.65..0.85f32);
        let val = rng.gen_range(0.70..0.90f32);
        Ok(ShapeSpec {
            class,
            kind: style.kind,
            center: (cx as f32, cy as f32),
            size_fraction,
            rotation: rng.gen_range(0.0..std::f32::consts::PI),
            color: hsv_to_rgb(hue, sat, val),
        })
    }

    pub(crate) fn natural_shape(&self, class: ClassId, rng: &mut ChaCha8Rng) -> Result<ShapeSpec> {
        let f = self.style(class)?.sizes.sample(rng);
        self.sample_shape(class, f, rng)
    }

    pub(crate) fn empty_scene(&self, rng: &mut ChaCha8Rng) -> SceneSpec {
        SceneSpec {
            height: self.size(),
            width: self.size(),
            shapes: Vec::new(),
            background: self.sample_background(rng),
            noise_amplitude: self.config.noise_amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class: ClassId,
    pub kind: ShapeKind,
    /// Center in pixel coordinates `(x, y)`.
    pub center: (f32, f32),
    /// Nominal area as a fraction of the image, in `(0, 1)`.
    pub size_fraction: f64,
    /// Radians.
    pub rotation: f32,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub base: [f32; 3],
    pub texture_amplitude: f32,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Back-to-front drawing order.
    pub shapes: Vec<ShapeSpec>,
    pub background: BackgroundSpec,
    pub noise_amplitude: f32,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < crate::image::MIN_SIDE || self.width < crate::image::MIN_SIDE {
            return Err(invalid(format!(
                "scene must be at least {0}x{0}",
                crate::image::MIN_SIDE
            )));
        }
        for s in &self.shapes {
            if !(s.size_fraction > 0.0 && s.size_fraction < 1.0) {
                return Err(invalid(format!(
                    "size fraction {} outside (0,1)",
                    s.size_fraction
                )));
            }
            if s.class == BACKGROUND {
                return Err(invalid("shapes cannot carry the background class"));
            }
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return Err(invalid("noise amplitude outside [0, 0.5]"));
        }
        Ok(())
    }

    /// Per-pixel index of the topmost shape, `None` for background.
    fn owners(&self) -> Vec<Option<usize>> {
        let (h, w) = (self.height, self.width);
        let mut owner = vec![None; h * w];
        let area_scale = (h * w) as f64;
        for (i, s) in self.shapes.iter().enumerate() {
            let (len, reach) = s.kind.geometry(s.size_fraction * area_scale);
            let (cx, cy) = (s.center.0 as f64, s.center.1 as f64);
            let (sin, cos) = (s.rotation as f64).sin_cos();
            let y0 = ((cy - reach).floor().max(0.0)) as usize;
            let y1 = ((cy + reach).ceil().min(h as f64)) as usize;
            let x0 = ((cx - reach).floor().max(0.0)) as usize;
            let x1 = ((cx + reach).ceil().min(w as f64)) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = x as f64 + 0.5 - cx;
                    let py = y as f64 + 0.5 - cy;
                    // rotate into the shape frame
                    let dx = cos * px + sin * py;
                    let dy = -sin * px + cos * py;
                    if s.kind.contains(len, dx, dy) {
                        owner[y * w + x] = Some(i);
                    }
                }
            }
        }
        owner
    }
}

/// Rasterizes a scene. The label of every pixel is the class of the topmost
/// shape covering its center. `seed` drives only the per-pixel noise.
pub fn render_scene(spec: &SceneSpec, seed: u64) -> Result<(Image, LabelMap)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let owners = spec.owners();
    let texture = value_noise(h, w, spec.background.texture_seed);
    let mut rng = rng::stream(seed, "render", &[]);
    let amp = spec.noise_amplitude;
    let mut data = Vec::with_capacity(h * w * 3);
    let mut labels = Vec::with_capacity(h * w);
    for (i, owner) in owners.iter().enumerate() {
        let (base, class) = match owner {
            Some(s) => (spec.shapes[*s].color, spec.shapes[*s].class),
            None => {
                let t = texture[i] * spec.background.texture_amplitude;
                let b = spec.background.base;
                ([b[0] + t, b[1] + t, b[2] + t], BACKGROUND)
            }
        };
        for v in base {
            let n = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
            data.push((v + n).clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    Ok((Image::new(h, w, data)?, LabelMap::new(h, w, labels)?))
}

/// Smooth noise in `[-1, 1]`: bilinear interpolation of a coarse random grid.
fn value_noise(h: usize, w: usize, seed: u64) -> Vec<f32> {
    const CELL: usize = 8;
    let gh = h / CELL + 2;
    let gw = w / CELL + 2;
    let mut rng = rng::stream(seed, "texture", &[]);
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y as f32 / CELL as f32;
        let iy = gy as usize;
        let fy = gy - iy as f32;
        for x in 0..w {
            let gx = x as f32 / CELL as f32;
            let ix = gx as usize;
            let fx = gx - ix as f32;
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(iy, ix) * (1.0 - fx) + g(iy, ix + 1) * fx;
            let bot = g(iy + 1, ix) * (1.0 - fx) + g(iy + 1, ix + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// `hue` in degrees, `sat` and `val` in `[0, 1]`.
pub fn hsv_to_rgb(hue: f32, sat: f32, val: f32) -> [f32; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    fn scene_with(shapes: Vec<ShapeSpec>) -> SceneSpec {
        SceneSpec {
            height: 64,
            width: 64,
            shapes,
            background: BackgroundSpec {
                base: [0.5, 0.5, 0.5],
                texture_amplitude: 0.1,
                texture_seed: 11,
            },
            noise_amplitude: 0.03,
        }
    }

    fn disk(class: ClassId, frac: f64, center: (f32, f32)) -> ShapeSpec {
        ShapeSpec {
            class,
            kind: ShapeKind::Disk,
            center,
            size_fraction: frac,
            rotation: 0.0,
            color: [0.9, 0.1, 0.1],
        }
    }

    #[test]
    fn empty_scene_is_all_background() {
        let (_, labels) = render_scene(&scene_with(vec![]), 3).unwrap();
        assert!(labels.data().iter().all(|&c| c == BACKGROUND));
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = scene_with(vec![disk(2, 0.1, (20.0, 30.0))]);
        assert_eq!(render_scene(&spec, 5).unwrap(), render_scene(&spec, 5).unwrap());
        assert_ne!(render_scene(&spec, 5).unwrap().0, render_scene(&spec, 6).unwrap().0);
    }

    #[test]
    fn disk_pixel_fraction_matches_analytic_area() {
        // Oracle: count lattice points inside the circle independently of the
        // renderer's shape machinery.
        let r = (0.25f64 * 4096.0 / std::f64::consts::PI).sqrt();
        let mut inside = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                let (dx, dy) = (x as f64 + 0.5 - 32.0, y as f64 + 0.5 - 32.0);
                if dx * dx + dy * dy <= r * r {
                    inside += 1;
                }
            }
        }
        let oracle = inside as f64 / 4096.0;
        assert!((oracle - 0.25).abs() < 0.02);
        let (_, labels) = render_scene(&scene_with(vec![disk(1, 0.25, (32.0, 32.0))]), 0).unwrap();
        assert_eq!(labels.count(1), inside);
    }

    #[test]
    fn topmost_shape_owns_overlap() {
        let spec = scene_with(vec![disk(1, 0.2, (32.0, 32.0)), disk(2, 0.05, (32.0, 32.0))]);
        let (_, labels) = render_scene(&spec, 0).unwrap();
        assert_eq!(labels.get(32, 32), 2);
        assert_eq!(labels.get(32, 47), 1);
        assert_eq!(labels.get(1, 1), BACKGROUND);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(render_scene(&scene_with(vec![disk(1, 0.0, (3.0, 3.0))]), 0).is_err());
        assert!(render_scene(&scene_with(vec![disk(1, 1.2, (3.0, 3.0))]), 0).is_err());
        let mut tiny = scene_with(vec![]);
        tiny.width = 4;
        assert!(render_scene(&tiny, 0).is_err());
    }

    #[test]
    fn every_shape_kind_covers_roughly_its_area() {
        let w = world();
        for kind in ShapeKind::ALL {
            let mut s = disk(1, 0.1, (32.0, 32.0));
            s.kind = kind;
            s.rotation = 0.3;
            let (_, labels) = render_scene(&scene_with(vec![s]), 0).unwrap();
            let f = labels.fraction(1);
            assert!((f - 0.1).abs() < 0.015, "{kind:?} covers {f}");
        }
        assert!(w.style(0).is_err());
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(77.0, 0.0, 0.4), [0.4, 0.4, 0.4]);
    }
}
