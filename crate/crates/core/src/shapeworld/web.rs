//! Simulated web image source. Queries by class name return a mix of useful
//! and corrupted images; the oracle label map and corruption tag of each
//! image are exposed for auditing only.

use super::{render_scene, World};
use crate::error::{invalid, Result};
use crate::image::{ClassId, Image, LabelMap, BACKGROUND};
use crate::rng;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionTag {
    Clean,
    StyleShifted,
    MissingClass,
    WrongClass,
    ObjectTooSmall,
    NonDominantClass,
    NearDuplicate,
}

impl CorruptionTag {
    pub const ALL: [CorruptionTag; 7] = [
        CorruptionTag::Clean,
        CorruptionTag::StyleShifted,
        CorruptionTag::MissingClass,
        CorruptionTag::WrongClass,
        CorruptionTag::ObjectTooSmall,
        CorruptionTag::NonDominantClass,
        CorruptionTag::NearDuplicate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionTag::Clean => "clean",
            CorruptionTag::StyleShifted => "style-shifted",
            CorruptionTag::MissingClass => "missing-class",
            CorruptionTag::WrongClass => "wrong-class",
            CorruptionTag::ObjectTooSmall => "object-too-small",
            CorruptionTag::NonDominantClass => "non-dominant-class",
            CorruptionTag::NearDuplicate => "near-duplicate",
        }
    }
}

impl std::fmt::Display for CorruptionTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mixture of corruption modes returned by a web query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WebNoiseProfile {
    pub clean: f64,
    pub style_shifted: f64,
    pub missing_class: f64,
    pub wrong_class: f64,
    pub object_too_small: f64,
    pub non_dominant_class: f64,
    pub near_duplicate: f64,
    /// Magnitude of the color drift of style-shifted images, in `[0, 1]`.
    pub style_shift_strength: f64,
}

impl Default for WebNoiseProfile {
    fn default() -> Self {
        Self {
            clean: 0.40,
            style_shifted: 0.15,
            missing_class: 0.10,
            wrong_class: 0.10,
            object_too_small: 0.10,
            non_dominant_class: 0.07,
            near_duplicate: 0.08,
            style_shift_strength: 0.8,
        }
    }
}

impl WebNoiseProfile {
    pub fn all_clean() -> Self {
        Self::only(CorruptionTag::Clean)
    }

    /// Degenerate profile producing a single mode.
    pub fn only(tag: CorruptionTag) -> Self {
        let mut p = Self {
            clean: 0.0,
            style_shifted: 0.0,
            missing_class: 0.0,
            wrong_class: 0.0,
            object_too_small: 0.0,
            non_dominant_class: 0.0,
            near_duplicate: 0.0,
            style_shift_strength: Self::default().style_shift_strength,
        };
        *p.prob_mut(tag) = 1.0;
        p
    }

    pub fn prob(&self, tag: CorruptionTag) -> f64 {
        self.probabilities()[tag as usize]
    }

    fn prob_mut(&mut self, tag: CorruptionTag) -> &mut f64 {
        match tag {
            CorruptionTag::Clean => &mut self.clean,
            CorruptionTag::StyleShifted => &mut self.style_shifted,
            CorruptionTag::MissingClass => &mut self.missing_class,
            CorruptionTag::WrongClass => &mut self.wrong_class,
            CorruptionTag::ObjectTooSmall => &mut self.object_too_small,
            CorruptionTag::NonDominantClass => &mut self.non_dominant_class,
            CorruptionTag::NearDuplicate => &mut self.near_duplicate,
        }
    }

    /// Probabilities in [`CorruptionTag::ALL`] order.
    pub fn probabilities(&self) -> [f64; 7] {
        [
            self.clean,
            self.style_shifted,
            self.missing_class,
            self.wrong_class,
            self.object_too_small,
            self.non_dominant_class,
            self.near_duplicate,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.probabilities();
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("noise probabilities must be nonnegative"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("noise probabilities sum to {sum}, not 1")));
        }
        if !(0.0..=1.0).contains(&self.style_shift_strength) {
            return Err(invalid("style shift strength outside [0,1]"));
        }
        Ok(())
    }
}

/// Global color drift: hue rotation about the gray axis, contrast change
/// around mid-gray and an additive tint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleShift {
    pub hue_degrees: f32,
    pub contrast: f32,
    pub tint: [f32; 3],
}

impl StyleShift {
    pub fn sample(strength: f64, rng: &mut ChaCha8Rng) -> Self {
        let s = (strength * rng.gen_range(0.6..=1.0)) as f32;
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let tint_hue = rng.gen_range(0.0..360.0f32);
        let t = super::hsv_to_rgb(tint_hue, 1.0, 0.25 * s);
        let mean = (t[0] + t[1] + t[2]) / 3.0;
        Self {
            hue_degrees: sign * 60.0 * s,
            contrast: 1.0 + sign * 0.6 * s,
            tint: [t[0] - mean, t[1] - mean, t[2] - mean],
        }
    }

    pub fn apply(&self, image: &mut Image) {
        let m = hue_rotation(self.hue_degrees);
        image.map_pixels(|p| {
            let mut out = [0.0; 3];
            for (r, row) in m.iter().enumerate() {
                let v = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
                out[r] = (v - 0.5) * self.contrast + 0.5 + self.tint[r];
            }
            out
        });
    }
}

/// Rotation by `deg` about the (1,1,1) axis.
fn hue_rotation(deg: f32) -> [[f32; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let k = (1.0 - c) / 3.0;
    let q = s / 3f32.sqrt();
    [
        [c + k, k - q, k + q],
        [k + q, c + k, k - q],
        [k - q, k + q, c + k],
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct WebSample {
    pub image: Image,
    /// Ground-truth segmentation; hidden from the pipeline.
    pub oracle: LabelMap,
    pub tag: CorruptionTag,
}

fn other_class(classes: &[ClassId], not: ClassId, rng: &mut ChaCha8Rng) -> ClassId {
    loop {
        let c = *classes.choose(rng).expect("foreground classes");
        if c != not {
            return c;
        }
    }
}

fn log_uniform(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    lo * (hi / lo).powf(rng.gen())
}

/// Simulated web search for `class`: `count` images whose corruption modes
/// are drawn from `profile`. Results for a smaller `count` are a prefix of
/// the results for a larger one.
pub fn web_query(
    world: &World,
    class: ClassId,
    count: usize,
    profile: &WebNoiseProfile,
    seed: u64,
) -> Result<Vec<WebSample>> {
    WebStream::new(world, class, profile, seed)?.take(count).collect()
}

/// Lazy form of [`web_query`]: yields the same samples in the same order
/// without holding earlier images.
#[derive(Debug)]
pub struct WebStream<'w> {
    world: &'w World,
    class: ClassId,
    profile: WebNoiseProfile,
    seed: u64,
    classes: Vec<ClassId>,
    weights: WeightedIndex<f64>,
    next: usize,
    originals: Vec<usize>,
}

impl<'w> WebStream<'w> {
    pub fn new(world: &'w World, class: ClassId, profile: &WebNoiseProfile, seed: u64) -> Result<Self> {
        if class == BACKGROUND {
            return Err(invalid("cannot query the web for the background class"));
        }
        world.check_class(class)?;
        profile.validate()?;
        if world.num_classes() < 3
            && (profile.wrong_class > 0.0
                || profile.missing_class > 0.0
                || profile.non_dominant_class > 0.0)
        {
            return Err(invalid("corruptions needing other classes require >= 2 foreground classes"));
        }
        let weights = WeightedIndex::new(profile.probabilities()).map_err(|e| invalid(e.to_string()))?;
        Ok(Self {
            world,
            class,
            profile: profile.clone(),
            seed,
            classes: world.foreground_classes(),
            weights,
            next: 0,
            originals: Vec::new(),
        })
    }

    /// Index of the sample the next call to `next` yields.
    pub fn position(&self) -> usize {
        self.next
    }

    fn rng_at(&self, i: usize) -> ChaCha8Rng {
        rng::stream(self.seed, "web", &[self.class as u64, i as u64])
    }

    /// Renders a non-duplicate sample; depends only on its index.
    fn original(&self, tag: CorruptionTag, rng: &mut ChaCha8Rng) -> Result<WebSample> {
        let (world, class, classes) = (self.world, self.class, &self.classes);
        let mut scene = world.empty_scene(rng);
        let mut add = |c: ClassId, frac: Option<f64>, rng: &mut ChaCha8Rng| -> Result<()> {
            let shape = match frac {
                Some(f) => world.sample_shape(c, f, rng)?,
                None => world.natural_shape(c, rng)?,
            };
            scene.shapes.push(shape);
            Ok(())
        };
        match tag {
            CorruptionTag::Clean | CorruptionTag::StyleShifted => {
                if rng.gen_bool(0.5) {
                    let c = other_class(classes, class, rng);
                    let f = world.style(c)?.sizes.sample(rng) * 0.7;
                    add(c, Some(f), rng)?;
                }
                add(class, None, rng)?;
            }
            CorruptionTag::MissingClass => {
                for _ in 0..rng.gen_range(0..=2) {
                    let c = other_class(classes, class, rng);
                    add(c, None, rng)?;
                }
            }
            CorruptionTag::WrongClass => {
                let c = other_class(classes, class, rng);
                add(c, None, rng)?;
            }
            CorruptionTag::ObjectTooSmall => {
                if rng.gen_bool(0.5) {
                    let c = other_class(classes, class, rng);
                    add(c, None, rng)?;
                }
                let f = log_uniform(0.002, 0.008, rng);
                add(class, Some(f), rng)?;
            }
            CorruptionTag::NonDominantClass => {
                for _ in 0..rng.gen_range(1..=2) {
                    let c = other_class(classes, class, rng);
                    let f = rng.gen_range(0.18..0.32);
                    add(c, Some(f), rng)?;
                }
                let f = log_uniform(0.008, 0.03, rng);
                add(class, Some(f), rng)?;
            }
            CorruptionTag::NearDuplicate => unreachable!("duplicates are derived, not rendered"),
        }
        let (mut image, oracle) = render_scene(&scene, rng.gen())?;
        if tag == CorruptionTag::StyleShifted {
            StyleShift::sample(self.profile.style_shift_strength, rng).apply(&mut image);
        }
        Ok(WebSample { image, oracle, tag })
    }

    fn produce(&mut self) -> Result<WebSample> {
        let i = self.next;
        let mut rng = self.rng_at(i);
        let tag = CorruptionTag::ALL[self.weights.sample(&mut rng)];
        if tag != CorruptionTag::NearDuplicate {
            let sample = self.original(tag, &mut rng)?;
            self.originals.push(i);
            return Ok(sample);
        }
        let (mut image, oracle) = match self.originals.choose(&mut rng).copied() {
            Some(j) => {
                let mut base_rng = self.rng_at(j);
                let base_tag = CorruptionTag::ALL[self.weights.sample(&mut base_rng)];
                let base = self.original(base_tag, &mut base_rng)?;
                (base.image, base.oracle)
            }
            None => {
                // nothing to duplicate yet: copy a hidden clean render
                let mut scene = self.world.empty_scene(&mut rng);
                scene.shapes.push(self.world.natural_shape(self.class, &mut rng)?);
                render_scene(&scene, rng.gen())?
            }
        };
        image.map_pixels(|p| p.map(|v| v + rng.gen_range(-0.004..=0.004f32)));
        Ok(WebSample { image, oracle, tag })
    }
}

impl Iterator for WebStream<'_> {
    type Item = Result<WebSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let out = self.produce();
        self.next += 1;
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapeworld::WorldConfig;

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    #[test]
    fn all_clean_profile_always_contains_query_class() {
        let w = world();
        let pool = web_query(&w, 3, 100, &WebNoiseProfile::all_clean(), 1).unwrap();
        assert_eq!(pool.len(), 100);
        assert!(pool.iter().all(|s| s.oracle.contains(3) && s.tag == CorruptionTag::Clean));
    }

    #[test]
    fn missing_class_profile_never_contains_query_class() {
        let w = world();
        let pool = web_query(&w, 3, 100, &WebNoiseProfile::only(CorruptionTag::MissingClass), 1)
            .unwrap();
        assert!(pool.iter().all(|s| !s.oracle.contains(3)));
    }

    #[test]
    fn near_duplicate_rate_within_three_sigma() {
        let w = world();
        let mut profile = WebNoiseProfile::all_clean();
        profile.clean = 0.8;
        profile.near_duplicate = 0.2;
        let pool = web_query(&w, 1, 1000, &profile, 5).unwrap();
        let n = pool.iter().filter(|s| s.tag == CorruptionTag::NearDuplicate).count() as f64;
        let sigma = (1000.0f64 * 0.2 * 0.8).sqrt();
        assert!((n - 200.0).abs() <= 3.0 * sigma, "{n} near-duplicates");
    }

    #[test]
    fn prefix_consistent_and_deterministic() {
        let w = world();
        let p = WebNoiseProfile::default();
        let small = web_query(&w, 2, 30, &p, 8).unwrap();
        let large = web_query(&w, 2, 60, &p, 8).unwrap();
        assert_eq!(small[..], large[..30]);
    }

    #[test]
    fn rejects_background_and_unknown_classes() {
        let w = world();
        let p = WebNoiseProfile::default();
        assert!(web_query(&w, 0, 3, &p, 0).is_err());
        assert!(web_query(&w, 42, 3, &p, 0).is_err());
        let mut bad = p.clone();
        bad.clean += 0.5;
        assert!(web_query(&w, 1, 3, &bad, 0).is_err());
    }

    #[test]
    fn style_shift_moves_gray_and_keeps_range() {
        let mut img = Image::filled(16, 16, [0.5, 0.5, 0.5]).unwrap();
        let mut rng = crate::rng::stream(0, "t", &[]);
        StyleShift::sample(1.0, &mut rng).apply(&mut img);
        let p = img.get(0, 0);
        assert!(p.iter().any(|v| (v - 0.5).abs() > 0.01));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_rotation_is_identity() {
        let m = hue_rotation(0.0);
        for (r, row) in m.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((v - if r == c { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
    }
}
