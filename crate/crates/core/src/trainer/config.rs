use crate::error::{invalid, Error, Result};
use crate::inpaint::KnowledgeMode;
use crate::selection::{CoreSetRule, DiscSchedule, SemanticRule, FIXED_THRESHOLD};
use crate::shapeworld::{Mode, ProtocolSpec, WebNoiseProfile, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "recall+")]
    WebReplay,
    #[serde(rename = "ft")]
    FineTune,
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "s&r")]
    StoreReplay,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::WebReplay => "recall+",
            Method::FineTune => "ft",
            Method::Joint => "joint",
            Method::StoreReplay => "s&r",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "recall+" | "web-replay" => Ok(Method::WebReplay),
            "ft" | "fine-tune" => Ok(Method::FineTune),
            "joint" => Ok(Method::Joint),
            "s&r" | "sr" | "store-replay" => Ok(Method::StoreReplay),
            other => Err(invalid(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Group sizes such as `4-2-2`; classes are numbered from 1.
    pub groups: String,
    pub mode: Mode,
    /// Training images per class of the step's group.
    pub images_per_class: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            groups: "4-2-2".to_string(),
            mode: Mode::Disjoint,
            images_per_class: 40,
        }
    }
}

impl ProtocolConfig {
    pub fn spec(&self) -> Result<ProtocolSpec> {
        let sizes: Vec<usize> = self
            .groups
            .split('-')
            .map(|s| s.trim().parse::<usize>().map_err(|_| invalid(format!("bad group size {s:?}"))))
            .collect::<Result<_>>()?;
        let samples = sizes.iter().map(|n| n * self.images_per_class).collect();
        ProtocolSpec::from_sizes(&self.groups, self.mode, samples)
    }
}

/// Polynomial-decay SGD settings for a decoder head. Step budgets scale
/// with the number of classes being learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub initial_lr: f64,
    pub final_lr: f64,
    pub power: f64,
    pub steps_per_class: usize,
    /// Pixels sampled from each image of a batch.
    pub pixels_per_image: usize,
}

impl HeadConfig {
    fn main() -> Self {
        Self {
            initial_lr: 0.5,
            final_lr: 0.1,
            power: 0.9,
            steps_per_class: 200,
            pixels_per_image: 256,
        }
    }

    fn helper() -> Self {
        Self {
            initial_lr: 0.5,
            final_lr: 0.005,
            ..Self::main()
        }
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::main()
    }
}

/// Images per batch drawn from the current step's data and from replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterleaveSpec {
    pub r_new: usize,
    pub r_old: usize,
}

impl Default for InterleaveSpec {
    fn default() -> Self {
        Self { r_new: 4, r_old: 4 }
    }
}

impl InterleaveSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r_new == 0 {
            return Err(invalid("r_new must be at least 1"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.r_new + self.r_old
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub enabled: bool,
    /// Target replay images per class.
    pub n_r: usize,
    /// Web images available per class.
    pub pool_size: usize,
    /// PSNR above which an image counts as a duplicate; `None` disables.
    pub dedup_db: Option<f64>,
    /// Abort when a past class ends up with fewer replay images.
    pub shortfall_floor: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_r: 50,
            pool_size: 1000,
            dedup_db: Some(35.0),
            shortfall_floor: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub adversarial: bool,
    pub semantic: SemanticRule,
    pub fixed_threshold: f64,
    pub alpha: f64,
    pub disc_hidden: usize,
    /// Web images per initial class used as negatives at step 0.
    pub bootstrap_pool_per_class: usize,
    pub discriminator: DiscSchedule,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            adversarial: true,
            semantic: SemanticRule::Cdf,
            fixed_threshold: FIXED_THRESHOLD,
            alpha: CoreSetRule::default().alpha,
            disc_hidden: 32,
            bootstrap_pool_per_class: 60,
            discriminator: DiscSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintConfig {
    pub background: bool,
    pub knowledge: KnowledgeMode,
    /// Share of the main step budget after which replay labels are
    /// knowledge-inpainted.
    pub trigger_fraction: f64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            background: true,
            knowledge: KnowledgeMode::Constrained,
            trigger_fraction: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub test_size: usize,
    pub include_background: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_size: 120,
            include_background: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct StoreReplayConfig {
    /// Storage per class in bytes; defaults to the helper checkpoint size.
    pub budget_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub protocol: ProtocolConfig,
    pub model: HeadConfig,
    pub helper: HeadConfig,
    pub interleave: InterleaveSpec,
    pub replay: ReplayConfig,
    pub selection: SelectionConfig,
    pub inpaint: InpaintConfig,
    pub web: WebNoiseProfile,
    pub eval: EvalConfig,
    pub store_replay: StoreReplayConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            protocol: ProtocolConfig::default(),
            model: HeadConfig::main(),
            helper: HeadConfig::helper(),
            interleave: InterleaveSpec::default(),
            replay: ReplayConfig::default(),
            selection: SelectionConfig::default(),
            inpaint: InpaintConfig::default(),
            web: WebNoiseProfile::default(),
            eval: EvalConfig::default(),
            store_replay: StoreReplayConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.protocol.spec().map_err(cfg)?.validate(self.world.num_classes).map_err(cfg)?;
        self.interleave.validate().map_err(cfg)?;
        self.web.validate().map_err(cfg)?;
        CoreSetRule::new(self.selection.alpha).map_err(cfg)?;
        for (name, h) in [("model", &self.model), ("helper", &self.helper)] {
            if h.steps_per_class == 0 || h.pixels_per_image == 0 {
                return Err(Error::Config(format!("{name}: step and pixel counts must be positive")));
            }
            if !(h.initial_lr >= h.final_lr && h.final_lr >= 0.0 && h.power > 0.0) {
                return Err(Error::Config(format!("{name}: invalid learning-rate schedule")));
            }
        }
        if !(0.0..=1.0).contains(&self.inpaint.trigger_fraction) {
            return Err(Error::Config("trigger_fraction outside [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.selection.fixed_threshold) {
            return Err(Error::Config("fixed_threshold outside [0,1]".into()));
        }
        if self.replay.enabled && (self.replay.n_r == 0 || self.replay.pool_size == 0) {
            return Err(Error::Config("replay needs positive n_r and pool_size".into()));
        }
        if self.eval.test_size == 0 || self.protocol.images_per_class == 0 {
            return Err(Error::Config("test and training sets must be non-empty".into()));
        }
        Ok(())
    }

    /// Every filter, replay and inpainting switch off: plain fine-tuning.
    pub fn fine_tuning(&self) -> Self {
        let mut c = self.clone();
        c.replay.enabled = false;
        c.selection.adversarial = false;
        c.selection.semantic = SemanticRule::None;
        c.inpaint.background = false;
        c.inpaint.knowledge = KnowledgeMode::Off;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = ExperimentConfig::from_toml("seed = 3\n[inpaint]\nknowledge = \"unconstrained\"\n").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.inpaint.knowledge, KnowledgeMode::Unconstrained);
        assert_eq!(partial.replay, ReplayConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml("[selection]\nalpha = 0.5\n").is_err());
        assert!(ExperimentConfig::from_toml("[protocol]\ngroups = \"4-2-9\"\n").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[interleave]\nr_new = 0\n").is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn method_names() {
        for m in [Method::WebReplay, Method::FineTune, Method::Joint, Method::StoreReplay] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("lwf".parse::<Method>().is_err());
    }
}
