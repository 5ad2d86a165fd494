use super::{run_web_replay, ExperimentConfig};
use crate::error::{invalid, Result};
use crate::eval::AblationRow;
use crate::inpaint::KnowledgeMode;
use crate::selection::SemanticRule;

/// One configuration of an ablation matrix with its toggle labels.
#[derive(Debug, Clone)]
pub struct AblationSetting {
    pub toggles: Vec<(String, String)>,
    pub config: ExperimentConfig,
}

fn on_off(v: bool) -> String {
    if v { "on" } else { "off" }.to_string()
}

fn semantic_name(rule: SemanticRule) -> &'static str {
    match rule {
        SemanticRule::None => "none",
        SemanticRule::Cdf => "cth",
        SemanticRule::Fixed => "fth",
    }
}

fn knowledge_name(mode: KnowledgeMode) -> &'static str {
    match mode {
        KnowledgeMode::Off => "off",
        KnowledgeMode::Constrained => "constrained",
        KnowledgeMode::Unconstrained => "unconstrained",
    }
}

/// Labels every toggle of `config` so rows of different sweeps line up.
pub fn toggles(config: &ExperimentConfig) -> Vec<(String, String)> {
    vec![
        ("replay".into(), on_off(config.replay.enabled)),
        ("al".into(), on_off(config.selection.adversarial)),
        ("threshold".into(), semantic_name(config.selection.semantic).into()),
        ("bi".into(), on_off(config.inpaint.background)),
        ("ki".into(), knowledge_name(config.inpaint.knowledge).into()),
        ("pool".into(), config.replay.pool_size.to_string()),
    ]
}

fn setting(base: &ExperimentConfig, al: bool, semantic: SemanticRule, bi: bool, ki: KnowledgeMode) -> AblationSetting {
    let mut config = base.clone();
    config.replay.enabled = true;
    config.selection.adversarial = al;
    config.selection.semantic = semantic;
    config.inpaint.background = bi;
    config.inpaint.knowledge = ki;
    AblationSetting {
        toggles: toggles(&config),
        config,
    }
}

/// Eight component rows, from replay alone to the full pipeline.
pub fn component_ablation(base: &ExperimentConfig) -> Vec<AblationSetting> {
    use KnowledgeMode::{Constrained, Off};
    use SemanticRule::{Cdf, None};
    vec![
        setting(base, false, None, false, Off),
        setting(base, true, None, false, Off),
        setting(base, false, Cdf, false, Off),
        setting(base, true, Cdf, false, Off),
        setting(base, true, Cdf, true, Off),
        setting(base, true, Cdf, false, Constrained),
        setting(base, false, Cdf, true, Constrained),
        setting(base, true, Cdf, true, Constrained),
    ]
}

/// No threshold, fixed threshold and per-class CDF threshold on top of
/// replay with adversarial selection.
pub fn threshold_ablation(base: &ExperimentConfig) -> Vec<AblationSetting> {
    [SemanticRule::None, SemanticRule::Fixed, SemanticRule::Cdf]
        .into_iter()
        .map(|s| setting(base, true, s, false, KnowledgeMode::Off))
        .collect()
}

/// Full pipeline without knowledge inpainting, with it unconstrained and
/// with it constrained.
pub fn constraint_ablation(base: &ExperimentConfig) -> Vec<AblationSetting> {
    [KnowledgeMode::Off, KnowledgeMode::Unconstrained, KnowledgeMode::Constrained]
        .into_iter()
        .map(|k| setting(base, true, SemanticRule::Cdf, true, k))
        .collect()
}

/// Full pipeline at each per-class web pool size.
pub fn pool_sweep(base: &ExperimentConfig, sizes: &[usize]) -> Vec<AblationSetting> {
    sizes
        .iter()
        .map(|&n| {
            let mut s = setting(base, true, SemanticRule::Cdf, true, KnowledgeMode::Constrained);
            s.config.replay.pool_size = n;
            s.toggles = toggles(&s.config);
            s
        })
        .collect()
}

/// Runs every setting and reports its final grouped scores.
pub fn run_ablation(settings: &[AblationSetting]) -> Result<Vec<AblationRow>> {
    if settings.is_empty() {
        return Err(invalid("empty ablation matrix"));
    }
    settings
        .iter()
        .map(|s| {
            let r = run_web_replay(&s.config)?.report;
            Ok(AblationRow {
                toggles: s.toggles.clone(),
                old: r.old,
                new: r.new,
                all: r.all,
            })
        })
        .collect()
}
