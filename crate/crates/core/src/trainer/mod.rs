//! End-to-end incremental training: step-0 training, per-step replay
//! assembly, interleaved training with self-inpainting, helper decoders and
//! discriminator updates, plus the fine-tuning, joint and store-and-replay
//! baselines.

mod ablation;
mod baselines;
mod config;

pub use ablation::{
    component_ablation, constraint_ablation, pool_sweep, run_ablation, threshold_ablation, toggles, AblationSetting,
};

pub use baselines::{
    run_experiment, run_fine_tuning, run_joint, run_method, run_web_replay, store_and_replay_baseline,
    stored_samples_per_class, RunOutput, BYTES_PER_STORED_SAMPLE,
};
pub use config::{
    EvalConfig, ExperimentConfig, HeadConfig, InpaintConfig, InterleaveSpec, Method, ProtocolConfig,
    ReplayConfig, SelectionConfig, StoreReplayConfig,
};

use crate::error::{invalid, Error, Result};
use crate::eval::{confusion, miou, ConfusionMatrix, StepMetrics};
use crate::image::{ClassId, Image, LabelMap, BACKGROUND};
use crate::inpaint::{background_inpaint_features, knowledge_inpaint_features, InpaintContext, KnowledgeMode};
use crate::replay::{
    build_replay_set, check_floor, Deduplicator, FilterRecord, ReplayFilters, ReplaySet, ShapeWorldSource,
};
use crate::rng;
use crate::segmodel::{DecoderHead, Encoder, FeatureMap, HeadTrainer, LossTrace, PixelBatch, TrainSchedule};
use crate::selection::{
    class_size_cdf, disc_features, size_threshold, train_discriminator, CoreSetRule, DiscTrainReport, Discriminator,
    SemanticRule, SizeThreshold,
};
use crate::shapeworld::{generate_task_dataset, ProtocolSpec, TaskDataset, WebStream, World};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Sub-steps of a run, in the order they are logged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    FitEncoder,
    TrainMain,
    TrainHelper,
    TrainDiscriminator,
    FreezeEncoder,
    BackgroundInpaint,
    BuildReplay,
    MergeReplay,
    ExpandHead,
    KnowledgeInpaint,
    FineTuneDiscriminator,
    StoreSamples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub step: usize,
    pub stage: Stage,
    pub detail: String,
}

/// Composition of one main-decoder training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub step: usize,
    pub current: usize,
    pub replay: usize,
}

/// Indices into the current and replay datasets for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterleavedBatch {
    pub current: Vec<usize>,
    pub replay: Vec<usize>,
}

/// `n_batches` batches of exactly `r_new` current and `r_old` replay
/// indices, each drawn uniformly with replacement.
pub fn interleave_batches(
    n_current: usize,
    n_replay: usize,
    spec: &InterleaveSpec,
    n_batches: usize,
    seed: u64,
) -> Result<Vec<InterleavedBatch>> {
    spec.validate()?;
    if n_current == 0 {
        return Err(invalid("interleaving needs current-step data"));
    }
    if spec.r_old > 0 && n_replay == 0 {
        return Err(invalid("interleaving with r_old > 0 needs replay data"));
    }
    let mut rng = rng::stream(seed, "interleave", &[]);
    Ok((0..n_batches)
        .map(|_| InterleavedBatch {
            current: (0..spec.r_new).map(|_| rng.gen_range(0..n_current)).collect(),
            replay: (0..spec.r_old).map(|_| rng.gen_range(0..n_replay)).collect(),
        })
        .collect())
}

/// Encoded images with the labels they are trained against.
#[derive(Debug, Clone, Default)]
pub(crate) struct EncodedSet {
    pub feats: Vec<FeatureMap>,
    pub labels: Vec<LabelMap>,
}

impl EncodedSet {
    fn encode<'a>(encoder: &Encoder, items: impl IntoIterator<Item = (&'a Image, &'a LabelMap)>) -> Result<Self> {
        let mut out = Self::default();
        for (image, label) in items {
            out.feats.push(encoder.encode(image)?);
            out.labels.push(label.clone());
        }
        Ok(out)
    }

    fn len(&self) -> usize {
        self.feats.len()
    }
}

/// Replay labels are rewritten once, at `trigger`, with knowledge
/// inpainting.
pub(crate) struct KnowledgePlan<'a> {
    pub previous: &'a DecoderHead,
    pub encoder: &'a Encoder,
    pub new_classes: Vec<ClassId>,
    pub mode: KnowledgeMode,
    pub trigger: usize,
}

/// Which head is being trained; selects independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Purpose {
    Main = 0,
    Helper = 1,
}

pub(crate) struct TrainLogs<'a> {
    pub batches: Option<&'a mut Vec<BatchRecord>>,
    pub audit: &'a mut Vec<AuditRecord>,
}

pub(crate) fn schedule_for(head: &HeadConfig, n_classes: usize, seed: u64) -> TrainSchedule {
    TrainSchedule {
        initial_lr: head.initial_lr,
        final_lr: head.final_lr,
        power: head.power,
        total_steps: head.steps_per_class * n_classes,
        batch_size: 0,
        seed,
    }
}

/// SGD over interleaved batches of current and replay images, sampling
/// `pixels` pixels per image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_interleaved(
    head: DecoderHead,
    mut schedule: TrainSchedule,
    pixels: usize,
    current: &EncodedSet,
    replay: Option<&EncodedSet>,
    spec: InterleaveSpec,
    knowledge: Option<KnowledgePlan<'_>>,
    (seed, step, purpose): (u64, usize, Purpose),
    logs: TrainLogs<'_>,
) -> Result<(DecoderHead, LossTrace)> {
    let n_replay = replay.map_or(0, EncodedSet::len);
    schedule.batch_size = spec.batch_size();
    let plan = interleave_batches(
        current.len(),
        n_replay,
        &spec,
        schedule.total_steps,
        rng::derive(seed, &[rng::tag("batches"), step as u64, purpose as u64]),
    )?;
    let mut pix_rng = rng::stream(seed, "pixels", &[step as u64, purpose as u64]);
    let mut replay_labels: Option<Vec<LabelMap>> = None;
    let mut trainer = HeadTrainer::new(head, schedule)?;
    let dim = trainer.head().dim();
    let TrainLogs { mut batches, audit } = logs;
    for (t, b) in plan.iter().enumerate() {
        if let (Some(k), Some(r)) = (&knowledge, replay) {
            if t == k.trigger && k.mode != KnowledgeMode::Off {
                let ctx = InpaintContext::new(k.encoder, k.previous, trainer.head(), &k.new_classes)?;
                let mut changed = 0usize;
                let rewritten = r
                    .feats
                    .iter()
                    .zip(&r.labels)
                    .map(|(f, y)| {
                        let out = knowledge_inpaint_features(y, f, &ctx, k.mode)?;
                        changed += out.data().iter().zip(y.data()).filter(|(a, b)| a != b).count();
                        Ok(out)
                    })
                    .collect::<Result<Vec<_>>>()?;
                replay_labels = Some(rewritten);
                audit.push(AuditRecord {
                    step,
                    stage: Stage::KnowledgeInpaint,
                    detail: format!("at step {t}: {changed} pixels relabeled over {} images", r.len()),
                });
            }
        }
        let mut batch = PixelBatch::new(dim);
        let mut push = |f: &FeatureMap, y: &LabelMap, rng: &mut rand_chacha::ChaCha8Rng| {
            for _ in 0..pixels {
                let p = rng.gen_range(0..f.pixels());
                batch.push(f.pixel(p), y.data()[p]);
            }
        };
        for &i in &b.current {
            push(&current.feats[i], &current.labels[i], &mut pix_rng);
        }
        if let Some(r) = replay {
            let labels = replay_labels.as_ref().unwrap_or(&r.labels);
            for &i in &b.replay {
                push(&r.feats[i], &labels[i], &mut pix_rng);
            }
        }
        trainer.step(&batch)?;
        if let Some(log) = batches.as_deref_mut() {
            log.push(BatchRecord {
                step,
                current: b.current.len(),
                replay: b.replay.len(),
            });
        }
    }
    Ok(trainer.finish())
}

/// Held-out evaluation images over the protocol classes, encoded once the
/// encoder is frozen.
#[derive(Debug, Clone)]
pub(crate) struct TestSet {
    pub feats: Vec<FeatureMap>,
    pub truths: Vec<LabelMap>,
}

impl TestSet {
    pub fn build(world: &World, protocol: &ProtocolSpec, encoder: &Encoder, config: &ExperimentConfig) -> Result<Self> {
        let samples = crate::shapeworld::generate_test_set_over(
            world,
            &protocol.all_classes(),
            config.eval.test_size,
            rng::derive(config.seed, &[rng::tag("test")]),
        )?;
        let mut out = Self {
            feats: Vec::with_capacity(samples.len()),
            truths: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            out.feats.push(encoder.encode(&s.image)?);
            out.truths.push(s.truth);
        }
        Ok(out)
    }
}

/// Class groups used for reporting after the model has learned `seen`.
pub(crate) fn groups(protocol: &ProtocolSpec, seen: &[ClassId], include_bg: bool) -> (Vec<ClassId>, Vec<ClassId>) {
    let mut old = Vec::new();
    if include_bg {
        old.push(BACKGROUND);
    }
    old.extend(protocol.group(0));
    let new: Vec<ClassId> = seen
        .iter()
        .copied()
        .filter(|&c| c != BACKGROUND && !old.contains(&c))
        .collect();
    (old, new)
}

pub(crate) struct Evaluation {
    pub metrics: StepMetrics,
    pub matrix: ConfusionMatrix,
    pub excluded: Vec<ClassId>,
}

pub(crate) fn evaluate(
    head: &DecoderHead,
    test: &TestSet,
    protocol: &ProtocolSpec,
    num_classes: usize,
    include_bg: bool,
    step: usize,
) -> Result<Evaluation> {
    let preds = test
        .feats
        .iter()
        .map(|f| head.predict_all(f))
        .collect::<Result<Vec<_>>>()?;
    let matrix = confusion(&preds, &test.truths, num_classes)?;
    let (old, new) = groups(protocol, head.classes(), include_bg);
    let all: Vec<ClassId> = old.iter().chain(&new).copied().collect();
    let old_m = miou(&matrix, &old)?;
    let new_m = if new.is_empty() { None } else { Some(miou(&matrix, &new)?) };
    let all_m = miou(&matrix, &all)?;
    Ok(Evaluation {
        metrics: StepMetrics {
            step,
            old: old_m.value,
            new: new_m.map(|m| m.value),
            all: all_m.value,
        },
        matrix,
        excluded: all_m.excluded,
    })
}

/// Everything carried from one step to the next.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub step: usize,
    pub config: ExperimentConfig,
    pub world: World,
    pub protocol: ProtocolSpec,
    pub encoder: Encoder,
    /// Main decoder `D_k` over `C_{0→k}` and background.
    pub main: DecoderHead,
    /// Helper decoder `D^H_{C_i}` for every completed step `i`.
    pub helpers: Vec<DecoderHead>,
    pub discriminator: Option<Discriminator>,
    /// `R_{C_{0→k-1}}` once step `k` has started.
    pub replay: ReplaySet,
    pub thresholds: BTreeMap<ClassId, SizeThreshold>,
    pub audit: Vec<AuditRecord>,
    pub batches: Vec<BatchRecord>,
    pub filter_audit: Vec<FilterRecord>,
    pub disc_reports: Vec<(usize, DiscTrainReport)>,
    pub losses: Vec<LossTrace>,
}

impl PipelineState {
    /// Untrained state: unfitted encoder and a background-only head.
    pub(crate) fn blank(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let world = World::new(config.world.clone())?;
        let protocol = config.protocol.spec()?;
        Ok(Self {
            step: 0,
            config: config.clone(),
            encoder: Encoder::new(world.size(), world.size()),
            world,
            protocol,
            main: DecoderHead::zeroed(&[BACKGROUND], crate::segmodel::FEATURE_DIM)?,
            helpers: Vec::new(),
            discriminator: None,
            replay: ReplaySet::new(config.replay.n_r),
            thresholds: BTreeMap::new(),
            audit: Vec::new(),
            batches: Vec::new(),
            filter_audit: Vec::new(),
            disc_reports: Vec::new(),
            losses: Vec::new(),
        })
    }

    pub(crate) fn seed(&self, name: &str, step: usize) -> u64 {
        rng::derive(self.config.seed, &[rng::tag(name), step as u64])
    }

    /// The fixed per-class web pools replay images are drawn from.
    pub fn web_source(&self) -> ShapeWorldSource<'_> {
        ShapeWorldSource::new(&self.world, self.config.web.clone(), self.seed("web", 0))
    }

    fn log(&mut self, step: usize, stage: Stage, detail: impl Into<String>) {
        self.audit.push(AuditRecord {
            step,
            stage,
            detail: detail.into(),
        });
    }
}

pub(crate) fn task_data(config: &ExperimentConfig, world: &World, protocol: &ProtocolSpec, k: usize) -> Result<TaskDataset> {
    generate_task_dataset(
        world,
        protocol,
        k,
        protocol.samples_per_step[k],
        rng::derive(config.seed, &[rng::tag("task"), k as u64]),
    )
}

pub(crate) fn with_background(classes: &[ClassId]) -> Vec<ClassId> {
    let mut out = vec![BACKGROUND];
    out.extend_from_slice(classes);
    out
}

fn thresholds_for(config: &ExperimentConfig, data: &TaskDataset, classes: &[ClassId]) -> Result<Vec<SizeThreshold>> {
    classes
        .iter()
        .map(|&c| match config.selection.semantic {
            SemanticRule::Cdf => Ok(size_threshold(&class_size_cdf(data, c)?)),
            SemanticRule::Fixed | SemanticRule::None => SizeThreshold::fixed(c, config.selection.fixed_threshold),
        })
        .collect()
}

/// Subsamples the larger set to the size of the smaller one, keeping order.
fn balanced(mut pos: Vec<Vec<f32>>, mut neg: Vec<Vec<f32>>, seed: u64) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let n = pos.len().min(neg.len());
    let mut rng = rng::stream(seed, "balance", &[]);
    let mut shrink = |v: &mut Vec<Vec<f32>>| {
        if v.len() > n {
            let mut keep = sample_indices(&mut rng, v.len(), n).into_vec();
            keep.sort_unstable();
            *v = keep.into_iter().map(|i| std::mem::take(&mut v[i])).collect();
        }
    };
    shrink(&mut pos);
    shrink(&mut neg);
    (pos, neg)
}

fn helper_head(
    config: &ExperimentConfig,
    data: &EncodedSet,
    group: &[ClassId],
    (seed, step): (u64, usize),
    audit: &mut Vec<AuditRecord>,
) -> Result<(DecoderHead, LossTrace)> {
    let head = DecoderHead::zeroed(&with_background(group), crate::segmodel::FEATURE_DIM)?;
    train_interleaved(
        head,
        schedule_for(&config.helper, group.len(), seed),
        config.helper.pixels_per_image,
        data,
        None,
        InterleaveSpec {
            r_new: config.interleave.r_new,
            r_old: 0,
        },
        None,
        (seed, step, Purpose::Helper),
        TrainLogs { batches: None, audit },
    )
}

/// Trains `M_0` on `T_0` (fitting the encoder first), then freezes the
/// encoder. Shared by every incremental method.
pub(crate) fn step0_main(config: &ExperimentConfig) -> Result<(PipelineState, TaskDataset, EncodedSet)> {
    let mut state = PipelineState::blank(config)?;
    let data = task_data(config, &state.world, &state.protocol, 0)?;
    state.encoder.fit(data.samples.iter().map(|s| &s.image))?;
    state.log(0, Stage::FitEncoder, format!("{} images", data.samples.len()));
    let current = EncodedSet::encode(&state.encoder, data.samples.iter().map(|s| (&s.image, &s.label)))?;
    let group = state.protocol.group(0);
    let head = DecoderHead::zeroed(&with_background(&group), crate::segmodel::FEATURE_DIM)?;
    let (main, trace) = train_interleaved(
        head,
        schedule_for(&config.model, group.len(), state.seed("main", 0)),
        config.model.pixels_per_image,
        &current,
        None,
        InterleaveSpec {
            r_new: config.interleave.r_new,
            r_old: 0,
        },
        None,
        (config.seed, 0, Purpose::Main),
        TrainLogs {
            batches: Some(&mut state.batches),
            audit: &mut state.audit,
        },
    )?;
    state.main = main;
    state.losses.push(trace);
    state.log(0, Stage::TrainMain, format!("classes {:?}", state.main.classes()));
    Ok((state, data, current))
}

/// Step 0 of the full pipeline: `M_0`, the helper for `C_0`, the initial
/// discriminator, then the encoder is frozen.
pub fn run_step0(config: &ExperimentConfig) -> Result<PipelineState> {
    let (mut state, data, current) = step0_main(config)?;
    let group = state.protocol.group(0);
    let (helper, _) = helper_head(config, &current, &group, (config.seed, 0), &mut state.audit)?;
    state.helpers.push(helper);
    state.log(0, Stage::TrainHelper, format!("classes {:?}", with_background(&group)));
    for t in thresholds_for(config, &data, &group)? {
        state.thresholds.insert(t.class, t);
    }

    if config.replay.enabled && config.selection.adversarial {
        let positives: Vec<Vec<f32>> = data.samples.iter().map(|s| disc_features(&s.image)).collect();
        let mut negatives = Vec::new();
        for &c in &group {
            let mut dedup = config.replay.dedup_db.map(Deduplicator::new).transpose()?;
            let stream = WebStream::new(&state.world, c, &config.web, state.seed("web-bootstrap", 0))?;
            for sample in stream.take(config.selection.bootstrap_pool_per_class) {
                let image = sample?.image;
                if let Some(d) = dedup.as_mut() {
                    if !d.offer(&image)? {
                        continue;
                    }
                }
                negatives.push(disc_features(&image));
            }
        }
        let (pos, neg) = balanced(positives, negatives, state.seed("disc-balance", 0));
        let init = Discriminator::initialized(config.selection.disc_hidden, state.seed("disc-init", 0))?;
        let mut schedule = config.selection.discriminator.clone();
        schedule.seed = state.seed("disc", 0);
        let (d, report) = train_discriminator(&init, &pos, &neg, &schedule)?;
        state.log(
            0,
            Stage::TrainDiscriminator,
            format!(
                "{} positives, {} negatives, held-out accuracy {:.3}",
                pos.len(),
                neg.len(),
                report.holdout_accuracy
            ),
        );
        state.discriminator = Some(d);
        state.disc_reports.push((0, report));
    } else {
        state.log(0, Stage::TrainDiscriminator, "skipped");
    }
    state.encoder.freeze();
    state.log(0, Stage::FreezeEncoder, state.encoder.checksum());
    Ok(state)
}

/// Step `k ≥ 1` of the full pipeline, in the order of the incremental
/// procedure: background inpainting, helper training, replay assembly,
/// interleaved training with knowledge inpainting, discriminator update.
pub fn run_incremental_step(mut state: PipelineState, k: usize) -> Result<PipelineState> {
    if k == 0 || state.step + 1 != k || k > state.protocol.last_step() {
        return Err(invalid(format!("cannot run step {k} after step {}", state.step)));
    }
    if !state.encoder.is_frozen() {
        return Err(invalid("encoder must be frozen before incremental steps"));
    }
    let config = state.config.clone();
    let checksum = state.encoder.checksum();
    let data = task_data(&config, &state.world, &state.protocol, k)?;
    let group = state.protocol.group(k);
    let previous = state.main.clone();
    let expanded = previous.expand(&group)?;

    // (1) background inpainting of T_k
    let mut current = EncodedSet::encode(&state.encoder, data.samples.iter().map(|s| (&s.image, &s.label)))?;
    let visible = current.clone();
    if config.inpaint.background {
        let ctx = InpaintContext::new(&state.encoder, &previous, &expanded, &group)?;
        let mut changed = 0usize;
        for (f, y) in current.feats.iter().zip(current.labels.iter_mut()) {
            let out = background_inpaint_features(y, f, &ctx)?;
            changed += out.data().iter().zip(y.data()).filter(|(a, b)| a != b).count();
            *y = out;
        }
        state.log(k, Stage::BackgroundInpaint, format!("{changed} pixels relabeled"));
    } else {
        state.log(k, Stage::BackgroundInpaint, "skipped");
    }

    // (2) helper decoder for C_k
    let (helper, _) = helper_head(&config, &visible, &group, (config.seed, k), &mut state.audit)?;
    state.helpers.push(helper);
    state.log(k, Stage::TrainHelper, format!("classes {:?}", with_background(&group)));
    for t in thresholds_for(&config, &data, &group)? {
        state.thresholds.insert(t.class, t);
    }

    // (3) replay images for the group learned at step k-1
    let mut examined = Vec::new();
    if config.replay.enabled {
        let source = state.web_source();
        let old_group = state.protocol.group(k - 1);
        let filters = ReplayFilters {
            dedup_threshold_db: config.replay.dedup_db,
            discriminator: if config.selection.adversarial {
                state.discriminator.as_ref()
            } else {
                None
            },
            size_thresholds: (config.selection.semantic != SemanticRule::None).then_some(&state.thresholds),
        };
        let fragment = build_replay_set(
            &old_group,
            k - 1,
            config.replay.n_r,
            config.replay.pool_size,
            &source,
            &filters,
            &state.helpers[k - 1],
            &state.encoder,
        )?;
        state.log(
            k,
            Stage::BuildReplay,
            format!(
                "classes {:?}: {:?} kept, {} shortfalls, {} examined",
                old_group,
                fragment.set.counts(),
                fragment.shortfalls.len(),
                fragment.examined.len()
            ),
        );
        state.filter_audit.extend(fragment.audit);
        examined = fragment.examined;
        state.replay.merge(fragment.set)?;
        check_floor(&state.replay, &state.protocol.classes_upto(k - 1), config.replay.shortfall_floor)?;
        state.log(k, Stage::MergeReplay, format!("{} replay images", state.replay.len()));
    } else {
        state.log(k, Stage::BuildReplay, "skipped");
        state.log(k, Stage::MergeReplay, "skipped");
    }

    // (4)-(6) interleaved training of D_k with knowledge inpainting
    let replay = if config.replay.enabled && !state.replay.is_empty() {
        Some(EncodedSet::encode(
            &state.encoder,
            state.replay.samples().map(|s| (&s.image, &s.pseudo)),
        )?)
    } else {
        None
    };
    let spec = InterleaveSpec {
        r_new: config.interleave.r_new,
        r_old: if replay.is_some() { config.interleave.r_old } else { 0 },
    };
    let schedule = schedule_for(&config.model, group.len(), state.seed("main", k));
    let knowledge = (replay.is_some() && config.inpaint.knowledge != KnowledgeMode::Off).then(|| KnowledgePlan {
        previous: &previous,
        encoder: &state.encoder,
        new_classes: group.clone(),
        mode: config.inpaint.knowledge,
        trigger: (config.inpaint.trigger_fraction * schedule.total_steps as f64).floor() as usize,
    });
    state.audit.push(AuditRecord {
        step: k,
        stage: Stage::ExpandHead,
        detail: format!("classes {:?}", expanded.classes()),
    });
    let mut audit = std::mem::take(&mut state.audit);
    let mut batches = std::mem::take(&mut state.batches);
    if knowledge.is_none() {
        audit.push(AuditRecord {
            step: k,
            stage: Stage::KnowledgeInpaint,
            detail: "skipped".into(),
        });
    }
    let (main, trace) = train_interleaved(
        expanded,
        schedule,
        config.model.pixels_per_image,
        &current,
        replay.as_ref(),
        spec,
        knowledge,
        (config.seed, k, Purpose::Main),
        TrainLogs {
            batches: Some(&mut batches),
            audit: &mut audit,
        },
    )?;
    state.audit = audit;
    state.batches = batches;
    state.main = main;
    state.losses.push(trace);
    state.log(k, Stage::TrainMain, format!("classes {:?}", state.main.classes()));

    // (7) discriminator update: current images and the core set are
    // positives, the rest of the examined web images negatives
    match state.discriminator.clone() {
        Some(d) if config.replay.enabled && config.selection.adversarial => {
            let rule = CoreSetRule::new(config.selection.alpha)?;
            let mut positives: Vec<Vec<f32>> = data.samples.iter().map(|s| disc_features(&s.image)).collect();
            let mut negatives = Vec::new();
            let mut core = 0usize;
            for e in examined {
                if e.score.is_some_and(|s| s.is_core(&rule)) {
                    positives.push(e.features);
                    core += 1;
                } else {
                    negatives.push(e.features);
                }
            }
            if negatives.is_empty() {
                state.log(k, Stage::FineTuneDiscriminator, "skipped: no negatives");
            } else {
                let (pos, neg) = balanced(positives, negatives, state.seed("disc-balance", k));
                let mut schedule = config.selection.discriminator.clone();
                schedule.seed = state.seed("disc", k);
                let (d, report) = train_discriminator(&d, &pos, &neg, &schedule)?;
                state.log(
                    k,
                    Stage::FineTuneDiscriminator,
                    format!(
                        "{core} core images, {} positives, {} negatives, held-out accuracy {:.3}",
                        pos.len(),
                        neg.len(),
                        report.holdout_accuracy
                    ),
                );
                state.discriminator = Some(d);
                state.disc_reports.push((k, report));
            }
        }
        _ => state.log(k, Stage::FineTuneDiscriminator, "skipped"),
    }

    if state.encoder.checksum() != checksum {
        return Err(Error::FrozenEncoder);
    }
    state.step = k;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_have_exact_composition() {
        let spec = InterleaveSpec { r_new: 4, r_old: 4 };
        let b = interleave_batches(10, 7, &spec, 50, 1).unwrap();
        assert!(b.iter().all(|x| x.current.len() == 4 && x.replay.len() == 4));
        assert!(b.iter().all(|x| x.current.iter().all(|&i| i < 10) && x.replay.iter().all(|&i| i < 7)));
        let only_new = interleave_batches(10, 0, &InterleaveSpec { r_new: 4, r_old: 0 }, 5, 1).unwrap();
        assert!(only_new.iter().all(|x| x.replay.is_empty()));
        assert!(interleave_batches(10, 0, &spec, 5, 1).is_err());
        assert_eq!(b, interleave_batches(10, 7, &spec, 50, 1).unwrap());
    }

    #[test]
    fn replay_draws_follow_set_sizes() {
        // 3 replay images of class A (indices 0..3) and 1 of class B
        let spec = InterleaveSpec { r_new: 1, r_old: 4 };
        let b = interleave_batches(1, 4, &spec, 10_000, 5).unwrap();
        let a = b.iter().flat_map(|x| &x.replay).filter(|&&i| i < 3).count() as f64;
        let n = 40_000.0;
        let sigma = (n * 0.75 * 0.25f64).sqrt();
        assert!((a - 0.75 * n).abs() <= 3.0 * sigma, "{a}");
    }

    #[test]
    fn balancing_keeps_the_smaller_set() {
        let pos = vec![vec![1.0]; 3];
        let neg: Vec<Vec<f32>> = (0..10).map(|i| vec![i as f32]).collect();
        let (p, n) = balanced(pos, neg, 0);
        assert_eq!((p.len(), n.len()), (3, 3));
        assert!(n.windows(2).all(|w| w[0][0] < w[1][0]));
    }
}
