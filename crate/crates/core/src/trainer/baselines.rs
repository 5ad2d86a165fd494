use super::{
    evaluate, run_incremental_step, run_step0, schedule_for, step0_main, task_data, with_background, AuditRecord,
    EncodedSet, Evaluation, ExperimentConfig, InterleaveSpec, Method, PipelineState, Purpose, Stage, TestSet,
    TrainLogs,
};
use crate::error::{invalid, Result};
use crate::eval::{delta, MetricsReport, StepMetrics};
use crate::image::{ClassId, Image, LabelMap};
use crate::rng;
use crate::segmodel::{checkpoint, DecoderHead, FEATURE_DIM};
use crate::shapeworld::{generate_joint_dataset_over, TaskDataset};
use std::time::Instant;

/// A finished run: its report and the final training state.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub state: PipelineState,
}

/// Storage cost of one raw training sample: RGB bytes plus one label byte
/// per pixel.
pub const BYTES_PER_STORED_SAMPLE: usize = 64 * 64 * 4;

fn bytes_per_sample(image_size: usize) -> usize {
    image_size * image_size * 4
}

/// Samples per class the store-and-replay baseline may keep: the helper
/// checkpoint size (or the configured override) divided by the cost of one
/// raw sample.
pub fn stored_samples_per_class(config: &ExperimentConfig) -> Result<usize> {
    let budget = match config.store_replay.budget_bytes {
        Some(b) => b as usize,
        None => {
            let spec = config.protocol.spec()?;
            let helper = DecoderHead::zeroed(&with_background(&spec.group(0)), FEATURE_DIM)?;
            checkpoint::to_bytes(&helper).len()
        }
    };
    Ok(budget / bytes_per_sample(config.world.image_size))
}

struct Tracker<'a> {
    config: &'a ExperimentConfig,
    test: Option<TestSet>,
    trace: Vec<StepMetrics>,
    last: Option<Evaluation>,
}

impl<'a> Tracker<'a> {
    fn new(config: &'a ExperimentConfig) -> Self {
        Self {
            config,
            test: None,
            trace: Vec::new(),
            last: None,
        }
    }

    fn record(&mut self, state: &PipelineState, step: usize) -> Result<()> {
        if self.test.is_none() {
            self.test = Some(TestSet::build(&state.world, &state.protocol, &state.encoder, self.config)?);
        }
        let e = evaluate(
            &state.main,
            self.test.as_ref().expect("built above"),
            &state.protocol,
            state.world.num_classes(),
            self.config.eval.include_background,
            step,
        )?;
        self.trace.push(e.metrics.clone());
        self.last = Some(e);
        Ok(())
    }

    fn finish(self, method: Method, state: PipelineState, started: Instant) -> Result<RunOutput> {
        let e = self.last.ok_or_else(|| invalid("run produced no evaluation"))?;
        let per_class_iou: Vec<(ClassId, Option<f64>)> =
            state.main.classes().iter().map(|&c| (c, e.matrix.iou(c))).collect();
        Ok(RunOutput {
            report: MetricsReport {
                method: method.as_str().to_string(),
                protocol: state.protocol.name(),
                mode: state.protocol.mode.to_string(),
                seed: self.config.seed,
                include_background: self.config.eval.include_background,
                per_class_iou,
                old: e.metrics.old,
                new: e.metrics.new,
                all: e.metrics.all,
                delta: None,
                excluded: e.excluded,
                trace: self.trace,
                config_fingerprint: self.config.fingerprint(),
                runtime_secs: started.elapsed().as_secs_f64(),
            },
            state,
        })
    }
}

/// The full pipeline with whatever components `config` enables.
pub fn run_web_replay(config: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let mut tracker = Tracker::new(config);
    let mut state = run_step0(config)?;
    tracker.record(&state, 0)?;
    for k in 1..=state.protocol.last_step() {
        state = run_incremental_step(state, k)?;
        tracker.record(&state, k)?;
    }
    tracker.finish(Method::WebReplay, state, started)
}

/// Trains on `(images, labels)` for step `k` with optional stored replay.
fn plain_step(
    state: &mut PipelineState,
    k: usize,
    current: &EncodedSet,
    replay: Option<&EncodedSet>,
) -> Result<()> {
    let config = state.config.clone();
    let group = state.protocol.group(k);
    let expanded = state.main.expand(&group)?;
    let spec = InterleaveSpec {
        r_new: config.interleave.r_new,
        r_old: if replay.is_some() { config.interleave.r_old } else { 0 },
    };
    state.audit.push(AuditRecord {
        step: k,
        stage: Stage::ExpandHead,
        detail: format!("classes {:?}", expanded.classes()),
    });
    let (main, trace) = super::train_interleaved(
        expanded,
        schedule_for(&config.model, group.len(), state.seed("main", k)),
        config.model.pixels_per_image,
        current,
        replay,
        spec,
        None,
        (config.seed, k, Purpose::Main),
        TrainLogs {
            batches: Some(&mut state.batches),
            audit: &mut state.audit,
        },
    )?;
    state.main = main;
    state.losses.push(trace);
    state.audit.push(AuditRecord {
        step: k,
        stage: Stage::TrainMain,
        detail: format!("classes {:?}", state.main.classes()),
    });
    state.step = k;
    Ok(())
}

/// Sequential training on `T_0..T_K` with nothing to counter forgetting.
pub fn run_fine_tuning(config: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let mut tracker = Tracker::new(config);
    let (mut state, _, _) = step0_main(config)?;
    state.encoder.freeze();
    tracker.record(&state, 0)?;
    for k in 1..=state.protocol.last_step() {
        let data = task_data(config, &state.world, &state.protocol, k)?;
        let current = EncodedSet::encode(&state.encoder, data.samples.iter().map(|s| (&s.image, &s.label)))?;
        plain_step(&mut state, k, &current, None)?;
        tracker.record(&state, k)?;
    }
    tracker.finish(Method::FineTune, state, started)
}

fn store_samples(
    stored: &mut Vec<(Image, LabelMap)>,
    state: &mut PipelineState,
    data: &TaskDataset,
    k: usize,
    per_class: usize,
) {
    let before = stored.len();
    for c in state.protocol.group(k) {
        stored.extend(
            data.samples
                .iter()
                .filter(|s| s.label.contains(c))
                .take(per_class)
                .map(|s| (s.image.clone(), s.label.clone())),
        );
    }
    state.audit.push(AuditRecord {
        step: k,
        stage: Stage::StoreSamples,
        detail: format!("{} samples stored, {per_class} per class", stored.len() - before),
    });
}

/// Keeps up to `per_class` raw samples per class of each step and replays
/// them afterwards. With a zero allowance it reduces to fine-tuning.
pub fn store_and_replay_baseline(config: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let per_class = stored_samples_per_class(config)?;
    let mut tracker = Tracker::new(config);
    let (mut state, data0, _) = step0_main(config)?;
    state.encoder.freeze();
    tracker.record(&state, 0)?;
    let mut stored: Vec<(Image, LabelMap)> = Vec::new();
    store_samples(&mut stored, &mut state, &data0, 0, per_class);
    for k in 1..=state.protocol.last_step() {
        let data = task_data(config, &state.world, &state.protocol, k)?;
        let current = EncodedSet::encode(&state.encoder, data.samples.iter().map(|s| (&s.image, &s.label)))?;
        let replay = if stored.is_empty() {
            None
        } else {
            Some(EncodedSet::encode(&state.encoder, stored.iter().map(|(x, y)| (x, y)))?)
        };
        plain_step(&mut state, k, &current, replay.as_ref())?;
        tracker.record(&state, k)?;
        store_samples(&mut stored, &mut state, &data, k, per_class);
    }
    tracker.finish(Method::StoreReplay, state, started)
}

/// Upper bound: one model trained on fully labeled images of every
/// protocol class.
pub fn run_joint(config: &ExperimentConfig) -> Result<RunOutput> {
    let started = Instant::now();
    let mut state = PipelineState::blank(config)?;
    let n: usize = state.protocol.samples_per_step.iter().sum();
    let classes = state.protocol.all_classes();
    let data = generate_joint_dataset_over(&state.world, &classes, n, rng::derive(config.seed, &[rng::tag("joint")]))?;
    state.encoder.fit(data.samples.iter().map(|s| &s.image))?;
    state.encoder.freeze();
    let current = EncodedSet::encode(&state.encoder, data.samples.iter().map(|s| (&s.image, &s.label)))?;
    let head = DecoderHead::zeroed(&with_background(&classes), FEATURE_DIM)?;
    let last = state.protocol.last_step();
    let (main, trace) = super::train_interleaved(
        head,
        schedule_for(&config.model, classes.len(), state.seed("joint-main", 0)),
        config.model.pixels_per_image,
        &current,
        None,
        InterleaveSpec {
            r_new: config.interleave.batch_size(),
            r_old: 0,
        },
        None,
        (rng::derive(config.seed, &[rng::tag("joint")]), last, Purpose::Main),
        TrainLogs {
            batches: Some(&mut state.batches),
            audit: &mut state.audit,
        },
    )?;
    state.main = main;
    state.losses.push(trace);
    state.step = last;
    state.audit.push(AuditRecord {
        step: last,
        stage: Stage::TrainMain,
        detail: format!("joint over {:?}", state.main.classes()),
    });
    let mut tracker = Tracker::new(config);
    tracker.record(&state, last)?;
    tracker.finish(Method::Joint, state, started)
}

pub fn run_method(config: &ExperimentConfig, method: Method) -> Result<RunOutput> {
    match method {
        Method::WebReplay => run_web_replay(config),
        Method::FineTune => run_fine_tuning(config),
        Method::Joint => run_joint(config),
        Method::StoreReplay => store_and_replay_baseline(config),
    }
}

/// Runs each method and fills Δ against a joint run on the same config.
pub fn run_experiment(config: &ExperimentConfig, methods: &[Method]) -> Result<Vec<RunOutput>> {
    if methods.is_empty() {
        return Err(invalid("no methods requested"));
    }
    let joint = run_joint(config)?;
    let joint_all = joint.report.all;
    let mut out = Vec::with_capacity(methods.len());
    let mut joint = Some(joint);
    for &m in methods {
        let mut run = match m {
            Method::Joint => joint.take().map_or_else(|| run_joint(config), Ok)?,
            other => run_method(config, other)?,
        };
        run.report.delta = Some(delta(joint_all, run.report.all));
        log::info!(
            "{} {}: all {:.3} in {:.1}s",
            run.report.method,
            run.report.protocol,
            run.report.all,
            run.report.runtime_secs
        );
        out.push(run);
    }
    Ok(out)
}
