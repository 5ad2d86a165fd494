//! The replay block: web queries for past classes, PSNR deduplication,
//! pseudo-labeling with per-step helper decoders and assembly of replay sets.

mod psnr;

pub use psnr::{dedup, mse, psnr, Deduplicator};

use crate::error::{invalid, Error, Result};
use crate::image::{ClassId, Image, LabelMap, BACKGROUND};
use crate::segmodel::{DecoderHead, Encoder};
use crate::selection::{disc_features, DiscScore, Discriminator, SizeThreshold};
use crate::shapeworld::{web_query, WebNoiseProfile, WebSample, WebStream, World};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

/// Per-pixel argmax of `helper` over its own classes, which must be some
/// `C_i ∪ {b}`.
pub fn pseudo_label(helper: &DecoderHead, encoder: &Encoder, image: &Image) -> Result<LabelMap> {
    if !helper.is_trained() {
        return Err(invalid("helper decoder has not been trained"));
    }
    if helper.classes().first() != Some(&BACKGROUND) {
        return Err(invalid("helper decoder must include the background class"));
    }
    helper.predict_all(&encoder.encode(image)?)
}

/// Which filter stages a sample has passed. Disabled stages count as passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub passed_dedup: bool,
    pub passed_adversarial: bool,
    pub passed_semantic: bool,
}

impl Provenance {
    pub fn all_passed(&self) -> bool {
        self.passed_dedup && self.passed_adversarial && self.passed_semantic
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySample {
    pub image: Image,
    /// Helper prediction over `group ∪ {b}`.
    pub pseudo: LabelMap,
    pub query_class: ClassId,
    /// The class group `C_i` whose helper produced the pseudo-label.
    pub group: Vec<ClassId>,
    pub step: usize,
    pub pool_index: usize,
    pub flags: Provenance,
}

/// Replay samples keyed by query class, at most `n_r` per class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplaySet {
    n_r: usize,
    per_class: BTreeMap<ClassId, Vec<ReplaySample>>,
}

impl ReplaySet {
    pub fn new(n_r: usize) -> Self {
        Self {
            n_r,
            per_class: BTreeMap::new(),
        }
    }

    pub fn n_r(&self) -> usize {
        self.n_r
    }

    pub fn insert(&mut self, class: ClassId, samples: Vec<ReplaySample>) -> Result<()> {
        if samples.len() > self.n_r {
            return Err(invalid(format!(
                "{} replay samples for class {class} exceed N_r = {}",
                samples.len(),
                self.n_r
            )));
        }
        if let Some(s) = samples.iter().find(|s| s.query_class != class) {
            return Err(invalid(format!(
                "sample queried for class {} filed under class {class}",
                s.query_class
            )));
        }
        if self.per_class.contains_key(&class) {
            return Err(invalid(format!("class {class} already has a replay fragment")));
        }
        self.per_class.insert(class, samples);
        Ok(())
    }

    /// Union with a fragment covering other classes.
    pub fn merge(&mut self, other: ReplaySet) -> Result<()> {
        for (class, samples) in other.per_class {
            self.insert(class, samples)?;
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.per_class.keys().copied().collect()
    }

    pub fn get(&self, class: ClassId) -> &[ReplaySample] {
        self.per_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples, ascending by class then pool order.
    pub fn samples(&self) -> impl Iterator<Item = &ReplaySample> {
        self.per_class.values().flatten()
    }

    pub fn counts(&self) -> BTreeMap<ClassId, usize> {
        self.per_class.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// `(class, pool index)` identities, for set comparisons.
    pub fn keys(&self) -> Vec<(ClassId, usize)> {
        self.samples().map(|s| (s.query_class, s.pool_index)).collect()
    }
}

/// A source of unlabeled images per class: the only view of the web the
/// pipeline gets.
pub trait ReplaySource {
    fn stream(&self, class: ClassId) -> Result<Box<dyn Iterator<Item = Result<Image>> + '_>>;
}

/// Shape-world web simulator. Each class draws from its own fixed pool.
#[derive(Debug, Clone)]
pub struct ShapeWorldSource<'w> {
    world: &'w World,
    profile: WebNoiseProfile,
    seed: u64,
}

impl<'w> ShapeWorldSource<'w> {
    pub fn new(world: &'w World, profile: WebNoiseProfile, seed: u64) -> Self {
        Self { world, profile, seed }
    }

    /// The same images with oracle labels and tags; for audits only.
    pub fn oracle_pool(&self, class: ClassId, count: usize) -> Result<Vec<WebSample>> {
        web_query(self.world, class, count, &self.profile, self.seed)
    }
}

impl ReplaySource for ShapeWorldSource<'_> {
    fn stream(&self, class: ClassId) -> Result<Box<dyn Iterator<Item = Result<Image>> + '_>> {
        let s = WebStream::new(self.world, class, &self.profile, self.seed)?;
        Ok(Box::new(s.map(|r| r.map(|w| w.image))))
    }
}

/// Filter configuration for one replay build. `None` disables a stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayFilters<'a> {
    pub dedup_threshold_db: Option<f64>,
    pub discriminator: Option<&'a Discriminator>,
    pub size_thresholds: Option<&'a BTreeMap<ClassId, SizeThreshold>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Duplicate,
    RejectedAdversarial,
    RejectedSemantic,
    Kept,
}

/// One line of the filter audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub step: usize,
    pub class: ClassId,
    pub pool_index: usize,
    pub z_p: Option<f32>,
    pub z_rp: Option<f32>,
    pub class_fraction: Option<f64>,
    pub threshold: Option<f64>,
    pub decision: Decision,
}

/// A deduplicated web image seen during a build, kept for discriminator
/// fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ExaminedImage {
    pub class: ClassId,
    pub pool_index: usize,
    pub features: Vec<f32>,
    pub score: Option<DiscScore>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub class: ClassId,
    pub found: usize,
    pub wanted: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayFragment {
    pub set: ReplaySet,
    pub shortfalls: Vec<Shortfall>,
    pub audit: Vec<FilterRecord>,
    pub examined: Vec<ExaminedImage>,
}

/// Builds `R_{C_i}`: for each class of `group`, scans at most `pool_size`
/// web images in order through dedup, adversarial and semantic filters and
/// keeps the first `n_r` survivors. The scan stops as soon as `n_r`
/// survivors are found, which leaves the result unchanged.
#[allow(clippy::too_many_arguments)]
pub fn build_replay_set(
    group: &[ClassId],
    step: usize,
    n_r: usize,
    pool_size: usize,
    source: &dyn ReplaySource,
    filters: &ReplayFilters<'_>,
    helper: &DecoderHead,
    encoder: &Encoder,
) -> Result<ReplayFragment> {
    let mut expected: Vec<ClassId> = group.to_vec();
    expected.push(BACKGROUND);
    expected.sort_unstable();
    if helper.classes() != expected.as_slice() {
        return Err(invalid(format!(
            "helper covers {:?}, group needs {:?}",
            helper.classes(),
            expected
        )));
    }
    let mut fragment = ReplayFragment {
        set: ReplaySet::new(n_r),
        ..Default::default()
    };
    for &class in group {
        let threshold = match filters.size_thresholds {
            Some(map) => Some(
                *map.get(&class)
                    .ok_or_else(|| invalid(format!("no size threshold for class {class}")))?,
            ),
            None => None,
        };
        let mut dedup = filters.dedup_threshold_db.map(Deduplicator::new).transpose()?;
        let mut kept = Vec::new();
        for (pool_index, image) in source.stream(class)?.take(pool_size).enumerate() {
            if kept.len() >= n_r {
                break;
            }
            let image = image?;
            let mut record = FilterRecord {
                step,
                class,
                pool_index,
                z_p: None,
                z_rp: None,
                class_fraction: None,
                threshold: threshold.map(|t| t.t_size),
                decision: Decision::Duplicate,
            };
            if let Some(d) = dedup.as_mut() {
                if !d.offer(&image)? {
                    fragment.audit.push(record);
                    continue;
                }
            }
            let features = disc_features(&image);
            let score = filters
                .discriminator
                .map(|d| d.score_features(&features))
                .transpose()?;
            record.z_p = score.map(|s| s.z_p);
            record.z_rp = score.map(|s| s.z_rp);
            fragment.examined.push(ExaminedImage {
                class,
                pool_index,
                features,
                score,
                selected: false,
            });
            if score.is_some_and(|s| !s.fools()) {
                record.decision = Decision::RejectedAdversarial;
                fragment.audit.push(record);
                continue;
            }
            let pseudo = pseudo_label(helper, encoder, &image)?;
            record.class_fraction = Some(pseudo.fraction(class));
            if threshold.is_some_and(|t| !t.passes(&pseudo)) {
                record.decision = Decision::RejectedSemantic;
                fragment.audit.push(record);
                continue;
            }
            record.decision = Decision::Kept;
            fragment.audit.push(record);
            fragment.examined.last_mut().expect("just pushed").selected = true;
            kept.push(ReplaySample {
                image,
                pseudo,
                query_class: class,
                group: group.to_vec(),
                step,
                pool_index,
                flags: Provenance {
                    passed_dedup: true,
                    passed_adversarial: true,
                    passed_semantic: true,
                },
            });
        }
        if kept.len() < n_r {
            log::warn!("replay shortfall for class {class}: {} of {n_r}", kept.len());
            fragment.shortfalls.push(Shortfall {
                class,
                found: kept.len(),
                wanted: n_r,
            });
        }
        fragment.set.insert(class, kept)?;
    }
    Ok(fragment)
}

/// Fails with [`Error::ReplayShortfall`] if any class has fewer than `floor`
/// samples.
pub fn check_floor(set: &ReplaySet, classes: &[ClassId], floor: usize) -> Result<()> {
    for &class in classes {
        let found = set.get(class).len();
        if found < floor {
            return Err(Error::ReplayShortfall { class, found, floor });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRow {
    class: ClassId,
    step: usize,
    pool_index: usize,
    passed_dedup: bool,
    passed_adversarial: bool,
    passed_semantic: bool,
    pseudo_label: String,
}

/// Writes `replay.csv` into `dir` plus one PGM pseudo-label per sample.
pub fn write_replay_manifest(dir: &Path, set: &ReplaySet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("replay.csv"))?;
    for s in set.samples() {
        let name = format!("c{:03}_{:05}.pgm", s.query_class, s.pool_index);
        s.pseudo.write_pgm(BufWriter::new(File::create(dir.join(&name))?))?;
        w.serialize(ManifestRow {
            class: s.query_class,
            step: s.step,
            pool_index: s.pool_index,
            passed_dedup: s.flags.passed_dedup,
            passed_adversarial: s.flags.passed_adversarial,
            passed_semantic: s.flags.passed_semantic,
            pseudo_label: name,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_filter_audit(path: &Path, records: &[FilterRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::{train_head, PixelBatch, TrainSchedule, FEATURE_DIM};
    use crate::shapeworld::{CorruptionTag, WorldConfig};

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    fn zero_lr_helper(classes: &[ClassId]) -> DecoderHead {
        let head = DecoderHead::zeroed(classes, FEATURE_DIM).unwrap();
        let mut batch = PixelBatch::new(FEATURE_DIM);
        batch.push(&[0.0; FEATURE_DIM], BACKGROUND);
        let schedule = TrainSchedule {
            initial_lr: 0.0,
            final_lr: 0.0,
            power: 1.0,
            total_steps: 1,
            batch_size: 1,
            seed: 0,
        };
        train_head(head, vec![batch], &schedule).unwrap().0
    }

    fn encoder(w: &World) -> Encoder {
        let mut e = Encoder::new(w.size(), w.size());
        e.freeze();
        e
    }

    #[test]
    fn untrained_helper_is_rejected() {
        let w = world();
        let img = Image::filled(64, 64, [0.3; 3]).unwrap();
        let head = DecoderHead::zeroed(&[0, 1], FEATURE_DIM).unwrap();
        assert!(pseudo_label(&head, &encoder(&w), &img).is_err());
    }

    #[test]
    fn zero_helper_labels_everything_background() {
        let w = world();
        let img = Image::filled(64, 64, [0.3; 3]).unwrap();
        let labels = pseudo_label(&zero_lr_helper(&[0, 1, 2]), &encoder(&w), &img).unwrap();
        assert_eq!(labels.count(BACKGROUND), labels.pixels());
    }

    #[test]
    fn pass_through_filters_keep_first_n_per_class() {
        let w = world();
        let src = ShapeWorldSource::new(&w, WebNoiseProfile::all_clean(), 3);
        let helper = zero_lr_helper(&[0, 1, 2]);
        let frag = build_replay_set(&[1, 2], 0, 5, 100, &src, &ReplayFilters::default(), &helper, &encoder(&w))
            .unwrap();
        assert_eq!(frag.set.counts(), BTreeMap::from([(1, 5), (2, 5)]));
        assert!(frag.shortfalls.is_empty());
        for s in frag.set.samples() {
            assert!(s.flags.all_passed());
            assert!(s.pool_index < 5);
        }
    }

    #[test]
    fn rejecting_semantic_filter_yields_empty_fragment_and_warning() {
        let w = world();
        let src = ShapeWorldSource::new(&w, WebNoiseProfile::all_clean(), 3);
        let helper = zero_lr_helper(&[0, 1]);
        let thresholds = BTreeMap::from([(1, SizeThreshold::fixed(1, 1.0).unwrap())]);
        let filters = ReplayFilters {
            size_thresholds: Some(&thresholds),
            ..Default::default()
        };
        let frag = build_replay_set(&[1], 0, 5, 20, &src, &filters, &helper, &encoder(&w)).unwrap();
        assert!(frag.set.is_empty());
        assert_eq!(
            frag.shortfalls,
            vec![Shortfall {
                class: 1,
                found: 0,
                wanted: 5
            }]
        );
        assert_eq!(frag.audit.len(), 20);
        assert!(check_floor(&frag.set, &[1], 5).is_err());
    }

    #[test]
    fn dedup_removes_tagged_near_duplicates() {
        let w = world();
        let mut profile = WebNoiseProfile::all_clean();
        profile.clean = 0.8;
        profile.near_duplicate = 0.2;
        let src = ShapeWorldSource::new(&w, profile, 11);
        let pool = src.oracle_pool(2, 300).unwrap();
        let images: Vec<Image> = pool.iter().map(|s| s.image.clone()).collect();
        let kept = dedup(&images, 35.0).unwrap();
        let dups = kept
            .iter()
            .filter(|&&i| pool[i].tag == CorruptionTag::NearDuplicate)
            .count();
        assert!(dups as f64 <= 0.02 * kept.len() as f64, "{dups} of {}", kept.len());
        let originals = pool.iter().filter(|s| s.tag != CorruptionTag::NearDuplicate).count();
        assert!(kept.len() as f64 >= 0.98 * originals as f64);
    }

    #[test]
    fn union_rejects_overlap_and_oversize() {
        let mut a = ReplaySet::new(1);
        a.insert(1, Vec::new()).unwrap();
        let mut b = ReplaySet::new(1);
        b.insert(1, Vec::new()).unwrap();
        assert!(a.merge(b).is_err());
        let w = world();
        let src = ShapeWorldSource::new(&w, WebNoiseProfile::all_clean(), 3);
        let frag = build_replay_set(&[1], 0, 2, 10, &src, &ReplayFilters::default(), &zero_lr_helper(&[0, 1]), &encoder(&w))
            .unwrap();
        let samples = frag.set.get(1).to_vec();
        assert!(ReplaySet::new(1).insert(1, samples).is_err());
    }

    #[test]
    fn manifest_lists_every_sample() {
        let w = world();
        let src = ShapeWorldSource::new(&w, WebNoiseProfile::all_clean(), 3);
        let frag = build_replay_set(&[1], 0, 3, 10, &src, &ReplayFilters::default(), &zero_lr_helper(&[0, 1]), &encoder(&w))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_replay_manifest(dir.path(), &frag.set).unwrap();
        let text = fs::read_to_string(dir.path().join("replay.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(dir.path().join("c001_00002.pgm").exists());
    }
}
