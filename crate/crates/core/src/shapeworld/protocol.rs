use super::{render_scene, World};
use crate::error::{invalid, Result};
use crate::image::{ClassId, Image, LabelMap, BACKGROUND};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Step-k images only contain classes seen so far.
    Disjoint,
    /// Step-k images may contain any class; only the current ones are labeled.
    Overlapped,
}

impl std::str::FromStr for Mode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Mode::Disjoint),
            "overlapped" => Ok(Mode::Overlapped),
            other => Err(invalid(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Disjoint => "disjoint",
            Mode::Overlapped => "overlapped",
        })
    }
}

/// Class schedule `C_0..C_K`. Background is implicit in `C_0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub groups: Vec<Vec<ClassId>>,
    pub mode: Mode,
    /// Training images generated for each step.
    pub samples_per_step: Vec<usize>,
}

impl ProtocolSpec {
    /// Parses a `"4-2-2"` style schedule: consecutive class ids starting at 1.
    pub fn from_sizes(sizes: &str, mode: Mode, samples_per_step: Vec<usize>) -> Result<Self> {
        let mut next = 1u32;
        let mut groups = Vec::new();
        for part in sizes.split('-') {
            let n: u32 = part
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad protocol group size {part:?}")))?;
            if n == 0 {
                return Err(invalid("protocol groups must be non-empty"));
            }
            groups.push((next..next + n).map(|c| c as ClassId).collect());
            next += n;
        }
        let spec = Self {
            groups,
            mode,
            samples_per_step,
        };
        spec.validate(next as usize)?;
        Ok(spec)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.groups.is_empty() {
            return Err(invalid("protocol needs at least one class group"));
        }
        if self.samples_per_step.len() != self.groups.len() {
            return Err(invalid(format!(
                "{} groups but {} sample counts",
                self.groups.len(),
                self.samples_per_step.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            if g.is_empty() {
                return Err(invalid("empty class group"));
            }
            for &c in g {
                if c == BACKGROUND {
                    return Err(invalid("background cannot appear in a class group"));
                }
                if c as usize >= num_classes {
                    return Err(crate::error::Error::UnknownClass(c));
                }
                if !seen.insert(c) {
                    return Err(invalid(format!("class {c} appears in two groups")));
                }
            }
        }
        Ok(())
    }

    /// Index of the last step, `K`.
    pub fn last_step(&self) -> usize {
        self.groups.len() - 1
    }

    /// Foreground classes of step `k`, sorted.
    pub fn group(&self, k: usize) -> Vec<ClassId> {
        let mut g = self.groups[k].clone();
        g.sort_unstable();
        g
    }

    /// Foreground classes of steps `0..=k`, sorted.
    pub fn classes_upto(&self, k: usize) -> Vec<ClassId> {
        let mut all: Vec<ClassId> = self.groups[..=k].iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn all_classes(&self) -> Vec<ClassId> {
        self.classes_upto(self.last_step())
    }

    /// Step at which `class` is learned.
    pub fn step_of(&self, class: ClassId) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&class))
    }

    /// Short name such as `4-2-2`.
    pub fn name(&self) -> String {
        self.groups
            .iter()
            .map(|g| g.len().to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    /// Labels visible to the learner.
    pub label: LabelMap,
    /// Full ground truth; only tests and evaluation read it.
    pub truth: LabelMap,
}

/// Training set `T_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub step: usize,
    pub samples: Vec<LabeledSample>,
    /// `C_k ∪ {b}`, sorted.
    pub visible: Vec<ClassId>,
}

fn extra_count(rng: &mut impl Rng) -> usize {
    match rng.gen_range(0..10) {
        0..=3 => 0,
        4..=7 => 1,
        _ => 2,
    }
}

/// Generates `T_k`. Each image holds at least one object of `C_k`; the
/// other objects come from `C_{0..k}` (disjoint) or from every class
/// (overlapped). Labels outside `C_k` are masked to background.
pub fn generate_task_dataset(
    world: &World,
    protocol: &ProtocolSpec,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<TaskDataset> {
    protocol.validate(world.num_classes())?;
    if k > protocol.last_step() {
        return Err(invalid(format!(
            "step {k} beyond last step {}",
            protocol.last_step()
        )));
    }
    if n == 0 {
        return Err(invalid("sample count must be positive"));
    }
    let current = protocol.group(k);
    let pool = match protocol.mode {
        Mode::Disjoint => protocol.classes_upto(k),
        Mode::Overlapped => world.foreground_classes(),
    };
    let mut visible = current.clone();
    visible.insert(0, BACKGROUND);

    let samples = (0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, "task", &[k as u64, i as u64]);
            let mut scene = world.empty_scene(&mut rng);
            for _ in 0..extra_count(&mut rng) {
                let c = *pool.choose(&mut rng).expect("non-empty pool");
                scene.shapes.push(world.natural_shape(c, &mut rng)?);
            }
            let anchor = *current.choose(&mut rng).expect("non-empty group");
            scene.shapes.push(world.natural_shape(anchor, &mut rng)?);
            let (image, truth) = render_scene(&scene, rng.gen())?;
            let masked = truth
                .data()
                .iter()
                .map(|&c| if current.contains(&c) { c } else { BACKGROUND })
                .collect();
            let label = LabelMap::new(truth.height(), truth.width(), masked)?;
            Ok(LabeledSample {
                image,
                label,
                truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskDataset {
        step: k,
        samples,
        visible,
    })
}

fn fully_labeled(world: &World, classes: &[ClassId], n: usize, seed: u64, stream: &str) -> Result<Vec<LabeledSample>> {
    if classes.is_empty() {
        return Err(invalid("no classes to draw objects from"));
    }
    for &c in classes {
        world.check_class(c)?;
        if c == BACKGROUND {
            return Err(invalid("background is not an object class"));
        }
    }
    (0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, stream, &[i as u64]);
            let mut scene = world.empty_scene(&mut rng);
            let objects = rng.gen_range(1..=3);
            for _ in 0..objects {
                let c = *classes.choose(&mut rng).expect("foreground classes");
                scene.shapes.push(world.natural_shape(c, &mut rng)?);
            }
            let (image, truth) = render_scene(&scene, rng.gen())?;
            Ok(LabeledSample {
                image,
                label: truth.clone(),
                truth,
            })
        })
        .collect()
}

/// Held-out evaluation images over every class, fully labeled.
pub fn generate_test_set(world: &World, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    generate_test_set_over(world, &world.foreground_classes(), n, seed)
}

/// Held-out evaluation images whose objects come from `classes` only.
pub fn generate_test_set_over(world: &World, classes: &[ClassId], n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    fully_labeled(world, classes, n, seed, "test")
}

/// Fully labeled training set for the joint upper bound.
pub fn generate_joint_dataset(world: &World, n: usize, seed: u64) -> Result<TaskDataset> {
    generate_joint_dataset_over(world, &world.foreground_classes(), n, seed)
}

/// Joint training set whose objects come from `classes` only.
pub fn generate_joint_dataset_over(world: &World, classes: &[ClassId], n: usize, seed: u64) -> Result<TaskDataset> {
    let mut visible = vec![BACKGROUND];
    visible.extend(classes);
    visible.sort_unstable();
    Ok(TaskDataset {
        step: 0,
        samples: fully_labeled(world, classes, n, seed, "joint")?,
        visible,
    })
}
