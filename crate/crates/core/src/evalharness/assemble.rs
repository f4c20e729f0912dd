use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::family::{Channel, ModelFamily};
use super::features::FeatureStore;
use super::folds::{mix_seed, split_indices, split_sizes, FoldSpec};
use super::EvalError;
use crate::afferents::{window_starts, Normalizer, SEGMENT_LEN, SEGMENT_STRIDE};
use crate::cli::manifest::Manifest;
use crate::drumsim::{texture_set, CLASSES, SPEEDS_MM_S};
use crate::nn::{DataSet, Tensor};
use crate::spectral::{augment_set, AUGMENT_COPIES};

/// Salt distinguishing augmentation draws from split draws under one fold
/// seed.
const AUG_SALT: u64 = 0x00A6;

/// Sample bookkeeping for one condition within a fold assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCount {
    pub class_id: u8,
    pub class_label: char,
    pub speed_mm_s: f64,
    pub heldout: bool,
    /// Family samples drawn from this condition's recordings.
    pub samples: usize,
    /// Stretch-augmented copies added when this condition trains an
    /// augmenting family; zero otherwise.
    pub augmented: usize,
}

/// Exact sample counts [`assemble`] produces for one family and fold,
/// computable from a manifest alone. This is how full-scale bookkeeping is
/// audited without materializing a single tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AssemblyPlan {
    pub heldout_speed: f64,
    /// One entry per condition, class-major then speed-ascending.
    pub conditions: Vec<ConditionCount>,
    /// Unaugmented training samples per class id.
    pub train_per_class: Vec<usize>,
    pub val_per_class: Vec<usize>,
    pub test_per_class: Vec<usize>,
    /// Augmented copies across the whole training set.
    pub augmented_total: usize,
}

impl AssemblyPlan {
    pub fn train_total(&self) -> usize {
        self.train_per_class.iter().sum::<usize>() + self.augmented_total
    }

    pub fn val_total(&self) -> usize {
        self.val_per_class.iter().sum()
    }

    pub fn test_total(&self) -> usize {
        self.test_per_class.iter().sum()
    }
}

/// The canonical condition grid: every texture class crossed with every
/// speed, class-major. The RNG stream for a condition's split draws is its
/// position in this grid, so splits do not depend on store ordering.
fn condition_grid() -> Vec<(u8, char, f64)> {
    let textures = texture_set();
    let mut grid = Vec::with_capacity(CLASSES * SPEEDS_MM_S.len());
    for t in &textures {
        for &speed in &SPEEDS_MM_S {
            grid.push((t.class_id, t.label(), speed));
        }
    }
    grid
}

/// Family samples obtainable from `n` raw channel samples.
pub(crate) fn family_samples(family: ModelFamily, raw: usize, clip_len: usize) -> usize {
    if family.clipped() {
        raw / clip_len
    } else {
        raw
    }
}

fn plan_from_counts(
    family: ModelFamily,
    fold: &FoldSpec,
    raw_count: impl Fn(u8, f64) -> Option<usize>,
    clip_len: usize,
) -> Result<AssemblyPlan, EvalError> {
    let mut plan = AssemblyPlan {
        heldout_speed: fold.heldout_speed,
        conditions: Vec::new(),
        train_per_class: vec![0; CLASSES],
        val_per_class: vec![0; CLASSES],
        test_per_class: vec![0; CLASSES],
        augmented_total: 0,
    };
    for (class_id, class_label, speed) in condition_grid() {
        let raw = raw_count(class_id, speed).ok_or(EvalError::MissingCondition {
            class_label,
            speed_mm_s: speed,
        })?;
        let samples = family_samples(family, raw, clip_len);
        let heldout = speed == fold.heldout_speed;
        let mut augmented = 0;
        if heldout {
            let (v, t) = split_sizes(samples);
            plan.val_per_class[class_id as usize] += v;
            plan.test_per_class[class_id as usize] += t;
        } else {
            plan.train_per_class[class_id as usize] += samples;
            if family.augmented() {
                augmented = AUGMENT_COPIES * samples;
                plan.augmented_total += augmented;
            }
        }
        plan.conditions.push(ConditionCount {
            class_id,
            class_label,
            speed_mm_s: speed,
            heldout,
            samples,
            augmented,
        });
    }
    Ok(plan)
}

/// Computes the counts [`assemble`] would produce, from manifest arithmetic
/// alone: marker frame counts give SA/RA image and clip counts, audio sample
/// counts give 1 s window counts.
pub fn assembly_plan(
    family: ModelFamily,
    fold: &FoldSpec,
    manifest: &Manifest,
    clip_len: usize,
) -> Result<AssemblyPlan, EvalError> {
    plan_from_counts(
        family,
        fold,
        |class_id, speed| {
            let c = manifest
                .conditions
                .iter()
                .find(|c| c.class_id == class_id && c.speed_mm_s == speed)?;
            Some(match family.channel() {
                Channel::Sa => c.marker_frames,
                Channel::Ra => c.marker_frames.saturating_sub(1),
                Channel::Vib => window_starts(c.audio_samples, SEGMENT_LEN, SEGMENT_STRIDE)
                    .expect("constant window parameters are positive")
                    .len(),
            })
        },
        clip_len,
    )
}

/// One fold's tensors for one family, scaled by the training maximum.
#[derive(Debug)]
pub struct FamilySets {
    pub train: DataSet<f32>,
    pub val: DataSet<f32>,
    pub test: DataSet<f32>,
    /// Divisor applied to every tensor: the training split's largest value.
    pub divisor: f32,
    pub plan: AssemblyPlan,
}

/// Builds the train/val/test tensors for a family and fold.
///
/// Training takes every sample at the nine training speeds (the augmenting
/// family adds six stretched copies per training spectrum); the held-out
/// speed's samples split half to validation, half plus the odd one to test,
/// drawn from the fold seed per condition. All tensors are then divided by
/// the training split's maximum value, so the training maximum maps to
/// exactly 1.0.
pub fn assemble(
    family: ModelFamily,
    fold: &FoldSpec,
    store: &FeatureStore,
    clip_len: usize,
) -> Result<FamilySets, EvalError> {
    let ch = family.channel();
    let plan = plan_from_counts(
        family,
        fold,
        |class_id, speed| Some(store.condition(class_id, speed)?.channel(ch).1),
        clip_len,
    )?;
    let vol = family.sample_volume(clip_len);
    let mut train = Split::with_capacity(plan.train_total(), vol);
    let mut val = Split::with_capacity(plan.val_total(), vol);
    let mut test = Split::with_capacity(plan.test_total(), vol);
    for (stream, count) in plan.conditions.iter().enumerate() {
        let cond = store
            .condition(count.class_id, count.speed_mm_s)
            .expect("plan verified presence");
        let (data, _) = cond.channel(ch);
        let samples: Vec<&[f32]> = data.chunks_exact(vol).collect();
        assert_eq!(samples.len(), count.samples);
        if count.heldout {
            let mut rng = ChaCha8Rng::seed_from_u64(fold.seed);
            rng.set_stream(stream as u64);
            let (val_idx, test_idx) = split_indices(samples.len(), &mut rng);
            for i in val_idx {
                val.push(samples[i], count.class_id);
            }
            for i in test_idx {
                test.push(samples[i], count.class_id);
            }
        } else if family.augmented() {
            let spectra: Vec<Vec<f32>> = samples.iter().map(|s| s.to_vec()).collect();
            let seed = mix_seed(fold.seed, AUG_SALT ^ stream as u64);
            for aug in augment_set(&spectra, seed)? {
                train.push(&aug.bins, count.class_id);
            }
        } else {
            for s in samples {
                train.push(s, count.class_id);
            }
        }
    }
    let norm = Normalizer::fit(train.data.chunks(vol))?;
    for split in [&mut train, &mut val, &mut test] {
        norm.apply(&mut split.data);
    }
    let shape = family.input_shape(clip_len);
    Ok(FamilySets {
        train: train.into_dataset(&shape)?,
        val: val.into_dataset(&shape)?,
        test: test.into_dataset(&shape)?,
        divisor: norm.divisor(),
        plan,
    })
}

/// Flat sample accumulator for one split.
struct Split {
    data: Vec<f32>,
    labels: Vec<u16>,
    vol: usize,
}

impl Split {
    fn with_capacity(n: usize, vol: usize) -> Self {
        Self {
            data: Vec::with_capacity(n * vol),
            labels: Vec::with_capacity(n),
            vol,
        }
    }

    fn push(&mut self, sample: &[f32], class_id: u8) {
        debug_assert_eq!(sample.len(), self.vol);
        self.data.extend_from_slice(sample);
        self.labels.push(class_id as u16);
    }

    fn into_dataset(self, sample_shape: &[usize]) -> Result<DataSet<f32>, EvalError> {
        let mut shape = vec![self.labels.len()];
        shape.extend_from_slice(sample_shape);
        Ok(DataSet {
            x: Tensor::new(shape, self.data).map_err(EvalError::Nn)?,
            y: self.labels,
        })
    }
}
