use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::family::Channel;
use super::EvalError;
use crate::afferents::{ra_stream, sa_stream, vib_segments, MarkerFrame, MARKERS};
use crate::cli::manifest::{read_f32, write_f32, Manifest};
use crate::ingest::read_wav;
use crate::spectral::{SpectrumPlan, SPECTRUM_BINS};

/// Cells per afferent image.
const IMAGE_VOLUME: usize = MARKERS;

/// Extracted features of one stimulus condition: the full SA and RA image
/// streams and the unnormalized spectra of its 1 s vibration segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionFeatures {
    pub class_id: u8,
    pub class_label: char,
    pub speed_mm_s: f64,
    /// Source condition directory, for audit.
    pub dir: String,
    /// SA images, row-major `[n_sa, 19*19]`.
    pub sa: Vec<f32>,
    /// RA images, one fewer than SA (differences need a predecessor).
    pub ra: Vec<f32>,
    /// Spectra, row-major `[n_vib, 200]`.
    pub vib: Vec<f32>,
}

impl ConditionFeatures {
    pub fn n_sa(&self) -> usize {
        self.sa.len() / IMAGE_VOLUME
    }

    pub fn n_ra(&self) -> usize {
        self.ra.len() / IMAGE_VOLUME
    }

    pub fn n_vib(&self) -> usize {
        self.vib.len() / SPECTRUM_BINS
    }

    /// Flat data and sample count for one channel.
    pub fn channel(&self, ch: Channel) -> (&[f32], usize) {
        match ch {
            Channel::Sa => (&self.sa, self.n_sa()),
            Channel::Ra => (&self.ra, self.n_ra()),
            Channel::Vib => (&self.vib, self.n_vib()),
        }
    }
}

/// All 130 conditions' features, extracted once and shared by every family
/// and fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub frame_rate_hz: usize,
    /// Seed of the source dataset, for audit.
    pub dataset_seed: u64,
    pub conditions: Vec<ConditionFeatures>,
}

/// Serialized form of the store's bookkeeping (`features.json`).
#[derive(Debug, Serialize, Deserialize)]
struct StoreMeta {
    schema_version: u32,
    frame_rate_hz: usize,
    dataset_seed: u64,
    conditions: Vec<EntryMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    class_id: u8,
    class_label: char,
    speed_mm_s: f64,
    dir: String,
    n_sa: usize,
    n_ra: usize,
    n_vib: usize,
}

const STORE_SCHEMA: u32 = 1;
const META_FILE: &str = "features.json";

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl FeatureStore {
    /// Extracts every condition of a dataset, in parallel. Conditions keep
    /// the manifest's order.
    pub fn extract(dataset: &Path) -> Result<Self, EvalError> {
        let manifest = Manifest::load(dataset)?;
        let conditions: Vec<ConditionFeatures> = manifest
            .conditions
            .par_iter()
            .map_init(SpectrumPlan::<f32>::new, |plan, c| {
                let dir = dataset.join(&c.dir);
                let rest_flat = read_f32(&dir.join("rest.f32"), MARKERS * 2)?;
                let rest = unflatten_frames(&rest_flat)?.pop().expect("one frame");
                let marker_flat =
                    read_f32(&dir.join("markers.f32"), c.marker_frames * MARKERS * 2)?;
                let frames = unflatten_frames(&marker_flat)?;
                let sa_images = sa_stream(&frames, &rest)?;
                let ra_images = ra_stream(&sa_images)?;
                let wav_path = dir.join("audio.wav");
                let bytes = std::fs::read(&wav_path).map_err(|e| io_err(&wav_path, e))?;
                let audio = read_wav(&bytes)?;
                let mut vib = Vec::new();
                for seg in vib_segments(&audio) {
                    vib.extend(plan.spectrum_200(seg)?);
                }
                Ok(ConditionFeatures {
                    class_id: c.class_id,
                    class_label: c.class_label,
                    speed_mm_s: c.speed_mm_s,
                    dir: c.dir.clone(),
                    sa: sa_images.into_iter().flat_map(|i| i.cells).collect(),
                    ra: ra_images.into_iter().flat_map(|i| i.cells).collect(),
                    vib,
                })
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(Self {
            frame_rate_hz: manifest.frame_rate_hz,
            dataset_seed: manifest.seed,
            conditions,
        })
    }

    /// Looks a condition up by class and speed.
    pub fn condition(&self, class_id: u8, speed_mm_s: f64) -> Option<&ConditionFeatures> {
        self.conditions
            .iter()
            .find(|c| c.class_id == class_id && c.speed_mm_s == speed_mm_s)
    }

    /// Writes `features.json` plus one raw f32 file per channel. Re-running
    /// over the same store produces byte-identical files.
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let meta = StoreMeta {
            schema_version: STORE_SCHEMA,
            frame_rate_hz: self.frame_rate_hz,
            dataset_seed: self.dataset_seed,
            conditions: self
                .conditions
                .iter()
                .map(|c| EntryMeta {
                    class_id: c.class_id,
                    class_label: c.class_label,
                    speed_mm_s: c.speed_mm_s,
                    dir: c.dir.clone(),
                    n_sa: c.n_sa(),
                    n_ra: c.n_ra(),
                    n_vib: c.n_vib(),
                })
                .collect(),
        };
        let meta_path = dir.join(META_FILE);
        let mut body = serde_json::to_vec_pretty(&meta).map_err(|e| EvalError::Json {
            path: meta_path.clone(),
            source: e,
        })?;
        body.push(b'\n');
        std::fs::write(&meta_path, body).map_err(|e| io_err(&meta_path, e))?;
        for (name, pick) in CHANNEL_FILES {
            let mut flat = Vec::new();
            for c in &self.conditions {
                flat.extend_from_slice(pick(c));
            }
            write_f32(&dir.join(name), &flat)?;
        }
        Ok(())
    }

    /// Reads a store written by [`FeatureStore::save`].
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let meta_path = dir.join(META_FILE);
        let body = std::fs::read(&meta_path).map_err(|e| io_err(&meta_path, e))?;
        let meta: StoreMeta = serde_json::from_slice(&body).map_err(|e| EvalError::Json {
            path: meta_path.clone(),
            source: e,
        })?;
        if meta.schema_version != STORE_SCHEMA {
            return Err(EvalError::SchemaVersion {
                got: meta.schema_version,
                want: STORE_SCHEMA,
            });
        }
        let mut conditions: Vec<ConditionFeatures> = meta
            .conditions
            .iter()
            .map(|e| ConditionFeatures {
                class_id: e.class_id,
                class_label: e.class_label,
                speed_mm_s: e.speed_mm_s,
                dir: e.dir.clone(),
                sa: Vec::new(),
                ra: Vec::new(),
                vib: Vec::new(),
            })
            .collect();
        let plans: [(&str, Vec<usize>); 3] = [
            (
                "sa.f32",
                meta.conditions.iter().map(|e| e.n_sa * IMAGE_VOLUME).collect(),
            ),
            (
                "ra.f32",
                meta.conditions.iter().map(|e| e.n_ra * IMAGE_VOLUME).collect(),
            ),
            (
                "vib.f32",
                meta.conditions.iter().map(|e| e.n_vib * SPECTRUM_BINS).collect(),
            ),
        ];
        for (name, sizes) in plans {
            let flat = read_f32(&dir.join(name), sizes.iter().sum())?;
            let mut start = 0usize;
            for (c, len) in conditions.iter_mut().zip(sizes) {
                let slice = flat[start..start + len].to_vec();
                start += len;
                match name {
                    "sa.f32" => c.sa = slice,
                    "ra.f32" => c.ra = slice,
                    _ => c.vib = slice,
                }
            }
        }
        Ok(Self {
            frame_rate_hz: meta.frame_rate_hz,
            dataset_seed: meta.dataset_seed,
            conditions,
        })
    }
}

type ChannelPick = fn(&ConditionFeatures) -> &[f32];

const CHANNEL_FILES: [(&str, ChannelPick); 3] = [
    ("sa.f32", |c| &c.sa),
    ("ra.f32", |c| &c.ra),
    ("vib.f32", |c| &c.vib),
];

/// Reassembles `[n, 361, 2]` flat coordinates into marker frames.
fn unflatten_frames(flat: &[f32]) -> Result<Vec<MarkerFrame<f32>>, EvalError> {
    Ok(flat
        .chunks_exact(MARKERS * 2)
        .map(|frame| {
            MarkerFrame::new(frame.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
                .expect("chunk arithmetic yields 361 markers")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drumsim::{generate_dataset, SimConfig};

    fn tiny_dataset(dir: &Path) -> Manifest {
        let cfg = SimConfig {
            marker_duration_s: 1.0,
            audio_duration_s: 2.0,
            ..SimConfig::default()
        };
        generate_dataset(dir, &cfg).unwrap()
    }

    #[test]
    fn extraction_counts_follow_the_stream_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let store = FeatureStore::extract(dir.path()).unwrap();
        assert_eq!(store.conditions.len(), 130);
        for c in &store.conditions {
            // 1 s at 100 fps: 100 SA images, 99 RA images; 2 s of audio at
            // 0.5 s stride: 3 windows.
            assert_eq!(c.n_sa(), 100);
            assert_eq!(c.n_ra(), 99);
            assert_eq!(c.n_vib(), 3);
        }
        let smooth = store.condition(0, 10.0).unwrap();
        assert_eq!(smooth.class_label, 'a');
        assert!(store.condition(13, 10.0).is_none());
    }

    #[test]
    fn store_round_trips_bit_exactly_through_disk() {
        let data_dir = tempfile::tempdir().unwrap();
        tiny_dataset(data_dir.path());
        let store = FeatureStore::extract(data_dir.path()).unwrap();
        let feat_dir = tempfile::tempdir().unwrap();
        store.save(feat_dir.path()).unwrap();
        let back = FeatureStore::load(feat_dir.path()).unwrap();
        assert_eq!(back, store);
        // Saving the loaded store reproduces the files byte for byte.
        let feat_dir2 = tempfile::tempdir().unwrap();
        back.save(feat_dir2.path()).unwrap();
        for name in ["features.json", "sa.f32", "ra.f32", "vib.f32"] {
            assert_eq!(
                std::fs::read(feat_dir.path().join(name)).unwrap(),
                std::fs::read(feat_dir2.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let a = FeatureStore::extract(dir.path()).unwrap();
        let b = FeatureStore::extract(dir.path()).unwrap();
        assert_eq!(a, b);
    }
}
