//! Synthetic drum-contact data generation.
//!
//! Thirteen bump textures at ten drag speeds produce marker-frame streams and
//! contact-microphone records with the cues the real rig exhibits: friction
//! shear that grows with speed, a bump-passing oscillation whose fundamental
//! is speed/spacing, and a harmonic envelope that depends on the texture but
//! not the speed, rolled off by the sensor body above 150 Hz. Everything is a
//! pure function of (condition, config), so datasets regenerate bit-identically.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afferents::{MarkerFrame, GRID_COLS, GRID_ROWS, MARKERS, PITCH_MM, PX_PER_MM};
use crate::cli::manifest::{
    ConditionEntry, Manifest, ManifestError, Provenance, TensorDesc, SCHEMA_VERSION,
};
use crate::ingest::write_wav;
use crate::spectral::SAMPLE_RATE;

/// Number of texture classes.
pub const CLASSES: usize = 13;
/// Drum surface speeds, in mm/s.
pub const SPEEDS_MM_S: [f64; 10] = [
    10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0,
];
/// Bump spacing of the finest non-smooth texture, in mm.
pub const SPACING_MIN_MM: f64 = 1.25;
/// Bump spacing of the coarsest texture, in mm.
pub const SPACING_MAX_MM: f64 = 4.25;
/// Bump diameter as a fraction of spacing: constant bump area across classes.
pub const AREA_FRACTION: f64 = 0.4;
/// Bump height above the drum surface, in mm.
pub const BUMP_HEIGHT_MM: f64 = 0.5;
/// Friction coefficient of the smooth class.
pub const FRICTION_BASE: f64 = 0.3;
/// Friction increment per texture class, coupling roughness to drag force.
pub const FRICTION_STEP: f64 = 0.03;

#[derive(Debug, Error)]
pub enum DrumSimError {
    #[error("duration {got} s is below the 1 s minimum")]
    BadDuration { got: f64 },
    #[error("harmonics must be 1..=8, got {got}")]
    BadHarmonics { got: usize },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DrumSimError {
    DrumSimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One drum texture: raised bumps of diameter d spaced x apart, or smooth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    /// 0..=12, printed as labels 'a'..='m'.
    pub class_id: u8,
    /// Bump-to-bump spacing x in mm; 0 marks the smooth class.
    pub bump_spacing_mm: f64,
    /// Bump diameter d = 0.4 x in mm; 0 for smooth.
    pub bump_diameter_mm: f64,
    pub bump_height_mm: f64,
    /// Friction coefficient, increasing with bump spacing.
    pub friction: f64,
}

impl TextureSpec {
    pub fn is_smooth(&self) -> bool {
        self.bump_spacing_mm == 0.0
    }

    pub fn label(&self) -> char {
        (b'a' + self.class_id) as char
    }
}

/// The thirteen textures: smooth 'a', then spacings linearly spaced from
/// 1.25 mm to 4.25 mm with diameter locked to 0.4 of the spacing.
pub fn texture_set() -> Vec<TextureSpec> {
    (0..CLASSES as u8)
        .map(|class_id| {
            let x = if class_id == 0 {
                0.0
            } else {
                SPACING_MIN_MM
                    + (class_id - 1) as f64 * (SPACING_MAX_MM - SPACING_MIN_MM) / 11.0
            };
            TextureSpec {
                class_id,
                bump_spacing_mm: x,
                bump_diameter_mm: AREA_FRACTION * x,
                bump_height_mm: BUMP_HEIGHT_MM,
                friction: FRICTION_BASE + FRICTION_STEP * class_id as f64,
            }
        })
        .collect()
}

/// A texture dragged at one drum speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StimulusCondition {
    pub texture: TextureSpec,
    pub speed_mm_s: f64,
}

/// All 130 stimulus conditions, class-major then speed-major.
pub fn all_conditions() -> Vec<StimulusCondition> {
    let mut out = Vec::with_capacity(CLASSES * SPEEDS_MM_S.len());
    for texture in texture_set() {
        for &speed_mm_s in &SPEEDS_MM_S {
            out.push(StimulusCondition {
                texture,
                speed_mm_s,
            });
        }
    }
    out
}

/// Position of a condition in the class-major grid, 0..130.
pub fn condition_index(cond: &StimulusCondition) -> usize {
    let speed = SPEEDS_MM_S
        .iter()
        .position(|&s| s == cond.speed_mm_s)
        .expect("speed is one of the ten grid speeds");
    cond.texture.class_id as usize * SPEEDS_MM_S.len() + speed
}

/// Condition directory name, `cond_<label>_<speed>`.
pub fn condition_dir_name(cond: &StimulusCondition) -> String {
    format!("cond_{}_{}", cond.texture.label(), cond.speed_mm_s as u32)
}

/// Bump-passing fundamental v/x in Hz; 0 for the smooth class.
pub fn fundamental_hz(texture: &TextureSpec, speed_mm_s: f64) -> f64 {
    if texture.is_smooth() {
        0.0
    } else {
        speed_mm_s / texture.bump_spacing_mm
    }
}

/// Simulator knobs. Durations are per condition; the defaults are the frozen
/// desk-scale calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Marker camera rate; 100 Hz makes a 10-frame clip exactly 0.1 s.
    pub frame_rate_hz: usize,
    pub marker_duration_s: f64,
    pub audio_duration_s: f64,
    /// White positional camera noise per marker coordinate, in px.
    pub marker_jitter_px: f64,
    /// White microphone noise added after peak normalization.
    pub audio_noise_floor: f64,
    /// Friction shear displacement at zero speed, in px.
    pub shear_base_px: f64,
    /// Friction shear growth per mm/s of drum speed, in px.
    pub shear_speed_px: f64,
    /// Stick-slip oscillation amplitude, in px.
    pub stick_slip_amp_px: f64,
    /// Contact-patch falloff center, in marker pitches ahead of grid center.
    pub crescent_offset_pitches: f64,
    /// Contact-patch falloff width, in marker pitches.
    pub crescent_sigma_pitches: f64,
    /// Bump-passing harmonics per vibration record, 1..=8.
    pub harmonics: usize,
    /// Geometric harmonic decay of the finest texture.
    pub harmonic_decay_min: f64,
    /// Geometric harmonic decay of the coarsest texture.
    pub harmonic_decay_max: f64,
    /// First-order sensor-body rolloff corner, in Hz.
    pub lowpass_hz: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frame_rate_hz: crate::afferents::FRAME_RATE_HZ,
            marker_duration_s: 5.0,
            audio_duration_s: 30.0,
            marker_jitter_px: 0.05,
            audio_noise_floor: 0.02,
            shear_base_px: 8.0,
            shear_speed_px: 0.25,
            stick_slip_amp_px: 1.5,
            crescent_offset_pitches: 5.0,
            crescent_sigma_pitches: 10.0,
            harmonics: 8,
            harmonic_decay_min: 0.45,
            harmonic_decay_max: 0.85,
            lowpass_hz: 150.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), DrumSimError> {
        if self.marker_duration_s < 1.0 {
            return Err(DrumSimError::BadDuration {
                got: self.marker_duration_s,
            });
        }
        if self.audio_duration_s < 1.0 {
            return Err(DrumSimError::BadDuration {
                got: self.audio_duration_s,
            });
        }
        if self.harmonics == 0 || self.harmonics > 8 {
            return Err(DrumSimError::BadHarmonics {
                got: self.harmonics,
            });
        }
        Ok(())
    }

    pub fn marker_frames(&self) -> usize {
        (self.marker_duration_s * self.frame_rate_hz as f64).round() as usize
    }

    pub fn audio_samples(&self) -> usize {
        (self.audio_duration_s * SAMPLE_RATE as f64).round() as usize
    }
}

/// Friction shear magnitude in px, affine in speed so faster drags deform the
/// membrane more; this is the speed/texture confound single images suffer.
pub fn shear_px(cfg: &SimConfig, friction: f64, speed_mm_s: f64) -> f64 {
    friction * (cfg.shear_base_px + cfg.shear_speed_px * speed_mm_s)
}

/// Geometric harmonic decay for a texture class, interpolated between the
/// configured extremes; steeper for fine textures, flatter for coarse ones.
pub fn harmonic_decay(cfg: &SimConfig, class_id: u8) -> f64 {
    if class_id == 0 {
        0.0
    } else {
        cfg.harmonic_decay_min
            + (class_id - 1) as f64 / 11.0 * (cfg.harmonic_decay_max - cfg.harmonic_decay_min)
    }
}

/// First-order low-pass magnitude with the -3 dB point at `corner_hz`.
pub fn lowpass_gain(freq_hz: f64, corner_hz: f64) -> f64 {
    1.0 / (1.0 + (freq_hz / corner_hz).powi(2)).sqrt()
}

fn marker_rng(cfg: &SimConfig, cond: &StimulusCondition) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(condition_index(cond) as u64 * 2);
    rng
}

fn audio_rng(cfg: &SimConfig, cond: &StimulusCondition) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(condition_index(cond) as u64 * 2 + 1);
    rng
}

/// Undisturbed marker grid, centered in a 640x480 camera frame.
pub fn rest_frame(cfg: &SimConfig) -> MarkerFrame<f32> {
    let _ = cfg;
    let pitch = PITCH_MM * PX_PER_MM;
    let span = (GRID_COLS - 1) as f64 * pitch;
    let (ox, oy) = ((640.0 - span) / 2.0, (480.0 - span) / 2.0);
    let mut pos = Vec::with_capacity(MARKERS);
    for r in 0..GRID_ROWS {
        for c in 0..GRID_COLS {
            pos.push([
                (ox + c as f64 * pitch) as f32,
                (oy + r as f64 * pitch) as f32,
            ]);
        }
    }
    MarkerFrame::new(pos).expect("19x19 grid")
}

/// Contact-patch weight of a grid cell: radial falloff centered off-axis
/// along the drag direction, shaping the shear field into a crescent.
fn crescent(cfg: &SimConfig, row: usize, col: usize) -> f64 {
    let center = (GRID_ROWS as f64 - 1.0) / 2.0;
    let dr = row as f64 - center;
    let dc = col as f64 - (center + cfg.crescent_offset_pitches);
    (-(dr * dr + dc * dc) / (2.0 * cfg.crescent_sigma_pitches.powi(2))).exp()
}

/// Simulates the marker stream of one condition: rest frame plus one frame
/// per camera tick.
///
/// Per marker, the drag-direction displacement is the crescent-weighted sum
/// of the friction shear and, for bump textures, a stick-slip oscillation at
/// the bump-passing fundamental whose phase advances with the column's
/// position in bump-spacing units; white jitter lands on both coordinates.
/// The column-phase term paints the bump spacing across the grid as a
/// spatial wave, the texture cue the image models learn.
pub fn simulate_markers(
    cond: &StimulusCondition,
    cfg: &SimConfig,
) -> Result<(MarkerFrame<f32>, Vec<MarkerFrame<f32>>), DrumSimError> {
    cfg.validate()?;
    let mut rng = marker_rng(cfg, cond);
    let jitter = Normal::new(0.0, cfg.marker_jitter_px.max(f64::MIN_POSITIVE)).expect("sigma");
    let rest = rest_frame(cfg);
    let t = &cond.texture;
    let shear = shear_px(cfg, t.friction, cond.speed_mm_s);
    let f0 = fundamental_hz(t, cond.speed_mm_s);
    let amp = cfg.stick_slip_amp_px * (t.bump_height_mm / BUMP_HEIGHT_MM);
    let frames = cfg.marker_frames();
    let mut out = Vec::with_capacity(frames);
    for frame in 0..frames {
        let time = frame as f64 / cfg.frame_rate_hz as f64;
        let mut pos = Vec::with_capacity(MARKERS);
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                let weight = crescent(cfg, r, c);
                let stick = if t.is_smooth() {
                    0.0
                } else {
                    let phase = 2.0 * PI * (c as f64 * PITCH_MM / t.bump_spacing_mm);
                    amp * (2.0 * PI * f0 * time + phase).sin()
                };
                let dx = weight * (shear + stick);
                let base = rest.pos[r * GRID_COLS + c];
                let jx = if cfg.marker_jitter_px > 0.0 {
                    jitter.sample(&mut rng)
                } else {
                    0.0
                };
                let jy = if cfg.marker_jitter_px > 0.0 {
                    jitter.sample(&mut rng)
                } else {
                    0.0
                };
                pos.push([
                    (base[0] as f64 + dx + jx) as f32,
                    (base[1] as f64 + jy) as f32,
                ]);
            }
        }
        out.push(MarkerFrame::new(pos).expect("19x19 grid"));
    }
    Ok((rest, out))
}

/// Adds `amp * sin(2 pi freq t + phase)` by phasor recurrence, one complex
/// multiply per sample instead of a trig call.
fn add_harmonic(samples: &mut [f64], amp: f64, freq: f64, phase: f64) {
    let w = 2.0 * PI * freq / SAMPLE_RATE as f64;
    let (step_re, step_im) = (w.cos(), w.sin());
    let (mut re, mut im) = (phase.cos(), phase.sin());
    for s in samples.iter_mut() {
        *s += amp * im;
        let next_re = re * step_re - im * step_im;
        im = re * step_im + im * step_re;
        re = next_re;
    }
}

/// Simulates the contact-microphone record of one condition.
///
/// Bump textures emit up to eight harmonics of the bump-passing fundamental
/// with a texture-specific geometric envelope, attenuated by the sensor-body
/// low-pass; the smooth class emits band-limited noise only. The clean signal
/// is peak-normalized to 0.5, then white noise lands at the configured floor
/// and samples clip to [-1, 1].
pub fn simulate_vibration(
    cond: &StimulusCondition,
    cfg: &SimConfig,
) -> Result<Vec<f32>, DrumSimError> {
    cfg.validate()?;
    let mut rng = audio_rng(cfg, cond);
    let n = cfg.audio_samples();
    let mut signal = vec![0.0f64; n];
    let t = &cond.texture;
    if t.is_smooth() {
        // One-pole low-pass over white noise: band-limited like the rig body.
        let alpha = 1.0 - (-2.0 * PI * cfg.lowpass_hz / SAMPLE_RATE as f64).exp();
        let white = Normal::new(0.0, 1.0).expect("sigma");
        let mut state = 0.0f64;
        for s in signal.iter_mut() {
            state += alpha * (white.sample(&mut rng) - state);
            *s = state;
        }
    } else {
        let f0 = fundamental_hz(t, cond.speed_mm_s);
        let decay = harmonic_decay(cfg, t.class_id);
        for h in 1..=cfg.harmonics {
            let freq = h as f64 * f0;
            if freq >= SAMPLE_RATE as f64 / 2.0 {
                break;
            }
            let phase = rng.random::<f64>() * 2.0 * PI;
            let amp = decay.powi(h as i32 - 1) * lowpass_gain(freq, cfg.lowpass_hz);
            add_harmonic(&mut signal, amp, freq, phase);
        }
    }
    let peak = signal.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    let scale = if peak > 0.0 { 0.5 / peak } else { 0.0 };
    let noise = Normal::new(0.0, cfg.audio_noise_floor.max(f64::MIN_POSITIVE)).expect("sigma");
    Ok(signal
        .into_iter()
        .map(|s| {
            let n = if cfg.audio_noise_floor > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (s * scale + n).clamp(-1.0, 1.0) as f32
        })
        .collect())
}

pub(crate) fn flatten_frames(frames: &[MarkerFrame<f32>]) -> Vec<f32> {
    let mut out = Vec::with_capacity(frames.len() * MARKERS * 2);
    for f in frames {
        for p in &f.pos {
            out.push(p[0]);
            out.push(p[1]);
        }
    }
    out
}

/// Describes the dataset [`generate_dataset`] would produce for `cfg`
/// without writing any files or synthesizing any signals. The returned
/// manifest is field-for-field identical to the generated one, so sample
/// bookkeeping can be audited at any scale in constant time.
pub fn dataset_blueprint(cfg: &SimConfig) -> Result<Manifest, DrumSimError> {
    cfg.validate()?;
    let frames = cfg.marker_frames();
    let samples = cfg.audio_samples();
    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        provenance: Provenance::Simulated,
        seed: cfg.seed,
        generator_version: env!("CARGO_PKG_VERSION").into(),
        frame_rate_hz: cfg.frame_rate_hz,
        px_per_mm: PX_PER_MM,
        conditions: Vec::new(),
        tensors: Vec::new(),
    };
    for cond in all_conditions() {
        let dir_name = condition_dir_name(&cond);
        manifest.conditions.push(ConditionEntry {
            class_id: cond.texture.class_id,
            class_label: cond.texture.label(),
            speed_mm_s: cond.speed_mm_s,
            dir: dir_name.clone(),
            marker_frames: frames,
            audio_samples: samples,
        });
        manifest.tensors.push(TensorDesc::f32le(
            &format!("{dir_name}/rest"),
            &format!("{dir_name}/rest.f32"),
            vec![MARKERS, 2],
        ));
        manifest.tensors.push(TensorDesc::f32le(
            &format!("{dir_name}/markers"),
            &format!("{dir_name}/markers.f32"),
            vec![frames, MARKERS, 2],
        ));
    }
    Ok(manifest)
}

/// Generates the full 130-condition dataset under `root` and writes its
/// manifest. Conditions run in parallel; per-condition rng streams keep the
/// output independent of scheduling.
pub fn generate_dataset(root: &Path, cfg: &SimConfig) -> Result<Manifest, DrumSimError> {
    cfg.validate()?;
    match std::fs::create_dir(root) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {}
        Err(e) => return Err(io_err(root, e)),
    }
    let conditions = all_conditions();
    let entries: Vec<(ConditionEntry, Vec<TensorDesc>)> = conditions
        .par_iter()
        .map(|cond| -> Result<_, DrumSimError> {
            let dir_name = condition_dir_name(cond);
            let dir = root.join(&dir_name);
            match std::fs::create_dir(&dir) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {}
                Err(e) => return Err(io_err(&dir, e)),
            }
            let (rest, frames) = simulate_markers(cond, cfg)?;
            let audio = simulate_vibration(cond, cfg)?;
            crate::cli::manifest::write_f32(&dir.join("rest.f32"), &flatten_frames(&[rest]))?;
            crate::cli::manifest::write_f32(&dir.join("markers.f32"), &flatten_frames(&frames))?;
            let wav_path = dir.join("audio.wav");
            std::fs::write(&wav_path, write_wav(&audio)).map_err(|e| io_err(&wav_path, e))?;
            let entry = ConditionEntry {
                class_id: cond.texture.class_id,
                class_label: cond.texture.label(),
                speed_mm_s: cond.speed_mm_s,
                dir: dir_name.clone(),
                marker_frames: frames.len(),
                audio_samples: audio.len(),
            };
            let tensors = vec![
                TensorDesc::f32le(
                    &format!("{dir_name}/rest"),
                    &format!("{dir_name}/rest.f32"),
                    vec![MARKERS, 2],
                ),
                TensorDesc::f32le(
                    &format!("{dir_name}/markers"),
                    &format!("{dir_name}/markers.f32"),
                    vec![frames.len(), MARKERS, 2],
                ),
            ];
            Ok((entry, tensors))
        })
        .collect::<Result<_, _>>()?;
    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        provenance: Provenance::Simulated,
        seed: cfg.seed,
        generator_version: env!("CARGO_PKG_VERSION").into(),
        frame_rate_hz: cfg.frame_rate_hz,
        px_per_mm: PX_PER_MM,
        conditions: Vec::with_capacity(entries.len()),
        tensors: Vec::with_capacity(entries.len() * 2),
    };
    for (entry, tensors) in entries {
        manifest.conditions.push(entry);
        manifest.tensors.extend(tensors);
    }
    manifest.save(root)?;
    Ok(manifest)
}
