//! Afferent feature extraction from marker streams and contact audio.
//!
//! Three channels mimic the mechanoreceptor populations of a touch sensor:
//! slow-adapting images respond to static skin displacement, rapid-adapting
//! images to frame-to-frame change, and vibration spectra to high-frequency
//! oscillation picked up by a contact microphone.

use thiserror::Error;

use crate::spectral::{self, SpectralError};
use crate::Scalar;

/// Marker rows on the sensor membrane.
pub const GRID_ROWS: usize = 19;
/// Marker columns on the sensor membrane.
pub const GRID_COLS: usize = 19;
/// Markers per frame.
pub const MARKERS: usize = GRID_ROWS * GRID_COLS;
/// Marker pitch on the membrane, in millimetres.
pub const PITCH_MM: f64 = 1.2;
/// Camera resolution, in pixels per millimetre.
pub const PX_PER_MM: f64 = 22.0;
/// Frames per second of the marker camera.
pub const FRAME_RATE_HZ: usize = 100;
/// Frames per image clip fed to sequence models.
pub const CLIP_LEN: usize = 10;
/// Audio samples per vibration segment (one second).
pub const SEGMENT_LEN: usize = spectral::SAMPLE_RATE;
/// Hop between consecutive vibration segments (half a second).
pub const SEGMENT_STRIDE: usize = spectral::SAMPLE_RATE / 2;

#[derive(Debug, Error, PartialEq)]
pub enum AfferentError {
    #[error("marker frame has {got} markers, expected {MARKERS}")]
    WrongMarkerCount { got: usize },
    #[error("afferent image has {got} cells, expected {MARKERS}")]
    WrongCellCount { got: usize },
    #[error("window length and stride must be positive")]
    BadWindow,
    #[error("normalizer needs a positive training maximum, found {max}")]
    DegenerateNormalizer { max: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Positions of all membrane markers at one camera frame, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerFrame<F> {
    pub pos: Vec<[F; 2]>,
}

impl<F: Scalar> MarkerFrame<F> {
    pub fn new(pos: Vec<[F; 2]>) -> Result<Self, AfferentError> {
        if pos.len() != MARKERS {
            return Err(AfferentError::WrongMarkerCount { got: pos.len() });
        }
        Ok(Self { pos })
    }
}

/// Which mechanoreceptor population an image models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfferentKind {
    /// Slow-adapting: displacement magnitude from rest.
    Sa,
    /// Rapid-adapting: change in displacement between frames.
    Ra,
}

/// One 19x19 afferent image.
#[derive(Debug, Clone, PartialEq)]
pub struct AfferentImage<F> {
    pub kind: AfferentKind,
    /// Index of the camera frame this image was computed at.
    pub frame: usize,
    /// Row-major 19x19 cell values, all finite and non-negative.
    pub cells: Vec<F>,
}

/// Slow-adapting response: per-marker Euclidean displacement from rest.
pub fn sa_response<F: Scalar>(
    frame: &MarkerFrame<F>,
    rest: &MarkerFrame<F>,
    frame_index: usize,
) -> Result<AfferentImage<F>, AfferentError> {
    if frame.pos.len() != MARKERS {
        return Err(AfferentError::WrongMarkerCount { got: frame.pos.len() });
    }
    if rest.pos.len() != MARKERS {
        return Err(AfferentError::WrongMarkerCount { got: rest.pos.len() });
    }
    let cells = frame
        .pos
        .iter()
        .zip(&rest.pos)
        .map(|(p, r)| {
            let dx = p[0] - r[0];
            let dy = p[1] - r[1];
            (dx * dx + dy * dy).sqrt()
        })
        .collect();
    Ok(AfferentImage {
        kind: AfferentKind::Sa,
        frame: frame_index,
        cells,
    })
}

/// Rapid-adapting response: absolute change between consecutive SA images.
pub fn ra_response<F: Scalar>(
    prev: &AfferentImage<F>,
    curr: &AfferentImage<F>,
) -> Result<AfferentImage<F>, AfferentError> {
    if prev.cells.len() != MARKERS {
        return Err(AfferentError::WrongCellCount { got: prev.cells.len() });
    }
    if curr.cells.len() != MARKERS {
        return Err(AfferentError::WrongCellCount { got: curr.cells.len() });
    }
    let cells = prev
        .cells
        .iter()
        .zip(&curr.cells)
        .map(|(&a, &b)| (b - a).abs())
        .collect();
    Ok(AfferentImage {
        kind: AfferentKind::Ra,
        frame: curr.frame,
        cells,
    })
}

/// SA images for a whole marker stream against a common rest frame.
pub fn sa_stream<F: Scalar>(
    frames: &[MarkerFrame<F>],
    rest: &MarkerFrame<F>,
) -> Result<Vec<AfferentImage<F>>, AfferentError> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| sa_response(f, rest, i))
        .collect()
}

/// RA images for a stream of SA images; one fewer than the input.
pub fn ra_stream<F: Scalar>(
    sa: &[AfferentImage<F>],
) -> Result<Vec<AfferentImage<F>>, AfferentError> {
    sa.windows(2).map(|w| ra_response(&w[0], &w[1])).collect()
}

/// Start indices of length-`len` windows at the given stride.
///
/// Windows must fit entirely; a stream shorter than `len` yields none.
pub fn window_starts(n: usize, len: usize, stride: usize) -> Result<Vec<usize>, AfferentError> {
    if len == 0 || stride == 0 {
        return Err(AfferentError::BadWindow);
    }
    let mut starts = Vec::new();
    let mut s = 0;
    while s + len <= n {
        starts.push(s);
        s += stride;
    }
    Ok(starts)
}

/// Splits an image stream into clips of `len` consecutive frames.
pub fn window_clips<F>(
    images: &[AfferentImage<F>],
    len: usize,
    stride: usize,
) -> Result<Vec<&[AfferentImage<F>]>, AfferentError> {
    Ok(window_starts(images.len(), len, stride)?
        .into_iter()
        .map(|s| &images[s..s + len])
        .collect())
}

/// Splits audio into one-second segments with half-second hop.
pub fn vib_segments<F>(signal: &[F]) -> Vec<&[F]> {
    window_starts(signal.len(), SEGMENT_LEN, SEGMENT_STRIDE)
        .expect("constant window parameters are positive")
        .into_iter()
        .map(|s| &signal[s..s + SEGMENT_LEN])
        .collect()
}

/// 200-bin magnitude spectrum of one audio segment.
pub fn vib_feature<F: Scalar + rustfft::FftNum>(segment: &[F]) -> Result<Vec<F>, AfferentError> {
    Ok(spectral::spectrum_200(segment)?)
}

/// Scales spectra by the largest bin seen across a training set.
///
/// Fit on training data only; the same divisor is then applied to validation
/// and test spectra, so those may exceed 1.0. No clamping.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalizer<F> {
    max: F,
}

impl<F: Scalar> Normalizer<F> {
    /// Finds the maximum bin over all training spectra.
    pub fn fit<'a, I>(training: I) -> Result<Self, AfferentError>
    where
        I: IntoIterator<Item = &'a [F]>,
        F: 'a,
    {
        let mut max = F::zero();
        let mut seen = false;
        for spec in training {
            for &b in spec {
                seen = true;
                if b > max {
                    max = b;
                }
            }
        }
        if !seen || max <= F::zero() {
            return Err(AfferentError::DegenerateNormalizer {
                max: if seen { max.to_f64() } else { f64::NAN },
            });
        }
        Ok(Self { max })
    }

    pub fn divisor(&self) -> F {
        self.max
    }

    pub fn apply(&self, bins: &mut [F]) {
        for b in bins {
            *b /= self.max;
        }
    }

    pub fn applied(&self, bins: &[F]) -> Vec<F> {
        let mut out = bins.to_vec();
        self.apply(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_frame(f: impl Fn(usize) -> [f64; 2]) -> MarkerFrame<f64> {
        MarkerFrame::new((0..MARKERS).map(f).collect()).unwrap()
    }

    fn rest_grid() -> MarkerFrame<f64> {
        grid_frame(|i| {
            let r = (i / GRID_COLS) as f64;
            let c = (i % GRID_COLS) as f64;
            [c * PITCH_MM * PX_PER_MM, r * PITCH_MM * PX_PER_MM]
        })
    }

    #[test]
    fn sa_at_rest_is_zero_everywhere() {
        let rest = rest_grid();
        let img = sa_response(&rest, &rest, 0).unwrap();
        assert!(img.cells.iter().all(|&c| c == 0.0));
        assert_eq!(img.kind, AfferentKind::Sa);
        assert_eq!(img.cells.len(), MARKERS);
    }

    #[test]
    fn sa_is_euclidean_displacement() {
        let rest = rest_grid();
        let mut moved = rest.clone();
        moved.pos[5][0] += 3.0;
        moved.pos[5][1] += 4.0;
        let img = sa_response(&moved, &rest, 7).unwrap();
        assert_eq!(img.cells[5], 5.0);
        assert_eq!(img.frame, 7);
        assert_eq!(img.cells.iter().filter(|&&c| c != 0.0).count(), 1);
    }

    /// Random displacements: SA is invariant under rotating each displacement
    /// vector, and never negative. 1000 cases.
    #[test]
    fn sa_rotation_invariance_and_nonnegativity() {
        let rest = rest_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let i = (rng.random::<f64>() * MARKERS as f64) as usize;
            let dx = rng.random::<f64>() * 10.0 - 5.0;
            let dy = rng.random::<f64>() * 10.0 - 5.0;
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            let mut a = rest.clone();
            a.pos[i][0] += dx;
            a.pos[i][1] += dy;
            let mut b = rest.clone();
            b.pos[i][0] += dx * theta.cos() - dy * theta.sin();
            b.pos[i][1] += dx * theta.sin() + dy * theta.cos();
            let sa_a = sa_response(&a, &rest, 0).unwrap();
            let sa_b = sa_response(&b, &rest, 0).unwrap();
            assert!(sa_a.cells[i] >= 0.0);
            assert!((sa_a.cells[i] - sa_b.cells[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn ra_of_constant_stream_is_zero() {
        let rest = rest_grid();
        let mut moved = rest.clone();
        for p in &mut moved.pos {
            p[0] += 2.0;
        }
        let sa = sa_stream(&vec![moved; 5], &rest).unwrap();
        let ra = ra_stream(&sa).unwrap();
        assert_eq!(ra.len(), 4);
        assert!(ra.iter().all(|img| img.cells.iter().all(|&c| c == 0.0)));
        assert!(ra.iter().all(|img| img.kind == AfferentKind::Ra));
    }

    #[test]
    fn ra_is_symmetric_in_frame_order() {
        let a = AfferentImage {
            kind: AfferentKind::Sa,
            frame: 0,
            cells: (0..MARKERS).map(|i| (i % 9) as f64).collect(),
        };
        let b = AfferentImage {
            kind: AfferentKind::Sa,
            frame: 1,
            cells: (0..MARKERS).map(|i| (i % 4) as f64 * 1.5).collect(),
        };
        let ab = ra_response(&a, &b).unwrap();
        let ba = ra_response(&b, &a).unwrap();
        assert_eq!(ab.cells, ba.cells);
    }

    #[test]
    fn ra_sequence_from_scalar_example() {
        // SA cell values 2, 5, 3 over three frames give RA values 3, 2.
        let mk = |v: f64, frame| AfferentImage {
            kind: AfferentKind::Sa,
            frame,
            cells: vec![v; MARKERS],
        };
        let ra = ra_stream(&[mk(2.0, 0), mk(5.0, 1), mk(3.0, 2)]).unwrap();
        assert_eq!(ra[0].cells[0], 3.0);
        assert_eq!(ra[1].cells[0], 2.0);
        assert_eq!(ra[1].frame, 2);
    }

    /// Per cell, total RA activity dominates net SA drift: sum of |steps| is
    /// at least |last - first|. 1000 random streams.
    #[test]
    fn ra_triangle_inequality_against_sa_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let len = 3 + (rng.random::<f64>() * 6.0) as usize;
            let sa: Vec<AfferentImage<f64>> = (0..len)
                .map(|f| AfferentImage {
                    kind: AfferentKind::Sa,
                    frame: f,
                    cells: (0..MARKERS).map(|_| rng.random::<f64>() * 8.0).collect(),
                })
                .collect();
            let ra = ra_stream(&sa).unwrap();
            let cell = (rng.random::<f64>() * MARKERS as f64) as usize;
            let total: f64 = ra.iter().map(|img| img.cells[cell]).sum();
            let drift = (sa[len - 1].cells[cell] - sa[0].cells[cell]).abs();
            assert!(total >= drift - 1e-9);
        }
    }

    #[test]
    fn windowing_counts_match_stream_lengths() {
        // 500 images in clips of 10, stride 10: 50 clips.
        assert_eq!(window_starts(500, 10, 10).unwrap().len(), 50);
        // Too-short stream: no clips.
        assert_eq!(window_starts(9, 10, 10).unwrap(), Vec::<usize>::new());
        // Overlapping windows.
        assert_eq!(window_starts(25, 10, 5).unwrap(), vec![0, 5, 10, 15]);
        assert!(window_starts(10, 0, 1).is_err());
        assert!(window_starts(10, 1, 0).is_err());
    }

    #[test]
    fn clips_are_consecutive_frames() {
        let imgs: Vec<AfferentImage<f64>> = (0..35)
            .map(|f| AfferentImage {
                kind: AfferentKind::Sa,
                frame: f,
                cells: vec![f as f64; MARKERS],
            })
            .collect();
        let clips = window_clips(&imgs, 10, 10).unwrap();
        assert_eq!(clips.len(), 3);
        for clip in clips {
            assert_eq!(clip.len(), 10);
            for w in clip.windows(2) {
                assert_eq!(w[1].frame, w[0].frame + 1);
            }
        }
    }

    #[test]
    fn segment_counts_follow_duration() {
        // floor((duration - 1) / 0.5) + 1 segments for duration >= 1 s.
        let sec = SEGMENT_LEN;
        assert_eq!(vib_segments(&vec![0.0f32; sec]).len(), 1);
        assert_eq!(vib_segments(&vec![0.0f32; 2 * sec]).len(), 3);
        assert_eq!(vib_segments(&vec![0.0f32; 30 * sec]).len(), 59);
        assert_eq!(vib_segments(&vec![0.0f32; 60 * sec]).len(), 119);
        assert_eq!(vib_segments(&vec![0.0f32; sec - 1]).len(), 0);
        // Each segment is exactly one second and hops half a second.
        let audio: Vec<f32> = (0..3 * sec).map(|i| i as f32).collect();
        let segs = vib_segments(&audio);
        assert_eq!(segs[0][0], 0.0);
        assert_eq!(segs[1][0], SEGMENT_STRIDE as f32);
        assert!(segs.iter().all(|s| s.len() == SEGMENT_LEN));
    }

    #[test]
    fn normalizer_maps_training_max_to_exactly_one() {
        let train: Vec<Vec<f64>> = vec![vec![0.1, 0.5, 0.2], vec![0.3, 0.05, 0.0]];
        let norm = Normalizer::fit(train.iter().map(|v| v.as_slice())).unwrap();
        assert_eq!(norm.divisor(), 0.5);
        let scaled = norm.applied(&train[0]);
        assert_eq!(scaled[1], 1.0);
    }

    #[test]
    fn normalizer_preserves_argmax_and_ratios_and_allows_over_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let spec: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 4.0).collect();
            let norm = Normalizer::fit([spec.as_slice()]).unwrap();
            let scaled = norm.applied(&spec);
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(&spec), argmax(&scaled));
            let i = (rng.random::<f64>() * 20.0) as usize;
            let j = (rng.random::<f64>() * 20.0) as usize;
            if spec[j] > 1e-6 {
                let r0 = spec[i] / spec[j];
                let r1 = scaled[i] / scaled[j];
                assert!((r0 - r1).abs() <= 1e-6 * r0.abs().max(1.0));
            }
        }
        // Test spectra may exceed the training maximum; values above 1 pass
        // through without clamping.
        let norm = Normalizer::fit([[1.0, 0.5].as_slice()]).unwrap();
        let out = norm.applied(&[3.0, 0.5]);
        assert_eq!(out, vec![3.0, 0.5]);
    }

    #[test]
    fn degenerate_training_sets_are_rejected() {
        assert!(matches!(
            Normalizer::<f64>::fit(std::iter::empty::<&[f64]>()),
            Err(AfferentError::DegenerateNormalizer { .. })
        ));
        assert!(matches!(
            Normalizer::fit([[0.0f64, 0.0].as_slice()]),
            Err(AfferentError::DegenerateNormalizer { .. })
        ));
    }

    #[test]
    fn mismatched_marker_counts_are_rejected() {
        assert!(MarkerFrame::new(vec![[0.0f64, 0.0]; 5]).is_err());
        let rest = rest_grid();
        let short = MarkerFrame {
            pos: vec![[0.0f64, 0.0]; 5],
        };
        assert!(sa_response(&short, &rest, 0).is_err());
    }
}
