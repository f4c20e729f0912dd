//! Frequency-domain features and speed augmentation.
//!
//! A one-second, 44.1 kHz segment maps to a 200-bin magnitude spectrum with
//! 1 Hz resolution. Stretching a spectrum along the frequency axis emulates a
//! different drag speed: stick-slip harmonics sit at multiples of v/x, so a
//! speed change is a linear rescaling of peak positions.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};
use thiserror::Error;

use crate::Scalar;

/// Samples per second and per analysis segment.
pub const SAMPLE_RATE: usize = 44_100;
/// Number of 1 Hz magnitude bins retained (0..=199 Hz).
pub const SPECTRUM_BINS: usize = 200;
/// Augmented copies produced per original spectrum.
pub const AUGMENT_COPIES: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("segment length {got} != {SAMPLE_RATE} samples")]
    WrongLength { got: usize },
    #[error("stretch factor {factor} is not positive and finite")]
    BadFactor { factor: f64 },
    #[error("spectrum needs at least 2 bins, got {got}")]
    TooFewBins { got: usize },
}

/// Reusable FFT plan for [`SAMPLE_RATE`]-point segments.
pub struct SpectrumPlan<F: FftNum> {
    fft: Arc<dyn Fft<F>>,
}

impl<F: Scalar + FftNum> SpectrumPlan<F> {
    pub fn new() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(SAMPLE_RATE),
        }
    }

    /// Magnitude spectrum of a one-second segment.
    ///
    /// Bin 0 is |mean(signal)|; bin k >= 1 is `|X_k| * 2 / N`, so a unit sine
    /// at an integer frequency k produces exactly 1.0 in bin k.
    pub fn spectrum_200(&self, signal: &[F]) -> Result<Vec<F>, SpectralError> {
        if signal.len() != SAMPLE_RATE {
            return Err(SpectralError::WrongLength { got: signal.len() });
        }
        let mut buf: Vec<Complex<F>> = signal
            .iter()
            .map(|&v| Complex::new(v, F::zero()))
            .collect();
        self.fft.process(&mut buf);
        let n = F::of(SAMPLE_RATE as f64);
        let two_over_n = F::of(2.0 / SAMPLE_RATE as f64);
        let mut bins = Vec::with_capacity(SPECTRUM_BINS);
        bins.push(buf[0].norm() / n);
        for b in buf.iter().take(SPECTRUM_BINS).skip(1) {
            bins.push(b.norm() * two_over_n);
        }
        Ok(bins)
    }
}

impl<F: Scalar + FftNum> Default for SpectrumPlan<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// One-shot convenience wrapper over [`SpectrumPlan`].
pub fn spectrum_200<F: Scalar + FftNum>(signal: &[F]) -> Result<Vec<F>, SpectralError> {
    SpectrumPlan::new().spectrum_200(signal)
}

/// Reference spectrum via the direct O(N*K) discrete Fourier transform.
///
/// Independent of the FFT path (per-bin phasor recurrences instead of
/// butterflies); tests compare the two routes.
pub fn direct_spectrum_200(signal: &[f64]) -> Result<Vec<f64>, SpectralError> {
    if signal.len() != SAMPLE_RATE {
        return Err(SpectralError::WrongLength { got: signal.len() });
    }
    let n = SAMPLE_RATE as f64;
    let mut bins = Vec::with_capacity(SPECTRUM_BINS);
    let mean = signal.iter().sum::<f64>() / n;
    bins.push(mean.abs());
    for k in 1..SPECTRUM_BINS {
        let step = Complex::new(0.0, -2.0 * std::f64::consts::PI * k as f64 / n).exp();
        let mut w = Complex::new(1.0, 0.0);
        let mut acc = Complex::new(0.0, 0.0);
        for &s in signal {
            acc += w * s;
            w *= step;
        }
        bins.push(acc.norm() * 2.0 / n);
    }
    Ok(bins)
}

/// Rescales a magnitude spectrum along the frequency axis by `factor`.
///
/// `out[k]` samples the input at `k/factor` by linear interpolation;
/// positions beyond the last input bin read as zero. Amplitudes are not
/// rescaled, and `factor == 1` is the identity.
pub fn stretch_spectrum<F: Scalar>(spec: &[F], factor: f64) -> Result<Vec<F>, SpectralError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(SpectralError::BadFactor { factor });
    }
    if spec.len() < 2 {
        return Err(SpectralError::TooFewBins { got: spec.len() });
    }
    let last = (spec.len() - 1) as f64;
    let mut out = Vec::with_capacity(spec.len());
    for k in 0..spec.len() {
        let src = k as f64 / factor;
        if src > last {
            out.push(F::zero());
            continue;
        }
        let lo = src.floor() as usize;
        let hi = src.ceil() as usize;
        let t = F::of(src - lo as f64);
        let v = spec[lo] + (spec[hi] - spec[lo]) * t;
        out.push(v);
    }
    Ok(out)
}

/// A spectrum in an augmented set, tagged with its source for audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AugSample<F> {
    pub bins: Vec<F>,
    /// Index into the original list this sample derives from.
    pub source: usize,
    /// Stretch factor applied (1.0 for retained originals).
    pub factor: f64,
    pub augmented: bool,
}

/// Expands unnormalized spectra with stretch augmentation.
///
/// Every original is retained and followed by [`AUGMENT_COPIES`] stretched
/// copies: three factors drawn uniformly from [1, 2] and three from [0.5, 1].
/// Draws are split per sample from `seed`, so the result is independent of
/// processing order.
pub fn augment_set<F: Scalar>(
    spectra: &[Vec<F>],
    seed: u64,
) -> Result<Vec<AugSample<F>>, SpectralError> {
    use rand::{Rng, SeedableRng};
    let mut out = Vec::with_capacity(spectra.len() * (1 + AUGMENT_COPIES));
    for (i, bins) in spectra.iter().enumerate() {
        out.push(AugSample {
            bins: bins.clone(),
            source: i,
            factor: 1.0,
            augmented: false,
        });
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        for c in 0..AUGMENT_COPIES {
            let factor = if c < AUGMENT_COPIES / 2 {
                1.0 + rng.random::<f64>()
            } else {
                0.5 + 0.5 * rng.random::<f64>()
            };
            out.push(AugSample {
                bins: stretch_spectrum(bins, factor)?,
                source: i,
                factor,
                augmented: true,
            });
        }
    }
    Ok(out)
}
