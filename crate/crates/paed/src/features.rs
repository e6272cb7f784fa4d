//! Log-mel spectrogram extraction.

use std::sync::Arc;

use paed_core::features::{Spectrogram, LOG_FLOOR};
use paed_core::NdBuffer;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 44_100;
/// 40 ms
pub const FRAME_LEN: usize = 1764;
/// 20 ms
pub const HOP: usize = 882;
pub const FFT_SIZE: usize = 2048;
pub const N_MELS: usize = 64;
pub const F_MIN: f64 = 50.0;
pub const F_MAX: f64 = 22_050.0;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of whole frames in `n` samples, `None` when not even one fits.
pub fn frame_count(n: usize) -> Option<usize> {
    (n >= FRAME_LEN).then(|| (n - FRAME_LEN) / HOP + 1)
}

/// Triangular filters with unit peaks at mel-spaced centres.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `(n_mels, fft_size / 2 + 1)`, row-major
    weights: Vec<f64>,
    centers: Vec<f64>,
    bins: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, f_min: f64, f_max: f64, fft_size: usize, sample_rate: u32) -> Self {
        let bins = fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = f64::from(sample_rate) / fft_size as f64;
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[m * bins + k] = w;
            }
        }
        Self {
            weights,
            centers: edges[1..=n_mels].to_vec(),
            bins,
        }
    }

    /// The filterbank used by [`log_mel`].
    pub fn standard() -> Self {
        Self::new(N_MELS, F_MIN, F_MAX, FFT_SIZE, SAMPLE_RATE)
    }

    pub fn n_mels(&self) -> usize {
        self.centers.len()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Peak frequency of each filter in Hz.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    pub fn apply(&self, spectrum: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(spectrum).map(|(w, s)| w * s).sum();
        }
    }
}

/// Reusable Hann window, FFT plan and filterbank.
pub struct MelExtractor {
    bank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(bank: MelFilterbank) -> Self {
        let window = (0..FRAME_LEN)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / FRAME_LEN as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Self { bank, window, fft }
    }

    pub fn bank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn extract(&self, samples: &[f64], sample_rate: u32) -> Result<Spectrogram<f64>> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Data(format!(
                "log-mel features need {SAMPLE_RATE} Hz audio, got {sample_rate} Hz"
            )));
        }
        let frames = frame_count(samples.len()).ok_or_else(|| {
            Error::Data(format!(
                "log-mel features need at least {FRAME_LEN} samples (one 40 ms frame), got {}",
                samples.len()
            ))
        })?;
        let n_mels = self.bank.n_mels();
        let mut values = vec![0.0; frames * n_mels];
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut magnitude = vec![0.0; self.bank.bins()];
        for (t, row) in values.chunks_exact_mut(n_mels).enumerate() {
            let frame = &samples[t * HOP..t * HOP + FRAME_LEN];
            for (b, (s, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(s * w, 0.0);
            }
            buf[FRAME_LEN..]
                .iter_mut()
                .for_each(|b| *b = Complex::new(0.0, 0.0));
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in magnitude.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            self.bank.apply(&magnitude, row);
            for v in row.iter_mut() {
                *v = v.max(LOG_FLOOR).ln();
            }
        }
        let values = NdBuffer::new(&[frames, n_mels], values)?;
        Ok(Spectrogram::new(
            values,
            HOP as f64 / f64::from(SAMPLE_RATE),
            FRAME_LEN as f64 / f64::from(SAMPLE_RATE),
            SAMPLE_RATE,
        )?)
    }
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new(MelFilterbank::standard())
    }
}

/// 64-band log-mel spectrogram of mono 44.1 kHz samples: Hann-windowed
/// 40 ms frames every 20 ms, magnitude spectrum, natural log floored at
/// `LOG_FLOOR`.
pub fn log_mel(samples: &[f64], sample_rate: u32) -> Result<Spectrogram<f64>> {
    MelExtractor::default().extract(samples, sample_rate)
}
