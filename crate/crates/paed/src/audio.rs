//! 16-bit PCM mono WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::features::SAMPLE_RATE;

/// Reads a mono 16-bit PCM file as samples in `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let wav = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = WavReader::open(path).map_err(wav)?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            path,
            None,
            format!(
                "expected 16-bit integer PCM, found {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    if spec.channels != 1 {
        return Err(Error::format(
            path,
            None,
            format!("expected mono audio, found {} channels", spec.channels),
        ));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::format(
            path,
            None,
            format!(
                "expected a sample rate of {SAMPLE_RATE} Hz, found {} Hz",
                spec.sample_rate
            ),
        ));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0).map_err(wav))
        .collect()
}

/// Rounds `samples` to 16 bits, clipping to the representable range.
pub fn quantize(samples: &[f64]) -> Vec<i16> {
    samples
        .iter()
        .map(|&s| (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect()
}

/// Writes mono 16-bit PCM at 44.1 kHz.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let wav = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(wav)?;
    for v in quantize(samples) {
        w.write_sample(v).map_err(wav)?;
    }
    w.finalize().map_err(wav)
}
