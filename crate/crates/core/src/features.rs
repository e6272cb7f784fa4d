//! Spectrogram containers, fixed-length segmenting and per-bin
//! standardisation. Log-mel extraction itself lives in the `paed` crate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{NdBuffer, Real};
use crate::{Error, Result};

/// Frames per network input segment.
pub const SEGMENT_FRAMES: usize = 128;

/// Floor applied to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

/// Smallest standard deviation used when standardising.
pub const STD_FLOOR: f64 = 1e-8;

/// `(T, F)` log-mel matrix with frame timing.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<S> {
    pub values: NdBuffer<S>,
    /// seconds between frame starts
    pub hop: f64,
    /// seconds covered by one frame
    pub frame_len: f64,
    pub sample_rate: u32,
}

impl<S: Real> Spectrogram<S> {
    pub fn new(values: NdBuffer<S>, hop: f64, frame_len: f64, sample_rate: u32) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape(
                "Spectrogram",
                format!("expected (T, F), got {:?}", values.shape()),
            ));
        }
        Ok(Self {
            values,
            hop,
            frame_len,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, frame: usize) -> &[S] {
        let f = self.bins();
        &self.values.data()[frame * f..(frame + 1) * f]
    }

    /// `len` frames starting at `start`; frames past the end hold the log
    /// floor.
    pub fn window(&self, start: usize, len: usize) -> NdBuffer<S> {
        let f = self.bins();
        let floor = S::of(num_traits::Float::ln(LOG_FLOOR));
        let mut out = vec![floor; len * f];
        let end = (start + len).min(self.frames());
        if start < end {
            let src = &self.values.data()[start * f..end * f];
            out[..src.len()].copy_from_slice(src);
        }
        NdBuffer::new(&[len, f], out).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentMode {
    /// every start offset (`T − 1` frames of overlap)
    Train,
    /// consecutive non-overlapping windows, the last one padded
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment<S> {
    /// `(128, F)`
    pub values: NdBuffer<S>,
    pub offset: usize,
    /// number of trailing padded frames
    pub pad_len: usize,
}

/// `(offset, pad_len)` of every segment of a `total`-frame stream.
pub fn segment_offsets(total: usize, mode: SegmentMode) -> Result<Vec<(usize, usize)>> {
    match mode {
        SegmentMode::Train => {
            if total < SEGMENT_FRAMES {
                return Err(Error::InvalidArgument(format!(
                    "training needs at least {SEGMENT_FRAMES} frames, recording has {total}"
                )));
            }
            Ok((0..=total - SEGMENT_FRAMES).map(|o| (o, 0)).collect())
        }
        SegmentMode::Test => Ok((0..total.div_ceil(SEGMENT_FRAMES))
            .map(|k| {
                let o = k * SEGMENT_FRAMES;
                (o, (o + SEGMENT_FRAMES).saturating_sub(total))
            })
            .collect()),
    }
}

pub fn segment_stream<S: Real>(
    spec: &Spectrogram<S>,
    mode: SegmentMode,
) -> Result<Vec<Segment<S>>> {
    Ok(segment_offsets(spec.frames(), mode)?
        .into_iter()
        .map(|(offset, pad_len)| Segment {
            values: spec.window(offset, SEGMENT_FRAMES),
            offset,
            pad_len,
        })
        .collect())
}

/// Per-bin mean and standard deviation of a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats<S> {
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

impl<S: Real> FeatureStats<S> {
    pub fn identity(bins: usize) -> Self {
        Self {
            mean: vec![S::zero(); bins],
            std: vec![S::one(); bins],
        }
    }

    /// Moments over every frame of every spectrogram (accumulated in f64).
    pub fn fit<'a, I>(specs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Spectrogram<S>>,
    {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        let mut rows = Vec::new();
        for spec in specs {
            if sum.is_empty() {
                sum = vec![0.0; spec.bins()];
                sq = vec![0.0; spec.bins()];
            } else if spec.bins() != sum.len() {
                return Err(Error::shape(
                    "FeatureStats::fit",
                    "spectrograms differ in bin count",
                ));
            }
            rows.push(spec);
            for f in 0..spec.frames() {
                for (s, v) in sum.iter_mut().zip(spec.row(f)) {
                    *s += v.as_f64();
                }
            }
            n += spec.frames();
        }
        if n == 0 {
            return Err(Error::Empty("training features"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for spec in rows {
            for f in 0..spec.frames() {
                for ((q, v), m) in sq.iter_mut().zip(spec.row(f)).zip(&mean) {
                    let d = v.as_f64() - m;
                    *q += d * d;
                }
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| S::of(m)).collect(),
            std: sq.iter().map(|q| S::of(num_traits::Float::sqrt(q / n as f64))).collect(),
        })
    }

    /// `(v − mean) / max(std, 1e-8)` applied row-wise to a `(…, F)` buffer.
    pub fn apply(&self, values: &NdBuffer<S>) -> Result<NdBuffer<S>> {
        let f = *values.shape().last().unwrap_or(&0);
        if f != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                format!("{f} bins but statistics for {}", self.mean.len()),
            ));
        }
        let floor = S::of(STD_FLOOR);
        let inv: Vec<S> = self.std.iter().map(|s| S::one() / s.max(floor)).collect();
        let mut out = values.clone();
        for row in out.data_mut().chunks_exact_mut(f) {
            for ((v, m), i) in row.iter_mut().zip(&self.mean).zip(&inv) {
                *v = (*v - *m) * *i;
            }
        }
        Ok(out)
    }
}

pub fn standardize<S: Real>(
    spec: &Spectrogram<S>,
    stats: Option<&FeatureStats<S>>,
) -> Result<Spectrogram<S>> {
    let stats = stats
        .ok_or_else(|| Error::InvalidArgument("standardisation statistics are missing".into()))?;
    Ok(Spectrogram {
        values: stats.apply(&spec.values)?,
        ..spec.clone()
    })
}
