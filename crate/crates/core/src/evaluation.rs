//! Frame-based precision, recall and F1.
//!
//! `P = TP / (TP + FP)`, `R = TP / (TP + FN)`, `F1 = 2PR / (P + R)`, with
//! every `0/0` taken as 0. "Macro" is the unweighted mean of per-category
//! F1; "micro" is F1 of the counts pooled over all categories.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::features::{segment_offsets, SegmentMode, Spectrogram, SEGMENT_FRAMES};
use crate::labelspace::FrameLabelMatrix;
use crate::model::Network;
use crate::numerics::{NdBuffer, Real};
use crate::training::LabeledRecording;
use crate::{Error, Result};

/// Segments per inference batch.
const EVAL_BATCH: usize = 8;

/// Degrees always reported, matching the maximum polyphony of the corpus.
pub const MIN_REPORTED_DEGREE: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, pred: u8, truth: u8) {
        match (pred, truth) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => {}
        }
    }

    fn merge(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegreeScore {
    pub degree: usize,
    pub frames: usize,
    pub counts: Counts,
}

impl DegreeScore {
    pub fn f1(&self) -> f64 {
        self.counts.f1()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<Counts>,
    pub micro: Counts,
    pub macro_f1: f64,
    pub by_degree: Vec<DegreeScore>,
    pub frames: usize,
}

impl EvalReport {
    pub fn micro_f1(&self) -> f64 {
        self.micro.f1()
    }
}

fn check(pred: &FrameLabelMatrix, truth: &FrameLabelMatrix) -> Result<()> {
    if pred.frames() != truth.frames() || pred.categories() != truth.categories() {
        return Err(Error::shape(
            "frame_prf",
            format!(
                "prediction is {}x{}, ground truth {}x{}",
                pred.frames(),
                pred.categories(),
                truth.frames(),
                truth.categories()
            ),
        ));
    }
    Ok(())
}

/// Per-category and pooled scores over all frames, including the
/// per-degree breakdown.
pub fn frame_prf(pred: &FrameLabelMatrix, truth: &FrameLabelMatrix) -> Result<EvalReport> {
    check(pred, truth)?;
    let y = truth.categories();
    let mut per_class = vec![Counts::default(); y];
    for (p, t) in pred
        .data()
        .chunks_exact(y.max(1))
        .zip(truth.data().chunks_exact(y.max(1)))
    {
        for c in 0..y {
            per_class[c].add(p[c], t[c]);
        }
    }
    let mut micro = Counts::default();
    for c in &per_class {
        micro.merge(c);
    }
    let macro_f1 = if y == 0 {
        0.0
    } else {
        per_class.iter().map(Counts::f1).sum::<f64>() / y as f64
    };
    Ok(EvalReport {
        per_class,
        micro,
        macro_f1,
        by_degree: f1_by_degree(pred, truth)?,
        frames: truth.frames(),
    })
}

/// Pooled counts within groups of frames sharing the same ground-truth
/// degree (number of active categories). Degree-0 frames are left out;
/// degrees `1..=max(6, highest observed)` are always listed.
pub fn f1_by_degree(pred: &FrameLabelMatrix, truth: &FrameLabelMatrix) -> Result<Vec<DegreeScore>> {
    check(pred, truth)?;
    let top = (0..truth.frames())
        .map(|f| truth.degree(f))
        .max()
        .unwrap_or(0)
        .max(MIN_REPORTED_DEGREE);
    let mut out: Vec<DegreeScore> = (1..=top)
        .map(|degree| DegreeScore {
            degree,
            frames: 0,
            counts: Counts::default(),
        })
        .collect();
    for f in 0..truth.frames() {
        let d = truth.degree(f);
        if d == 0 {
            continue;
        }
        let slot = &mut out[d - 1];
        slot.frames += 1;
        for (p, t) in pred.row(f).iter().zip(truth.row(f)) {
            slot.counts.add(*p, *t);
        }
    }
    Ok(out)
}

/// Scores only the frames flagged in `keep` (for example, excluding padding).
pub fn frame_prf_masked(
    pred: &FrameLabelMatrix,
    truth: &FrameLabelMatrix,
    keep: &[bool],
) -> Result<EvalReport> {
    check(pred, truth)?;
    if keep.len() != truth.frames() {
        return Err(Error::shape(
            "frame_prf_masked",
            format!("{} mask entries for {} frames", keep.len(), truth.frames()),
        ));
    }
    frame_prf(&pred.select(keep), &truth.select(keep))
}

/// Frame-level activity of a whole recording: non-overlapping segments,
/// padding trimmed off again.
pub fn detect_recording<S: Real>(
    net: &Network<S>,
    spec: &Spectrogram<S>,
    threshold: f64,
) -> Result<FrameLabelMatrix> {
    let offsets = segment_offsets(spec.frames(), SegmentMode::Test)?;
    let f = spec.bins();
    let mut parts = Vec::new();
    for chunk in offsets.chunks(EVAL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * SEGMENT_FRAMES * f);
        for &(o, _) in chunk {
            data.extend_from_slice(spec.window(o, SEGMENT_FRAMES).data());
        }
        let batch = NdBuffer::new(&[chunk.len(), SEGMENT_FRAMES, f], data)?;
        parts.push(net.detect(&batch, threshold)?);
    }
    let all = FrameLabelMatrix::concat(&parts)?;
    Ok(all.window(0, spec.frames()))
}

/// Scores `net` over every frame of every recording. Padded frames of the
/// last segment are never counted.
pub fn evaluate_network<S: Real>(
    net: &Network<S>,
    recs: &[LabeledRecording<S>],
    threshold: f64,
) -> Result<EvalReport> {
    if recs.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut preds = Vec::with_capacity(recs.len());
    let mut truths = Vec::with_capacity(recs.len());
    for rec in recs {
        preds.push(detect_recording(net, &rec.spec, threshold)?);
        truths.push(rec.labels.clone());
    }
    frame_prf(
        &FrameLabelMatrix::concat(&preds)?,
        &FrameLabelMatrix::concat(&truths)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(frames: usize, y: usize, d: &[u8]) -> FrameLabelMatrix {
        FrameLabelMatrix::new(frames, y, d.to_vec()).unwrap()
    }

    #[test]
    fn two_thirds_case() {
        // TP=2, FP=1, FN=1 on a single category
        let truth = m(5, 1, &[1, 1, 1, 0, 0]);
        let pred = m(5, 1, &[1, 1, 0, 1, 0]);
        let r = frame_prf(&pred, &truth).unwrap();
        assert_eq!(
            r.per_class[0],
            Counts {
                tp: 2,
                fp: 1,
                fn_: 1
            }
        );
        assert!((r.per_class[0].precision() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[0].recall() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.micro_f1() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_silent_predictors() {
        let truth = m(3, 2, &[1, 0, 1, 1, 0, 1]);
        let r = frame_prf(&truth, &truth).unwrap();
        assert_eq!(r.micro_f1(), 1.0);
        assert!(r.per_class.iter().all(|c| c.f1() == 1.0));
        let none = FrameLabelMatrix::zeros(3, 2);
        let r = frame_prf(&none, &truth).unwrap();
        assert_eq!(r.micro.recall(), 0.0);
        assert_eq!(r.micro_f1(), 0.0);
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let z = FrameLabelMatrix::zeros(4, 3);
        let r = frame_prf(&z, &z).unwrap();
        assert_eq!(r.macro_f1, 0.0);
        assert!(r.micro_f1().is_finite());
    }

    #[test]
    fn degree_grouping_uses_ground_truth() {
        let truth = m(3, 4, &[1, 1, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0]);
        let pred = m(3, 4, &[1, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
        let d = f1_by_degree(&pred, &truth).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d[2].frames, 1);
        assert_eq!(
            d[2].counts,
            Counts {
                tp: 1,
                fp: 0,
                fn_: 2
            }
        );
        assert_eq!(d[0].frames, 1);
        assert_eq!(
            d[0].counts,
            Counts {
                tp: 1,
                fp: 3,
                fn_: 0
            }
        );
        assert_eq!(d[1].frames, 0);
    }

    #[test]
    fn mismatched_shapes_fail() {
        assert!(frame_prf(
            &FrameLabelMatrix::zeros(2, 2),
            &FrameLabelMatrix::zeros(3, 2)
        )
        .is_err());
    }
}
