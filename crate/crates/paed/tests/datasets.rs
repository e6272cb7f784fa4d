use std::path::Path;

use paed::config::RunConfig;
use paed::datasets::{
    dataset_iterate, load_split, merge_frames, parse_annotations, rasterize_labels, split_files,
    synth_generate, write_corpus, Annotation, CorpusSpec, Split,
};
use paed_core::features::SegmentMode;
use paed_core::labelspace::{CategorySet, FrameLabelMatrix};
use proptest::prelude::*;

fn spec(seed: u64, polyphony: usize, events: usize) -> CorpusSpec {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        &format!(
            "seed = {seed}\ncategories = 6\ntasks = 2\ntrain_recordings = 3\nval_recordings = 1\ntest_recordings = 1\n\
             duration = 8\nevents = {events}\nmax_polyphony = {polyphony}\n"
        ),
        "test",
    )
    .unwrap();
    cfg.corpus_spec().unwrap()
}

/// Highest number of simultaneously active events, by sampling every
/// millisecond.
fn peak_overlap(anns: &[Annotation], duration: f64) -> usize {
    (0..(duration * 1000.0) as usize)
        .map(|ms| {
            let t = ms as f64 / 1000.0 + 0.0005;
            anns.iter().filter(|a| a.onset <= t && t < a.offset).count()
        })
        .max()
        .unwrap_or(0)
}

#[test]
fn same_seed_same_corpus() {
    let a = synth_generate(&spec(1, 3, 6)).unwrap();
    assert_eq!(a, synth_generate(&spec(1, 3, 6)).unwrap());
    assert_ne!(a, synth_generate(&spec(2, 3, 6)).unwrap());
}

#[test]
fn polyphony_bound_holds_for_every_setting() {
    for p in 1..=6 {
        let corpus = synth_generate(&spec(10 + p as u64, p, 3 * p)).unwrap();
        for split in Split::ALL {
            for rec in corpus.split(split) {
                assert_eq!(rec.annotations.len(), 3 * p, "{}", rec.name);
                assert!(
                    peak_overlap(&rec.annotations, 8.0) <= p,
                    "{} at polyphony {p}",
                    rec.name
                );
                for (i, a) in rec.annotations.iter().enumerate() {
                    assert!(a.onset >= 0.0 && a.offset <= 8.0 && a.offset - a.onset >= 0.5 - 1e-9);
                    for b in &rec.annotations[i + 1..] {
                        if a.category == b.category {
                            assert!(
                                b.onset >= a.offset || a.onset >= b.offset,
                                "{a:?} overlaps {b:?}"
                            );
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn no_events_means_silence() {
    let corpus = synth_generate(&spec(3, 2, 0)).unwrap();
    for rec in corpus.split(Split::Train) {
        assert!(rec.annotations.is_empty());
        assert!(rec.samples.iter().all(|&s| s == 0.0));
        assert_eq!(rec.samples.len(), 8 * 44_100);
    }
}

#[test]
fn mixtures_are_on_the_sixteen_bit_grid_and_below_full_scale() {
    let corpus = synth_generate(&spec(4, 4, 8)).unwrap();
    for rec in corpus.split(Split::Val) {
        let peak = rec.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        assert!(peak > 0.85 && peak <= 0.9 + 1e-4, "{peak}");
        assert!(rec.samples.iter().all(|s| (s * 32768.0).fract() == 0.0));
    }
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let sp = spec(5, 3, 6);
    let corpus = synth_generate(&sp).unwrap();
    write_corpus(dir.path(), &corpus, "meta").unwrap();
    assert_eq!(split_files(dir.path(), Split::Train).unwrap().len(), 3);
    let recs = load_split::<f64>(dir.path(), Split::Train, &sp.categories).unwrap();
    for (rec, orig) in recs.iter().zip(corpus.split(Split::Train)) {
        assert_eq!(rec.name, orig.name);
        let want = paed::features::log_mel(&orig.samples, 44_100).unwrap();
        assert_eq!(rec.spec.values, want.values);
        let text =
            std::fs::read_to_string(dir.path().join("train").join(format!("{}.txt", orig.name)))
                .unwrap();
        let back = parse_annotations(&text, &sp.categories, Path::new("x")).unwrap();
        assert_eq!(back.len(), orig.annotations.len());
        for (a, b) in back.iter().zip(&orig.annotations) {
            assert_eq!(a.category, b.category);
            assert!((a.onset - b.onset).abs() < 5e-4 && (a.offset - b.offset).abs() < 5e-4);
        }
        let labels =
            rasterize_labels(&back, &sp.categories, 0.02, 0.04, rec.spec.frames()).unwrap();
        assert_eq!(rec.labels, labels);
    }
}

#[test]
fn missing_annotation_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let sp = spec(6, 2, 2);
    write_corpus(dir.path(), &synth_generate(&sp).unwrap(), "").unwrap();
    std::fs::remove_file(dir.path().join("val/val_000.txt")).unwrap();
    let err = load_split::<f32>(dir.path(), Split::Val, &sp.categories).unwrap_err();
    assert!(err.to_string().contains("val_000.txt"), "{err}");
}

#[test]
fn frame_centre_rule() {
    let set = CategorySet::new(["a"]).unwrap();
    let ann = |on, off| Annotation {
        onset: on,
        offset: off,
        category: "a".into(),
    };
    // centres at 0.02, 0.04, ...; active when onset <= centre < offset
    let m = rasterize_labels(&[ann(0.04, 0.1)], &set, 0.02, 0.04, 8).unwrap();
    assert_eq!(m.data(), &[0, 1, 1, 1, 0, 0, 0, 0]);
    let m = rasterize_labels(&[ann(0.0, 0.02)], &set, 0.02, 0.04, 3).unwrap();
    assert_eq!(m.data(), &[0, 0, 0]);
    let m = rasterize_labels(&[ann(0.0, 0.021)], &set, 0.02, 0.04, 3).unwrap();
    assert_eq!(m.data(), &[1, 0, 0]);
    let m = rasterize_labels(&[ann(0.0, 0.1)], &set, 0.02, 0.04, 8).unwrap();
    assert_eq!(m.data(), &[1, 1, 1, 1, 0, 0, 0, 0]);
    // a run starting at frame 0 opens at 0; other edges sit half a hop from the outer centres
    let merged = merge_frames(&m, &set, 0.02, 0.04);
    assert_eq!(merged.len(), 1);
    assert!(merged[0].onset.abs() < 1e-12 && (merged[0].offset - 0.09).abs() < 1e-12);
    let inner = merge_frames(
        &rasterize_labels(&[ann(0.04, 0.1)], &set, 0.02, 0.04, 8).unwrap(),
        &set,
        0.02,
        0.04,
    );
    assert!((inner[0].onset - 0.03).abs() < 1e-12 && (inner[0].offset - 0.09).abs() < 1e-12);
}

#[test]
fn test_mode_segments_cover_each_recording_once() {
    let dir = tempfile::tempdir().unwrap();
    let sp = spec(7, 2, 3);
    write_corpus(dir.path(), &synth_generate(&sp).unwrap(), "").unwrap();
    let recs = load_split::<f32>(dir.path(), Split::Train, &sp.categories).unwrap();
    let segs: Vec<_> = dataset_iterate(&recs, SegmentMode::Test, None).collect();
    // 8 s is 399 frames: three full segments and one with 113 padded frames
    assert_eq!(segs.len(), 12);
    let kept: usize = segs
        .iter()
        .map(|s| s.keep.iter().filter(|&&k| k).count())
        .sum();
    assert_eq!(kept, 3 * 399);
    let padded = &segs[3];
    assert_eq!((padded.segment.offset, padded.segment.pad_len), (384, 113));
    assert!(padded.segment.values.data()[15 * 64..]
        .iter()
        .all(|&v| v == (1e-10f32).ln()));
    let train: Vec<_> = dataset_iterate(&recs, SegmentMode::Train, Some(1)).collect();
    assert_eq!(train.len(), 3 * (399 - 128 + 1));
}

proptest! {
    #[test]
    fn merge_then_rasterize_is_identity(bits in proptest::collection::vec(0u8..2, 1..200), cats in 1usize..4) {
        let frames = bits.len() / cats;
        prop_assume!(frames > 0);
        let names: Vec<String> = (0..cats).map(|c| format!("c{c}")).collect();
        let set = CategorySet::new(names).unwrap();
        let m = FrameLabelMatrix::new(frames, cats, bits[..frames * cats].to_vec()).unwrap();
        let anns = merge_frames(&m, &set, 0.02, 0.04);
        prop_assert_eq!(rasterize_labels(&anns, &set, 0.02, 0.04, frames).unwrap(), m);
    }
}
