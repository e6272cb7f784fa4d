//! Synthetic polyphonic corpora, annotation files and frame labels.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use paed_core::features::{segment_offsets, Segment, SegmentMode, Spectrogram, SEGMENT_FRAMES};
use paed_core::labelspace::{CategorySet, FrameLabelMatrix};
use paed_core::training::{derive_seed, LabeledRecording};
use paed_core::Real;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio;
use crate::error::{Error, Result};
use crate::features::{MelExtractor, SAMPLE_RATE};

/// Frame step of the label raster, in microseconds.
pub const HOP_US: i64 = 20_000;
/// Frame length of the label raster, in microseconds.
pub const FRAME_LEN_US: i64 = 40_000;

/// Highest overlap the generator accepts.
pub const MAX_POLYPHONY: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    /// seconds
    pub onset: f64,
    /// seconds, exclusive
    pub offset: f64,
    pub category: String,
}

fn micros(seconds: f64) -> i64 {
    (seconds * 1e6).round() as i64
}

/// Parses annotation lines `onset offset label`, separated by spaces or
/// tabs. The label is the rest of the line and may contain spaces.
pub fn parse_annotations(text: &str, set: &CategorySet, path: &Path) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = Some(i + 1);
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut rest = line;
        let mut times = [0.0; 2];
        for t in &mut times {
            let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
            let token = &rest[..end];
            *t = token
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::format(path, line_no, format!("`{token}` is not a time in seconds"))
                })?;
            rest = rest[end..].trim_start();
        }
        let [onset, offset] = times;
        if rest.is_empty() {
            return Err(Error::format(path, line_no, "missing event label"));
        }
        if onset < 0.0 {
            return Err(Error::format(
                path,
                line_no,
                format!("negative onset {onset}"),
            ));
        }
        if offset <= onset {
            return Err(Error::format(
                path,
                line_no,
                format!("offset {offset} is not after onset {onset}"),
            ));
        }
        if set.index_of(rest).is_none() {
            return Err(Error::format(
                path,
                line_no,
                format!("unknown category `{rest}`"),
            ));
        }
        out.push(Annotation {
            onset,
            offset,
            category: rest.to_string(),
        });
    }
    out.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    Ok(out)
}

pub fn load_annotations(path: &Path, set: &CategorySet) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, set, path)
}

/// Tab-separated lines with millisecond timestamps.
pub fn format_annotations(annotations: &[Annotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        writeln!(out, "{:.3}\t{:.3}\t{}", a.onset, a.offset, a.category).unwrap();
    }
    out
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    fs::write(path, format_annotations(annotations)).map_err(|e| Error::io(path, e))
}

/// Frame `k` is active for a category when its centre
/// `k·hop + frame_len/2` lies in `[onset, offset)` of one of its events.
/// Times are compared in whole microseconds.
pub fn rasterize_labels(
    annotations: &[Annotation],
    set: &CategorySet,
    hop: f64,
    frame_len: f64,
    frames: usize,
) -> Result<FrameLabelMatrix> {
    let (hop, half) = (micros(hop), micros(frame_len) / 2);
    let mut m = FrameLabelMatrix::zeros(frames, set.len());
    // first frame whose centre is at or after `t`
    let first_at = |t: i64| -> usize {
        ((t - half).max(0) as u64)
            .div_ceil(hop as u64)
            .min(frames as u64) as usize
    };
    for a in annotations {
        let c = set
            .index_of(&a.category)
            .ok_or_else(|| Error::Data(format!("unknown category `{}`", a.category)))?;
        for k in first_at(micros(a.onset))..first_at(micros(a.offset)) {
            m.set(k, c, true);
        }
    }
    Ok(m)
}

/// Inverse of [`rasterize_labels`]: every run of active frames becomes one
/// event from halfway before its first centre to halfway after its last,
/// starting at 0 for runs that begin at frame 0.
pub fn merge_frames(
    labels: &FrameLabelMatrix,
    set: &CategorySet,
    hop: f64,
    frame_len: f64,
) -> Vec<Annotation> {
    let (hop, half) = (micros(hop), micros(frame_len) / 2);
    let center = |k: usize| k as i64 * hop + half;
    let mut out = Vec::new();
    for c in 0..labels.categories() {
        let mut k = 0;
        while k < labels.frames() {
            if !labels.get(k, c) {
                k += 1;
                continue;
            }
            let start = k;
            while k < labels.frames() && labels.get(k, c) {
                k += 1;
            }
            let onset = if start == 0 {
                0
            } else {
                center(start) - hop / 2
            };
            out.push(Annotation {
                onset: onset as f64 / 1e6,
                offset: (center(k - 1) + hop / 2) as f64 / 1e6,
                category: set.name(c).to_string(),
            });
        }
    }
    out.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    out
}

/// Largest number of events active at any instant.
pub fn max_concurrency(annotations: &[Annotation]) -> usize {
    let mut edges: Vec<(i64, i32)> = annotations
        .iter()
        .flat_map(|a| [(micros(a.onset), 1), (micros(a.offset), -1)])
        .collect();
    // ends sort before starts at the same instant: intervals are half-open
    edges.sort();
    let (mut now, mut peak) = (0i32, 0i32);
    for (_, d) in edges {
        now += d;
        peak = peak.max(now);
    }
    peak as usize
}

/// Sound synthesis recipe of a category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    /// five decaying harmonics
    Tone,
    /// linear sweep over one octave
    Chirp,
    /// resonator-filtered white noise
    Noise,
    /// filtered noise under a slow amplitude modulation
    AmNoise,
    /// train of short resonant clicks
    Clicks,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [
        Recipe::Tone,
        Recipe::Chirp,
        Recipe::Noise,
        Recipe::AmNoise,
        Recipe::Clicks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Tone => "tone",
            Recipe::Chirp => "chirp",
            Recipe::Noise => "noise",
            Recipe::AmNoise => "am-noise",
            Recipe::Clicks => "clicks",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    /// Default assignment: recipes cycle through the category list.
    pub fn cycle(categories: usize) -> Vec<Recipe> {
        (0..categories)
            .map(|c| Self::ALL[c % Self::ALL.len()])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub categories: CategorySet,
    /// recordings in the train, validation and test splits
    pub recordings: [usize; 3],
    /// seconds per recording
    pub duration: f64,
    pub events: usize,
    pub max_polyphony: usize,
    /// shortest and longest event, seconds
    pub event_len: (f64, f64),
    /// one per category
    pub recipes: Vec<Recipe>,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        if !(1..=MAX_POLYPHONY).contains(&self.max_polyphony) {
            return bad(format!(
                "max polyphony {} outside 1..={MAX_POLYPHONY}",
                self.max_polyphony
            ));
        }
        let (lo, hi) = self.event_len;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "event length range [{lo}, {hi}] is empty or not positive"
            ));
        }
        if self.duration.is_nan() || self.duration <= hi {
            return bad(format!(
                "recording duration {} s must exceed the longest event ({hi} s)",
                self.duration
            ));
        }
        if self.recipes.len() != self.categories.len() {
            return bad(format!(
                "{} recipes for {} categories",
                self.recipes.len(),
                self.categories.len()
            ));
        }
        if self.categories.is_empty() {
            return bad("no event categories".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub name: String,
    /// mono, 44.1 kHz, already on the 16-bit grid
    pub samples: Vec<f64>,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Corpus {
    pub splits: [Vec<Recording>; 3],
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Recording] {
        &self.splits[split as usize]
    }
}

const MIX_PEAK: f64 = 0.9;
const PLACEMENT_ATTEMPTS: usize = 10_000;
/// raised-cosine fade at both ends of every event
const FADE: f64 = 0.005;

/// Renders every split. Each recording draws from its own stream derived
/// from the seed, so recordings do not depend on each other.
pub fn synth_generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut corpus = Corpus::default();
    for split in Split::ALL {
        for i in 0..spec.recordings[split as usize] {
            let seed = derive_seed(spec.seed, 16 + split as u64, i as u64);
            let name = format!("{}_{i:03}", split.name());
            corpus.splits[split as usize].push(render_recording(spec, name, seed)?);
        }
    }
    Ok(corpus)
}

/// Base frequency of a category: log-spaced from 150 Hz to 6 kHz.
fn base_frequency(category: usize, categories: usize) -> f64 {
    let x = if categories > 1 {
        category as f64 / (categories - 1) as f64
    } else {
        0.5
    };
    150.0 * 40f64.powf(x)
}

fn render_recording(spec: &CorpusSpec, name: String, seed: u64) -> Result<Recording> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = schedule_events(spec, &mut rng)?;
    let sr = f64::from(SAMPLE_RATE);
    let n = (spec.duration * sr).round() as usize;
    let mut mix = vec![0.0; n];
    for (c, onset_ms, len_ms) in &schedule {
        let start = (*onset_ms as f64 * sr / 1000.0).round() as usize;
        let len = ((*len_ms as f64 * sr / 1000.0).round() as usize).min(n - start);
        let amp = rng.gen_range(0.3..=1.0);
        let f0 = base_frequency(*c, spec.categories.len());
        let wave = render_event(spec.recipes[*c], f0, len, &mut rng);
        for (m, w) in mix[start..start + len].iter_mut().zip(wave) {
            *m += amp * w;
        }
    }
    let peak = mix.iter().fold(0.0f64, |p, v| p.max(v.abs()));
    if peak > 0.0 {
        let g = MIX_PEAK / peak;
        mix.iter_mut().for_each(|v| *v *= g);
    }
    let samples = audio::quantize(&mix)
        .into_iter()
        .map(|v| f64::from(v) / 32768.0)
        .collect();
    let mut annotations: Vec<Annotation> = schedule
        .iter()
        .map(|&(c, onset, len)| Annotation {
            onset: onset as f64 / 1000.0,
            offset: (onset + len) as f64 / 1000.0,
            category: spec.categories.name(c).to_string(),
        })
        .collect();
    annotations.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    Ok(Recording {
        name,
        samples,
        annotations,
    })
}

/// `(category, onset ms, length ms)` of every event. Placements that
/// would overlap the same category or exceed the polyphony limit are
/// redrawn.
fn schedule_events(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, u64, u64)>> {
    let total_ms = (spec.duration * 1000.0).round() as u64;
    let (lo, hi) = (
        (spec.event_len.0 * 1000.0).round() as u64,
        (spec.event_len.1 * 1000.0).round() as u64,
    );
    let unsatisfiable = || {
        Error::usage(format!(
            "cannot place {} events of at least {} s in {} s with at most {} overlapping",
            spec.events, spec.event_len.0, spec.duration, spec.max_polyphony
        ))
    };
    if spec.events as u64 * lo > total_ms * spec.max_polyphony as u64 {
        return Err(unsatisfiable());
    }
    let mut placed: Vec<(usize, u64, u64)> = Vec::with_capacity(spec.events);
    for _ in 0..spec.events {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = rng.gen_range(0..spec.categories.len());
            let len = rng.gen_range(lo..=hi);
            let onset = rng.gen_range(0..=total_ms - len);
            let end = onset + len;
            let overlapping: Vec<_> = placed
                .iter()
                .filter(|&&(_, o, l)| o < end && onset < o + l)
                .collect();
            if overlapping.iter().any(|&&(pc, _, _)| pc == c) {
                continue;
            }
            // peak overlap inside the new interval, counting the new event
            let mut edges: Vec<(u64, i32)> = overlapping
                .iter()
                .flat_map(|&&(_, o, l)| [(o.max(onset), 1), ((o + l).min(end), -1)])
                .collect();
            edges.sort();
            let (mut now, mut peak) = (1i32, 1i32);
            for (_, d) in edges {
                now += d;
                peak = peak.max(now);
            }
            if peak as usize <= spec.max_polyphony {
                placed.push((c, onset, len));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(unsatisfiable());
        }
    }
    Ok(placed)
}

/// One event of `len` samples with unit peak.
fn render_event(recipe: Recipe, f0: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use std::f64::consts::TAU;
    let sr = f64::from(SAMPLE_RATE);
    let t = |i: usize| i as f64 / sr;
    let dur = len as f64 / sr;
    let mut w: Vec<f64> = match recipe {
        Recipe::Tone => (0..len)
            .map(|i| {
                let decay = (-1.5 * t(i) / dur).exp();
                decay
                    * (1..=5)
                        .map(|h| (TAU * h as f64 * f0 * t(i)).sin() / h as f64)
                        .sum::<f64>()
            })
            .collect(),
        Recipe::Chirp => (0..len)
            .map(|i| (TAU * (f0 * t(i) + f0 * t(i) * t(i) / (2.0 * dur))).sin())
            .collect(),
        Recipe::Noise => resonant_noise(f0, len, rng),
        Recipe::AmNoise => {
            let rate = 3.0 + f0.log2() % 4.0;
            let mut w = resonant_noise(f0, len, rng);
            for (i, v) in w.iter_mut().enumerate() {
                *v *= 0.5 + 0.5 * (TAU * rate * t(i)).sin();
            }
            w
        }
        Recipe::Clicks => {
            let period = (sr / (6.0 + f0 / 500.0)) as usize;
            (0..len)
                .map(|i| {
                    let since = (i % period) as f64 / sr;
                    (-since / 0.01).exp() * (TAU * f0 * since).sin()
                })
                .collect()
        }
    };
    let fade = ((FADE * sr) as usize).min(len / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / fade as f64).cos();
        w[i] *= g;
        w[len - 1 - i] *= g;
    }
    let peak = w.iter().fold(0.0f64, |p, v| p.max(v.abs()));
    if peak > 0.0 {
        w.iter_mut().for_each(|v| *v /= peak);
    }
    w
}

/// White noise through a two-pole resonator at `f0`.
fn resonant_noise(f0: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let bandwidth = f0 / 3.0;
    let r = (-std::f64::consts::PI * bandwidth / sr).exp();
    let (a1, a2) = (2.0 * r * (std::f64::consts::TAU * f0 / sr).cos(), -r * r);
    let (mut y1, mut y2) = (0.0, 0.0);
    (0..len)
        .map(|_| {
            let y = rng.gen_range(-1.0..1.0) + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

pub const META_FILE: &str = "corpus.meta";

/// Writes `<split>/<name>.wav`, `<split>/<name>.txt` and `corpus.meta`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, meta: &str) -> Result<()> {
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for rec in corpus.split(split) {
            audio::write_wav(&sub.join(format!("{}.wav", rec.name)), &rec.samples)?;
            write_annotations(&sub.join(format!("{}.txt", rec.name)), &rec.annotations)?;
        }
    }
    let path = dir.join(META_FILE);
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

/// WAV files of a split directory, sorted by name.
pub fn split_files(dir: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let sub = dir.join(split.name());
    let entries = fs::read_dir(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut files = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(&sub, e))?.path();
        if path.extension().is_some_and(|x| x == "wav") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Features and frame labels of every recording in a split. Each WAV needs
/// an annotation file with the same stem.
pub fn load_split<S: Real>(
    dir: &Path,
    split: Split,
    set: &CategorySet,
) -> Result<Vec<LabeledRecording<S>>> {
    let extractor = MelExtractor::default();
    split_files(dir, split)?
        .iter()
        .map(|wav| {
            let samples = audio::read_wav(wav)?;
            let spec = extractor
                .extract(&samples, SAMPLE_RATE)
                .map_err(|e| match e {
                    Error::Data(m) => Error::format(wav, None, m),
                    e => e,
                })?;
            let annotations = load_annotations(&wav.with_extension("txt"), set)?;
            let labels =
                rasterize_labels(&annotations, set, spec.hop, spec.frame_len, spec.frames())?;
            let name = wav.file_stem().unwrap_or_default().to_string_lossy();
            Ok(LabeledRecording::new(
                &name,
                cast_spectrogram(&spec)?,
                labels,
            )?)
        })
        .collect()
}

pub fn cast_spectrogram<S: Real>(spec: &Spectrogram<f64>) -> Result<Spectrogram<S>> {
    Ok(Spectrogram::new(
        spec.values.cast(),
        spec.hop,
        spec.frame_len,
        spec.sample_rate,
    )?)
}

/// A segment with its label rows. `keep` is false on padded frames.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSegment<S> {
    pub recording: usize,
    pub segment: Segment<S>,
    pub labels: FrameLabelMatrix,
    pub keep: Vec<bool>,
}

/// Segments of every recording with frame-aligned labels. Train mode
/// skips recordings shorter than one segment and, given a seed, visits
/// segments in a seeded random order.
pub fn dataset_iterate<'a, S: Real>(
    recordings: &'a [LabeledRecording<S>],
    mode: SegmentMode,
    shuffle: Option<u64>,
) -> impl Iterator<Item = LabeledSegment<S>> + 'a {
    let mut index: Vec<(usize, usize, usize)> = Vec::new();
    for (r, rec) in recordings.iter().enumerate() {
        match segment_offsets(rec.spec.frames(), mode) {
            Ok(offsets) => index.extend(offsets.into_iter().map(|(o, p)| (r, o, p))),
            Err(_) => log::warn!(
                "skipping {}: {} frames is shorter than one {SEGMENT_FRAMES}-frame segment",
                rec.name,
                rec.spec.frames()
            ),
        }
    }
    if let Some(seed) = shuffle {
        index.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    index.into_iter().map(move |(r, offset, pad_len)| {
        let rec = &recordings[r];
        LabeledSegment {
            recording: r,
            segment: Segment {
                values: rec.spec.window(offset, SEGMENT_FRAMES),
                offset,
                pad_len,
            },
            labels: rec.labels.window(offset, SEGMENT_FRAMES),
            keep: (0..SEGMENT_FRAMES)
                .map(|j| j < SEGMENT_FRAMES - pad_len)
                .collect(),
        }
    })
}
