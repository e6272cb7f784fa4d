//! Losses, Adam and the training loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::evaluation::evaluate_network;
use crate::features::{FeatureStats, Spectrogram, SEGMENT_FRAMES};
use crate::labelspace::{encode_targets, FrameLabelMatrix};
use crate::model::{HeadKind, Mode, Network, ParamId};
use crate::numerics::{NdBuffer, Real, Tape, Var};
use crate::{Error, Result};

/// Mean over tasks of each task's frame-averaged cross-entropy. `targets`
/// holds one class index per output row for each task.
pub fn multitask_loss<S: Real>(
    tape: &mut Tape<S>,
    outputs: &[Var],
    targets: &[Vec<u32>],
) -> Result<Var> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::shape(
            "multitask_loss",
            format!(
                "{} outputs for {} target columns",
                outputs.len(),
                targets.len()
            ),
        ));
    }
    let mut total = tape.cross_entropy(outputs[0], &targets[0])?;
    for (&out, t) in outputs.iter().zip(targets).skip(1) {
        let ce = tape.cross_entropy(out, t)?;
        total = tape.add(total, ce)?;
    }
    Ok(tape.scale(total, S::of(1.0 / outputs.len() as f64)))
}

/// Mean binary cross-entropy over every frame and category.
pub fn multilabel_loss<S: Real>(tape: &mut Tape<S>, output: Var, targets: &[u8]) -> Result<Var> {
    tape.binary_cross_entropy(output, targets)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    m: Vec<NdBuffer<S>>,
    v: Vec<NdBuffer<S>>,
    step: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new<'a, I: IntoIterator<Item = &'a [usize]>>(shapes: I) -> Self {
        let m: Vec<NdBuffer<S>> = shapes.into_iter().map(NdBuffer::zeros).collect();
        Self {
            config: AdamConfig::default(),
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every buffer in `params`.
pub fn adam_step<S: Real>(
    params: &mut [&mut NdBuffer<S>],
    grads: &[NdBuffer<S>],
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "buffer {i}: parameter {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
    let (one, eps, lr) = (S::one(), S::of(c.eps), S::of(lr));
    let corr1 = one - S::of(num_traits::Float::powi(c.beta1, t));
    let corr2 = one - S::of(num_traits::Float::powi(c.beta2, t));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((theta, &g), (m, v)) in it {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / corr1;
            let vh = *v / corr2;
            *theta -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// A log-mel spectrogram with its frame-aligned ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRecording<S> {
    pub name: alloc::string::String,
    pub spec: Spectrogram<S>,
    pub labels: FrameLabelMatrix,
}

impl<S: Real> LabeledRecording<S> {
    pub fn new(name: &str, spec: Spectrogram<S>, labels: FrameLabelMatrix) -> Result<Self> {
        if spec.frames() != labels.frames() {
            return Err(Error::shape(
                "LabeledRecording",
                format!(
                    "{} spectrogram frames, {} label frames",
                    spec.frames(),
                    labels.frames()
                ),
            ));
        }
        Ok(Self {
            name: name.into(),
            spec,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// stop after this many optimiser steps, mid-epoch if necessary
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// baseline decision threshold used for validation
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            epochs: 10,
            max_steps: None,
            seed: 42,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::InvalidArgument(
                "batch size, epochs and step limit must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based
    pub epoch: usize,
    /// optimiser steps taken so far
    pub step: usize,
    pub train_loss: f64,
    pub val_micro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    /// parameters of the epoch with the best validation micro F1
    pub best: Network<S>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// training recordings shorter than one segment
    pub skipped: Vec<alloc::string::String>,
    /// loss of every optimiser step
    pub step_losses: Vec<f64>,
}

/// Derives independent seeds for shuffling and dropout from the run seed.
pub fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    let mut z = seed
        ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE: u64 = 1;
const DROPOUT: u64 = 2;

/// `(recording, offset)` of every dense training segment.
pub fn dense_index<S: Real>(recordings: &[LabeledRecording<S>]) -> Vec<(usize, usize)> {
    recordings
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| {
            (0..(rec.spec.frames() + 1).saturating_sub(SEGMENT_FRAMES)).map(move |o| (r, o))
        })
        .collect()
}

/// Segment batch `(B, 128, F)` and its labels, in index order.
pub fn assemble_batch<S: Real>(
    recordings: &[LabeledRecording<S>],
    index: &[(usize, usize)],
) -> Result<(NdBuffer<S>, FrameLabelMatrix)> {
    let f = recordings[index[0].0].spec.bins();
    let mut data = Vec::with_capacity(index.len() * SEGMENT_FRAMES * f);
    let mut labels = Vec::with_capacity(index.len());
    for &(r, o) in index {
        let rec = &recordings[r];
        data.extend_from_slice(rec.spec.window(o, SEGMENT_FRAMES).data());
        labels.push(rec.labels.window(o, SEGMENT_FRAMES));
    }
    Ok((
        NdBuffer::new(&[index.len(), SEGMENT_FRAMES, f], data)?,
        FrameLabelMatrix::concat(&labels)?,
    ))
}

/// Loss of one batch, recorded on the session tape.
pub fn batch_loss<S: Real>(
    tape: &mut Tape<S>,
    head: &HeadKind,
    outputs: &[Var],
    labels: &FrameLabelMatrix,
) -> Result<Var> {
    match head {
        HeadKind::MultiTask(decomp) => {
            let targets = encode_targets(labels, decomp)?;
            let cols: Vec<Vec<u32>> = (0..decomp.tasks())
                .map(|t| targets.task_column(t))
                .collect();
            multitask_loss(tape, outputs, &cols)
        }
        HeadKind::Baseline { .. } => multilabel_loss(tape, outputs[0], labels.data()),
    }
}

/// One optimiser step on a batch. Returns the batch loss.
pub fn train_step<S: Real>(
    net: &mut Network<S>,
    adam: &mut AdamState<S>,
    input: &NdBuffer<S>,
    labels: &FrameLabelMatrix,
    lr: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let (loss, grads, stats) = {
        let mut s = net.session(Mode::Train, true, dropout_seed);
        let out = net.forward(&mut s, input)?;
        let loss = batch_loss(&mut s.tape, &net.config().head, &out.outputs, labels)?;
        let g = s.tape.backward(loss)?;
        let value = s.value(loss).item().unwrap().as_f64();
        (value, s.param_gradients(&g), s.batch_statistics().to_vec())
    };
    if !loss.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "training loss became {loss}"
        )));
    }
    let (ids, grads): (Vec<ParamId>, Vec<NdBuffer<S>>) = grads.into_iter().unzip();
    apply_adam(net, &ids, &grads, adam, lr)?;
    net.absorb_statistics(&stats);
    Ok(loss)
}

fn apply_adam<S: Real>(
    net: &mut Network<S>,
    ids: &[ParamId],
    grads: &[NdBuffer<S>],
    adam: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    // pull the trainable buffers out, update, and put them back
    let store = net.params_mut();
    let mut bufs: Vec<NdBuffer<S>> = ids
        .iter()
        .map(|&id| core::mem::replace(store.value_mut(id), NdBuffer::scalar(S::zero())))
        .collect();
    let result = {
        let mut refs: Vec<&mut NdBuffer<S>> = bufs.iter_mut().collect();
        adam_step(&mut refs, grads, adam, lr)
    };
    for (&id, b) in ids.iter().zip(bufs.drain(..)) {
        *store.value_mut(id) = b;
    }
    result
}

pub fn adam_for<S: Real>(net: &Network<S>) -> AdamState<S> {
    let p = net.params();
    AdamState::new(p.trainable().map(|id| p.value(id).shape()))
}

/// Trains `net` on dense segments of `train`, validating on `val` after
/// every epoch. Input statistics are fitted on `train` first.
pub fn train_run<S: Real>(
    mut net: Network<S>,
    train: &[LabeledRecording<S>],
    val: &[LabeledRecording<S>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    train_run_with(&mut net, train, val, cfg, |_| {})
}

/// [`train_run`] with a callback after every epoch.
pub fn train_run_with<S: Real>(
    net: &mut Network<S>,
    train: &[LabeledRecording<S>],
    val: &[LabeledRecording<S>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let cats = net.config().head.categories();
    if let Some(r) = train
        .iter()
        .chain(val)
        .find(|r| r.labels.categories() != cats)
    {
        return Err(Error::Incompatible(format!(
            "recording {} has {} categories, model {cats}",
            r.name,
            r.labels.categories()
        )));
    }
    let skipped = train
        .iter()
        .filter(|r| r.spec.frames() < SEGMENT_FRAMES)
        .map(|r| r.name.clone())
        .collect();
    net.set_input_stats(&FeatureStats::fit(train.iter().map(|r| &r.spec))?)?;

    let mut index = dense_index(train);
    if index.is_empty() {
        return Err(Error::Empty("training segments"));
    }
    let mut adam = adam_for(net);
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, Network<S>)> = None;
    let mut step = 0usize;
    'epochs: for epoch in 1..=cfg.epochs {
        index.sort_unstable();
        index.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(derive_seed(
            cfg.seed,
            SHUFFLE,
            epoch as u64,
        )));
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut stop = false;
        for chunk in index.chunks(cfg.batch_size) {
            let (input, labels) = assemble_batch(train, chunk)?;
            let seed = derive_seed(cfg.seed, DROPOUT, step as u64);
            let loss = train_step(net, &mut adam, &input, &labels, cfg.lr, seed)?;
            step_losses.push(loss);
            sum += loss;
            count += 1;
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                stop = true;
                break;
            }
        }
        let report = evaluate_network(net, val, cfg.threshold)?;
        let entry = EpochLog {
            epoch,
            step,
            train_loss: sum / count as f64,
            val_micro_f1: report.micro_f1(),
        };
        on_epoch(&entry);
        if best
            .as_ref()
            .is_none_or(|(f1, _, _)| entry.val_micro_f1 > *f1)
        {
            best = Some((entry.val_micro_f1, epoch, net.clone()));
        }
        log.push(entry);
        if stop {
            break 'epochs;
        }
    }
    let (_, best_epoch, best) = best.unwrap();
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        skipped,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uniform_predictions_cost_ln_k() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(NdBuffer::full(&[3, 4], 0.25));
        let q = tape.constant(NdBuffer::full(&[3, 4], 0.25));
        let loss = multitask_loss(&mut tape, &[p, q], &[vec![0, 1, 3], vec![2, 2, 2]]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_hits_cost_nothing() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(NdBuffer::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let loss = multitask_loss(&mut tape, &[p], &[vec![0, 1]]).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
        assert!(multitask_loss(&mut tape, &[p], &[vec![0, 2]]).is_err());
    }

    #[test]
    fn half_probabilities_cost_ln_2() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(NdBuffer::full(&[2, 3], 0.5));
        let loss = multilabel_loss(&mut tape, p, &[0, 1, 1, 0, 0, 1]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(multilabel_loss(&mut tape, p, &[0, 2, 1, 0, 0, 1]).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = NdBuffer::new(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = NdBuffer::new(&[3], vec![5.0, -0.3, 0.0]).unwrap();
        let mut st = AdamState::<f64>::new([p.shape()]);
        adam_step(&mut [&mut p], &[g], &mut st, 1e-3).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.data()[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p.data()[2], 1.0);
        assert_eq!(st.step(), 1);
        let bad = NdBuffer::zeros(&[2]);
        assert!(adam_step(&mut [&mut p], &[bad], &mut st, 1e-3).is_err());
    }

    #[test]
    fn seeds_differ_by_domain_and_index() {
        let a = derive_seed(42, SHUFFLE, 1);
        assert_eq!(a, derive_seed(42, SHUFFLE, 1));
        assert_ne!(a, derive_seed(42, DROPOUT, 1));
        assert_ne!(a, derive_seed(42, SHUFFLE, 2));
        assert_ne!(a, derive_seed(43, SHUFFLE, 1));
    }
}
