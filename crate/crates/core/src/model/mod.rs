//! The backbone + attention multi-task network and the multi-label CRNN
//! baseline.
//!
//! The backbone is a stack of conv blocks (two conv units and a 1×2
//! frequency pool each). Every task subnet owns one Att-Conv-Block per
//! backbone level: TF and channel masks computed from the block's first
//! conv output gate its second conv output, the gated maps are reduced,
//! joined with the subnet's previous level and refined by a conv unit. A
//! BiGRU + FC head on the last level emits per-frame class distributions.
//! The baseline puts the same kind of head, with sigmoid outputs, directly
//! on the backbone.

mod layers;
mod params;

pub use layers::{
    attend, channel_attention, conv_block_forward, fuse_task_features, task_head, tf_attention,
    Activation, Affine, AttConvParams, ChannelAttentionParams, ConvBlockParams, ConvUnit,
    GruParams, HeadParams, Mode, Session, TfAttentionParams, BN_EPS, BN_MOMENTUM,
};
pub use params::{BnIds, ParamEntry, ParamId, ParamKind, ParamStore};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::features::FeatureStats;
use crate::labelspace::{decode_predictions, FrameLabelMatrix, TaskDecomposition, TaskTargets};
use crate::numerics::{BatchStats, NdBuffer, Real, RunningStats, Var};
use crate::{Error, Result};
use params::Builder;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// one softmax subnet per group
    MultiTask(TaskDecomposition),
    /// one sigmoid output per category
    Baseline { categories: usize },
}

impl HeadKind {
    pub fn categories(&self) -> usize {
        match self {
            HeadKind::MultiTask(d) => d.categories(),
            HeadKind::Baseline { categories } => *categories,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub n_mels: usize,
    /// output channels of each backbone block
    pub filters: Vec<usize>,
    pub gru_hidden: usize,
    pub fc_units: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// The full-size network: filters 64-64-128-128-256, BiGRU 256, FC 512.
    pub fn full(head: HeadKind) -> Self {
        Self {
            head,
            n_mels: 64,
            filters: vec![64, 64, 128, 128, 256],
            gru_hidden: 256,
            fc_units: 512,
            dropout: 0.25,
        }
    }

    /// Filters 4-4-8-8-8, BiGRU 8, FC 8; small enough for exhaustive
    /// gradient checks.
    pub fn tiny(head: HeadKind) -> Self {
        Self {
            filters: vec![4, 4, 8, 8, 8],
            gru_hidden: 8,
            fc_units: 8,
            ..Self::full(head)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.filters.len();
        if levels == 0 || levels >= usize::BITS as usize {
            return Err(Error::InvalidArgument(format!("{levels} backbone blocks")));
        }
        if self.n_mels == 0 || !self.n_mels.is_multiple_of(1 << levels) {
            return Err(Error::InvalidArgument(format!(
                "{} mel bands cannot be halved {levels} times",
                self.n_mels
            )));
        }
        if let Some(&c) = self.filters.iter().find(|&&c| c < 2 || c % 2 != 0) {
            return Err(Error::InvalidArgument(format!(
                "filter count {c} must be even and positive"
            )));
        }
        if self.gru_hidden == 0 || self.fc_units == 0 {
            return Err(Error::InvalidArgument(
                "hidden sizes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.head.categories() == 0 {
            return Err(Error::Empty("category set"));
        }
        Ok(())
    }

    /// Output width of each head.
    pub fn class_counts(&self) -> Vec<usize> {
        match &self.head {
            HeadKind::MultiTask(d) => d.groups().iter().map(|g| 1usize << g.len()).collect(),
            HeadKind::Baseline { categories } => vec![*categories],
        }
    }

    fn final_width(&self) -> usize {
        (self.n_mels >> self.filters.len()) * self.filters[self.filters.len() - 1]
    }
}

#[derive(Clone, Debug)]
pub struct TaskSubnet {
    pub levels: Vec<AttConvParams>,
    pub head: HeadParams,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub input_mean: ParamId,
    pub input_std: ParamId,
    pub backbone: Vec<ConvBlockParams>,
    pub tasks: Vec<TaskSubnet>,
    pub baseline: Option<HeadParams>,
}

/// Tape variables produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(B, T, K_i)` per task, or a single `(B, T, Y)` for the baseline
    pub outputs: Vec<Var>,
    /// pooled output of every backbone block
    pub backbone: Vec<Var>,
    /// `(m_tf, m_c)` per task, per level
    pub masks: Vec<Vec<(Var, Var)>>,
}

#[derive(Clone, Debug)]
pub struct Network<S> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<S>,
}

impl<S: Real> Network<S> {
    /// Fresh parameters: fan-in scaled uniform conv and dense weights,
    /// `±1/sqrt(H)` GRU weights, zero biases, unit batch-norm scales.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let layout = build(&config, &mut b);
        Ok(Self {
            config,
            layout,
            params: b.store,
        })
    }

    /// Network with the given parameters, which must match the layout of
    /// `config` exactly.
    pub fn from_params(config: ModelConfig, params: &ParamStore<S>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.params.load_from(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn session(&self, mode: Mode, grad: bool, seed: u64) -> Session<'_, S> {
        Session::new(&self.params, mode, grad, self.config.dropout, seed)
    }

    pub fn set_input_stats(&mut self, stats: &FeatureStats<S>) -> Result<()> {
        if stats.mean.len() != self.config.n_mels || stats.std.len() != self.config.n_mels {
            return Err(Error::shape(
                "set_input_stats",
                "statistics length differs from mel band count",
            ));
        }
        self.params
            .value_mut(self.layout.input_mean)
            .data_mut()
            .copy_from_slice(&stats.mean);
        self.params
            .value_mut(self.layout.input_std)
            .data_mut()
            .copy_from_slice(&stats.std);
        Ok(())
    }

    pub fn input_stats(&self) -> FeatureStats<S> {
        FeatureStats {
            mean: self.params.value(self.layout.input_mean).data().to_vec(),
            std: self.params.value(self.layout.input_std).data().to_vec(),
        }
    }

    /// Folds the batch moments of a training pass into the running
    /// statistics.
    pub fn absorb_statistics(&mut self, batches: &[(BnIds, BatchStats<S>)]) {
        let momentum = S::of(BN_MOMENTUM);
        for (ids, stats) in batches {
            let mut running: RunningStats<S> = ids.running(&self.params);
            running.update(stats, momentum);
            ids.store_running(&mut self.params, &running);
        }
    }

    /// Runs the whole network on raw log-mel input of shape `(T, F)` or
    /// `(B, T, F)`; the stored input statistics are applied first.
    pub fn forward(&self, s: &mut Session<'_, S>, input: &NdBuffer<S>) -> Result<ForwardOutput> {
        let (b, t, f) = match *input.shape() {
            [t, f] => (1, t, f),
            [b, t, f] => (b, t, f),
            _ => {
                return Err(Error::shape(
                    "forward",
                    format!("expected (B, T, F), got {:?}", input.shape()),
                ))
            }
        };
        if f != self.config.n_mels {
            return Err(Error::shape(
                "forward",
                format!("{f} bands, model expects {}", self.config.n_mels),
            ));
        }
        let x = self.input_stats().apply(input)?.reshape(&[b, t, f, 1])?;
        let mut x = s.tape.constant(x);

        let mut levels = Vec::with_capacity(self.layout.backbone.len());
        let mut backbone = Vec::with_capacity(self.layout.backbone.len());
        for block in &self.layout.backbone {
            let (m1, m2, pooled) = conv_block_forward(s, x, block)?;
            levels.push((m1, m2));
            backbone.push(pooled);
            x = pooled;
        }

        let mut outputs = Vec::new();
        let mut masks = Vec::new();
        if let Some(head) = &self.layout.baseline {
            outputs.push(task_head(s, x, head, Activation::Sigmoid)?);
        }
        for task in &self.layout.tasks {
            let mut prev = None;
            let mut task_masks = Vec::with_capacity(levels.len());
            for (&(m1, m2), p) in levels.iter().zip(&task.levels) {
                let m_tf = tf_attention(s, m1, &p.tf)?;
                let m_c = channel_attention(s, m1, &p.channel)?;
                prev = Some(fuse_task_features(s, m_tf, m_c, m2, prev, p)?);
                task_masks.push((m_tf, m_c));
            }
            outputs.push(task_head(
                s,
                prev.unwrap(),
                &task.head,
                Activation::Softmax,
            )?);
            masks.push(task_masks);
        }
        Ok(ForwardOutput {
            outputs,
            backbone,
            masks,
        })
    }

    /// Inference-mode output buffers for a batch.
    pub fn infer(&self, input: &NdBuffer<S>) -> Result<Vec<NdBuffer<S>>> {
        let mut s = Session::inference(&self.params);
        let out = self.forward(&mut s, input)?;
        Ok(out.outputs.iter().map(|&v| s.value(v).clone()).collect())
    }

    /// Binary activity of `input` in frame order (batch-major).
    pub fn detect(&self, input: &NdBuffer<S>, threshold: f64) -> Result<FrameLabelMatrix> {
        predict_events(&self.infer(input)?, &self.config.head, threshold)
    }

    /// TF mask `(T', F')` and channel mask `(C')` of a task (0-based) at a
    /// level (0-based) for a single `(T, F)` segment.
    pub fn attention_masks(
        &self,
        segment: &NdBuffer<S>,
        task: usize,
        level: usize,
    ) -> Result<(NdBuffer<S>, NdBuffer<S>)> {
        if segment.rank() != 2 {
            return Err(Error::shape(
                "attention_masks",
                "expected a single (T, F) segment",
            ));
        }
        if task >= self.layout.tasks.len() {
            return Err(Error::OutOfRange {
                what: "task",
                index: task,
                limit: self.layout.tasks.len(),
            });
        }
        if level >= self.layout.backbone.len() {
            return Err(Error::OutOfRange {
                what: "level",
                index: level,
                limit: self.layout.backbone.len(),
            });
        }
        let mut s = Session::inference(&self.params);
        let out = self.forward(&mut s, segment)?;
        let (m_tf, m_c) = out.masks[task][level];
        let tf = s.value(m_tf).clone();
        let (t, f) = (tf.shape()[1], tf.shape()[2]);
        let c = s.value(m_c).len();
        Ok((tf.reshape(&[t, f])?, s.value(m_c).clone().reshape(&[c])?))
    }
}

/// Decision rule: per-frame argmax of every task decoded through the
/// label codec, or sigmoid outputs above `threshold` for the baseline.
/// Rows of every output (any leading shape) are concatenated in order.
pub fn predict_events<S: Real>(
    outputs: &[NdBuffer<S>],
    head: &HeadKind,
    threshold: f64,
) -> Result<FrameLabelMatrix> {
    match head {
        HeadKind::Baseline { categories } => {
            let [out] = outputs else {
                return Err(Error::shape(
                    "predict_events",
                    "the baseline has exactly one output",
                ));
            };
            if out.shape().last() != Some(categories) {
                return Err(Error::shape(
                    "predict_events",
                    format!("output width differs from {categories}"),
                ));
            }
            let th = S::of(threshold);
            let data = out.data().iter().map(|&p| u8::from(p > th)).collect();
            FrameLabelMatrix::new(out.len() / categories, *categories, data)
        }
        HeadKind::MultiTask(decomp) => {
            if outputs.len() != decomp.tasks() {
                return Err(Error::shape(
                    "predict_events",
                    format!("{} outputs for {} tasks", outputs.len(), decomp.tasks()),
                ));
            }
            let frames = outputs[0].len() / (1usize << decomp.groups()[0].len());
            let n = decomp.tasks();
            let mut idx = vec![0u32; frames * n];
            for (task, (out, group)) in outputs.iter().zip(decomp.groups()).enumerate() {
                let k = 1usize << group.len();
                if out.shape().last() != Some(&k) || out.len() / k != frames {
                    return Err(Error::shape(
                        "predict_events",
                        format!(
                            "task {task} output {:?} does not hold {frames} rows of {k}",
                            out.shape()
                        ),
                    ));
                }
                for (f, row) in out.data().chunks_exact(k).enumerate() {
                    idx[f * n + task] = argmax(row) as u32;
                }
            }
            decode_predictions(&TaskTargets::new(frames, n, idx)?, decomp)
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn build<S: Real, R: rand::Rng>(cfg: &ModelConfig, b: &mut Builder<'_, S, R>) -> Layout {
    let input_mean = b.state("input_norm.mean".into(), NdBuffer::zeros(&[cfg.n_mels]));
    let input_std = b.state(
        "input_norm.std".into(),
        NdBuffer::full(&[cfg.n_mels], S::one()),
    );

    let conv = |b: &mut Builder<'_, S, R>, name: &str, k: usize, cin: usize, cout: usize| Affine {
        weight: b.fan_in(format!("{name}.kernel"), &[k, k, cin, cout], k * k * cin),
        bias: b.zeros(format!("{name}.bias"), &[cout]),
    };
    let unit = |b: &mut Builder<'_, S, R>, name: &str, cin: usize, cout: usize| ConvUnit {
        conv: conv(b, &format!("{name}.conv"), 3, cin, cout),
        bn: b.batch_norm(&format!("{name}.bn"), cout),
    };
    let dense = |b: &mut Builder<'_, S, R>, name: &str, d: usize, k: usize| Affine {
        weight: b.fan_in(format!("{name}.weight"), &[d, k], d),
        bias: b.zeros(format!("{name}.bias"), &[k]),
    };
    let head = |b: &mut Builder<'_, S, R>, name: &str, k: usize| {
        let (d, h) = (cfg.final_width(), cfg.gru_hidden);
        let bound = 1.0 / num_traits::Float::sqrt(h as f64);
        let mut gru = |dir: &str| GruParams {
            w_input: b.scaled(format!("{name}.gru_{dir}.w_input"), &[d, 3 * h], bound),
            w_hidden: b.scaled(format!("{name}.gru_{dir}.w_hidden"), &[h, 3 * h], bound),
            b_input: b.zeros(format!("{name}.gru_{dir}.b_input"), &[3 * h]),
            b_hidden: b.zeros(format!("{name}.gru_{dir}.b_hidden"), &[3 * h]),
        };
        let (forward, backward) = (gru("fwd"), gru("bwd"));
        HeadParams {
            forward,
            backward,
            fc1: dense(b, &format!("{name}.fc1"), 2 * h, cfg.fc_units),
            fc2: dense(b, &format!("{name}.fc2"), cfg.fc_units, cfg.fc_units),
            out: dense(b, &format!("{name}.out"), cfg.fc_units, k),
        }
    };

    let mut backbone = Vec::new();
    let mut cin = 1;
    for (l, &c) in cfg.filters.iter().enumerate() {
        backbone.push(ConvBlockParams {
            first: unit(b, &format!("backbone.{l}.first"), cin, c),
            second: unit(b, &format!("backbone.{l}.second"), c, c),
        });
        cin = c;
    }

    let mut tasks = Vec::new();
    let mut baseline = None;
    match &cfg.head {
        HeadKind::Baseline { categories } => baseline = Some(head(b, "baseline", *categories)),
        HeadKind::MultiTask(_) => {
            for (t, k) in cfg.class_counts().into_iter().enumerate() {
                let mut levels = Vec::new();
                let mut prev = 0;
                for (l, &c) in cfg.filters.iter().enumerate() {
                    let name = format!("task.{t}.{l}");
                    levels.push(AttConvParams {
                        tf: TfAttentionParams {
                            conv: conv(b, &format!("{name}.tf"), 1, 2, 1),
                        },
                        channel: ChannelAttentionParams {
                            squeeze: conv(b, &format!("{name}.squeeze"), 1, c, c / 2),
                            excite: conv(b, &format!("{name}.excite"), 1, c / 2, c),
                        },
                        reduce: conv(b, &format!("{name}.reduce"), 1, 2 * c, c),
                        conv: unit(b, &name, c + prev, c),
                    });
                    prev = c;
                }
                tasks.push(TaskSubnet {
                    levels,
                    head: head(b, &format!("task.{t}"), k),
                });
            }
        }
    }
    Layout {
        input_mean,
        input_std,
        backbone,
        tasks,
        baseline,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::encode_targets;

    fn tiny(tasks: usize) -> ModelConfig {
        ModelConfig::tiny(HeadKind::MultiTask(
            TaskDecomposition::equal_split(16, tasks).unwrap(),
        ))
    }

    #[test]
    fn config_validation() {
        assert!(tiny(2).validate().is_ok());
        let mut c = tiny(2);
        c.n_mels = 48;
        assert!(c.validate().is_err());
        let mut c = tiny(2);
        c.filters[2] = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_names_follow_the_layout() {
        let net = Network::<f64>::new(tiny(2), 1).unwrap();
        let p = net.params();
        for name in [
            "backbone.0.first.conv.kernel",
            "backbone.4.second.bn.running_var",
            "task.1.0.tf.kernel",
            "task.0.3.squeeze.kernel",
            "task.1.4.reduce.bias",
            "task.0.gru_bwd.w_hidden",
            "task.1.out.weight",
        ] {
            assert!(p.id(name).is_some(), "{name}");
        }
        // first subnet conv has no predecessor, the third joins 8 + 4 channels
        assert_eq!(
            p.value(p.id("task.0.0.conv.kernel").unwrap()).shape(),
            &[3, 3, 4, 4]
        );
        assert_eq!(
            p.value(p.id("task.0.2.conv.kernel").unwrap()).shape(),
            &[3, 3, 12, 8]
        );
        assert_eq!(
            p.value(p.id("task.0.out.weight").unwrap()).shape(),
            &[8, 256]
        );
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::<f64>::new(tiny(4), 9).unwrap();
        let b = Network::<f64>::new(tiny(4), 9).unwrap();
        let c = Network::<f64>::new(tiny(4), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn forced_outputs_decode_to_known_labels() {
        let decomp = TaskDecomposition::equal_split(16, 4).unwrap();
        let mut labels = FrameLabelMatrix::zeros(6, 16);
        for (f, c) in [(0, 0), (0, 5), (1, 15), (3, 3), (3, 7), (3, 8), (5, 12)] {
            labels.set(f, c, true);
        }
        let targets = encode_targets(&labels, &decomp).unwrap();
        let outputs: Vec<NdBuffer<f64>> = (0..4)
            .map(|t| {
                let mut b = NdBuffer::full(&[6, 16], 0.01);
                for f in 0..6 {
                    b.data_mut()[f * 16 + targets.get(f, t) as usize] = 0.85;
                }
                b
            })
            .collect();
        let head = HeadKind::MultiTask(decomp);
        assert_eq!(predict_events(&outputs, &head, 0.5).unwrap(), labels);
    }

    #[test]
    fn class_zero_everywhere_is_silence() {
        let head = HeadKind::MultiTask(TaskDecomposition::equal_split(4, 2).unwrap());
        let one_hot = NdBuffer::from_fn(&[3, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let p = predict_events::<f64>(&[one_hot.clone(), one_hot], &head, 0.5).unwrap();
        assert_eq!(p, FrameLabelMatrix::zeros(3, 4));
    }

    #[test]
    fn baseline_threshold() {
        let head = HeadKind::Baseline { categories: 2 };
        let out = NdBuffer::new(&[2, 2], vec![0.6, 0.4, 0.5, 0.51]).unwrap();
        let p = predict_events::<f64>(&[out], &head, 0.5).unwrap();
        assert_eq!(p.data(), &[1, 0, 0, 1]);
    }
}
