use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::params::{BnIds, ParamId, ParamStore};
use crate::numerics::{BatchStats, Gradients, NdBuffer, Real, Tape, Var};
use crate::{Error, Result};

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

/// Weight of the old value in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// batch statistics in batch norm, dropout active
    Train,
    /// running statistics, no dropout
    Infer,
}

/// One forward pass: a tape plus the parameter bindings and random stream
/// it uses.
pub struct Session<'a, S> {
    pub tape: Tape<S>,
    params: &'a ParamStore<S>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    grad: bool,
    dropout: f64,
    rng: Xoshiro256PlusPlus,
    bn_batches: Vec<(BnIds, BatchStats<S>)>,
}

impl<'a, S: Real> Session<'a, S> {
    /// `grad` records parameters as differentiable leaves; `dropout` only
    /// applies in [`Mode::Train`] and draws its masks from `seed`.
    pub fn new(params: &'a ParamStore<S>, mode: Mode, grad: bool, dropout: f64, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            grad,
            dropout,
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            bn_batches: Vec::new(),
        }
    }

    pub fn inference(params: &'a ParamStore<S>) -> Self {
        Self::new(params, Mode::Infer, false, 0.0, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'a ParamStore<S> {
        self.params
    }

    /// The tape variable holding parameter `id`, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = if self.grad {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &NdBuffer<S> {
        self.tape.value(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tape.shape(v)
    }

    /// Gradient of every trainable parameter, zeros for parameters the
    /// pass never touched.
    pub fn param_gradients(&self, grads: &Gradients<S>) -> Vec<(ParamId, NdBuffer<S>)> {
        self.params
            .trainable()
            .map(|id| {
                let value = self.params.value(id);
                let g = match self.bound[id.0] {
                    Some(v) => grads.wrt_or_zeros(v, value),
                    None => NdBuffer::zeros(value.shape()),
                };
                (id, g)
            })
            .collect()
    }

    /// Batch moments seen by every batch-norm layer during this pass.
    pub fn batch_statistics(&self) -> &[(BnIds, BatchStats<S>)] {
        &self.bn_batches
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.mode {
            Mode::Train => self.tape.dropout(x, self.dropout, &mut self.rng),
            Mode::Infer => Ok(x),
        }
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BnIds) -> Result<Var> {
        let (g, b) = (self.param(bn.gamma), self.param(bn.beta));
        let eps = S::of(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, g, b, eps)?;
                self.bn_batches.push((*bn, stats));
                Ok(y)
            }
            Mode::Infer => {
                let stats = bn.running(self.params);
                self.tape.batch_norm_infer(x, g, b, &stats, eps)
            }
        }
    }

    pub fn conv(&mut self, x: Var, p: &Affine) -> Result<Var> {
        let (k, b) = (self.param(p.weight), self.param(p.bias));
        self.tape.conv2d(x, k, b)
    }

    pub fn linear(&mut self, x: Var, p: &Affine) -> Result<Var> {
        let (w, b) = (self.param(p.weight), self.param(p.bias));
        self.tape.linear(x, w, b)
    }

    /// conv → batch norm → relu → dropout
    pub fn conv_unit(&mut self, x: Var, p: &ConvUnit) -> Result<Var> {
        let y = self.conv(x, &p.conv)?;
        let y = self.batch_norm(y, &p.bn)?;
        let y = self.tape.relu(y);
        self.dropout(y)
    }
}

/// Weight and bias of a convolution (`(KH, KW, Cin, Cout)`) or dense layer
/// (`(D, K)`).
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvUnit {
    pub conv: Affine,
    pub bn: BnIds,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlockParams {
    pub first: ConvUnit,
    pub second: ConvUnit,
}

/// 1×1 convolution from the two channel-pooled maps to one mask channel.
#[derive(Clone, Copy, Debug)]
pub struct TfAttentionParams {
    pub conv: Affine,
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionParams {
    pub squeeze: Affine,
    pub excite: Affine,
}

#[derive(Clone, Copy, Debug)]
pub struct AttConvParams {
    pub tf: TfAttentionParams,
    pub channel: ChannelAttentionParams,
    /// 1×1 reduction from `2C'` to `C'` channels
    pub reduce: Affine,
    pub conv: ConvUnit,
}

#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub forward: GruParams,
    pub backward: GruParams,
    pub fc1: Affine,
    pub fc2: Affine,
    pub out: Affine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softmax,
    Sigmoid,
}

/// Two conv units then a 1×2 frequency pool. Returns `(M1, M2, pooled)`.
pub fn conv_block_forward<S: Real>(
    s: &mut Session<'_, S>,
    x: Var,
    p: &ConvBlockParams,
) -> Result<(Var, Var, Var)> {
    let f = s.shape(x)[s.shape(x).len() - 2];
    if !f.is_multiple_of(2) {
        return Err(Error::shape(
            "conv_block_forward",
            format!("frequency extent {f} is odd"),
        ));
    }
    let m1 = s.conv_unit(x, &p.first)?;
    let m2 = s.conv_unit(m1, &p.second)?;
    let pooled = s.tape.pool_freq_max(m2)?;
    Ok((m1, m2, pooled))
}

/// `σ(conv1×1([mean_c(M1), max_c(M1)]))`, shape `(…, T', F', 1)`.
pub fn tf_attention<S: Real>(
    s: &mut Session<'_, S>,
    m1: Var,
    p: &TfAttentionParams,
) -> Result<Var> {
    let avg = s.tape.channel_mean(m1)?;
    let max = s.tape.channel_max(m1)?;
    let pooled = s.tape.concat(avg, max)?;
    let logits = s.conv(pooled, &p.conv)?;
    Ok(s.tape.sigmoid(logits))
}

/// Squeeze-and-excite on the time-frequency average, shape `(…, 1, 1, C')`.
pub fn channel_attention<S: Real>(
    s: &mut Session<'_, S>,
    m1: Var,
    p: &ChannelAttentionParams,
) -> Result<Var> {
    let c = *s.shape(m1).last().unwrap();
    if !c.is_multiple_of(2) {
        return Err(Error::shape(
            "channel_attention",
            format!("channel count {c} is odd"),
        ));
    }
    let q = s.tape.global_avg_pool(m1)?;
    let squeezed = s.conv(q, &p.squeeze)?;
    let squeezed = s.tape.relu(squeezed);
    let logits = s.conv(squeezed, &p.excite)?;
    Ok(s.tape.sigmoid(logits))
}

/// `M* = (m_tf ⊗ M2) ⊕ (m_c ⊗ M2)`, `2C'` channels.
pub fn attend<S: Real>(s: &mut Session<'_, S>, m_tf: Var, m_c: Var, m2: Var) -> Result<Var> {
    let a = s.tape.mul(m_tf, m2)?;
    let b = s.tape.mul(m_c, m2)?;
    s.tape.concat(a, b)
}

/// The fusion half of an Att-Conv-Block: attend, reduce to `C'`, append the
/// previous block's output, then conv unit and frequency pool.
pub fn fuse_task_features<S: Real>(
    s: &mut Session<'_, S>,
    m_tf: Var,
    m_c: Var,
    m2: Var,
    prev: Option<Var>,
    p: &AttConvParams,
) -> Result<Var> {
    let fused = attend(s, m_tf, m_c, m2)?;
    let mut x = s.conv(fused, &p.reduce)?;
    if let Some(prev) = prev {
        let (a, b) = (s.shape(x), s.shape(prev));
        if a[..a.len() - 1] != b[..b.len() - 1] {
            return Err(Error::shape(
                "fuse_task_features",
                format!("previous block output {b:?} does not match {a:?}"),
            ));
        }
        x = s.tape.concat(x, prev)?;
    }
    let y = s.conv_unit(x, &p.conv)?;
    s.tape.pool_freq_max(y)
}

/// BiGRU, two relu FC layers and the output layer over per-frame flattened
/// `(B, T, F, C)` maps. Returns `(B, T, K)` probabilities.
pub fn task_head<S: Real>(
    s: &mut Session<'_, S>,
    x: Var,
    p: &HeadParams,
    act: Activation,
) -> Result<Var> {
    let &[b, t, f, c] = s.shape(x) else {
        return Err(Error::shape(
            "task_head",
            format!("expected (B, T, F, C), got {:?}", s.shape(x)),
        ));
    };
    let k = s.params().value(p.out.bias).len();
    if act == Activation::Softmax && k < 2 {
        return Err(Error::InvalidArgument(format!(
            "a softmax head needs at least 2 classes, got {k}"
        )));
    }
    let x = s.tape.reshape(x, &[b, t, f * c])?;
    let fwd = gru(s, x, &p.forward, false)?;
    let bwd = gru(s, x, &p.backward, true)?;
    let h = s.tape.concat(fwd, bwd)?;
    let mut h = s.dropout(h)?;
    for fc in [&p.fc1, &p.fc2] {
        let y = s.linear(h, fc)?;
        let y = s.tape.relu(y);
        h = s.dropout(y)?;
    }
    let logits = s.linear(h, &p.out)?;
    match act {
        Activation::Softmax => s.tape.softmax(logits),
        Activation::Sigmoid => Ok(s.tape.sigmoid(logits)),
    }
}

fn gru<S: Real>(s: &mut Session<'_, S>, x: Var, p: &GruParams, reverse: bool) -> Result<Var> {
    let wi = s.param(p.w_input);
    let wh = s.param(p.w_hidden);
    let bi = s.param(p.b_input);
    let bh = s.param(p.b_hidden);
    s.tape.gru(x, wi, wh, bi, bh, reverse)
}
