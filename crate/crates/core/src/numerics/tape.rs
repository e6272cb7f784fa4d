use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels::{
    self, BatchStats, ConvGeom, GruCache, GruGeom, GruGrads, GruWeights, RunningStats,
};
use super::{btfc, NdBuffer, Real};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Constant,
    Leaf,
    Conv2d {
        x: usize,
        kernel: usize,
        bias: usize,
        geom: ConvGeom,
    },
    PoolFreqMax {
        x: usize,
        upper: Vec<bool>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        batch: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    Square(usize),
    Dropout {
        x: usize,
        keep: Vec<bool>,
        scale: S,
    },
    Mul(usize, usize),
    Add(usize, usize),
    Scale(usize, S),
    Concat {
        a: usize,
        b: usize,
    },
    ChannelMean(usize),
    ChannelMax {
        x: usize,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(usize),
    Reshape(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Gru {
        x: usize,
        w_input: usize,
        w_hidden: usize,
        b_input: usize,
        b_hidden: usize,
        geom: GruGeom,
        cache: GruCache<S>,
    },
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        p: usize,
        targets: Vec<u32>,
    },
    BinaryCrossEntropy {
        p: usize,
        targets: Vec<u8>,
    },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: NdBuffer<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Linear record of executed operations.
///
/// Ops append nodes in execution order; [`Tape::backward`] walks them in
/// exactly the reverse order. The tape is never mutated by `backward`, so
/// replaying it yields identical gradients.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Probabilities below this are clamped before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Gradients of one backward pass, one slot per tape node.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<NdBuffer<S>>>,
}

impl<S: Real> Gradients<S> {
    /// `None` when `var` does not influence the loss.
    pub fn wrt(&self, var: Var) -> Option<&NdBuffer<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like `value` when unreachable.
    pub fn wrt_or_zeros(&self, var: Var, value: &NdBuffer<S>) -> NdBuffer<S> {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| NdBuffer::zeros(value.shape()))
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank of {a:?} and {b:?} differ")));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&x, &y))| match (x, y) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(
                op,
                format!("axis {axis}: {x} vs {y} in {a:?} and {b:?}"),
            )),
        })
        .collect()
}

/// Visits `(out_index, a_index, b_index)` for a broadcast binary op.
fn broadcast_for_each(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sa, sb) = (strides(a), strides(b));
    let inner = out[rank - 1];
    let (ka, kb) = (sa[rank - 1], sb[rank - 1]);
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    for row in 0..n / inner {
        let o = row * inner;
        for k in 0..inner {
            f(o + k, ia + k * ka, ib + k * kb);
        }
        for axis in (0..rank - 1).rev() {
            idx[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            ia -= sa[axis] * out[axis];
            ib -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdBuffer<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: NdBuffer<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a differentiable input (for example a parameter).
    pub fn leaf(&mut self, value: NdBuffer<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: NdBuffer<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].needs_grad)
    }

    fn data(&self, v: usize) -> &[S] {
        self.nodes[v].value.data()
    }

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let value = {
            let src = &self.nodes[x.0].value;
            NdBuffer::new(src.shape(), src.data().iter().map(|&v| f(v)).collect()).unwrap()
        };
        let ng = self.needs(&[x.0]);
        self.push(value, op, ng)
    }

    /// SAME-padded, unit-stride convolution. `x` is `(T, F, Cin)` or
    /// `(B, T, F, Cin)`, `kernel` is `(KH, KW, Cin, Cout)` with odd `KH`,
    /// `KW`, and `bias` is `(Cout)`. Output keeps the input's rank.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(x).to_vec();
        let [b, t, f, cin] = btfc(OP, &xs)?;
        let ks = self.shape(kernel);
        let &[kh, kw, kcin, cout] = ks else {
            return Err(Error::shape(
                OP,
                format!("kernel must be (KH, KW, Cin, Cout), got {ks:?}"),
            ));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                OP,
                format!("kernel extents must be odd, got {kh}x{kw}"),
            ));
        }
        if kcin != cin {
            return Err(Error::shape(
                OP,
                format!("input channels: input has {cin}, kernel expects {kcin}"),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape(
                OP,
                format!("bias must be ({cout}), got {:?}", self.shape(bias)),
            ));
        }
        let geom = ConvGeom {
            b,
            t,
            f,
            cin,
            cout,
            kh,
            kw,
        };
        let out =
            kernels::conv2d_forward(geom, self.data(x.0), self.data(kernel.0), self.data(bias.0));
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let ng = self.needs(&[x.0, kernel.0, bias.0]);
        Ok(self.push(
            NdBuffer::new(&shape, out)?,
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
                geom,
            },
            ng,
        ))
    }

    /// Max over adjacent frequency pairs: `(…, T, F, C)` → `(…, T, F/2, C)`.
    /// Ties go to the lower frequency index.
    pub fn pool_freq_max(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "pool_freq_max";
        let xs = self.shape(x).to_vec();
        let [b, t, f, c] = btfc(OP, &xs)?;
        if f % 2 != 0 {
            return Err(Error::shape(OP, format!("frequency extent {f} is odd")));
        }
        let src = self.data(x.0);
        let half = f / 2;
        let mut out = Vec::with_capacity(b * t * half * c);
        let mut upper = Vec::with_capacity(b * t * half * c);
        for bt in 0..b * t {
            for k in 0..half {
                let lo = ((bt * f) + 2 * k) * c;
                let hi = lo + c;
                for ch in 0..c {
                    let (l, h) = (src[lo + ch], src[hi + ch]);
                    let take_hi = h > l;
                    out.push(if take_hi { h } else { l });
                    upper.push(take_hi);
                }
            }
        }
        let mut shape = xs;
        let n = shape.len();
        shape[n - 2] = half;
        let ng = self.needs(&[x.0]);
        Ok(self.push(
            NdBuffer::new(&shape, out)?,
            Op::PoolFreqMax { x: x.0, upper },
            ng,
        ))
    }

    /// Batch normalisation with statistics of the current batch, computed
    /// per channel (last axis) over all other axes. Returns the batch
    /// moments so the caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> Result<(Var, BatchStats<S>)> {
        let c = self.check_bn(x, gamma, beta)?;
        let stats = kernels::channel_moments(self.data(x.0), c);
        let v = self.bn_apply(x, gamma, beta, &stats.mean, &stats.var, eps, true);
        Ok((v, stats))
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<S>,
        eps: S,
    ) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if stats.updates == 0 {
            return Err(Error::MissingStatistics(format!("{c}-channel layer")));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                "running statistics length differs from channel count",
            ));
        }
        Ok(self.bn_apply(x, gamma, beta, &stats.mean, &stats.var, eps, false))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("batch_norm", "rank-0 input"))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} must be ({c}), got {:?}", self.shape(p)),
                ));
            }
        }
        Ok(c)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        var: &[S],
        eps: S,
        batch: bool,
    ) -> Var {
        let c = mean.len();
        let inv_std: Vec<S> = var.iter().map(|v| S::one() / (*v + eps).sqrt()).collect();
        let src = self.data(x.0);
        let (g, bt) = (self.data(gamma.0), self.data(beta.0));
        let ng = self.needs(&[x.0, gamma.0, beta.0]);
        // the normalised input is kept only for the backward pass
        let mut xhat = Vec::with_capacity(if ng { src.len() } else { 0 });
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(c) {
            for ch in 0..c {
                let xh = (row[ch] - mean[ch]) * inv_std[ch];
                if ng {
                    xhat.push(xh);
                }
                out.push(g[ch] * xh + bt[ch]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            NdBuffer::new(&shape, out).unwrap(),
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.0), |v| v.max(S::zero()))
    }

    /// Logistic function; outputs stay strictly inside `(0, 1)`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x.0), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x.0), |v| v.tanh())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let k = *src
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks_exact(k) {
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let start = out.len();
            let mut total = S::zero();
            for &v in row {
                let e = (v - m).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= total;
            }
        }
        let shape = src.shape().to_vec();
        let ng = self.needs(&[x.0]);
        Ok(self.push(NdBuffer::new(&shape, out)?, Op::Softmax(x.0), ng))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 − rate)`. A zero
    /// rate records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let scale = S::of(1.0 / (1.0 - rate));
        let src = &self.nodes[x.0].value;
        // drop when a uniform u32 falls below rate · 2^32
        let cut = (rate * 4_294_967_296.0) as u64;
        let ng = self.needs(&[x.0]);
        let mut keep = Vec::with_capacity(if ng { src.len() } else { 0 });
        let mut out = Vec::with_capacity(src.len());
        let mut draws = [0u32; 256];
        for chunk in src.data().chunks(draws.len()) {
            let draws = &mut draws[..chunk.len()];
            rng.fill(draws);
            for (a, &u) in chunk.iter().zip(draws.iter()) {
                let kept = u64::from(u) >= cut;
                if ng {
                    keep.push(kept);
                }
                out.push(if kept { *a * scale } else { S::zero() });
            }
        }
        let shape = src.shape().to_vec();
        Ok(self.push(
            NdBuffer::new(&shape, out)?,
            Op::Dropout {
                x: x.0,
                keep,
                scale,
            },
            ng,
        ))
    }

    /// Elementwise product with broadcasting over unit extents (equal ranks).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise sum with broadcasting over unit extents (equal ranks).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(name, &sa, &sb)?;
        let (da, db) = (self.data(a.0), self.data(b.0));
        let out = if sa == sb {
            da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect()
        } else {
            let mut out = vec![S::zero(); shape.iter().product()];
            broadcast_for_each(&shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
            out
        };
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(NdBuffer::new(&shape, out)?, op, ng))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        self.unary(x, Op::Scale(x.0, factor), |v| v * factor)
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(
                "concat",
                format!("leading extents differ: {sa:?} vs {sb:?}"),
            ));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut out = Vec::with_capacity(self.data(a.0).len() + self.data(b.0).len());
        for (ra, rb) in self
            .data(a.0)
            .chunks_exact(ca)
            .zip(self.data(b.0).chunks_exact(cb))
        {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(
            NdBuffer::new(&shape, out)?,
            Op::Concat { a: a.0, b: b.0 },
            ng,
        ))
    }

    /// Mean over the last axis, kept as an extent-1 axis.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let c = *src
            .shape()
            .last()
            .ok_or_else(|| Error::shape("channel_mean", "rank-0 input"))?;
        let n = S::of(c as f64);
        let out = src
            .data()
            .chunks_exact(c)
            .map(|r| r.iter().copied().sum::<S>() / n)
            .collect();
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let ng = self.needs(&[x.0]);
        Ok(self.push(NdBuffer::new(&shape, out)?, Op::ChannelMean(x.0), ng))
    }

    /// Max over the last axis, kept as an extent-1 axis. Ties go to the
    /// lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let c = *src
            .shape()
            .last()
            .ok_or_else(|| Error::shape("channel_max", "rank-0 input"))?;
        let mut out = Vec::with_capacity(src.len() / c);
        let mut argmax = Vec::with_capacity(src.len() / c);
        for r in src.data().chunks_exact(c) {
            let mut best = 0usize;
            for (i, v) in r.iter().enumerate().skip(1) {
                if *v > r[best] {
                    best = i;
                }
            }
            out.push(r[best]);
            argmax.push(best as u32);
        }
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let ng = self.needs(&[x.0]);
        Ok(self.push(
            NdBuffer::new(&shape, out)?,
            Op::ChannelMax { x: x.0, argmax },
            ng,
        ))
    }

    /// Mean over time and frequency: `(…, T, F, C)` → `(…, 1, 1, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [b, t, f, c] = btfc("global_avg_pool", &xs)?;
        let n = S::of((t * f) as f64);
        let src = self.data(x.0);
        let mut out = vec![S::zero(); b * c];
        for bi in 0..b {
            let acc = &mut out[bi * c..(bi + 1) * c];
            for row in src[bi * t * f * c..(bi + 1) * t * f * c].chunks_exact(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += *v;
                }
            }
            for a in acc.iter_mut() {
                *a /= n;
            }
        }
        let mut shape = xs;
        let r = shape.len();
        shape[r - 3] = 1;
        shape[r - 2] = 1;
        let ng = self.needs(&[x.0]);
        Ok(self.push(NdBuffer::new(&shape, out)?, Op::GlobalAvgPool(x.0), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let ng = self.needs(&[x.0]);
        Ok(self.push(value, Op::Reshape(x.0), ng))
    }

    /// Time-distributed dense layer: `(…, D)` · `(D, K)` + `(K)` → `(…, K)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| Error::shape("linear", "rank-0 input"))?;
        let &[wd, k] = self.shape(w) else {
            return Err(Error::shape(
                "linear",
                format!("weight must be (D, K), got {:?}", self.shape(w)),
            ));
        };
        if wd != d {
            return Err(Error::shape(
                "linear",
                format!("input width {d} vs weight rows {wd}"),
            ));
        }
        if self.shape(b) != [k] {
            return Err(Error::shape(
                "linear",
                format!("bias must be ({k}), got {:?}", self.shape(b)),
            ));
        }
        let out = kernels::linear_forward(self.data(x.0), self.data(w.0), self.data(b.0), d, k);
        let mut shape = xs;
        *shape.last_mut().unwrap() = k;
        let ng = self.needs(&[x.0, w.0, b.0]);
        Ok(self.push(
            NdBuffer::new(&shape, out)?,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            ng,
        ))
    }

    /// One GRU direction over `(T, D)` or `(B, T, D)` with zero initial
    /// state. `reverse` runs from the last frame to the first; outputs stay
    /// aligned with input time indices.
    pub fn gru(
        &mut self,
        x: Var,
        w_input: Var,
        w_hidden: Var,
        b_input: Var,
        b_hidden: Var,
        reverse: bool,
    ) -> Result<Var> {
        const OP: &str = "gru";
        let xs = self.shape(x).to_vec();
        let (b, t, d) = match *xs {
            [t, d] => (1, t, d),
            [b, t, d] => (b, t, d),
            _ => {
                return Err(Error::shape(
                    OP,
                    format!("input must be (T, D) or (B, T, D), got {xs:?}"),
                ))
            }
        };
        let &[hs, h3] = self.shape(w_hidden) else {
            return Err(Error::shape(OP, "hidden weight must be (H, 3H)"));
        };
        if h3 != 3 * hs {
            return Err(Error::shape(
                OP,
                format!("hidden weight must be (H, 3H), got ({hs}, {h3})"),
            ));
        }
        if self.shape(w_input) != [d, h3] {
            return Err(Error::shape(
                OP,
                format!(
                    "input weight must be ({d}, {h3}), got {:?}",
                    self.shape(w_input)
                ),
            ));
        }
        for bias in [b_input, b_hidden] {
            if self.shape(bias) != [h3] {
                return Err(Error::shape(
                    OP,
                    format!("bias must be ({h3}), got {:?}", self.shape(bias)),
                ));
            }
        }
        let geom = GruGeom {
            b,
            t,
            d,
            h: hs,
            reverse,
        };
        let (out, cache) = kernels::gru_forward(
            geom,
            self.data(x.0),
            GruWeights {
                w_input: self.data(w_input.0),
                w_hidden: self.data(w_hidden.0),
                b_input: self.data(b_input.0),
                b_hidden: self.data(b_hidden.0),
            },
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = hs;
        let ng = self.needs(&[x.0, w_input.0, w_hidden.0, b_input.0, b_hidden.0]);
        Ok(self.push(
            NdBuffer::new(&shape, out)?,
            Op::Gru {
                x: x.0,
                w_input: w_input.0,
                w_hidden: w_hidden.0,
                b_input: b_input.0,
                b_hidden: b_hidden.0,
                geom,
                cache,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x.0).iter().copied().sum();
        let ng = self.needs(&[x.0]);
        self.push(NdBuffer::scalar(s), Op::Sum(x.0), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x.0);
        let s = d.iter().copied().sum::<S>() / S::of(d.len() as f64);
        let ng = self.needs(&[x.0]);
        self.push(NdBuffer::scalar(s), Op::Mean(x.0), ng)
    }

    /// Mean over rows of `−ln max(p[row, target], 1e-12)` where `p` holds
    /// probability rows along its last axis.
    pub fn cross_entropy(&mut self, p: Var, targets: &[u32]) -> Result<Var> {
        let src = &self.nodes[p.0].value;
        let k = *src
            .shape()
            .last()
            .ok_or_else(|| Error::shape("cross_entropy", "rank-0 input"))?;
        let rows = src.len() / k;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} probability rows but {} targets", targets.len()),
            ));
        }
        let clamp = S::of(LOG_CLAMP);
        let mut total = S::zero();
        for (row, &t) in src.data().chunks_exact(k).zip(targets) {
            let t = t as usize;
            if t >= k {
                return Err(Error::OutOfRange {
                    what: "class target",
                    index: t,
                    limit: k,
                });
            }
            total -= row[t].max(clamp).ln();
        }
        let loss = total / S::of(rows as f64);
        let ng = self.needs(&[p.0]);
        Ok(self.push(
            NdBuffer::scalar(loss),
            Op::CrossEntropy {
                p: p.0,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean of `−[y ln p + (1 − y) ln(1 − p)]` over all entries, with both
    /// logarithm arguments clamped at `1e-12`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[u8]) -> Result<Var> {
        let src = &self.nodes[p.0].value;
        if targets.len() != src.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} outputs but {} targets", src.len(), targets.len()),
            ));
        }
        if let Some(i) = targets.iter().position(|&y| y > 1) {
            return Err(Error::InvalidArgument(format!(
                "binary target at {i} is {}, expected 0 or 1",
                targets[i]
            )));
        }
        let clamp = S::of(LOG_CLAMP);
        let one = S::one();
        let mut total = S::zero();
        for (&p, &y) in src.data().iter().zip(targets) {
            total -= if y == 1 {
                p.max(clamp).ln()
            } else {
                (one - p).max(clamp).ln()
            };
        }
        let loss = total / S::of(src.len() as f64);
        let ng = self.needs(&[p.0]);
        Ok(self.push(
            NdBuffer::scalar(loss),
            Op::BinaryCrossEntropy {
                p: p.0,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<NdBuffer<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(NdBuffer::full(lv.shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Constant | Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g.data(), &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<NdBuffer<S>>], idx: usize) -> Option<&'g mut [S]> {
        if !self.nodes[idx].needs_grad {
            return None;
        }
        let shape = self.nodes[idx].value.shape();
        Some(
            grads[idx]
                .get_or_insert_with(|| NdBuffer::zeros(shape))
                .data_mut(),
        )
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<NdBuffer<S>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let one = S::one();
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                // the three slots are distinct nodes, borrow them one by one
                let mut dx = self.slot(grads, *x).map(|s| s.to_vec());
                let mut dk = self.slot(grads, *kernel).map(|s| s.to_vec());
                let mut db = self.slot(grads, *bias).map(|s| s.to_vec());
                kernels::conv2d_backward(
                    *geom,
                    self.data(*x),
                    self.data(*kernel),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.store(grads, *x, dx);
                self.store(grads, *kernel, dk);
                self.store(grads, *bias, db);
            }
            Op::PoolFreqMax { x, upper } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let shape = self.nodes[*x].value.shape();
                    let c = shape[shape.len() - 1];
                    let f = shape[shape.len() - 2];
                    let half = f / 2;
                    for (o, (&gv, &up)) in g.iter().zip(upper).enumerate() {
                        let ch = o % c;
                        let k = (o / c) % half;
                        let bt = o / (c * half);
                        let src = ((bt * f) + 2 * k + usize::from(up)) * c + ch;
                        dx[src] += gv;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let c = inv_std.len();
                let gam = self.data(*gamma).to_vec();
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] += gr[ch];
                        sum_gx[ch] += gr[ch] * xr[ch];
                    }
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (a, v) in dg.iter_mut().zip(&sum_gx) {
                        *a += *v;
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for (a, v) in db.iter_mut().zip(&sum_g) {
                        *a += *v;
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let n = S::of((g.len() / c) as f64);
                    for ((dr, gr), xr) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for ch in 0..c {
                            let s = gam[ch] * inv_std[ch];
                            if *batch {
                                dr[ch] += s * (gr[ch] - sum_g[ch] / n - xr[ch] * sum_gx[ch] / n);
                            } else {
                                dr[ch] += s * gr[ch];
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        if *yv > S::zero() {
                            *d += *gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += *gv * *yv * (one - *yv);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += *gv * (one - *yv * *yv);
                    }
                }
            }
            Op::Square(x) => {
                let xv = self.data(*x).to_vec();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), v) in dx.iter_mut().zip(g).zip(&xv) {
                        *d += S::of(2.0) * *v * *gv;
                    }
                }
            }
            Op::Softmax(x) => {
                let k = *node.value.shape().last().unwrap();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((dr, gr), yr) in dx
                        .chunks_exact_mut(k)
                        .zip(g.chunks_exact(k))
                        .zip(y.chunks_exact(k))
                    {
                        let inner: S = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                        for j in 0..k {
                            dr[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::Dropout { x, keep, scale } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gv), &kept) in dx.iter_mut().zip(g).zip(keep) {
                        if kept {
                            *d += *gv * *scale;
                        }
                    }
                }
            }
            Op::Mul(a, b) | Op::Add(a, b) => {
                let is_mul = matches!(node.op, Op::Mul(..));
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (va, vb) = (self.data(*a), self.data(*b));
                let out_shape = node.value.shape();
                let mut da = self.slot(grads, *a).map(|s| s.to_vec());
                let mut db = if a == b {
                    None
                } else {
                    self.slot(grads, *b).map(|s| s.to_vec())
                };
                let same_ab = a == b;
                broadcast_for_each(out_shape, sa, sb, |o, ia, ib| {
                    let (ga, gb) = if is_mul {
                        (g[o] * vb[ib], g[o] * va[ia])
                    } else {
                        (g[o], g[o])
                    };
                    if let Some(da) = da.as_mut() {
                        da[ia] += ga;
                        if same_ab {
                            da[ia] += gb;
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        db[ib] += gb;
                    }
                });
                self.store(grads, *a, da);
                if !same_ab {
                    self.store(grads, *b, db);
                }
            }
            Op::Scale(x, factor) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += *gv * *factor;
                    }
                }
            }
            Op::Concat { a, b } => {
                let ca = *self.nodes[*a].value.shape().last().unwrap();
                let cb = *self.nodes[*b].value.shape().last().unwrap();
                if let Some(da) = self.slot(grads, *a) {
                    for (d, gr) in da.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                        for (x, v) in d.iter_mut().zip(&gr[..ca]) {
                            *x += *v;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (d, gr) in db.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                        for (x, v) in d.iter_mut().zip(&gr[ca..]) {
                            *x += *v;
                        }
                    }
                }
            }
            Op::ChannelMean(x) => {
                let c = *self.nodes[*x].value.shape().last().unwrap();
                let inv = one / S::of(c as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, gv) in dx.chunks_exact_mut(c).zip(g) {
                        for v in d {
                            *v += *gv * inv;
                        }
                    }
                }
            }
            Op::ChannelMax { x, argmax } => {
                let c = *self.nodes[*x].value.shape().last().unwrap();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, (gv, am)) in g.iter().zip(argmax).enumerate() {
                        dx[r * c + *am as usize] += *gv;
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let [b, t, f, c] = btfc("global_avg_pool", self.nodes[*x].value.shape()).unwrap();
                let inv = one / S::of((t * f) as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        let gr = &g[bi * c..(bi + 1) * c];
                        for row in dx[bi * t * f * c..(bi + 1) * t * f * c].chunks_exact_mut(c) {
                            for (d, gv) in row.iter_mut().zip(gr) {
                                *d += *gv * inv;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += *gv;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let d = *self.nodes[*x].value.shape().last().unwrap();
                let k = *node.value.shape().last().unwrap();
                let mut dx = self.slot(grads, *x).map(|s| s.to_vec());
                let mut dw = self.slot(grads, *w).map(|s| s.to_vec());
                let mut db = self.slot(grads, *b).map(|s| s.to_vec());
                kernels::linear_backward(
                    self.data(*x),
                    self.data(*w),
                    g,
                    d,
                    k,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.store(grads, *x, dx);
                self.store(grads, *w, dw);
                self.store(grads, *b, db);
            }
            Op::Gru {
                x,
                w_input,
                w_hidden,
                b_input,
                b_hidden,
                geom,
                cache,
            } => {
                let mut dx = self.slot(grads, *x).map(|s| s.to_vec());
                let mut dwi = self.slot(grads, *w_input).map(|s| s.to_vec());
                let mut dwh = self.slot(grads, *w_hidden).map(|s| s.to_vec());
                let mut dbi = self.slot(grads, *b_input).map(|s| s.to_vec());
                let mut dbh = self.slot(grads, *b_hidden).map(|s| s.to_vec());
                kernels::gru_backward(
                    *geom,
                    self.data(*x),
                    y,
                    GruWeights {
                        w_input: self.data(*w_input),
                        w_hidden: self.data(*w_hidden),
                        b_input: self.data(*b_input),
                        b_hidden: self.data(*b_hidden),
                    },
                    cache,
                    g,
                    GruGrads {
                        dx: dx.as_deref_mut(),
                        dw_input: dwi.as_deref_mut(),
                        dw_hidden: dwh.as_deref_mut(),
                        db_input: dbi.as_deref_mut(),
                        db_hidden: dbh.as_deref_mut(),
                    },
                );
                self.store(grads, *x, dx);
                self.store(grads, *w_input, dwi);
                self.store(grads, *w_hidden, dwh);
                self.store(grads, *b_input, dbi);
                self.store(grads, *b_hidden, dbh);
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.nodes[*x].value.len();
                let gv = if matches!(node.op, Op::Mean(_)) {
                    g[0] / S::of(n as f64)
                } else {
                    g[0]
                };
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx {
                        *d += gv;
                    }
                }
            }
            Op::CrossEntropy { p, targets } => {
                let k = *self.nodes[*p].value.shape().last().unwrap();
                let scale = g[0] / S::of(targets.len() as f64);
                let clamp = S::of(LOG_CLAMP);
                let pv = self.data(*p).to_vec();
                if let Some(dp) = self.slot(grads, *p) {
                    for (r, &t) in targets.iter().enumerate() {
                        let at = r * k + t as usize;
                        if pv[at] > clamp {
                            dp[at] -= scale / pv[at];
                        }
                    }
                }
            }
            Op::BinaryCrossEntropy { p, targets } => {
                let scale = g[0] / S::of(targets.len() as f64);
                let clamp = S::of(LOG_CLAMP);
                let pv = self.data(*p).to_vec();
                if let Some(dp) = self.slot(grads, *p) {
                    for ((d, &pr), &yv) in dp.iter_mut().zip(&pv).zip(targets) {
                        if yv == 1 {
                            if pr > clamp {
                                *d -= scale / pr;
                            }
                        } else if one - pr > clamp {
                            *d += scale / (one - pr);
                        }
                    }
                }
            }
        }
    }

    fn store(&self, grads: &mut [Option<NdBuffer<S>>], idx: usize, g: Option<Vec<S>>) {
        if let Some(g) = g {
            let shape = self.nodes[idx].value.shape();
            grads[idx] = Some(NdBuffer::new(shape, g).unwrap());
        }
    }
}
