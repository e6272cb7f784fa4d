//! Slice-level forward and backward kernels used by the tape.

use alloc::vec;
use alloc::vec::Vec;

use super::gemm::Mat;
use super::Real;

#[inline]
pub(crate) fn sigmoid<S: Real>(x: S) -> S {
    let one = S::one();
    let y = if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // keep the open interval (0, 1) even where the exponential saturates
    y.max(S::min_positive_value()).min(one - S::epsilon())
}

/// Geometry of a SAME-padded, unit-stride 2-D convolution over
/// `(B, T, F, Cin)` with a `(KH, KW, Cin, Cout)` kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub t: usize,
    pub f: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    /// Width of one patch row: every tap of every input channel.
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Calls `visit(out_pos, in_pos, tap)` for every in-bounds tap of one
    /// sample, with positions as `(t, f)` linear indices.
    #[inline]
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        for t in 0..self.t {
            for f in 0..self.f {
                let out_pos = t * self.f + f;
                for dt in 0..self.kh {
                    let tt = t + dt;
                    if tt < ph || tt - ph >= self.t {
                        continue;
                    }
                    let tt = tt - ph;
                    for df in 0..self.kw {
                        let ff = f + df;
                        if ff < pw || ff - pw >= self.f {
                            continue;
                        }
                        visit(out_pos, tt * self.f + ff - pw, dt * self.kw + df);
                    }
                }
            }
        }
    }

    /// Unfolds one `(T, F, Cin)` sample into `(T·F, KH·KW·Cin)` patches,
    /// zeros outside the map.
    fn im2col<S: Real>(&self, x: &[S], cols: &mut [S]) {
        let (cin, width) = (self.cin, self.patch());
        cols.iter_mut().for_each(|v| *v = S::zero());
        self.for_each_tap(|o, i, kp| {
            let dst = o * width + kp * cin;
            cols[dst..dst + cin].copy_from_slice(&x[i * cin..(i + 1) * cin]);
        });
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds patch gradients back
    /// onto the sample.
    fn col2im<S: Real>(&self, cols: &[S], dx: &mut [S]) {
        let (cin, width) = (self.cin, self.patch());
        self.for_each_tap(|o, i, kp| {
            let src = o * width + kp * cin;
            for (d, v) in dx[i * cin..(i + 1) * cin]
                .iter_mut()
                .zip(&cols[src..src + cin])
            {
                *d += *v;
            }
        });
    }
}

/// Below this `Cin · Cout` the unfold-and-multiply path costs more in copies
/// than it saves.
const DIRECT_CONV_MAX: usize = 256;

impl ConvGeom {
    fn direct(&self) -> bool {
        !self.pointwise()
            && (matches!(self.cout, 1 | 2 | 4 | 8 | 16) || self.cin * self.cout <= DIRECT_CONV_MAX)
    }

    /// Calls `visit(out_row, in_row, tap, f_out, f_in, len)` for every
    /// kernel tap that overlaps the map, where rows are `(b, t)` indices and
    /// the tap covers `len` frequencies starting at `f_out` / `f_in`.
    #[inline]
    fn for_each_run(&self, mut visit: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        for b in 0..self.b {
            for t in 0..self.t {
                for dt in 0..self.kh {
                    let Some(tt) = (t + dt).checked_sub(ph).filter(|&v| v < self.t) else {
                        continue;
                    };
                    for df in 0..self.kw {
                        // output f reads input f + df - pw
                        let f_out = pw.saturating_sub(df);
                        let f_end = (self.f + pw).saturating_sub(df).min(self.f);
                        if f_out >= f_end {
                            continue;
                        }
                        let f_in = f_out + df - pw;
                        visit(
                            b * self.t + t,
                            b * self.t + tt,
                            dt * self.kw + df,
                            f_out,
                            f_in,
                            f_end - f_out,
                        );
                    }
                }
            }
        }
    }
}

fn conv2d_forward_direct<S: Real>(g: ConvGeom, x: &[S], k: &[S], out: &mut [S]) {
    match g.cout {
        1 => forward_runs::<S, 1>(g, x, k, out),
        2 => forward_runs::<S, 2>(g, x, k, out),
        4 => forward_runs::<S, 4>(g, x, k, out),
        8 => forward_runs::<S, 8>(g, x, k, out),
        16 => forward_runs::<S, 16>(g, x, k, out),
        _ => forward_runs::<S, 0>(g, x, k, out),
    }
}

/// Direct convolution with the output channel count fixed at compile time
/// (`N == 0` for any other count).
#[inline(always)]
fn forward_runs<S: Real, const N: usize>(g: ConvGeom, x: &[S], k: &[S], out: &mut [S]) {
    let (cin, f) = (g.cin, g.f);
    let cout = if N == 0 { g.cout } else { N };
    g.for_each_run(|orow, irow, kp, fo, fi, len| {
        let kt = &k[kp * cin * cout..(kp + 1) * cin * cout];
        let ys = &mut out[(orow * f + fo) * cout..(orow * f + fo + len) * cout];
        let xs = &x[(irow * f + fi) * cin..(irow * f + fi + len) * cin];
        for (y, xr) in ys.chunks_exact_mut(cout).zip(xs.chunks_exact(cin)) {
            if N == 0 {
                for (&xv, kr) in xr.iter().zip(kt.chunks_exact(cout)) {
                    for (a, &w) in y.iter_mut().zip(kr) {
                        *a += xv * w;
                    }
                }
            } else {
                let y: &mut [S; N] = y.try_into().unwrap();
                let mut acc = *y;
                for (&xv, kr) in xr.iter().zip(kt.chunks_exact(N)) {
                    let kr: &[S; N] = kr.try_into().unwrap();
                    for j in 0..N {
                        acc[j] += xv * kr[j];
                    }
                }
                *y = acc;
            }
        }
    });
}

fn conv2d_backward_direct<S: Real>(
    g: ConvGeom,
    x: &[S],
    k: &[S],
    dy: &[S],
    dx: Option<&mut [S]>,
    dk: Option<&mut [S]>,
) {
    if let Some(dx) = dx {
        // the adjoint of a SAME correlation is a SAME correlation with the
        // kernel flipped in both axes and its channel axes swapped
        let taps = g.kh * g.kw;
        let mut flipped = vec![S::zero(); k.len()];
        for kp in 0..taps {
            let src = &k[kp * g.cin * g.cout..(kp + 1) * g.cin * g.cout];
            let dst = &mut flipped[(taps - 1 - kp) * g.cin * g.cout..(taps - kp) * g.cin * g.cout];
            for ci in 0..g.cin {
                for co in 0..g.cout {
                    dst[co * g.cin + ci] = src[ci * g.cout + co];
                }
            }
        }
        let adj = ConvGeom {
            cin: g.cout,
            cout: g.cin,
            ..g
        };
        conv2d_forward_direct(adj, dy, &flipped, dx);
    }
    if let Some(dk) = dk {
        match g.cout {
            1 => kernel_grad_runs::<S, 1>(g, x, dy, dk),
            2 => kernel_grad_runs::<S, 2>(g, x, dy, dk),
            4 => kernel_grad_runs::<S, 4>(g, x, dy, dk),
            8 => kernel_grad_runs::<S, 8>(g, x, dy, dk),
            16 => kernel_grad_runs::<S, 16>(g, x, dy, dk),
            _ => kernel_grad_runs::<S, 0>(g, x, dy, dk),
        }
    }
}

#[inline(always)]
fn kernel_grad_runs<S: Real, const N: usize>(g: ConvGeom, x: &[S], dy: &[S], dk: &mut [S]) {
    let (cin, f) = (g.cin, g.f);
    let cout = if N == 0 { g.cout } else { N };
    g.for_each_run(|orow, irow, kp, fo, fi, len| {
        let dys = &dy[(orow * f + fo) * cout..(orow * f + fo + len) * cout];
        let xs = &x[(irow * f + fi) * cin..(irow * f + fi + len) * cin];
        let dkt = &mut dk[kp * cin * cout..(kp + 1) * cin * cout];
        for (ci, drow) in dkt.chunks_exact_mut(cout).enumerate() {
            if N == 0 {
                for (xr, gr) in xs.chunks_exact(cin).zip(dys.chunks_exact(cout)) {
                    let xv = xr[ci];
                    for (a, &gv) in drow.iter_mut().zip(gr) {
                        *a += xv * gv;
                    }
                }
            } else {
                let mut acc = [S::zero(); N];
                for (xr, gr) in xs.chunks_exact(cin).zip(dys.chunks_exact(N)) {
                    let xv = xr[ci];
                    let gr: &[S; N] = gr.try_into().unwrap();
                    for j in 0..N {
                        acc[j] += xv * gr[j];
                    }
                }
                for j in 0..N {
                    drow[j] += acc[j];
                }
            }
        }
    });
}

pub(crate) fn conv2d_forward<S: Real>(g: ConvGeom, x: &[S], k: &[S], bias: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); g.b * g.t * g.f * g.cout];
    for row in out.chunks_exact_mut(g.cout) {
        row.copy_from_slice(bias);
    }
    if g.direct() {
        conv2d_forward_direct(g, x, k, &mut out);
        return out;
    }
    let kmat = Mat::new(k, g.patch(), g.cout);
    if g.pointwise() {
        S::gemm(Mat::new(x, g.b * g.t * g.f, g.cin), kmat, &mut out, true);
        return out;
    }
    if g.f >= 4 * (g.kw - 1) {
        conv2d_forward_shifted(g, x, k, &mut out);
        return out;
    }
    let (rows, width) = (g.t * g.f, g.patch());
    let mut cols = vec![S::zero(); rows * width];
    for (xs, ys) in x
        .chunks_exact(rows * g.cin)
        .zip(out.chunks_exact_mut(rows * g.cout))
    {
        g.im2col(xs, &mut cols);
        S::gemm(Mat::new(&cols, rows, width), kmat, ys, true);
    }
    out
}

/// Forward pass as one product per kernel tap over a zero-padded copy of
/// each sample. Rows are computed at the padded width and cropped after.
fn conv2d_forward_shifted<S: Real>(g: ConvGeom, x: &[S], k: &[S], out: &mut [S]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let wp = g.f + g.kw - 1;
    let rows = g.t * wp;
    let mut padded = vec![S::zero(); ((g.t + g.kh - 1) * wp + g.kw - 1) * g.cin];
    let mut wide = vec![S::zero(); rows * g.cout];
    for (xs, ys) in x
        .chunks_exact(g.t * g.f * g.cin)
        .zip(out.chunks_exact_mut(g.t * g.f * g.cout))
    {
        for t in 0..g.t {
            let dst = ((t + ph) * wp + pw) * g.cin;
            padded[dst..dst + g.f * g.cin]
                .copy_from_slice(&xs[t * g.f * g.cin..(t + 1) * g.f * g.cin]);
        }
        for dt in 0..g.kh {
            for df in 0..g.kw {
                let tap = dt * g.kw + df;
                let a = &padded[(dt * wp + df) * g.cin..];
                let w = &k[tap * g.cin * g.cout..(tap + 1) * g.cin * g.cout];
                S::gemm(
                    Mat::new(a, rows, g.cin),
                    Mat::new(w, g.cin, g.cout),
                    &mut wide,
                    tap > 0,
                );
            }
        }
        for t in 0..g.t {
            let src = &wide[t * wp * g.cout..(t * wp + g.f) * g.cout];
            for (y, v) in ys[t * g.f * g.cout..(t + 1) * g.f * g.cout]
                .iter_mut()
                .zip(src)
            {
                *y += *v;
            }
        }
    }
}

/// Accumulates input, kernel and bias gradients for `conv2d_forward`.
pub(crate) fn conv2d_backward<S: Real>(
    g: ConvGeom,
    x: &[S],
    k: &[S],
    dy: &[S],
    mut dx: Option<&mut [S]>,
    mut dk: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    if let Some(db) = db {
        for row in dy.chunks_exact(g.cout) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += *v;
            }
        }
    }
    let kmat = Mat::new(k, g.patch(), g.cout);
    if g.pointwise() {
        let rows = g.b * g.t * g.f;
        let dymat = Mat::new(dy, rows, g.cout);
        if let Some(dk) = dk {
            S::gemm(Mat::new(x, rows, g.cin).t(), dymat, dk, true);
        }
        if let Some(dx) = dx {
            S::gemm(dymat, kmat.t(), dx, true);
        }
        return;
    }
    if dx.is_none() && dk.is_none() {
        return;
    }
    if g.direct() {
        conv2d_backward_direct(g, x, k, dy, dx, dk);
        return;
    }
    let (rows, width) = (g.t * g.f, g.patch());
    let mut cols = vec![S::zero(); rows * width];
    for b in 0..g.b {
        let dys = Mat::new(
            &dy[b * rows * g.cout..(b + 1) * rows * g.cout],
            rows,
            g.cout,
        );
        let xs = &x[b * rows * g.cin..(b + 1) * rows * g.cin];
        if let Some(dk) = dk.as_deref_mut() {
            g.im2col(xs, &mut cols);
            S::gemm(Mat::new(&cols, rows, width).t(), dys, dk, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            S::gemm(dys, kmat.t(), &mut cols, false);
            g.col2im(&cols, &mut dx[b * rows * g.cin..(b + 1) * rows * g.cin]);
        }
    }
}

/// Row-wise affine map: `y[r] = x[r] · w + b` with `w` of shape `(D, K)`.
pub(crate) fn linear_forward<S: Real>(x: &[S], w: &[S], b: &[S], d: usize, k: usize) -> Vec<S> {
    let rows = x.len() / d;
    let mut out = vec![S::zero(); rows * k];
    for row in out.chunks_exact_mut(k) {
        row.copy_from_slice(b);
    }
    S::gemm(Mat::new(x, rows, d), Mat::new(w, d, k), &mut out, true);
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<S: Real>(
    x: &[S],
    w: &[S],
    dy: &[S],
    d: usize,
    k: usize,
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    let rows = x.len() / d;
    let dymat = Mat::new(dy, rows, k);
    if let Some(db) = db {
        for row in dy.chunks_exact(k) {
            for (a, v) in db.iter_mut().zip(row) {
                *a += *v;
            }
        }
    }
    if let Some(dx) = dx {
        S::gemm(dymat, Mat::new(w, d, k).t(), dx, true);
    }
    if let Some(dw) = dw {
        S::gemm(Mat::new(x, rows, d).t(), dymat, dw, true);
    }
}

/// Per-channel batch moments (biased variance) of a `(…, C)` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// Exponential moving averages of batch statistics. `updates == 0` means
/// the layer has never seen a training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub updates: u64,
}

impl<S: Real> RunningStats<S> {
    pub fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
            updates: 0,
        }
    }

    /// `running = momentum · running + (1 − momentum) · batch`; the first
    /// update copies the batch statistics.
    pub fn update(&mut self, batch: &BatchStats<S>, momentum: S) {
        if self.updates == 0 {
            self.mean.copy_from_slice(&batch.mean);
            self.var.copy_from_slice(&batch.var);
        } else {
            let keep = S::one() - momentum;
            for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
                *r = momentum * *r + keep * *b;
            }
            for (r, b) in self.var.iter_mut().zip(&batch.var) {
                *r = momentum * *r + keep * *b;
            }
        }
        self.updates += 1;
    }
}

pub(crate) fn channel_moments<S: Real>(x: &[S], c: usize) -> BatchStats<S> {
    let n = S::of((x.len() / c) as f64);
    let mut mean = vec![S::zero(); c];
    for row in x.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![S::zero(); c];
    for row in x.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = *v - *m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s /= n;
    }
    BatchStats { mean, var }
}

/// Parameters of one GRU direction. Gate columns are ordered
/// `[reset | update | candidate]`.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights<'a, S> {
    /// `(D, 3H)`
    pub w_input: &'a [S],
    /// `(H, 3H)`
    pub w_hidden: &'a [S],
    /// `(3H)`
    pub b_input: &'a [S],
    /// `(3H)`
    pub b_hidden: &'a [S],
}

/// Gate activations kept for back-propagation through time, each laid out
/// `(B, T, H)` by time index.
#[derive(Clone, Debug, Default)]
pub(crate) struct GruCache<S> {
    pub reset: Vec<S>,
    pub update: Vec<S>,
    pub cand: Vec<S>,
    pub hidden_cand: Vec<S>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GruGeom {
    pub b: usize,
    pub t: usize,
    pub d: usize,
    pub h: usize,
    pub reverse: bool,
}

impl GruGeom {
    fn steps(&self) -> impl Iterator<Item = (usize, Option<usize>)> {
        let (t, rev) = (self.t, self.reverse);
        (0..t).map(move |s| {
            if rev {
                let ti = t - 1 - s;
                (ti, (s > 0).then(|| ti + 1))
            } else {
                (s, (s > 0).then(|| s - 1))
            }
        })
    }
}

/// `(B·T, 3H)` input projections `x · W_i + b_i` for every frame at once.
fn gru_input_projection<S: Real>(g: GruGeom, x: &[S], p: GruWeights<'_, S>) -> Vec<S> {
    let h3 = 3 * g.h;
    let mut xi = vec![S::zero(); g.b * g.t * h3];
    for row in xi.chunks_exact_mut(h3) {
        row.copy_from_slice(p.b_input);
    }
    S::gemm(
        Mat::new(x, g.b * g.t, g.d),
        Mat::new(p.w_input, g.d, h3),
        &mut xi,
        true,
    );
    xi
}

/// Batches up to this many rows skip the GEMM packing in the recurrence.
const SMALL_BATCH: usize = 16;

/// `c += a · w` for a short `(m, k)` left operand and row-major `(k, n)` `w`.
fn rows_times<S: Real>(a: &[S], w: &[S], c: &mut [S], k: usize, n: usize) {
    for (i, w_row) in w.chunks_exact(n).take(k).enumerate() {
        for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
            let v = a_row[i];
            if v != S::zero() {
                for (o, &x) in c_row.iter_mut().zip(w_row) {
                    *o += v * x;
                }
            }
        }
    }
}

fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: S = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .fold(S::zero(), |s, v| s + v);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// `c += a · wᵀ` for a short `(m, n)` left operand and row-major `(k, n)` `w`.
fn rows_times_t<S: Real>(a: &[S], w: &[S], c: &mut [S], k: usize, n: usize) {
    for (a_row, c_row) in a.chunks_exact(n).zip(c.chunks_exact_mut(k)) {
        for (o, w_row) in c_row.iter_mut().zip(w.chunks_exact(n)) {
            *o += dot(a_row, w_row);
        }
    }
}

pub(crate) fn gru_forward<S: Real>(
    g: GruGeom,
    x: &[S],
    p: GruWeights<'_, S>,
) -> (Vec<S>, GruCache<S>) {
    let (h, h3) = (g.h, 3 * g.h);
    let n = g.b * g.t * h;
    let mut out = vec![S::zero(); n];
    let mut cache = GruCache {
        reset: vec![S::zero(); n],
        update: vec![S::zero(); n],
        cand: vec![S::zero(); n],
        hidden_cand: vec![S::zero(); n],
    };
    let xi = gru_input_projection(g, x, p);
    let whh = Mat::new(p.w_hidden, h, h3);
    // hidden states of the whole batch at the previous step, (B, H)
    let mut state = vec![S::zero(); g.b * h];
    let mut hh = vec![S::zero(); g.b * h3];
    for (t, prev) in g.steps() {
        for row in hh.chunks_exact_mut(h3) {
            row.copy_from_slice(p.b_hidden);
        }
        if prev.is_some() {
            if g.b <= SMALL_BATCH {
                rows_times(&state, p.w_hidden, &mut hh, h, h3);
            } else {
                S::gemm(Mat::new(&state, g.b, h), whh, &mut hh, true);
            }
        }
        for b in 0..g.b {
            let base = (b * g.t + t) * h;
            let xr = &xi[(b * g.t + t) * h3..(b * g.t + t + 1) * h3];
            let hr = &hh[b * h3..(b + 1) * h3];
            let st = &mut state[b * h..(b + 1) * h];
            for j in 0..h {
                let r = sigmoid(xr[j] + hr[j]);
                let z = sigmoid(xr[h + j] + hr[h + j]);
                let hn = hr[2 * h + j];
                let c = (xr[2 * h + j] + r * hn).tanh();
                let hp = if prev.is_some() { st[j] } else { S::zero() };
                let y = (S::one() - z) * c + z * hp;
                out[base + j] = y;
                st[j] = y;
                cache.reset[base + j] = r;
                cache.update[base + j] = z;
                cache.cand[base + j] = c;
                cache.hidden_cand[base + j] = hn;
            }
        }
    }
    (out, cache)
}

pub(crate) struct GruGrads<'a, S> {
    pub dx: Option<&'a mut [S]>,
    pub dw_input: Option<&'a mut [S]>,
    pub dw_hidden: Option<&'a mut [S]>,
    pub db_input: Option<&'a mut [S]>,
    pub db_hidden: Option<&'a mut [S]>,
}

pub(crate) fn gru_backward<S: Real>(
    g: GruGeom,
    x: &[S],
    out: &[S],
    p: GruWeights<'_, S>,
    cache: &GruCache<S>,
    dy: &[S],
    grads: GruGrads<'_, S>,
) {
    let (h, h3) = (g.h, 3 * g.h);
    let rows = g.b * g.t;
    let one = S::one();
    // pre-activation gradients of the input and hidden projections, (B·T, 3H)
    let mut dxi = vec![S::zero(); rows * h3];
    let mut dhh = vec![S::zero(); rows * h3];
    // hidden state each frame was computed from, (B·T, H), zero at the start
    let mut h_prev = vec![S::zero(); rows * h];
    let mut carry = vec![S::zero(); g.b * h];
    let mut dhh_step = vec![S::zero(); g.b * h3];
    let steps: Vec<_> = g.steps().collect();
    let whh = Mat::new(p.w_hidden, h, h3);
    for &(t, prev) in steps.iter().rev() {
        for b in 0..g.b {
            let base = (b * g.t + t) * h;
            let prev_base = prev.map(|tp| (b * g.t + tp) * h);
            if let Some(pb) = prev_base {
                h_prev[base..base + h].copy_from_slice(&out[pb..pb + h]);
            }
            let gi = &mut dxi[(b * g.t + t) * h3..(b * g.t + t + 1) * h3];
            let gh = &mut dhh_step[b * h3..(b + 1) * h3];
            let cr = &mut carry[b * h..(b + 1) * h];
            for j in 0..h {
                let dh = dy[base + j] + cr[j];
                let (r, z, c, hn) = (
                    cache.reset[base + j],
                    cache.update[base + j],
                    cache.cand[base + j],
                    cache.hidden_cand[base + j],
                );
                let hp = prev_base.map_or(S::zero(), |pb| out[pb + j]);
                let dc = dh * (one - z);
                let dz = dh * (hp - c);
                cr[j] = dh * z;
                let da_c = dc * (one - c * c);
                let da_z = dz * z * (one - z);
                let da_r = da_c * hn * r * (one - r);
                gi[j] = da_r;
                gi[h + j] = da_z;
                gi[2 * h + j] = da_c;
                gh[j] = da_r;
                gh[h + j] = da_z;
                gh[2 * h + j] = da_c * r;
            }
            dhh[(b * g.t + t) * h3..(b * g.t + t + 1) * h3].copy_from_slice(gh);
        }
        if prev.is_some() {
            if g.b <= SMALL_BATCH {
                rows_times_t(&dhh_step, p.w_hidden, &mut carry, h, h3);
            } else {
                S::gemm(Mat::new(&dhh_step, g.b, h3), whh.t(), &mut carry, true);
            }
        }
    }
    let column_sums = |m: &[S], db: &mut [S]| {
        for row in m.chunks_exact(h3) {
            for (a, v) in db.iter_mut().zip(row) {
                *a += *v;
            }
        }
    };
    if let Some(db) = grads.db_input {
        column_sums(&dxi, db);
    }
    if let Some(db) = grads.db_hidden {
        column_sums(&dhh, db);
    }
    let dxi_m = Mat::new(&dxi, rows, h3);
    if let Some(dw) = grads.dw_input {
        S::gemm(Mat::new(x, rows, g.d).t(), dxi_m, dw, true);
    }
    if let Some(dx) = grads.dx {
        S::gemm(dxi_m, Mat::new(p.w_input, g.d, h3).t(), dx, true);
    }
    if let Some(dw) = grads.dw_hidden {
        S::gemm(
            Mat::new(&h_prev, rows, h).t(),
            Mat::new(&dhh, rows, h3),
            dw,
            true,
        );
    }
}
