//! Naive reference implementations used as independent oracles.
//!
//! Everything here is written as plain nested loops over `f64` with its own
//! index arithmetic; nothing calls into the library's kernels.

#![allow(dead_code, clippy::needless_range_loop)]

/// Direct SAME-padded convolution of a `(T, F, Cin)` map with a
/// `(KH, KW, Cin, Cout)` kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    t: usize,
    f: usize,
    cin: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; t * f * cout];
    for ti in 0..t as i64 {
        for fi in 0..f as i64 {
            for co in 0..cout {
                let mut acc = bias[co];
                for a in 0..kh as i64 {
                    for b in 0..kw as i64 {
                        let src_t = ti + a - (kh as i64 - 1) / 2;
                        let src_f = fi + b - (kw as i64 - 1) / 2;
                        if src_t < 0 || src_f < 0 || src_t >= t as i64 || src_f >= f as i64 {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x[(src_t as usize * f + src_f as usize) * cin + ci];
                            let kv = k[((a as usize * kw + b as usize) * cin + ci) * cout + co];
                            acc += xv * kv;
                        }
                    }
                }
                out[(ti as usize * f + fi as usize) * cout + co] = acc;
            }
        }
    }
    out
}

/// Pairwise frequency max of a `(T, F, C)` map.
pub fn pool_freq_max(x: &[f64], t: usize, f: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ti in 0..t {
        for k in 0..f / 2 {
            for ci in 0..c {
                let a = x[(ti * f + 2 * k) * c + ci];
                let b = x[(ti * f + 2 * k + 1) * c + ci];
                out.push(if b > a { b } else { a });
            }
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for row in x.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One GRU direction written as scalar recurrences over explicit weight
/// rows. Weights are laid out `(D, 3H)` / `(H, 3H)` with gate blocks
/// `[reset | update | candidate]`.
#[allow(clippy::too_many_arguments)]
pub fn gru_direction(
    x: &[f64],
    t: usize,
    d: usize,
    h: usize,
    wi: &[f64],
    wh: &[f64],
    bi: &[f64],
    bh: &[f64],
    reverse: bool,
) -> Vec<f64> {
    let col = |w: &[f64], row: usize, gate: usize, j: usize| w[row * 3 * h + gate * h + j];
    let mut out = vec![0.0; t * h];
    let mut state = vec![0.0; h];
    let order: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for &ti in &order {
        let xt = &x[ti * d..(ti + 1) * d];
        let mut next = vec![0.0; h];
        for j in 0..h {
            let mut ar = bi[j] + bh[j];
            let mut az = bi[h + j] + bh[h + j];
            let mut xn = bi[2 * h + j];
            let mut hn = bh[2 * h + j];
            for i in 0..d {
                ar += xt[i] * col(wi, i, 0, j);
                az += xt[i] * col(wi, i, 1, j);
                xn += xt[i] * col(wi, i, 2, j);
            }
            for i in 0..h {
                ar += state[i] * col(wh, i, 0, j);
                az += state[i] * col(wh, i, 1, j);
                hn += state[i] * col(wh, i, 2, j);
            }
            let r = logistic(ar);
            let z = logistic(az);
            let n = (xn + r * hn).tanh();
            next[j] = (1.0 - z) * n + z * state[j];
        }
        out[ti * h..(ti + 1) * h].copy_from_slice(&next);
        state = next;
    }
    out
}

/// Per-channel mean and biased variance of a `(…, C)` buffer.
pub fn channel_moments(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = x.iter().skip(ch).step_by(c).cloned().collect();
        mean[ch] = vals.iter().sum::<f64>() / n;
        var[ch] = vals.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / n;
    }
    (mean, var)
}

/// Frame/category confusion counts by brute force: `(tp, fp, fn)` per
/// category for row-major `(T, Y)` 0/1 matrices.
pub fn confusion(pred: &[u8], truth: &[u8], y: usize) -> Vec<(u64, u64, u64)> {
    let mut out = vec![(0, 0, 0); y];
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        let c = &mut out[i % y];
        match (p, t) {
            (1, 1) => c.0 += 1,
            (1, 0) => c.1 += 1,
            (0, 1) => c.2 += 1,
            _ => {}
        }
    }
    out
}

pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro F1 over the frames whose ground-truth degree equals `degree`.
pub fn micro_f1_at_degree(pred: &[u8], truth: &[u8], y: usize, degree: usize) -> (usize, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    let mut frames = 0;
    for (pr, tr) in pred.chunks(y).zip(truth.chunks(y)) {
        let deg = tr.iter().filter(|&&v| v == 1).count();
        if deg != degree {
            continue;
        }
        frames += 1;
        for (&p, &t) in pr.iter().zip(tr) {
            if p == 1 && t == 1 {
                tp += 1;
            } else if p == 1 {
                fp += 1;
            } else if t == 1 {
                fn_ += 1;
            }
        }
    }
    (frames, f1_from_counts(tp, fp, fn_))
}

/// Step-by-step Adam with bias correction on a flat parameter vector.
pub struct AdamOracle {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamOracle {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// TF mask of a `(T, F, C)` map: `σ(w[0]·mean_c + w[1]·max_c + b)` per cell.
pub fn tf_mask(x: &[f64], c: usize, w: [f64; 2], b: f64) -> Vec<f64> {
    x.chunks(c)
        .map(|cell| {
            let mean = cell.iter().sum::<f64>() / c as f64;
            let max = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            logistic(w[0] * mean + w[1] * max + b)
        })
        .collect()
}

/// Channel mask of a `(T, F, C)` map: GAP, `(C, C/2)` relu layer, `(C/2, C)`
/// layer, sigmoid.
pub fn channel_mask(
    x: &[f64],
    c: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> Vec<f64> {
    let h = c / 2;
    let cells = x.len() / c;
    let mut q = vec![0.0; c];
    for cell in x.chunks(c) {
        for i in 0..c {
            q[i] += cell[i];
        }
    }
    for v in q.iter_mut() {
        *v /= cells as f64;
    }
    let mut z = vec![0.0; h];
    for j in 0..h {
        let mut acc = b1[j];
        for i in 0..c {
            acc += q[i] * w1[i * h + j];
        }
        z[j] = acc.max(0.0);
    }
    (0..c)
        .map(|k| {
            let mut acc = b2[k];
            for j in 0..h {
                acc += z[j] * w2[j * c + k];
            }
            logistic(acc)
        })
        .collect()
}

/// Mean over tasks of mean over rows of `−ln p[row][target]`.
pub fn multitask_ce(outputs: &[Vec<f64>], ks: &[usize], targets: &[Vec<u32>]) -> f64 {
    let mut total = 0.0;
    for ((p, &k), t) in outputs.iter().zip(ks).zip(targets) {
        let rows = p.len() / k;
        let mut acc = 0.0;
        for r in 0..rows {
            acc -= p[r * k + t[r] as usize].max(1e-12).ln();
        }
        total += acc / rows as f64;
    }
    total / outputs.len() as f64
}

/// Mean of `−[y ln p + (1 − y) ln(1 − p)]`.
pub fn binary_ce(p: &[f64], y: &[u8]) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.len() {
        acc -= if y[i] == 1 {
            p[i].max(1e-12).ln()
        } else {
            (1.0 - p[i]).max(1e-12).ln()
        };
    }
    acc / p.len() as f64
}
