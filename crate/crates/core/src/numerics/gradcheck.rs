use alloc::format;
use alloc::vec::Vec;

use super::{NdBuffer, Real};
use crate::{Error, Result};

/// A scalar function of a list of parameter buffers with an analytic
/// gradient.
pub trait Objective<S> {
    fn value(&mut self, params: &[NdBuffer<S>]) -> Result<S>;

    /// Value and gradient; gradients must match `params` in count and shape.
    fn gradient(&mut self, params: &[NdBuffer<S>]) -> Result<(S, Vec<NdBuffer<S>>)>;
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck<S> {
    /// max over elements of `|analytic − central| / max(1, |central|)`
    pub max_rel_error: S,
    /// `(parameter, flat element)` where the maximum occurred
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the analytic gradient of `f` against central differences
/// `(f(θ + ε) − f(θ − ε)) / 2ε` for every element of every parameter.
///
/// `f` must be deterministic; two evaluations at `params` that disagree
/// bit-wise are reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<S: Real, F: Objective<S>>(
    f: &mut F,
    params: &[NdBuffer<S>],
    epsilon: S,
) -> Result<GradCheck<S>> {
    let (v0, analytic) = f.gradient(params)?;
    let v1 = f.value(params)?;
    let v2 = f.value(params)?;
    if v0 != v1 || v1 != v2 {
        return Err(Error::NonDeterministic(format!(
            "repeated evaluations gave {v0}, {v1}, {v2}"
        )));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!(
                "{} gradients for {} parameters",
                analytic.len(),
                params.len()
            ),
        ));
    }
    for (i, (a, p)) in analytic.iter().zip(params).enumerate() {
        if a.shape() != p.shape() {
            return Err(Error::shape(
                "finite_diff_check",
                format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    a.shape(),
                    p.shape()
                ),
            ));
        }
    }

    let mut work: Vec<NdBuffer<S>> = params.to_vec();
    let two_eps = epsilon + epsilon;
    let mut report = GradCheck {
        max_rel_error: S::zero(),
        worst: (0, 0),
        checked: 0,
    };
    for pi in 0..params.len() {
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + epsilon;
            let plus = f.value(&work)?;
            work[pi].data_mut()[e] = orig - epsilon;
            let minus = f.value(&work)?;
            work[pi].data_mut()[e] = orig;
            let central = (plus - minus) / two_eps;
            let err = (analytic[pi].data()[e] - central).abs() / central.abs().max(S::one());
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (pi, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use alloc::vec;

    /// `0.5 θᵀ A θ + bᵀ θ` with a fixed symmetric `A`.
    struct Quadratic;

    const A: [[f64; 3]; 3] = [[2.0, 0.5, 0.0], [0.5, 3.0, -1.0], [0.0, -1.0, 1.5]];
    const B: [f64; 3] = [1.0, -2.0, 0.25];

    impl Objective<f64> for Quadratic {
        fn value(&mut self, p: &[NdBuffer<f64>]) -> Result<f64> {
            let x = p[0].data();
            let mut v = 0.0;
            for i in 0..3 {
                v += B[i] * x[i];
                for j in 0..3 {
                    v += 0.5 * x[i] * A[i][j] * x[j];
                }
            }
            Ok(v)
        }

        fn gradient(&mut self, p: &[NdBuffer<f64>]) -> Result<(f64, Vec<NdBuffer<f64>>)> {
            let x = p[0].data();
            let g = (0..3)
                .map(|i| B[i] + (0..3).map(|j| A[i][j] * x[j]).sum::<f64>())
                .collect();
            Ok((self.value(p)?, vec![NdBuffer::new(&[3], g)?]))
        }
    }

    #[test]
    fn quadratic_form_is_exact() {
        let p = vec![NdBuffer::new(&[3], vec![0.3, -1.2, 2.0]).unwrap()];
        let r = finite_diff_check(&mut Quadratic, &p, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    struct Flaky(u32);

    impl Objective<f64> for Flaky {
        fn value(&mut self, _: &[NdBuffer<f64>]) -> Result<f64> {
            self.0 += 1;
            Ok(self.0 as f64)
        }
        fn gradient(&mut self, p: &[NdBuffer<f64>]) -> Result<(f64, Vec<NdBuffer<f64>>)> {
            Ok((self.value(p)?, vec![NdBuffer::zeros(p[0].shape())]))
        }
    }

    #[test]
    fn nondeterminism_is_reported() {
        let p = vec![NdBuffer::zeros(&[2])];
        assert!(matches!(
            finite_diff_check(&mut Flaky(0), &p, 1e-4),
            Err(Error::NonDeterministic(_))
        ));
    }

    /// `sum(relu(conv(x, k) + b))` with relu inputs kept away from zero.
    struct ConvRelu {
        x: NdBuffer<f64>,
    }

    impl ConvRelu {
        fn run(&self, p: &[NdBuffer<f64>], grad: bool) -> Result<(f64, Vec<NdBuffer<f64>>)> {
            let mut tape = Tape::new();
            let x = tape.constant(self.x.clone());
            let k = tape.leaf(p[0].clone());
            let b = tape.leaf(p[1].clone());
            let y = tape.conv2d(x, k, b)?;
            let r = tape.relu(y);
            let s = tape.square(r);
            let loss = tape.sum(s);
            let v = tape.value(loss).item().unwrap();
            if !grad {
                return Ok((v, Vec::new()));
            }
            let g = tape.backward(loss)?;
            Ok((v, vec![g.wrt_or_zeros(k, &p[0]), g.wrt_or_zeros(b, &p[1])]))
        }
    }

    impl Objective<f64> for ConvRelu {
        fn value(&mut self, p: &[NdBuffer<f64>]) -> Result<f64> {
            Ok(self.run(p, false)?.0)
        }
        fn gradient(&mut self, p: &[NdBuffer<f64>]) -> Result<(f64, Vec<NdBuffer<f64>>)> {
            self.run(p, true)
        }
    }

    #[test]
    fn conv_relu_chain_matches_central_differences() {
        // positive inputs and kernel keep every pre-activation > 0.1, except
        // channel 1 whose bias pushes it well below zero
        let x = NdBuffer::from_fn(&[3, 4, 2], |i| 0.2 + 0.05 * (i % 7) as f64);
        let k = NdBuffer::from_fn(&[3, 3, 2, 2], |i| 0.1 + 0.03 * (i % 5) as f64);
        let b = NdBuffer::new(&[2], vec![0.3, -5.0]).unwrap();
        let mut f = ConvRelu { x };
        let r = finite_diff_check(&mut f, &[k, b], 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
