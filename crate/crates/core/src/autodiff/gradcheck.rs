//! Central finite-difference checker, independent of the backward rules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Per-input comparison between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` per input.
    pub relative_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Differentiates the scalar function `f` w.r.t. every input, both through
/// the tape and by central differences with the given step.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<_> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * step);
        }
        numeric.push(Tensor::new(inputs[i].shape().to_vec(), g)?);
    }
    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    Ok(GradReport {
        analytic,
        numeric,
        relative_errors,
    })
}

/// One differentiable op wired for randomized checking.
pub struct OpCase {
    pub name: &'static str,
    run: fn(&mut ChaCha8Rng) -> Result<GradReport>,
}

impl OpCase {
    /// Draws fresh random inputs and compares gradients at `DEFAULT_STEP`.
    pub fn check_random(&self, rng: &mut ChaCha8Rng) -> Result<GradReport> {
        (self.run)(rng)
    }
}

/// Central-difference step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, 0.1, 1.5).map(|x| if rng_sign(x) { x } else { -x })
}

fn rng_sign(x: f64) -> bool {
    // low mantissa bits are effectively random
    (x.to_bits() >> 7) & 1 == 0
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

/// Contracts an output with fixed random weights so the scalar loss has a
/// non-uniform upstream gradient.
fn project<'t>(out: Var<'t, f64>, weights: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let w = out.tape().constant(weights.clone().reshape(&out.shape())?);
    out.mul(&w)?.sum()
}

fn weights_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

macro_rules! case {
    ($name:expr, |$rng:ident| $body:block) => {
        OpCase {
            name: $name,
            run: |$rng: &mut ChaCha8Rng| -> Result<GradReport> { $body },
        }
    };
}

/// Every differentiable op with a randomized finite-difference harness.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case!("matmul", |rng| {
            let (m, k) = dims(rng);
            let n = rng.random_range(1..5);
            let a = uniform(rng, &[m, k], -1.0, 1.0);
            let b = uniform(rng, &[k, n], -1.0, 1.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a, b], DEFAULT_STEP, |_, v| project(v[0].matmul(&v[1])?, &w))
        }),
        case!("add", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let b = uniform(rng, &[m, n], -1.0, 1.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a, b], DEFAULT_STEP, |_, v| project(v[0].add(&v[1])?, &w))
        }),
        case!("sub_scalar_broadcast", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let b = uniform(rng, &[], -1.0, 1.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a, b], DEFAULT_STEP, |_, v| project(v[0].sub(&v[1])?, &w))
        }),
        case!("mul", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let b = uniform(rng, &[m, n], -1.0, 1.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a, b], DEFAULT_STEP, |_, v| project(v[0].mul(&v[1])?, &w))
        }),
        case!("mul_row_broadcast", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let b = uniform(rng, &[n], -1.0, 1.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a, b], DEFAULT_STEP, |_, v| project(v[1].mul(&v[0])?, &w))
        }),
        case!("scale", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let f = rng.random_range(-2.0..2.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].scale(f)?, &w))
        }),
        case!("sigmoid", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -4.0, 4.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].sigmoid()?, &w))
        }),
        case!("relu", |rng| {
            let (m, n) = dims(rng);
            let a = away_from_zero(rng, &[m, n]);
            let w = weights_for(rng, &[m, n]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].relu()?, &w))
        }),
        case!("gelu", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -3.0, 3.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].gelu()?, &w))
        }),
        case!("exp", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -2.0, 2.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].exp()?, &w))
        }),
        case!("log", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], 0.5, 3.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].ln()?, &w))
        }),
        case!("l1_norm", |rng| {
            let (m, n) = dims(rng);
            let a = away_from_zero(rng, &[m, n]);
            check(&[a], DEFAULT_STEP, |_, v| v[0].l1_norm())
        }),
        case!("sum", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            check(&[a], DEFAULT_STEP, |_, v| v[0].mul(&v[0])?.sum())
        }),
        case!("mean", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            check(&[a], DEFAULT_STEP, |_, v| v[0].mul(&v[0])?.mean())
        }),
        case!("softmax", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -2.0, 2.0);
            let t = rng.random_range(0.3..2.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].softmax(t)?, &w))
        }),
        case!("log_softmax", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -2.0, 2.0);
            let t = rng.random_range(0.3..2.0);
            let w = weights_for(rng, &[m, n]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].log_softmax(t)?, &w))
        }),
        case!("cosine_rows", |rng| {
            let (m, n) = dims(rng);
            let n = n + 1;
            let a = away_from_zero(rng, &[m, n]);
            let b = away_from_zero(rng, &[m, n]);
            let w = weights_for(rng, &[m]);
            check(&[a, b], DEFAULT_STEP, |_, v| project(v[0].cosine_rows(&v[1])?, &w))
        }),
        case!("cosine_broadcast", |rng| {
            let (m, n) = dims(rng);
            let n = n + 1;
            let a = away_from_zero(rng, &[m, n]);
            let b = away_from_zero(rng, &[n]);
            let w = weights_for(rng, &[m]);
            check(&[a, b], DEFAULT_STEP, |_, v| project(v[0].cosine_rows(&v[1])?, &w))
        }),
        case!("layer_norm", |rng| {
            let (m, n) = dims(rng);
            let n = n + 2;
            let x = uniform(rng, &[m, n], -2.0, 2.0);
            let g = uniform(rng, &[n], 0.5, 1.5);
            let b = uniform(rng, &[n], -0.5, 0.5);
            let w = weights_for(rng, &[m, n]);
            check(&[x, g, b], DEFAULT_STEP, |_, v| {
                project(v[0].layer_norm(&v[1], &v[2])?, &w)
            })
        }),
        case!("concat_rows", |rng| {
            let (m, n) = dims(rng);
            let r2 = rng.random_range(1..4);
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let b = uniform(rng, &[r2, n], -1.0, 1.0);
            let w = weights_for(rng, &[m + r2, n]);
            check(&[a, b], DEFAULT_STEP, |_, v| {
                project(Var::concat_rows(&[v[0], v[1]])?, &w)
            })
        }),
        case!("gather_rows", |rng| {
            let (m, n) = dims(rng);
            let idx: Vec<usize> = (0..rng.random_range(1..7))
                .map(|_| rng.random_range(0..m))
                .collect();
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let w = weights_for(rng, &[idx.len(), n]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].gather_rows(&idx)?, &w))
        }),
        case!("pick", |rng| {
            let (m, n) = dims(rng);
            let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let w = weights_for(rng, &[m]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].pick(&idx)?, &w))
        }),
        case!("mean_rows", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let w = weights_for(rng, &[n]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].mean_rows()?, &w))
        }),
        case!("transpose", |rng| {
            let (m, n) = dims(rng);
            let a = uniform(rng, &[m, n], -1.0, 1.0);
            let w = weights_for(rng, &[n, m]);
            check(&[a], DEFAULT_STEP, |_, v| project(v[0].transpose()?, &w))
        }),
        case!("attention", |rng| {
            let heads = rng.random_range(1..3);
            let d = heads * rng.random_range(1..4);
            let seq = rng.random_range(1..5);
            let seqs = rng.random_range(1..3);
            let rows = seq * seqs;
            // mask a random suffix of each sequence, keeping at least one key
            let mut mask = vec![true; rows];
            for s in 0..seqs {
                let keep = rng.random_range(1..=seq);
                for j in keep..seq {
                    mask[s * seq + j] = false;
                }
            }
            let mask: std::sync::Arc<[bool]> = mask.into();
            let q = uniform(rng, &[rows, d], -1.5, 1.5);
            let k = uniform(rng, &[rows, d], -1.5, 1.5);
            let v = uniform(rng, &[rows, d], -1.0, 1.0);
            let w = weights_for(rng, &[rows, d]);
            check(&[q, k, v], DEFAULT_STEP, |_, x| {
                project(x[0].attention(&x[1], &x[2], seq, heads, mask.clone())?, &w)
            })
        }),
    ]
}
