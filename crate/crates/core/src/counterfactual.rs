//! Gated counterfactual features and the inner gate ascent.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `|rho|` bound keeping `sigmoid(rho)` strictly inside (0, 1) in 32-bit.
pub const RHO_LIMIT: f64 = 15.0;

const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Ascent steps per batch.
    pub steps: usize,
    pub step_size: f64,
    /// Weight of the L1 penalty on `u`.
    pub beta: f64,
    pub rho_init: f64,
    /// Halve each instance's step until its objective does not decrease.
    pub backtrack: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            step_size: 0.1,
            beta: 1.0,
            rho_init: -3.0,
            backtrack: false,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Parameter("gate steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Parameter(format!("gate step size {}", self.step_size)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Parameter(format!("gate beta {}", self.beta)));
        }
        if !self.rho_init.is_finite() || self.rho_init.abs() > RHO_LIMIT {
            return Err(Error::Parameter(format!("gate rho_init {}", self.rho_init)));
        }
        Ok(())
    }
}

/// Unconstrained gate parameters, one row per counterfactual.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate<S> {
    rho: Tensor<S>,
}

impl<S: Scalar> Gate<S> {
    pub fn init(rows: usize, d_v: usize, rho_init: f64) -> Self {
        Self {
            rho: Tensor::full(&[rows, d_v], S::lit(rho_init)),
        }
    }

    pub fn from_rho(rho: Tensor<S>) -> Self {
        let limit = S::lit(RHO_LIMIT);
        Self {
            rho: rho.map(|r| r.max(-limit).min(limit)),
        }
    }

    pub fn rho(&self) -> &Tensor<S> {
        &self.rho
    }

    /// `u = sigmoid(rho)`, a detached copy.
    pub fn snapshot(&self) -> Tensor<S> {
        self.rho.map(sigmoid)
    }
}

/// Clamps `x` into `[min(a, b), max(a, b)]`; rounding can overshoot by an ulp.
fn hull<S: Scalar>(x: S, a: S, b: S) -> S {
    x.max(a.min(b)).min(a.max(b))
}

/// `v' = (1 - u) * v + u * v_neg`, evaluated literally so both endpoints are
/// exact, then nudged back into the interval hull of `v` and `v_neg`.
///
/// The nudge is a constant offset of at most one ulp, so gradients are those
/// of the literal formula.
pub fn mix<'t, S: Scalar>(v: Var<'t, S>, v_neg: Var<'t, S>, u: Var<'t, S>) -> Result<Var<'t, S>> {
    if v.shape() != v_neg.shape() || v.shape() != u.shape() {
        return Err(Error::Contract(format!(
            "mix needs equal shapes, got {:?}, {:?}, {:?}",
            v.shape(),
            v_neg.shape(),
            u.shape()
        )));
    }
    let tape = v.tape();
    let one = tape.constant(Tensor::scalar(S::one()));
    let out = one.sub(&u)?.mul(&v)?.add(&u.mul(&v_neg)?)?;
    let (x, a, b) = (out.value(), v.value(), v_neg.value());
    let fix: Vec<S> = x
        .data()
        .iter()
        .zip(a.data().iter().zip(b.data()))
        .map(|(&x, (&a, &b))| hull(x, a, b) - x)
        .collect();
    if fix.iter().all(|&f| f == S::zero()) {
        return Ok(out);
    }
    out.add(&tape.constant(Tensor::new(x.shape().to_vec(), fix)?))
}

pub fn mix_values<S: Scalar>(v: &[S], v_neg: &[S], u: &[S]) -> Result<Vec<S>> {
    if v.len() != v_neg.len() || v.len() != u.len() {
        return Err(Error::Contract("mix needs equal dimensions".into()));
    }
    Ok(v.iter()
        .zip(v_neg)
        .zip(u)
        .map(|((&a, &b), &w)| hull((S::one() - w) * a + w * b, a, b))
        .collect())
}

/// `log D_{c-}(v')` per row.
///
/// `embeddings` holds `k` candidate prompt embeddings per row of `v_prime`,
/// `[rows * k x d_v]`; `neg_pos[r]` is the negative class position in row
/// `r`'s candidates.
pub fn discriminator_log_prob<'t, S: Scalar>(
    v_prime: Var<'t, S>,
    embeddings: Var<'t, S>,
    neg_pos: &[usize],
    tau: S,
) -> Result<Var<'t, S>> {
    let rows = neg_pos.len();
    let total = embeddings.shape().first().copied().unwrap_or(0);
    if rows == 0 || total % rows != 0 || v_prime.shape().first() != Some(&rows) {
        return Err(Error::dim(
            "discriminator",
            format!("{total} embeddings for {rows} counterfactuals"),
        ));
    }
    let k = total / rows;
    if let Some(&bad) = neg_pos.iter().find(|&&p| p >= k) {
        return Err(Error::Contract(format!("negative position {bad} of {k} candidates")));
    }
    let expand: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, k)).collect();
    let cos = embeddings.cosine_rows(&v_prime.gather_rows(&expand)?)?;
    cos.reshape(&[rows, k])?.log_softmax(tau)?.pick(neg_pos)
}

/// `D_{c-}(v')` for a single counterfactual against `[classes x d_v]` embeddings.
pub fn discriminator_prob<S: Scalar>(
    v_prime: &[S],
    c_neg: usize,
    prompt_embeddings: &Tensor<S>,
    tau: S,
) -> Result<S> {
    let tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![1, v_prime.len()], v_prime.to_vec())?);
    let e = tape.constant(prompt_embeddings.clone());
    Ok(discriminator_log_prob(v, e, &[c_neg], tau)?.value().item().exp())
}

/// Fixed inputs of one batch's gate problem.
pub struct InnerProblem<'a, S> {
    /// `[rows x d_v]`
    pub v: &'a Tensor<S>,
    /// `[rows x d_v]`
    pub v_neg: &'a Tensor<S>,
    /// `[rows * k x d_v]`, treated as constant.
    pub embeddings: &'a Tensor<S>,
    pub neg_pos: &'a [usize],
    pub tau: S,
}

/// `J(u) = log D_{c-}(v'(u)) - beta * |u|_1`, summed over rows.
///
/// Returns the summed objective and the per-row values.
pub fn inner_objective<'t, S: Scalar>(
    rho: Var<'t, S>,
    problem: &InnerProblem<'_, S>,
    beta: S,
) -> Result<(Var<'t, S>, Vec<S>)> {
    let tape = rho.tape();
    let u = rho.sigmoid()?;
    let v = tape.constant(problem.v.clone());
    let vn = tape.constant(problem.v_neg.clone());
    let e = tape.constant(problem.embeddings.clone());
    let log_d = discriminator_log_prob(mix(v, vn, u)?, e, problem.neg_pos, problem.tau)?;
    let total = log_d.sum()?.sub(&u.l1_norm()?.scale(beta)?)?;
    let uv = u.value();
    let d = uv.dims2().1;
    let per_row = log_d
        .value()
        .data()
        .iter()
        .enumerate()
        .map(|(r, &l)| l - beta * uv.data()[r * d..(r + 1) * d].iter().copied().sum::<S>())
        .collect();
    Ok((total, per_row))
}

fn objective_rows<S: Scalar>(rho: &Tensor<S>, problem: &InnerProblem<'_, S>, beta: S) -> Result<Vec<S>> {
    let tape = Tape::new();
    Ok(inner_objective(tape.constant(rho.clone()), problem, beta)?.1)
}

/// Runs `steps` ascent steps on `rho` and returns the updated gate.
pub fn inner_maximize<S: Scalar>(
    gate: Gate<S>,
    problem: &InnerProblem<'_, S>,
    cfg: &GateConfig,
) -> Result<Gate<S>> {
    cfg.validate()?;
    let (rows, d) = gate.rho.dims2();
    if problem.v.dims2() != (rows, d) || problem.v_neg.dims2() != (rows, d) {
        return Err(Error::Contract("gate and feature shapes differ".into()));
    }
    let beta = S::lit(cfg.beta);
    let eta = S::lit(cfg.step_size);
    let mut rho = gate.rho;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let (grad, before) = {
            let r = tape.leaf(rho.clone());
            let (j, per_row) = inner_objective(r, problem, beta)?;
            (tape.backward(j)?.wrt(r), per_row)
        };
        tape.reset();
        let step = |scale: &[S]| {
            let mut next = rho.clone();
            for (idx, (x, &g)) in next.data_mut().iter_mut().zip(grad.data()).enumerate() {
                *x += scale[idx / d] * g;
            }
            Gate::from_rho(next).rho
        };
        let mut scale = vec![eta; rows];
        let mut next = step(&scale);
        if cfg.backtrack {
            let mut pending: Vec<bool> = vec![true; rows];
            for _ in 0..MAX_HALVINGS {
                let after = objective_rows(&next, problem, beta)?;
                let mut any = false;
                for r in 0..rows {
                    if pending[r] && after[r] < before[r] {
                        scale[r] = scale[r] * S::lit(0.5);
                        any = true;
                    } else {
                        pending[r] = false;
                    }
                }
                if !any {
                    break;
                }
                next = step(&scale);
            }
            // rows that never improved keep their previous value
            if pending.iter().any(|&p| p) {
                let after = objective_rows(&next, problem, beta)?;
                for r in 0..rows {
                    if pending[r] && after[r] < before[r] {
                        next.data_mut()[r * d..(r + 1) * d]
                            .copy_from_slice(&rho.data()[r * d..(r + 1) * d]);
                    }
                }
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite { op: "inner_maximize" });
        }
        rho = next;
    }
    Ok(Gate { rho })
}

/// Exported gate weights of one counterfactual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub query_id: u64,
    pub negative_id: u64,
    pub u: Vec<f32>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_arithmetic_and_endpoints() {
        assert_eq!(
            mix_values(&[2.0f32, 0.0], &[0.0, 2.0], &[0.5, 0.5]).unwrap(),
            vec![1.0, 1.0]
        );
        let v = [0.3f32, -1.7, 5.1];
        let w = [9.1f32, 0.2, -3.3];
        assert_eq!(mix_values(&v, &w, &[0.0; 3]).unwrap(), v.to_vec());
        assert_eq!(mix_values(&v, &w, &[1.0; 3]).unwrap(), w.to_vec());
        assert!(mix_values(&v, &w[..2], &[0.0; 3]).is_err());
    }

    #[test]
    fn mix_var_matches_values() {
        let tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::from_f64(&[1, 2], &[2.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[1, 2], &[0.0, 2.0]).unwrap());
        let u = tape.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap());
        assert_eq!(mix(v, w, u).unwrap().value().data(), &[1.0, 1.0]);
        let short = tape.constant(Tensor::from_f64(&[1, 1], &[0.0]).unwrap());
        assert!(matches!(mix(v, w, short), Err(Error::Contract(_))));
    }

    #[test]
    fn equal_cosines_give_half() {
        let e = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = discriminator_prob(&[1.0f64, 1.0], 1, &e, 0.01).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn snapshot_matches_sigmoid_bits() {
        let g = Gate::<f32>::init(2, 3, -3.0);
        let s = g.snapshot();
        assert!(s.data().iter().all(|&u| u == sigmoid(-3.0f32)));
    }

    #[test]
    fn rho_is_clamped() {
        let g = Gate::<f32>::from_rho(Tensor::from_f64(&[1, 2], &[1e6, -1e6]).unwrap());
        let u = g.snapshot();
        assert!(u.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        assert!(GateConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(GateConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
        assert!(GateConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    }
}
