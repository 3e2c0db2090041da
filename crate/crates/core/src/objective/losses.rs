use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_values, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `p(t_i | x)`: softmax over `cos(G(t_c), v) / tau`.
pub fn class_probabilities<S: Scalar>(
    v: &[S],
    prompt_embeddings: &Tensor<S>,
    tau: S,
) -> Result<Vec<S>> {
    let (c, d) = prompt_embeddings.dims2();
    if c < 2 {
        return Err(Error::Parameter(format!("need at least two classes, got {c}")));
    }
    if d != v.len() {
        return Err(Error::dim("class_probabilities", format!("v has {} dims, prompts {d}", v.len())));
    }
    let cos = (0..c)
        .map(|k| crate::autodiff::cosine_values(prompt_embeddings.row(k), v))
        .collect::<Result<Vec<S>>>()?;
    softmax_values(&cos, tau)
}

/// `-sum_c y_c log p_c` for a one-hot `y` at `target`.
pub fn ce_loss<S: Scalar>(probabilities: &[S], target: usize) -> Result<S> {
    match probabilities.get(target) {
        Some(&p) if p > S::zero() => Ok(-p.ln()),
        Some(_) => Err(Error::Domain {
            op: "ce_loss",
            detail: "target probability is not positive".into(),
        }),
        None => Err(Error::Contract(format!(
            "target {target} outside {} classes",
            probabilities.len()
        ))),
    }
}

/// Cosines between each feature row and its `k` candidate embeddings,
/// `[rows x k]`; `embeddings` is `[rows * k x d_v]`.
pub fn candidate_cosines<'t, S: Scalar>(
    features: Var<'t, S>,
    embeddings: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let rows = features.shape().first().copied().unwrap_or(0);
    let total = embeddings.shape().first().copied().unwrap_or(0);
    if rows == 0 || total % rows != 0 {
        return Err(Error::dim("candidate_cosines", format!("{total} embeddings for {rows} rows")));
    }
    let k = total / rows;
    let expand: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, k)).collect();
    embeddings
        .cosine_rows(&features.gather_rows(&expand)?)?
        .reshape(&[rows, k])
}

/// Batch-mean cross-entropy from `[rows x k]` cosines.
pub fn ce_from_cosines<'t, S: Scalar>(
    cosines: Var<'t, S>,
    targets: &[usize],
    tau: S,
) -> Result<Var<'t, S>> {
    cosines.log_softmax(tau)?.pick(targets)?.mean()?.neg()
}

/// Two-term InfoNCE, averaged over rows:
/// `-log(e^{S(v,g)/tau} / (e^{S(v,g)/tau} + e^{S(v',g)/tau}))`.
pub fn cl_loss<'t, S: Scalar>(
    v: Var<'t, S>,
    v_prime: Var<'t, S>,
    g: Var<'t, S>,
    tau: S,
) -> Result<Var<'t, S>> {
    let rows = v.shape().first().copied().unwrap_or(0);
    let s_factual = v.cosine_rows(&g)?.reshape(&[1, rows])?;
    let s_counter = v_prime.cosine_rows(&g)?.reshape(&[1, rows])?;
    let logits = Var::concat_rows(&[s_factual, s_counter])?.transpose()?;
    logits.log_softmax(tau)?.pick(&vec![0; rows])?.mean()?.neg()
}

/// Closed form of the two-term InfoNCE for given similarities.
pub fn cl_loss_value(s_factual: f64, s_counter: f64, tau: f64) -> f64 {
    let a = s_factual / tau;
    let b = s_counter / tau;
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln() - a
}

/// Loss components of one step; `total = ce + lambda * cl + l1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cl: f64,
    pub l1: f64,
    pub total: f64,
    pub lambda: f64,
    /// Per instance: true when no negative was available.
    pub cl_skipped: Vec<bool>,
}

impl LossBreakdown {
    pub fn new(ce: f64, cl: f64, l1: f64, lambda: f64, cl_skipped: Vec<bool>) -> Self {
        Self {
            ce,
            cl,
            l1,
            total: ce + lambda * cl + l1,
            lambda,
            cl_skipped,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.cl.is_finite() && self.l1.is_finite() && self.total.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn equal_cosines_are_uniform() {
        let e = Tensor::from_f64(&[3, 2], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let p = class_probabilities(&[1.0f64, 1.0], &e, 0.01).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn closed_form_two_classes() {
        let e = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = class_probabilities(&[1.0f64, 0.0], &e, 1.0).unwrap();
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
        let p2 = class_probabilities(&[2.0f64, 0.0], &e, 1.0).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn single_class_rejected() {
        let e = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        assert!(class_probabilities(&[1.0f64, 0.0], &e, 1.0).is_err());
    }

    #[test]
    fn ce_values() {
        assert!((ce_loss(&[0.5f64, 0.5], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce_loss(&[0.999_999f64, 0.000_001], 0).unwrap() < 1e-5);
    }

    #[test]
    fn cl_closed_forms() {
        assert!((cl_loss_value(0.3, 0.3, 0.01) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cl_loss_value(1.0, -1.0, 1.0) - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn cl_var_matches_closed_form() {
        let tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let vp = tape.constant(Tensor::from_f64(&[1, 2], &[-1.0, 0.0]).unwrap());
        let g = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let cl = cl_loss(v, vp, g, 1.0).unwrap().value().item();
        assert!((cl - cl_loss_value(1.0, -1.0, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown::new(0.5, 0.25, 0.1, 2.0, vec![false]);
        assert!((b.total - 1.1).abs() < 1e-12);
    }
}
