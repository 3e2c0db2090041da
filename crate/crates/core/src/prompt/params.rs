use rand::Rng;

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The shared learnable context rows `p`, `[L x d_e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPrompt<S> {
    pub rows: Parameter<S>,
}

impl<S: Scalar> ContextPrompt<S> {
    pub fn init<R: Rng + ?Sized>(len: usize, d_e: usize, std: f64, rng: &mut R) -> Result<Self> {
        if len == 0 || d_e == 0 {
            return Err(Error::Parameter(format!(
                "context prompt needs positive shape, got {len}x{d_e}"
            )));
        }
        Ok(Self {
            rows: Parameter::learnable("context", Tensor::randn(&[len, d_e], std, rng)),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.value.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Instance-conditional shift `d_v -> max(1, d_v/16) -> d_e` with a relu.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaNet<S> {
    pub w1: Parameter<S>,
    pub b1: Parameter<S>,
    pub w2: Parameter<S>,
    pub b2: Parameter<S>,
}

pub fn meta_hidden(d_v: usize) -> usize {
    (d_v / 16).max(1)
}

impl<S: Scalar> MetaNet<S> {
    /// First layer `N(0, 1/d_v)`, second layer and biases zero, so the
    /// initial shift is exactly zero.
    pub fn init<R: Rng + ?Sized>(d_v: usize, d_e: usize, rng: &mut R) -> Self {
        let h = meta_hidden(d_v);
        let std = 1.0 / (d_v as f64).sqrt();
        Self {
            w1: Parameter::learnable("meta.w1", Tensor::randn(&[d_v, h], std, rng)),
            b1: Parameter::learnable("meta.b1", Tensor::zeros(&[h])),
            w2: Parameter::learnable("meta.w2", Tensor::zeros(&[h, d_e])),
            b2: Parameter::learnable("meta.b2", Tensor::zeros(&[d_e])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.value.len()
    }
}

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams<S> {
    pub context: ContextPrompt<S>,
    pub meta: Option<MetaNet<S>>,
}

/// Parameters placed on one tape.
#[derive(Clone, Copy)]
pub struct BoundPrompt<'t, S: Scalar> {
    pub context: Var<'t, S>,
    pub meta: Option<[Var<'t, S>; 4]>,
}

impl<S: Scalar> PromptParams<S> {
    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut out = vec![&self.context.rows];
        if let Some(m) = &self.meta {
            out.extend([&m.w1, &m.b1, &m.w2, &m.b2]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut out = vec![&mut self.context.rows];
        if let Some(m) = &mut self.meta {
            out.extend([&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2]);
        }
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> BoundPrompt<'t, S> {
        BoundPrompt {
            context: self.context.rows.bind(tape),
            meta: self
                .meta
                .as_ref()
                .map(|m| [m.w1.bind(tape), m.b1.bind(tape), m.w2.bind(tape), m.b2.bind(tape)]),
        }
    }

    pub fn cast<T: Scalar>(&self) -> PromptParams<T> {
        PromptParams {
            context: ContextPrompt {
                rows: self.context.rows.cast(),
            },
            meta: self.meta.as_ref().map(|m| MetaNet {
                w1: m.w1.cast(),
                b1: m.b1.cast(),
                w2: m.w2.cast(),
                b2: m.b2.cast(),
            }),
        }
    }

    /// Hash over all parameter bits.
    pub fn checksum(&self) -> u64 {
        self.params()
            .iter()
            .fold(0u64, |h, p| h.rotate_left(7) ^ p.value.checksum())
    }
}

impl<'t, S: Scalar> BoundPrompt<'t, S> {
    /// `pi = M(v)` for each row of `features`; `None` when the meta-net is off.
    pub fn meta_shift(&self, features: Var<'t, S>) -> Result<Option<Var<'t, S>>> {
        let Some([w1, b1, w2, b2]) = self.meta else {
            return Ok(None);
        };
        let h = features.matmul(&w1)?.add(&b1)?.relu()?;
        Ok(Some(h.matmul(&w2)?.add(&b2)?))
    }

    /// All bound leaves, in `PromptParams::params` order.
    pub fn vars(&self) -> Vec<Var<'t, S>> {
        let mut out = vec![self.context];
        if let Some(m) = self.meta {
            out.extend(m);
        }
        out
    }
}
