use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Named tensor owned by a model.
///
/// Frozen parameters may still carry gradients for flow-through, but no
/// optimizer ever updates them.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub frozen: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn learnable(name: impl Into<String>, value: Tensor<S>) -> Self {
        Self {
            name: name.into(),
            value,
            frozen: false,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<S>) -> Self {
        Self {
            name: name.into(),
            value,
            frozen: true,
        }
    }

    /// Places the current value on `tape`; learnable parameters become leaves.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Var<'t, S> {
        if self.frozen {
            tape.constant(self.value.clone())
        } else {
            tape.leaf(self.value.clone())
        }
    }

    pub fn cast<T: Scalar>(&self) -> Parameter<T> {
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            frozen: self.frozen,
        }
    }
}

/// Frozen weight shared between tapes without copying.
#[derive(Debug, Clone)]
pub struct FrozenWeight<S>(Arc<Tensor<S>>);

impl<S: Scalar> FrozenWeight<S> {
    pub fn new(t: Tensor<S>) -> Self {
        Self(Arc::new(t))
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    /// `track_grad` lets gradients be computed for inspection; the weight is
    /// still never updated.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, track_grad: bool) -> Var<'t, S> {
        tape.input_rc(self.0.clone(), track_grad)
    }

    pub fn cast<T: Scalar>(&self) -> FrozenWeight<T> {
        FrozenWeight::new(self.0.cast())
    }
}
