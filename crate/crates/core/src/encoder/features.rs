use std::collections::HashSet;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Image features entering from outside; never differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<S> {
    ids: Vec<u64>,
    labels: Vec<u32>,
    dim: usize,
    data: Vec<S>,
}

impl<S: Scalar> FeatureSet<S> {
    /// Validates ids, dimensions and that every vector is finite and nonzero.
    pub fn new(ids: Vec<u64>, labels: Vec<u32>, dim: usize, data: Vec<S>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("feature dimension must be positive".into()));
        }
        if ids.len() != labels.len() || data.len() != ids.len() * dim {
            return Err(Error::dim(
                "features",
                format!(
                    "{} ids, {} labels, {} values for dim {dim}",
                    ids.len(),
                    labels.len(),
                    data.len()
                ),
            ));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if !seen.insert(id) {
                return Err(Error::Input(format!("duplicate record id {id}")));
            }
            let row = &data[i * dim..(i + 1) * dim];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("record {id} has a non-finite feature")));
            }
            if row.iter().all(|&x| x == S::zero()) {
                return Err(Error::Degenerate(format!("record {id} has a zero feature vector")));
            }
        }
        Ok(Self {
            ids,
            labels,
            dim,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn feature(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rejects a set whose width differs from the encoder's joint space.
    pub fn expect_dim(&self, d_v: usize) -> Result<()> {
        if self.dim != d_v {
            return Err(Error::dim(
                "features",
                format!("feature dim {} but encoder d_v {d_v}", self.dim),
            ));
        }
        Ok(())
    }

    /// `[index.len() x dim]` matrix of the selected records.
    pub fn gather(&self, index: &[usize]) -> Tensor<S> {
        let mut data = Vec::with_capacity(index.len() * self.dim);
        for &i in index {
            data.extend_from_slice(self.feature(i));
        }
        Tensor::new(vec![index.len(), self.dim], data).expect("gather shape")
    }

    /// Records at `index`, in that order.
    pub fn subset(&self, index: &[usize]) -> Self {
        Self {
            ids: index.iter().map(|&i| self.ids[i]).collect(),
            labels: index.iter().map(|&i| self.labels[i]).collect(),
            dim: self.dim,
            data: self.gather(index).into_data(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> FeatureSet<T> {
        FeatureSet {
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            dim: self.dim,
            data: self.data.iter().map(|x| T::lit(x.to_f64_lossy())).collect(),
        }
    }
}
