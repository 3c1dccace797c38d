use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, row-major parameter tensor as stored in artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(with = "crate::artifact::f64_b64")]
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Borrowed view of one parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Anything holding trainable tensors in a fixed order.
pub trait ParamSet {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.fill(0.0);
        }
    }

    fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.params()
            .into_iter()
            .map(|p| NamedTensor {
                name: p.name,
                shape: p.shape,
                values: p.data.to_vec(),
            })
            .collect()
    }

    /// Overwrite parameters from tensors whose names and shapes must match this layout.
    fn load_named_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let layout: Vec<(String, Vec<usize>)> = self.params().into_iter().map(|p| (p.name, p.shape)).collect();
        if layout.len() != tensors.len() {
            return Err(Error::Artifact(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(tensors) {
            if *name != t.name || *shape != t.shape {
                return Err(Error::Artifact(format!(
                    "parameter `{}` {:?} does not match stored `{}` {:?}",
                    name, shape, t.name, t.shape
                )));
            }
        }
        for (dst, t) in self.params_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(&t.values);
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

pub(crate) fn matrix_ref<'a>(prefix: &str, name: &str, m: &'a Array2<f64>) -> ParamRef<'a> {
    ParamRef {
        name: format!("{prefix}.{name}"),
        shape: m.shape().to_vec(),
        data: m.as_slice().expect("parameters are contiguous"),
    }
}

pub(crate) fn vector_ref<'a>(prefix: &str, name: &str, v: &'a Array1<f64>) -> ParamRef<'a> {
    ParamRef {
        name: format!("{prefix}.{name}"),
        shape: vec![v.len()],
        data: v.as_slice().expect("parameters are contiguous"),
    }
}
