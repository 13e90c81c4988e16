//! Dense tensors and reverse-mode automatic differentiation.

mod element;
mod graph;
mod params;
mod tensor;

pub use element::Element;
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub(crate) use graph::{log_sum_exp, softmax_in_place};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range 0..{bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: input node #{node} (produced by {producer}) has non-finite values")]
    NonFinite {
        op: &'static str,
        node: usize,
        producer: &'static str,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Numerically stable softmax of a plain vector.
pub fn softmax<T: Element>(logits: &[T]) -> Result<Vec<T>, NumError> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NumError::NonFinite {
            op: "softmax",
            node: 0,
            producer: "input",
        });
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy_from_logits<T: Element>(logits: &[T], label: usize) -> Result<f64, NumError> {
    if label >= logits.len() {
        return Err(NumError::Index {
            op: "cross_entropy",
            index: label,
            bound: logits.len(),
        });
    }
    Ok((log_sum_exp(logits) - logits[label]).as_f64().max(0.0))
}

#[cfg(test)]
mod tests;
