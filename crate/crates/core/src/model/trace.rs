use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{top_k_indices, Matrix};

/// Per-layer, per-token router distributions of one sequence plus the set of
/// positions that were generated (the response span).
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace<T> {
    /// One `seq_len × n_experts` matrix per layer.
    pub layers: Vec<Matrix<T>>,
    pub generated_positions: Vec<usize>,
}

impl<T: Scalar> RoutingTrace<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, Matrix::rows)
    }

    pub fn n_experts(&self) -> usize {
        self.layers.first().map_or(0, Matrix::cols)
    }

    pub fn dist(&self, layer: usize, t: usize) -> &[T] {
        self.layers[layer].row(t)
    }

    /// Experts the forward pass would select at (`layer`, `t`) for a given `top_k`.
    pub fn selected(&self, layer: usize, t: usize, top_k: usize) -> Vec<usize> {
        top_k_indices(self.dist(layer, t), top_k)
    }

    /// Checks the simplex and index invariants.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let n = self.seq_len();
        for (l, m) in self.layers.iter().enumerate() {
            if m.rows() != n {
                return Err(Error::Input(format!(
                    "layer {l} has {} rows, expected {n}",
                    m.rows()
                )));
            }
            for t in 0..n {
                let row = m.row(t);
                let s: f64 = row.iter().map(|v| v.to_f64_lossless()).sum();
                if (s - 1.0).abs() > tol || row.iter().any(|&v| v < T::zero() || v > T::one()) {
                    return Err(Error::InvalidDistribution(format!(
                        "layer {l} token {t} sums to {s}"
                    )));
                }
            }
        }
        if let Some(&g) = self.generated_positions.iter().find(|&&g| g >= n) {
            return Err(Error::Input(format!(
                "generated position {g} outside sequence of {n}"
            )));
        }
        Ok(())
    }
}

/// Serializable form of a trace (`f64` values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub layers: Vec<Vec<Vec<f64>>>,
    pub generated_positions: Vec<usize>,
}

impl<T: Scalar> From<&RoutingTrace<T>> for TraceRecord {
    fn from(t: &RoutingTrace<T>) -> Self {
        TraceRecord {
            layers: t
                .layers
                .iter()
                .map(|m| {
                    (0..m.rows())
                        .map(|r| m.row(r).iter().map(|v| v.to_f64_lossless()).collect())
                        .collect()
                })
                .collect(),
            generated_positions: t.generated_positions.clone(),
        }
    }
}

impl TraceRecord {
    pub fn to_trace<T: Scalar>(&self) -> RoutingTrace<T> {
        RoutingTrace {
            layers: self
                .layers
                .iter()
                .map(|rows| {
                    let rows: Vec<Vec<T>> = rows
                        .iter()
                        .map(|r| r.iter().map(|&v| T::lit(v)).collect())
                        .collect();
                    Matrix::from_rows(&rows)
                })
                .collect(),
            generated_positions: self.generated_positions.clone(),
        }
    }
}
