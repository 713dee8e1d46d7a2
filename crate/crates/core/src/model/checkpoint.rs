//! Checkpoint file: `{"config": {...}, "arrays": {name: {"shape": [r, c], "data": [...]}}}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub arrays: BTreeMap<String, ArrayRecord>,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(params: &Parameters<T>) -> Self {
        let arrays = params
            .named_arrays()
            .into_iter()
            .map(|(name, m)| {
                (
                    name,
                    ArrayRecord {
                        shape: m.shape().to_vec(),
                        data: m.data().iter().map(|v| v.to_f64_lossless()).collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            config: params.config.clone(),
            arrays,
        }
    }

    pub fn to_params<T: Scalar>(&self) -> Result<Parameters<T>> {
        let base = Parameters::<T>::init(
            &ModelConfig {
                adapter_rank: 0,
                ..self.config.clone()
            },
            0,
        )?;
        let mut params = base.with_adapters(self.config.adapter_rank, 0)?;
        let mut seen = 0;
        for (name, m) in params.named_arrays_mut() {
            let rec = self
                .arrays
                .get(&name)
                .ok_or_else(|| Error::Input(format!("checkpoint missing array {name}")))?;
            if rec.shape != m.shape() || rec.data.len() != m.data().len() {
                return Err(Error::Input(format!(
                    "array {name}: shape {:?} does not match expected {:?}",
                    rec.shape,
                    m.shape()
                )));
            }
            if rec.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("array {name} has non-finite entries")));
            }
            *m = Matrix::from_vec(
                m.rows(),
                m.cols(),
                rec.data.iter().map(|&v| T::lit(v)).collect(),
            );
            seen += 1;
        }
        if seen != self.arrays.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} arrays, model expects {seen}",
                self.arrays.len()
            )));
        }
        Ok(params)
    }
}

pub fn save_checkpoint<T: Scalar>(params: &Parameters<T>, path: impl AsRef<Path>) -> Result<()> {
    write_json(path, &Checkpoint::from_params(params))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Parameters<T>> {
    read_json::<Checkpoint>(path)?.to_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_value_exact() {
        let cfg = ModelConfig {
            vocab_size: 7,
            d_model: 4,
            d_expert: 3,
            n_layers: 2,
            n_experts: 3,
            top_k: 1,
            max_seq_len: 5,
            adapter_rank: 2,
        };
        let p = Parameters::<f64>::init(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&p, &path).unwrap();
        let q: Parameters<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let cfg = ModelConfig {
            vocab_size: 5,
            d_model: 2,
            d_expert: 2,
            n_layers: 1,
            n_experts: 2,
            top_k: 1,
            max_seq_len: 3,
            adapter_rank: 0,
        };
        let p = Parameters::<f64>::init(&cfg, 1).unwrap();
        let mut ck = Checkpoint::from_params(&p);
        ck.arrays.get_mut("head").unwrap().shape = vec![5, 2];
        assert!(ck.to_params::<f64>().is_err());
    }
}
