use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Low-rank adapter pairs on one expert's projections. The effective weight of
/// a projection `W` is `W + A·B`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertAdapter<T> {
    pub up_a: Matrix<T>,
    pub up_b: Matrix<T>,
    pub down_a: Matrix<T>,
    pub down_b: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert<T> {
    /// `d_model × d_expert`
    pub up: Matrix<T>,
    /// `d_expert × d_model`
    pub down: Matrix<T>,
    pub adapter: Option<ExpertAdapter<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    /// `d_model × n_experts`
    pub router: Matrix<T>,
    pub experts: Vec<Expert<T>>,
}

/// All trainable arrays of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    pub config: ModelConfig,
    pub tok_emb: Matrix<T>,
    pub pos_emb: Matrix<T>,
    pub layers: Vec<Layer<T>>,
    pub head: Matrix<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(z * scale)
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

impl<T: Scalar> Parameters<T> {
    /// Seeded initialization; a positive `adapter_rank` attaches zero-delta adapters.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.d_model;
        let scale = 1.0 / (d as f64).sqrt();
        let tok_emb = init.matrix(config.vocab_size, d, scale);
        let pos_emb = init.matrix(config.max_seq_len, d, scale);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                wq: init.matrix(d, d, scale),
                wk: init.matrix(d, d, scale),
                wv: init.matrix(d, d, scale),
                wo: init.matrix(d, d, scale),
                router: init.matrix(d, config.n_experts, scale),
                experts: (0..config.n_experts)
                    .map(|_| Expert {
                        up: init.matrix(d, config.d_expert, scale),
                        down: init.matrix(config.d_expert, d, scale),
                        adapter: None,
                    })
                    .collect(),
            })
            .collect();
        let head = init.matrix(d, config.vocab_size, scale);
        let mut params = Self {
            config: ModelConfig {
                adapter_rank: 0,
                ..config.clone()
            },
            tok_emb,
            pos_emb,
            layers,
            head,
        };
        if config.adapter_rank > 0 {
            params = params.with_adapters(config.adapter_rank, seed.wrapping_add(0x5eed))?;
        }
        Ok(params)
    }

    /// Returns a copy with fresh adapters of rank `rank` on every expert. The
    /// `A` factors are random and the `B` factors zero, so outputs are unchanged.
    /// Rank 0 strips adapters.
    pub fn with_adapters(&self, rank: usize, seed: u64) -> Result<Self> {
        let mut out = self.clone();
        out.config.adapter_rank = rank;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = self.config.d_model;
        let de = self.config.d_expert;
        let scale = 1.0 / (d as f64).sqrt();
        for layer in &mut out.layers {
            for expert in &mut layer.experts {
                expert.adapter = if rank == 0 {
                    None
                } else {
                    Some(ExpertAdapter {
                        up_a: init.matrix(d, rank, scale),
                        up_b: Matrix::zeros(rank, de),
                        down_a: init.matrix(de, rank, scale),
                        down_b: Matrix::zeros(rank, d),
                    })
                };
            }
        }
        Ok(out)
    }

    /// Same shapes, every entry zero (used as a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, m) in out.named_arrays_mut() {
            m.fill_zero();
        }
        out
    }

    pub fn named_arrays(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn.wq"), &layer.wq));
            out.push((format!("layers.{l}.attn.wk"), &layer.wk));
            out.push((format!("layers.{l}.attn.wv"), &layer.wv));
            out.push((format!("layers.{l}.attn.wo"), &layer.wo));
            out.push((format!("layers.{l}.router"), &layer.router));
            for (e, ex) in layer.experts.iter().enumerate() {
                out.push((format!("layers.{l}.experts.{e}.up"), &ex.up));
                out.push((format!("layers.{l}.experts.{e}.down"), &ex.down));
                if let Some(a) = &ex.adapter {
                    out.push((format!("layers.{l}.experts.{e}.up_lora_a"), &a.up_a));
                    out.push((format!("layers.{l}.experts.{e}.up_lora_b"), &a.up_b));
                    out.push((format!("layers.{l}.experts.{e}.down_lora_a"), &a.down_a));
                    out.push((format!("layers.{l}.experts.{e}.down_lora_b"), &a.down_b));
                }
            }
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.attn.wq"), &mut layer.wq));
            out.push((format!("layers.{l}.attn.wk"), &mut layer.wk));
            out.push((format!("layers.{l}.attn.wv"), &mut layer.wv));
            out.push((format!("layers.{l}.attn.wo"), &mut layer.wo));
            out.push((format!("layers.{l}.router"), &mut layer.router));
            for (e, ex) in layer.experts.iter_mut().enumerate() {
                out.push((format!("layers.{l}.experts.{e}.up"), &mut ex.up));
                out.push((format!("layers.{l}.experts.{e}.down"), &mut ex.down));
                if let Some(a) = &mut ex.adapter {
                    out.push((format!("layers.{l}.experts.{e}.up_lora_a"), &mut a.up_a));
                    out.push((format!("layers.{l}.experts.{e}.up_lora_b"), &mut a.up_b));
                    out.push((format!("layers.{l}.experts.{e}.down_lora_a"), &mut a.down_a));
                    out.push((format!("layers.{l}.experts.{e}.down_lora_b"), &mut a.down_b));
                }
            }
        }
        out.push(("head".to_string(), &mut self.head));
        out
    }

    /// Whether `name` is trainable under the current adapter setting.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.config.adapter_rank == 0 || is_adapter_array(name)
    }

    pub fn is_finite(&self) -> bool {
        self.named_arrays().iter().all(|(_, m)| m.is_finite())
    }

    pub fn n_parameters(&self) -> usize {
        self.named_arrays()
            .iter()
            .map(|(_, m)| m.data().len())
            .sum()
    }

    /// Converts every array to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let conv = |m: &Matrix<T>| {
            Matrix::from_vec(
                m.rows(),
                m.cols(),
                m.data()
                    .iter()
                    .map(|v| U::lit(v.to_f64_lossless()))
                    .collect(),
            )
        };
        Parameters {
            config: self.config.clone(),
            tok_emb: conv(&self.tok_emb),
            pos_emb: conv(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    wq: conv(&l.wq),
                    wk: conv(&l.wk),
                    wv: conv(&l.wv),
                    wo: conv(&l.wo),
                    router: conv(&l.router),
                    experts: l
                        .experts
                        .iter()
                        .map(|e| Expert {
                            up: conv(&e.up),
                            down: conv(&e.down),
                            adapter: e.adapter.as_ref().map(|a| ExpertAdapter {
                                up_a: conv(&a.up_a),
                                up_b: conv(&a.up_b),
                                down_a: conv(&a.down_a),
                                down_b: conv(&a.down_b),
                            }),
                        })
                        .collect(),
                })
                .collect(),
            head: conv(&self.head),
        }
    }
}

pub fn is_adapter_array(name: &str) -> bool {
    name.contains("_lora_")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            d_expert: 6,
            n_layers: 2,
            n_experts: 3,
            top_k: 2,
            max_seq_len: 12,
            adapter_rank: 0,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Parameters::<f64>::init(&small(), 7).unwrap();
        let b = Parameters::<f64>::init(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = Parameters::<f64>::init(&small(), 8).unwrap();
        let differs = a
            .named_arrays()
            .iter()
            .zip(c.named_arrays())
            .any(|((_, x), (_, y))| x.data() != y.data());
        assert!(differs);
    }

    #[test]
    fn adapters_have_zero_b_factor_and_restrict_trainable_set() {
        let mut cfg = small();
        cfg.adapter_rank = 4;
        let p = Parameters::<f64>::init(&cfg, 1).unwrap();
        let ad = p.layers[0].experts[0].adapter.as_ref().unwrap();
        assert!(ad.up_b.data().iter().all(|&v| v == 0.0));
        assert!(ad.down_b.data().iter().all(|&v| v == 0.0));
        assert!(p.is_trainable("layers.0.experts.0.up_lora_a"));
        assert!(!p.is_trainable("layers.0.router"));
        assert!(p.is_finite());
    }

    #[test]
    fn shapes_follow_config() {
        let p = Parameters::<f32>::init(&small(), 3).unwrap();
        assert_eq!(p.tok_emb.shape(), [10, 8]);
        assert_eq!(p.layers[1].router.shape(), [8, 3]);
        assert_eq!(p.layers[1].experts[2].down.shape(), [6, 8]);
        assert_eq!(p.head.shape(), [8, 10]);
    }
}
