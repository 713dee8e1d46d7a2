#![allow(dead_code)]

use std::collections::BTreeMap;

use moe_align::model::{ModelConfig, Parameters};
use moe_align::routing::{LayerRange, ReferenceStore, ScoredExpert, TaskExpertMap};
use moe_align::synth::ParallelExample;
use moe_align::taxonomy::TaxonomyLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 2 layers, 4 experts, d_model 16.
pub fn small_config(adapter_rank: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 16,
        d_expert: 16,
        n_layers: 2,
        n_experts: 4,
        top_k: 2,
        max_seq_len: 16,
        adapter_rank,
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        d_expert: 8,
        n_layers: 4,
        n_experts: 4,
        top_k: 2,
        max_seq_len: 24,
        adapter_rank: 0,
    }
}

pub fn params(cfg: &ModelConfig, seed: u64) -> Parameters<f64> {
    Parameters::init(cfg, seed).unwrap()
}

pub fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn example(
    id: &str,
    prompt_src: Vec<u32>,
    prompt_tgt: Vec<u32>,
    response: Vec<u32>,
    label: TaxonomyLabel,
) -> ParallelExample {
    ParallelExample {
        id: id.to_string(),
        prompt_src,
        prompt_tgt,
        gold_answer: vec![response[0]],
        gold_response: response.clone(),
        response_src: Some(response),
        response_tgt: None,
        label: Some(label),
        ppl_src: None,
        ppl_tgt: None,
    }
}

/// Map with the given expert sets per layer (all layers), middle layers
/// `mid`, and random references for `ref_ids` over every layer.
pub fn map_with(
    sets: &[Vec<usize>],
    mid: LayerRange,
    ref_ids: &[&str],
    n_experts: usize,
    seed: u64,
) -> TaskExpertMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let experts = sets
        .iter()
        .enumerate()
        .map(|(l, s)| {
            (
                l,
                s.iter()
                    .map(|&id| ScoredExpert { id, delta: 0.1 })
                    .collect(),
            )
        })
        .collect();
    let mut references = ReferenceStore::new();
    for id in ref_ids {
        let per_layer: BTreeMap<usize, Vec<f64>> = (0..sets.len())
            .map(|l| (l, random_dist(&mut rng, n_experts)))
            .collect();
        references.insert(id.to_string(), per_layer);
    }
    TaskExpertMap {
        mid_layers: mid,
        experts,
        references,
    }
}

/// Brute force over all contiguous segments strictly below the median:
/// longest wins, earliest on ties.
pub fn middle_layers_oracle(profile: &[f64]) -> Option<(usize, usize)> {
    let mut v = profile.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let med = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    let mut best: Option<(usize, usize)> = None;
    for s in 0..n {
        for e in s..n {
            if profile[s..=e].iter().all(|&x| x < med) {
                let better = match best {
                    None => true,
                    Some((bs, be)) => e - s > be - bs,
                };
                if better {
                    best = Some((s, e));
                }
            }
        }
    }
    best
}
