//! Routing-aligned fine-tuning: the restricted KL alignment loss, the combined
//! objective with ci-only gating, the training loop and routing steering.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{selection_rate, SelectionMode};
use crate::model::{
    backward, cross_entropy, cross_entropy_with_grad, decode_with_bias, forward, forward_cached,
    next_token_targets, Decoded, Parameters, RouterBias,
};
use crate::optim::{linear_schedule, warmup_steps, Adam, AdamConfig};
use crate::routing::{seq_routing_dist, teacher_force_trace, ReferenceStore, TaskExpertMap};
use crate::scalar::Scalar;
use crate::synth::ParallelExample;
use crate::taxonomy::TaxonomyLabel;
use crate::tensor::Matrix;

/// Each flag changes exactly one design dimension of the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the alignment term (plain SFT).
    pub no_align: bool,
    /// Align the full expert distribution instead of the task-expert subset.
    pub no_task_experts: bool,
    /// Align every training example, not only ci ones.
    pub no_ci_filter: bool,
    /// Align at every layer instead of the middle layers.
    pub all_layers: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub adapter_rank: usize,
    pub epsilon_kl: f64,
    pub ablation: Ablation,
    /// Steps between eval-monitor records; 0 logs only the final step.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            k: 8,
            epochs: 3,
            batch_size: 16,
            lr: 1e-3,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            seed: 0,
            adapter_rank: 8,
            epsilon_kl: 1e-8,
            ablation: Ablation::default(),
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon_kl > 0.0 && self.epsilon_kl <= 1e-6) {
            return Err(Error::Config(format!(
                "epsilon_kl must lie in (0, 1e-6], got {}",
                self.epsilon_kl
            )));
        }
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::Config("K and batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Weight actually applied to the alignment term.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.no_align {
            0.0
        } else {
            self.lambda
        }
    }
}

/// `q` restricted to `experts` and renormalized. When the restricted mass is
/// below `eps` the uniform distribution over the set is returned and the flag
/// is raised.
pub fn restrict_renormalize<T: Scalar>(
    q: &[T],
    experts: &[usize],
    eps: f64,
) -> Result<(Vec<T>, bool)> {
    if experts.is_empty() {
        return Err(Error::Input("empty expert set".into()));
    }
    let mass: T = experts.iter().map(|&e| q[e]).sum();
    if mass.to_f64_lossless() < eps {
        let u = T::one() / T::from_usize(experts.len()).unwrap();
        return Ok((vec![u; experts.len()], true));
    }
    Ok((experts.iter().map(|&e| q[e] / mass).collect(), false))
}

/// One alignment term: reference and live routing of one example at one layer.
pub struct AlignTerm<'a, T> {
    /// Frozen full-simplex reference.
    pub reference: &'a [f64],
    /// Live full-simplex target routing.
    pub live: &'a [T],
    pub experts: &'a [usize],
}

/// `KL(p̃_ref ‖ q̃_live)` on the restricted simplex with the live side floored
/// at `eps` and renormalized, plus `∂KL/∂live` (full width) and whether either
/// side fell back to uniform.
pub fn kl_term<T: Scalar>(term: &AlignTerm<'_, T>, eps: f64) -> Result<(T, Vec<T>, bool)> {
    let refv: Vec<T> = term.reference.iter().map(|&v| T::lit(v)).collect();
    let (p, fb_ref) = restrict_renormalize(&refv, term.experts, eps)?;
    let (qt, fb_live) = restrict_renormalize(term.live, term.experts, eps)?;
    let e = T::lit(eps);
    let r: Vec<T> = qt.iter().map(|&v| v.max(e)).collect();
    let rs: T = r.iter().copied().sum();
    let t: Vec<T> = r.iter().map(|&v| v / rs).collect();
    let mut kl = T::zero();
    for (&pi, &ti) in p.iter().zip(&t) {
        if pi > T::zero() {
            kl += pi * (pi.ln() - ti.ln());
        }
    }
    let mut grad = vec![T::zero(); term.live.len()];
    if !fb_live {
        // back through normalization, floor and restriction
        let g: Vec<T> = p.iter().zip(&t).map(|(&pi, &ti)| -pi / ti).collect();
        let gt: T = g.iter().zip(&t).map(|(&a, &b)| a * b).sum();
        let dr: Vec<T> = g
            .iter()
            .zip(&qt)
            .map(|(&gi, &qi)| if qi > e { (gi - gt) / rs } else { T::zero() })
            .collect();
        let dq: T = dr.iter().zip(&qt).map(|(&a, &b)| a * b).sum();
        let mass: T = term.experts.iter().map(|&x| term.live[x]).sum();
        for (j, &x) in term.experts.iter().enumerate() {
            grad[x] = (dr[j] - dq) / mass;
        }
    }
    Ok((kl, grad, fb_ref || fb_live))
}

/// Alignment loss: mean over examples of the sum over layers of the restricted
/// KL. `items[i]` lists the terms of example `i`. Empty input gives 0.
pub fn kl_align_loss<T: Scalar>(items: &[Vec<AlignTerm<'_, T>>], eps: f64) -> Result<T> {
    if items.is_empty() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for terms in items {
        for term in terms {
            total += kl_term(term, eps)?.0;
        }
    }
    Ok(total / T::from_usize(items.len()).unwrap())
}

/// A fine-tuning example: target prompt, supervised response, and whether it
/// receives the alignment term.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    pub align: bool,
}

/// Target-language training examples; ci examples (or all, without the
/// filter) carry the alignment flag.
pub fn train_examples(dataset: &[ParallelExample], no_ci_filter: bool) -> Vec<TrainExample> {
    dataset
        .iter()
        .map(|ex| TrainExample {
            id: ex.id.clone(),
            prompt: ex.prompt_tgt.clone(),
            response: ex.gold_response.clone(),
            align: no_ci_filter || ex.label == Some(TaxonomyLabel::Ci),
        })
        .collect()
}

/// Source-side references for every example, computed from `params` by
/// teacher forcing the Stage-1 source response (the gold response when none
/// was recorded).
pub fn references_for_all<T: Scalar>(
    params: &Parameters<T>,
    dataset: &[ParallelExample],
    layers: &[usize],
) -> Result<ReferenceStore> {
    let mut store = ReferenceStore::new();
    for ex in dataset {
        let resp = match &ex.response_src {
            Some(r) if !r.is_empty() => r,
            _ => &ex.gold_response,
        };
        let d = seq_routing_dist(&teacher_force_trace(params, &ex.prompt_src, resp)?)?;
        store.insert(
            ex.id.clone(),
            layers
                .iter()
                .map(|&l| (l, d.layer(l).iter().map(|v| v.to_f64_lossless()).collect()))
                .collect(),
        );
    }
    Ok(store)
}

/// Layers and expert sets the alignment term acts on under `ablation`.
pub fn align_scope(
    map: &TaskExpertMap,
    n_experts: usize,
    ablation: &Ablation,
) -> Vec<(usize, Vec<usize>)> {
    map.layers(ablation.all_layers)
        .into_iter()
        .filter_map(|l| {
            let set = if ablation.no_task_experts {
                (0..n_experts).collect()
            } else {
                map.expert_ids(l)
            };
            (!set.is_empty()).then_some((l, set))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    pub total: T,
    pub ce: T,
    pub align: T,
    /// Examples that contributed an alignment term.
    pub n_align: usize,
    pub fallbacks: usize,
}

/// `L_CE + λ·L_align` over a batch. `L_CE` is the mean of per-example response
/// NLL means; `L_align` is the mean over aligned examples. When `grads` is
/// given the gradient of the total is accumulated into it. With an effective
/// λ of zero the alignment term is reported but neither added nor
/// differentiated.
pub fn combined_loss<T: Scalar>(
    params: &Parameters<T>,
    batch: &[&TrainExample],
    scope: &[(usize, Vec<usize>)],
    refs: &ReferenceStore,
    cfg: &TrainConfig,
    mut grads: Option<&mut Parameters<T>>,
) -> Result<LossParts<T>> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let lambda = cfg.effective_lambda();
    let wb = T::one() / T::from_usize(batch.len()).unwrap();
    let aligned: Vec<&&TrainExample> = batch
        .iter()
        .filter(|ex| ex.align && !scope.is_empty() && refs.contains_key(&ex.id))
        .collect();
    if let Some(ex) = batch
        .iter()
        .find(|ex| ex.align && !scope.is_empty() && !refs.contains_key(&ex.id))
    {
        return Err(Error::IdMismatch(format!(
            "no reference routing stored for {}",
            ex.id
        )));
    }
    let wa = if aligned.is_empty() {
        T::zero()
    } else {
        T::one() / T::from_usize(aligned.len()).unwrap()
    };
    let n_layers = params.config.n_layers;
    let n_experts = params.config.n_experts;
    let (mut ce, mut align, mut fallbacks) = (T::zero(), T::zero(), 0usize);
    for ex in batch {
        if ex.response.is_empty() {
            return Err(Error::EmptyMask);
        }
        let seq: Vec<u32> = ex.prompt.iter().chain(&ex.response).copied().collect();
        let (targets, mask) = next_token_targets(&seq, ex.prompt.len());
        let (logits, cache) = forward_cached(params, &seq, None)?;
        let (l_ce, dlogits) = cross_entropy_with_grad(&logits, &targets, &mask, wb)?;
        ce += l_ce * wb;

        let mut drouter: Option<Vec<Matrix<T>>> = None;
        if ex.align && !scope.is_empty() {
            let g: Vec<usize> = (ex.prompt.len()..seq.len()).collect();
            let inv_g = T::one() / T::from_usize(g.len()).unwrap();
            let mut dr: Vec<Matrix<T>> = (0..n_layers).map(|_| Matrix::zeros(0, 0)).collect();
            let per_layer = &refs[&ex.id];
            for (l, set) in scope {
                let reference = per_layer.get(l).ok_or_else(|| {
                    Error::IdMismatch(format!("{}: no reference at layer {l}", ex.id))
                })?;
                let probs = cache.router_probs(*l);
                let mut live = vec![T::zero(); n_experts];
                for &t in &g {
                    for (a, &p) in live.iter_mut().zip(probs.row(t)) {
                        *a += p;
                    }
                }
                live.iter_mut().for_each(|v| *v *= inv_g);
                let term = AlignTerm {
                    reference,
                    live: &live,
                    experts: set,
                };
                let (kl, dq, fb) = kl_term(&term, cfg.epsilon_kl)?;
                align += kl * wa;
                fallbacks += usize::from(fb);
                if lambda > 0.0 {
                    let scale = T::lit(lambda) * wa * inv_g;
                    let mut m = Matrix::zeros(seq.len(), n_experts);
                    for &t in &g {
                        for (o, &d) in m.row_mut(t).iter_mut().zip(&dq) {
                            *o = d * scale;
                        }
                    }
                    dr[*l] = m;
                }
            }
            if lambda > 0.0 {
                drouter = Some(dr);
            }
        }
        if let Some(gr) = grads.as_deref_mut() {
            backward(params, &cache, &dlogits, drouter.as_deref(), gr);
        }
    }
    let total = if lambda > 0.0 {
        ce + T::lit(lambda) * align
    } else {
        ce
    };
    Ok(LossParts {
        total,
        ce,
        align,
        n_align: aligned.len(),
        fallbacks,
    })
}

/// Held-out target-language examples scored by teacher forcing at eval steps.
pub struct EvalMonitor<'a> {
    pub examples: &'a [ParallelExample],
}

impl EvalMonitor<'_> {
    /// Mean response CE and task-expert selection rate on the target side.
    pub fn evaluate<T: Scalar>(
        &self,
        params: &Parameters<T>,
        map: &TaskExpertMap,
    ) -> Result<(f64, f64)> {
        let mut ce = 0.0;
        let mut traces = Vec::with_capacity(self.examples.len());
        for ex in self.examples {
            let seq: Vec<u32> = ex
                .prompt_tgt
                .iter()
                .chain(&ex.gold_response)
                .copied()
                .collect();
            let (logits, trace) = forward(params, &seq, true)?;
            let (targets, mask) = next_token_targets(&seq, ex.prompt_tgt.len());
            ce += cross_entropy(&logits, &targets, &mask)?.to_f64_lossless();
            let mut trace = trace.expect("capture requested");
            trace.generated_positions = (ex.prompt_tgt.len()..seq.len()).collect();
            traces.push(trace);
        }
        let rate = selection_rate(
            &traces,
            map,
            params.config.top_k,
            false,
            SelectionMode::Slots,
        );
        Ok((ce / self.examples.len().max(1) as f64, rate))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_align: f64,
    pub eval_ce: Option<f64>,
    pub selection_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepMetrics>,
    /// Mean training CE of each epoch.
    pub epoch_ce: Vec<f64>,
    pub fallback_events: usize,
}

/// Fine-tunes `base` on the target-language side of `dataset`. References for
/// ci examples come from `map`; without the ci filter they are recomputed for
/// every example from `base`.
pub fn finetune<T: Scalar>(
    base: &Parameters<T>,
    dataset: &[ParallelExample],
    map: &TaskExpertMap,
    cfg: &TrainConfig,
    monitor: Option<&EvalMonitor<'_>>,
) -> Result<(Parameters<T>, RunMetrics)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut params = if cfg.adapter_rank > 0 {
        base.with_adapters(cfg.adapter_rank, cfg.seed)?
    } else {
        base.clone()
    };
    let scope = align_scope(map, params.config.n_experts, &cfg.ablation);
    let refs = if cfg.ablation.no_ci_filter {
        let layers: Vec<usize> = scope.iter().map(|(l, _)| *l).collect();
        references_for_all(base, dataset, &layers)?
    } else {
        map.references.clone()
    };
    let examples = train_examples(dataset, cfg.ablation.no_ci_filter);
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = warmup_steps(total, cfg.warmup_ratio);
    let mut adam = Adam::for_params(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut metrics = RunMetrics::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_ce = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut grads = params.zeros_like();
            let parts = combined_loss(&params, &batch, &scope, &refs, cfg, Some(&mut grads))?;
            let total_loss = parts.total.to_f64_lossless();
            if !total_loss.is_finite() {
                return Err(Error::NonFiniteLoss(total_loss));
            }
            metrics.fallback_events += parts.fallbacks;
            adam.step(
                &mut params,
                &grads,
                cfg.lr * linear_schedule(step, total, warmup),
            );
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss(f64::NAN));
            }
            epoch_ce += parts.ce.to_f64_lossless();
            step += 1;
            let log_eval = step == total || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
            let (eval_ce, rate) = match monitor {
                Some(m) if log_eval => {
                    let (c, r) = m.evaluate(&params, map)?;
                    (Some(c), Some(r))
                }
                _ => (None, None),
            };
            metrics.steps.push(StepMetrics {
                step,
                epoch,
                loss_ce: parts.ce.to_f64_lossless(),
                loss_align: parts.align.to_f64_lossless(),
                eval_ce,
                selection_rate: rate,
            });
        }
        metrics.epoch_ce.push(epoch_ce / steps_per_epoch as f64);
        log::info!(
            "epoch {} mean train CE {:.4}",
            epoch + 1,
            metrics.epoch_ce.last().copied().unwrap_or_default()
        );
    }
    Ok((params, metrics))
}

/// Router-logit bias adding `delta` to the task experts of each middle layer.
pub fn steering_bias<T: Scalar>(
    map: &TaskExpertMap,
    n_layers: usize,
    n_experts: usize,
    delta: f64,
) -> RouterBias<T> {
    (0..n_layers)
        .map(|l| {
            let set = map.expert_ids(l);
            if !map.mid_layers.contains(l) || set.is_empty() {
                return Vec::new();
            }
            let mut b = vec![T::zero(); n_experts];
            for e in set {
                b[e] = T::lit(delta);
            }
            b
        })
        .collect()
}

/// Greedy decoding with task experts' router logits raised by `delta` in the
/// middle layers. Parameters are untouched.
pub fn routing_steer_decode<T: Scalar>(
    params: &Parameters<T>,
    prompt: &[u32],
    map: &TaskExpertMap,
    delta: f64,
    max_new: usize,
) -> Result<Decoded<T>> {
    let bias = steering_bias(map, params.config.n_layers, params.config.n_experts, delta);
    decode_with_bias(params, prompt, max_new, Some(&bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restrict_cases() {
        let (q, fb) = restrict_renormalize(&[0.2f64, 0.3, 0.5], &[0, 1], 1e-8).unwrap();
        assert!(!fb);
        assert!((q[0] - 0.4).abs() < 1e-15 && (q[1] - 0.6).abs() < 1e-15);
        let (q, _) = restrict_renormalize(&[0.2, 0.3, 0.5], &[0, 1, 2], 1e-8).unwrap();
        assert_eq!(q, vec![0.2, 0.3, 0.5]);
        let (q, fb) = restrict_renormalize(&[0.0, 0.0, 1.0], &[0, 1], 1e-8).unwrap();
        assert!(fb);
        assert_eq!(q, vec![0.5, 0.5]);
        assert!(restrict_renormalize(&[1.0], &[], 1e-8).is_err());
    }

    #[test]
    fn kl_hand_case() {
        let term = AlignTerm {
            reference: &[0.8, 0.2],
            live: &[0.5f64, 0.5],
            experts: &[0, 1],
        };
        let kl = kl_align_loss(&[vec![term]], 1e-8).unwrap();
        let oracle = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((kl - oracle).abs() < 1e-12);
        assert!((kl - 0.192745).abs() < 1e-6);
    }

    #[test]
    fn kl_identity_and_zero_reference_entry() {
        let same = AlignTerm {
            reference: &[0.3, 0.7],
            live: &[0.3f64, 0.7],
            experts: &[0, 1],
        };
        assert!(kl_align_loss(&[vec![same]], 1e-8).unwrap().abs() < 1e-15);
        let zero = AlignTerm {
            reference: &[1.0, 0.0],
            live: &[0.5f64, 0.5],
            experts: &[0, 1],
        };
        assert!((kl_align_loss(&[vec![zero]], 1e-8).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(kl_align_loss::<f64>(&[], 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn kl_term_gradient_matches_finite_difference() {
        let reference = [0.1, 0.4, 0.2, 0.3];
        let live = [0.15f64, 0.25, 0.35, 0.25];
        let experts = [0usize, 2, 3];
        let f = |q: &[f64]| {
            kl_term(
                &AlignTerm {
                    reference: &reference,
                    live: q,
                    experts: &experts,
                },
                1e-8,
            )
            .unwrap()
            .0
        };
        let (_, grad, _) = kl_term(
            &AlignTerm {
                reference: &reference,
                live: &live,
                experts: &experts,
            },
            1e-8,
        )
        .unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut a = live;
            let mut b = live;
            a[j] += h;
            b[j] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            assert!(
                (num - grad[j]).abs() < 1e-7,
                "entry {j}: {num} vs {}",
                grad[j]
            );
        }
        assert_eq!(grad[1], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epsilon_kl: 1e-3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
