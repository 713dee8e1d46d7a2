//! Forward pass.
//!
//! Each block is pre-norm: `h = x + attn(rms(x))`, then
//! `y = h + Σ_{e ∈ topk} g_e · ffn_e(rms(h))`. The token mixer is one causal
//! softmax-attention head; the norm is a weightless RMS norm. The router is a
//! linear map followed by a softmax over all experts; the `top_k` largest
//! probabilities are selected (ties to the lower expert id) and renormalized
//! into gates. The captured routing distribution is the full softmax.

use super::params::{Expert, Parameters};
use super::trace::RoutingTrace;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, softmax, top_k_indices, Matrix};

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Additive router-logit bias per layer (`n_experts` entries, or empty for none).
pub type RouterBias<T> = Vec<Vec<T>>;

pub(crate) struct ExpertCache<T> {
    pub expert: usize,
    pub gate: T,
    pub pre: Vec<T>,
    pub act: Vec<T>,
    pub out: Vec<T>,
    pub up_mid: Option<Vec<T>>,
    pub down_mid: Option<Vec<T>>,
}

pub(crate) struct LayerCache<T> {
    pub a: Matrix<T>,
    pub a_inv: Vec<T>,
    pub x: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Row `t` holds attention weights over positions `0..=t`.
    pub att: Vec<Vec<T>>,
    pub ctx: Matrix<T>,
    pub h: Matrix<T>,
    pub u: Matrix<T>,
    pub u_inv: Vec<T>,
    pub probs: Matrix<T>,
    pub sel_sum: Vec<T>,
    pub routes: Vec<Vec<ExpertCache<T>>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<T> {
    pub(crate) tokens: Vec<u32>,
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) x_final: Matrix<T>,
    pub(crate) f: Matrix<T>,
    pub(crate) f_inv: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Full post-softmax routing distributions of layer `l` (`seq_len × n_experts`).
    pub fn router_probs(&self, l: usize) -> &Matrix<T> {
        &self.layers[l].probs
    }

    /// Experts selected for token `t` in layer `l`, in gate order.
    pub fn selected(&self, l: usize, t: usize) -> Vec<usize> {
        self.layers[l].routes[t].iter().map(|r| r.expert).collect()
    }

    /// Routing trace with every position marked as generated-free; callers set
    /// `generated_positions` themselves.
    pub fn trace(&self, generated_positions: Vec<usize>) -> RoutingTrace<T> {
        RoutingTrace {
            layers: self.layers.iter().map(|l| l.probs.clone()).collect(),
            generated_positions,
        }
    }
}

pub(crate) fn rms_norm<T: Scalar>(x: &[T]) -> (Vec<T>, T) {
    let n = T::lit(x.len() as f64);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    let inv = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
    (x.iter().map(|&v| v * inv).collect(), inv)
}

pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn check_tokens<T: Scalar>(params: &Parameters<T>, tokens: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token {t} out of range for vocab_size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn expert_forward<T: Scalar>(expert: &Expert<T>, u: &[T], idx: usize, gate: T) -> ExpertCache<T> {
    let mut pre = expert.up.vec_mul(u);
    let up_mid = expert.adapter.as_ref().map(|a| {
        let mid = a.up_a.vec_mul(u);
        a.up_b.vec_mul_acc(&mid, &mut pre);
        mid
    });
    let act: Vec<T> = pre.iter().map(|&z| silu(z)).collect();
    let mut out = expert.down.vec_mul(&act);
    let down_mid = expert.adapter.as_ref().map(|a| {
        let mid = a.down_a.vec_mul(&act);
        a.down_b.vec_mul_acc(&mid, &mut out);
        mid
    });
    ExpertCache {
        expert: idx,
        gate,
        pre,
        act,
        out,
        up_mid,
        down_mid,
    }
}

/// Runs the model over `tokens`, returning logits and the cache used by backprop.
pub fn forward_cached<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[u32],
    router_bias: Option<&RouterBias<T>>,
) -> Result<(Matrix<T>, ForwardCache<T>)> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let n = tokens.len();
    let d = cfg.d_model;
    let scale = T::one() / T::lit(d as f64).sqrt();

    let mut x = Matrix::zeros(n, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        for ((o, &e), &p) in row
            .iter_mut()
            .zip(params.tok_emb.row(tok as usize))
            .zip(params.pos_emb.row(t))
        {
            *o = e + p;
        }
    }

    let mut caches = Vec::with_capacity(cfg.n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let mut a = Matrix::zeros(n, d);
        let mut a_inv = Vec::with_capacity(n);
        for t in 0..n {
            let (row, inv) = rms_norm(x.row(t));
            a.row_mut(t).copy_from_slice(&row);
            a_inv.push(inv);
        }
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut v = Matrix::zeros(n, d);
        for t in 0..n {
            layer.wq.vec_mul_acc(a.row(t), q.row_mut(t));
            layer.wk.vec_mul_acc(a.row(t), k.row_mut(t));
            layer.wv.vec_mul_acc(a.row(t), v.row_mut(t));
        }
        let mut att = Vec::with_capacity(n);
        let mut ctx = Matrix::zeros(n, d);
        for t in 0..n {
            let scores: Vec<T> = (0..=t).map(|j| dot(q.row(t), k.row(j)) * scale).collect();
            let w = softmax(&scores);
            let c = ctx.row_mut(t);
            for (j, &wj) in w.iter().enumerate() {
                for (ci, &vj) in c.iter_mut().zip(v.row(j)) {
                    *ci += wj * vj;
                }
            }
            att.push(w);
        }
        let mut h = x.clone();
        for t in 0..n {
            layer.wo.vec_mul_acc(ctx.row(t), h.row_mut(t));
        }

        let mut u = Matrix::zeros(n, d);
        let mut u_inv = Vec::with_capacity(n);
        for t in 0..n {
            let (row, inv) = rms_norm(h.row(t));
            u.row_mut(t).copy_from_slice(&row);
            u_inv.push(inv);
        }
        let bias = router_bias.and_then(|b| b.get(l)).filter(|b| !b.is_empty());
        let mut probs = Matrix::zeros(n, cfg.n_experts);
        let mut sel_sum = Vec::with_capacity(n);
        let mut routes = Vec::with_capacity(n);
        let mut y = h.clone();
        for t in 0..n {
            let mut z = layer.router.vec_mul(u.row(t));
            if let Some(b) = bias {
                for (zi, &bi) in z.iter_mut().zip(b) {
                    *zi += bi;
                }
            }
            let p = softmax(&z);
            let sel = top_k_indices(&p, cfg.top_k);
            let s: T = sel.iter().map(|&e| p[e]).sum();
            let mut token_routes = Vec::with_capacity(sel.len());
            for &e in &sel {
                let gate = p[e] / s;
                let ec = expert_forward(&layer.experts[e], u.row(t), e, gate);
                for (yi, &oi) in y.row_mut(t).iter_mut().zip(&ec.out) {
                    *yi += gate * oi;
                }
                token_routes.push(ec);
            }
            probs.row_mut(t).copy_from_slice(&p);
            sel_sum.push(s);
            routes.push(token_routes);
        }

        caches.push(LayerCache {
            a,
            a_inv,
            x: std::mem::replace(&mut x, y),
            q,
            k,
            v,
            att,
            ctx,
            h,
            u,
            u_inv,
            probs,
            sel_sum,
            routes,
        });
    }

    let mut f = Matrix::zeros(n, d);
    let mut f_inv = Vec::with_capacity(n);
    let mut logits = Matrix::zeros(n, cfg.vocab_size);
    for t in 0..n {
        let (row, inv) = rms_norm(x.row(t));
        params.head.vec_mul_acc(&row, logits.row_mut(t));
        f.row_mut(t).copy_from_slice(&row);
        f_inv.push(inv);
    }
    let cache = ForwardCache {
        tokens: tokens.to_vec(),
        layers: caches,
        x_final: x,
        f,
        f_inv,
    };
    Ok((logits, cache))
}

/// Logits for every position and, when `capture` is set, the full routing trace
/// (with every position marked as generated).
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[u32],
    capture: bool,
) -> Result<(Matrix<T>, Option<RoutingTrace<T>>)> {
    let (logits, cache) = forward_cached(params, tokens, None)?;
    let trace = capture.then(|| cache.trace((0..tokens.len()).collect()));
    Ok((logits, trace))
}

/// Forward pass with an additive router-logit bias (routing steering).
pub fn forward_biased<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[u32],
    bias: &RouterBias<T>,
) -> Result<(Matrix<T>, RoutingTrace<T>)> {
    let (logits, cache) = forward_cached(params, tokens, Some(bias))?;
    let trace = cache.trace((0..tokens.len()).collect());
    Ok((logits, trace))
}
