//! Reverse-mode gradients of the forward pass in `forward.rs`.
//!
//! Two seeds enter the graph: `∂L/∂logits` from the token loss and, optionally,
//! `∂L/∂p` on the full router softmax of every layer (the alignment loss reads
//! routing distributions directly). Gradients accumulate into a
//! `Parameters`-shaped buffer; when adapters are attached only adapter arrays
//! are written.

use super::forward::ForwardCache;
use super::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

fn rms_backward<T: Scalar>(x: &[T], inv: T, du: &[T], dx: &mut [T]) {
    let d = T::lit(x.len() as f64);
    let proj = dot(du, x);
    let c = inv * inv * inv * proj / d;
    for ((o, &g), &xi) in dx.iter_mut().zip(du).zip(x) {
        *o += inv * g - c * xi;
    }
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Accumulates `∂L/∂θ` into `grads`.
///
/// `drouter`, when present, holds one `seq_len × n_experts` matrix per layer
/// with the loss gradient w.r.t. the captured router distributions; an empty
/// matrix means no seed at that layer.
pub fn backward<T: Scalar>(
    params: &Parameters<T>,
    cache: &ForwardCache<T>,
    dlogits: &Matrix<T>,
    drouter: Option<&[Matrix<T>]>,
    grads: &mut Parameters<T>,
) {
    let cfg = &params.config;
    let only_adapters = cfg.adapter_rank > 0;
    let n = cache.seq_len();
    let d = cfg.d_model;
    let n_experts = cfg.n_experts;
    let scale = T::one() / T::lit(d as f64).sqrt();

    let mut dx = Matrix::zeros(n, d);
    for t in 0..n {
        let g = dlogits.row(t);
        if !only_adapters {
            grads.head.outer_acc(cache.f.row(t), g);
        }
        let mut df = vec![T::zero(); d];
        params.head.vec_mul_t_acc(g, &mut df);
        rms_backward(cache.x_final.row(t), cache.f_inv[t], &df, dx.row_mut(t));
    }

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let layer = &params.layers[l];
        let gl = &mut grads.layers[l];

        // MoE block: y = h + Σ gate_e · out_e
        let mut dh = dx.clone();
        let mut du = Matrix::zeros(n, d);
        for t in 0..n {
            let dy = dx.row(t);
            let routes = &lc.routes[t];
            let mut dp = match drouter {
                Some(dr) if dr[l].rows() > 0 => dr[l].row(t).to_vec(),
                _ => vec![T::zero(); n_experts],
            };
            let dgates: Vec<T> = routes.iter().map(|r| dot(dy, &r.out)).collect();
            let s = lc.sel_sum[t];
            let weighted: T = routes.iter().zip(&dgates).map(|(r, &g)| g * r.gate).sum();
            for (r, &g) in routes.iter().zip(&dgates) {
                dp[r.expert] += (g - weighted) / s;
            }

            for r in routes {
                let ex = &layer.experts[r.expert];
                let gex = &mut gl.experts[r.expert];
                let dout: Vec<T> = dy.iter().map(|&v| v * r.gate).collect();
                let mut dact = vec![T::zero(); cfg.d_expert];
                ex.down.vec_mul_t_acc(&dout, &mut dact);
                if !only_adapters {
                    gex.down.outer_acc(&r.act, &dout);
                }
                if let (Some(a), Some(ga), Some(mid)) =
                    (&ex.adapter, gex.adapter.as_mut(), &r.down_mid)
                {
                    ga.down_b.outer_acc(mid, &dout);
                    let mut dmid = vec![T::zero(); mid.len()];
                    a.down_b.vec_mul_t_acc(&dout, &mut dmid);
                    ga.down_a.outer_acc(&r.act, &dmid);
                    a.down_a.vec_mul_t_acc(&dmid, &mut dact);
                }
                let dpre: Vec<T> = dact
                    .iter()
                    .zip(&r.pre)
                    .map(|(&g, &z)| g * silu_grad(z))
                    .collect();
                let u_t = lc.u.row(t);
                ex.up.vec_mul_t_acc(&dpre, du.row_mut(t));
                if !only_adapters {
                    gex.up.outer_acc(u_t, &dpre);
                }
                if let (Some(a), Some(ga), Some(mid)) =
                    (&ex.adapter, gex.adapter.as_mut(), &r.up_mid)
                {
                    ga.up_b.outer_acc(mid, &dpre);
                    let mut dmid = vec![T::zero(); mid.len()];
                    a.up_b.vec_mul_t_acc(&dpre, &mut dmid);
                    ga.up_a.outer_acc(u_t, &dmid);
                    a.up_a.vec_mul_t_acc(&dmid, du.row_mut(t));
                }
            }

            let p = lc.probs.row(t);
            let inner = dot(&dp, p);
            let dz: Vec<T> = p
                .iter()
                .zip(&dp)
                .map(|(&pi, &g)| pi * (g - inner))
                .collect();
            if !only_adapters {
                gl.router.outer_acc(lc.u.row(t), &dz);
            }
            layer.router.vec_mul_t_acc(&dz, du.row_mut(t));
        }
        for t in 0..n {
            rms_backward(lc.h.row(t), lc.u_inv[t], du.row(t), dh.row_mut(t));
        }

        // Attention block: h = x + ctx · Wo
        let mut dx_in = dh.clone();
        let mut dctx = Matrix::zeros(n, d);
        for t in 0..n {
            layer.wo.vec_mul_t_acc(dh.row(t), dctx.row_mut(t));
            if !only_adapters {
                gl.wo.outer_acc(lc.ctx.row(t), dh.row(t));
            }
        }
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for t in 0..n {
            let w = &lc.att[t];
            let dc = dctx.row(t);
            let datt: Vec<T> = (0..=t).map(|j| dot(dc, lc.v.row(j))).collect();
            for (j, &wj) in w.iter().enumerate() {
                for (o, &g) in dv.row_mut(j).iter_mut().zip(dc) {
                    *o += wj * g;
                }
            }
            let inner = dot(w, &datt);
            for (j, (&wj, &ga)) in w.iter().zip(&datt).enumerate() {
                let ds = wj * (ga - inner) * scale;
                if ds == T::zero() {
                    continue;
                }
                for (o, &kv) in dq.row_mut(t).iter_mut().zip(lc.k.row(j)) {
                    *o += ds * kv;
                }
                for (o, &qv) in dk.row_mut(j).iter_mut().zip(lc.q.row(t)) {
                    *o += ds * qv;
                }
            }
        }
        let mut da = Matrix::zeros(n, d);
        for t in 0..n {
            let a_t = lc.a.row(t);
            let da_t = da.row_mut(t);
            layer.wq.vec_mul_t_acc(dq.row(t), da_t);
            layer.wk.vec_mul_t_acc(dk.row(t), da_t);
            layer.wv.vec_mul_t_acc(dv.row(t), da_t);
            if !only_adapters {
                gl.wq.outer_acc(a_t, dq.row(t));
                gl.wk.outer_acc(a_t, dk.row(t));
                gl.wv.outer_acc(a_t, dv.row(t));
            }
        }
        for t in 0..n {
            rms_backward(lc.x.row(t), lc.a_inv[t], da.row(t), dx_in.row_mut(t));
        }
        dx = dx_in;
    }

    if !only_adapters {
        for (t, &tok) in cache.tokens.iter().enumerate() {
            for (o, &g) in grads
                .tok_emb
                .row_mut(tok as usize)
                .iter_mut()
                .zip(dx.row(t))
            {
                *o += g;
            }
            for (o, &g) in grads.pos_emb.row_mut(t).iter_mut().zip(dx.row(t)) {
                *o += g;
            }
        }
    }
}
