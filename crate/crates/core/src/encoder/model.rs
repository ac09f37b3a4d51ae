//! Forward pass and reverse-mode gradients of the encoder for one sequence.
//!
//! Block structure (post-norm, as in the BERT family):
//!
//! ```text
//! x0 = dropout(tok[id] + pos[i])
//! h  = norm1(x + dropout(attn(x)))
//! x' = norm2(h + dropout(W2 gelu(W1 h + b1) + b2))
//! logits = x_L E^T + b          (tied head; untied uses its own projection)
//! ```
//!
//! Attention is bidirectional; keys whose attention flag is 0 are excluded.

use rand::Rng as _;

use super::params::{LayerOffsets, Layout};
use super::ModelConfig;
use crate::rng::Rng;
use crate::tokenizer::TokenId;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `y[n×dout] = x[n×din] · w[din×dout] + b`
pub(crate) fn linear(x: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    for i in 0..n {
        let yi = &mut y[i * dout..(i + 1) * dout];
        for (k, &xik) in x[i * din..(i + 1) * din].iter().enumerate() {
            let wk = &w[k * dout..(k + 1) * dout];
            for (yij, &wkj) in yi.iter_mut().zip(wk) {
                *yij += xik * wkj;
            }
        }
    }
    y
}

/// Accumulates `dw += xᵀ dy`, `db += Σ dy` and returns `dx = dy wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * din];
    for i in 0..n {
        let dyi = &dy[i * dout..(i + 1) * dout];
        for (dbj, &g) in db.iter_mut().zip(dyi) {
            *dbj += g;
        }
        let xi = &x[i * din..(i + 1) * din];
        let dxi = &mut dx[i * din..(i + 1) * din];
        for k in 0..din {
            let wk = &w[k * dout..(k + 1) * dout];
            let dwk = &mut dw[k * dout..(k + 1) * dout];
            let mut acc = 0.0;
            for j in 0..dout {
                dwk[j] += xi[k] * dyi[j];
                acc += dyi[j] * wk[j];
            }
            dxi[k] = acc;
        }
    }
    dx
}

struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], n: usize, d: usize) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * g[j] + b[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    n: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
            let dxh = dyi[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for j in 0..d {
            let dxh = dyi[j] * g[j];
            dx[i * d + j] = cache.inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Inverted dropout multipliers, or `None` when dropout is off.
fn dropout_mask(len: usize, rate: f64, rng: Option<&mut Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

struct LayerCache {
    x_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × n × n attention weights
    probs: Vec<f64>,
    ctx: Vec<f64>,
    drop_attn: Option<Vec<f64>>,
    norm1: NormCache,
    h1: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    drop_ff: Option<Vec<f64>>,
    norm2: NormCache,
}

/// Activations of one forward pass, retained for backpropagation.
pub(crate) struct SeqCache {
    n: usize,
    tokens: Vec<TokenId>,
    drop_emb: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    final_hidden: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

impl SeqCache {
    pub(crate) fn attention(&self, layer: usize) -> &[f64] {
        &self.layers[layer].probs
    }
}

pub(crate) fn forward_seq(
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[f64],
    tokens: &[TokenId],
    flags: &[u8],
    mut rng: Option<&mut Rng>,
) -> SeqCache {
    let n = tokens.len();
    let (d, f, v, h) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = vec![0.0; n * d];
    for (i, &t) in tokens.iter().enumerate() {
        let te = &p[layout.tok + t as usize * d..][..d];
        let pe = &p[layout.pos + i * d..][..d];
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j];
        }
    }
    let drop_emb = dropout_mask(n * d, cfg.dropout_rate, rng.as_deref_mut());
    apply_mask(&mut x, &drop_emb);

    let mut layers = Vec::with_capacity(cfg.layers);
    for lo in &layout.layers {
        let w = |off: usize, len: usize| &p[off..off + len];
        let q = linear(&x, w(lo.wq, d * d), w(lo.bq, d), n, d, d);
        let k = linear(&x, w(lo.wk, d * d), w(lo.bk, d), n, d, d);
        let vv = linear(&x, w(lo.wv, d * d), w(lo.bv, d), n, d, d);

        let mut probs = vec![0.0; h * n * n];
        let mut ctx = vec![0.0; n * d];
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..n {
                let row = &mut probs[(head * n + i) * n..][..n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if flags[j] == 0 {
                        row[j] = f64::NEG_INFINITY;
                        continue;
                    }
                    let mut s = 0.0;
                    for c in c0..c0 + dh {
                        s += q[i * d + c] * k[j * d + c];
                    }
                    row[j] = s * scale;
                    max = max.max(row[j]);
                }
                if max == f64::NEG_INFINITY {
                    row.fill(0.0);
                    continue;
                }
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                for j in 0..n {
                    let a = row[j];
                    if a != 0.0 {
                        for c in c0..c0 + dh {
                            ctx[i * d + c] += a * vv[j * d + c];
                        }
                    }
                }
            }
        }

        let mut attn_out = linear(&ctx, w(lo.wo, d * d), w(lo.bo, d), n, d, d);
        let drop_attn = dropout_mask(n * d, cfg.dropout_rate, rng.as_deref_mut());
        apply_mask(&mut attn_out, &drop_attn);
        for (a, xi) in attn_out.iter_mut().zip(&x) {
            *a += xi;
        }
        let (h1, norm1) = layer_norm(&attn_out, w(lo.ln1_g, d), w(lo.ln1_b, d), n, d);

        let ff_pre = linear(&h1, w(lo.w1, d * f), w(lo.b1, f), n, d, f);
        let ff_act: Vec<f64> = ff_pre.iter().map(|&z| gelu(z)).collect();
        let mut ff_out = linear(&ff_act, w(lo.w2, f * d), w(lo.b2, d), n, f, d);
        let drop_ff = dropout_mask(n * d, cfg.dropout_rate, rng.as_deref_mut());
        apply_mask(&mut ff_out, &drop_ff);
        for (a, hi) in ff_out.iter_mut().zip(&h1) {
            *a += hi;
        }
        let (out, norm2) = layer_norm(&ff_out, w(lo.ln2_g, d), w(lo.ln2_b, d), n, d);

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, out),
            q,
            k,
            v: vv,
            probs,
            ctx,
            drop_attn,
            norm1,
            h1,
            ff_pre,
            ff_act,
            drop_ff,
            norm2,
        });
    }

    let logits = head_forward(layout, p, &x, n, d, v);
    SeqCache {
        n,
        tokens: tokens.to_vec(),
        drop_emb,
        layers,
        final_hidden: x,
        logits,
    }
}

fn head_forward(layout: &Layout, p: &[f64], x: &[f64], n: usize, d: usize, v: usize) -> Vec<f64> {
    let bias = &p[layout.head_b..layout.head_b + v];
    match layout.head_w {
        Some(off) => linear(x, &p[off..off + d * v], bias, n, d, v),
        None => {
            let emb = &p[layout.tok..layout.tok + v * d];
            let mut y = vec![0.0; n * v];
            for i in 0..n {
                let xi = &x[i * d..(i + 1) * d];
                for t in 0..v {
                    let et = &emb[t * d..(t + 1) * d];
                    y[i * v + t] = bias[t] + xi.iter().zip(et).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            y
        }
    }
}

/// Accumulate into `grad` the gradient of a scalar whose derivative with
/// respect to this sequence's logits is `dlogits`.
pub(crate) fn backward_seq(
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[f64],
    cache: &SeqCache,
    dlogits: &[f64],
    grad: &mut [f64],
) {
    let n = cache.n;
    let (d, f, v, h) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();

    // head
    let mut dx = vec![0.0; n * d];
    {
        let x = &cache.final_hidden;
        let hb = layout.head_b;
        for i in 0..n {
            for t in 0..v {
                grad[hb + t] += dlogits[i * v + t];
            }
        }
        match layout.head_w {
            Some(off) => {
                let mut db = vec![0.0; v];
                dx = linear_backward(
                    x,
                    dlogits,
                    &p[off..off + d * v],
                    &mut grad[off..off + d * v],
                    &mut db,
                    n,
                    d,
                    v,
                );
            }
            None => {
                let tok = layout.tok;
                for i in 0..n {
                    for t in 0..v {
                        let g = dlogits[i * v + t];
                        if g == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            dx[i * d + j] += g * p[tok + t * d + j];
                            grad[tok + t * d + j] += g * x[i * d + j];
                        }
                    }
                }
            }
        }
    }

    for (lo, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        dx = layer_backward(lo, lc, p, grad, dx, n, d, f, h, dh, scale);
    }

    apply_mask(&mut dx, &cache.drop_emb);
    for (i, &t) in cache.tokens.iter().enumerate() {
        for j in 0..d {
            grad[layout.tok + t as usize * d + j] += dx[i * d + j];
            grad[layout.pos + i * d + j] += dx[i * d + j];
        }
    }
}

fn split_grad(grad: &mut [f64], off: usize, len: usize) -> &mut [f64] {
    &mut grad[off..off + len]
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    lo: &LayerOffsets,
    lc: &LayerCache,
    p: &[f64],
    grad: &mut [f64],
    dout: Vec<f64>,
    n: usize,
    d: usize,
    f: usize,
    h: usize,
    dh: usize,
    scale: f64,
) -> Vec<f64> {
    let w = |off: usize, len: usize| &p[off..off + len];

    // norm2 -> residual with h1 and the feed-forward branch
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let dres2 = layer_norm_backward(&dout, &lc.norm2, w(lo.ln2_g, d), &mut dg, &mut db, n, d);
    add_into(split_grad(grad, lo.ln2_g, d), &dg);
    add_into(split_grad(grad, lo.ln2_b, d), &db);

    let mut dff = dres2.clone();
    apply_mask(&mut dff, &lc.drop_ff);
    let mut db2 = vec![0.0; d];
    let mut dact = linear_backward(&lc.ff_act, &dff, w(lo.w2, f * d), &mut grad[lo.w2..lo.w2 + f * d], &mut db2, n, f, d);
    add_into(split_grad(grad, lo.b2, d), &db2);
    for (g, &z) in dact.iter_mut().zip(&lc.ff_pre) {
        *g *= gelu_grad(z);
    }
    let mut db1 = vec![0.0; f];
    let dh1_ff = linear_backward(&lc.h1, &dact, w(lo.w1, d * f), &mut grad[lo.w1..lo.w1 + d * f], &mut db1, n, d, f);
    add_into(split_grad(grad, lo.b1, f), &db1);

    let mut dh1 = dres2;
    add_into(&mut dh1, &dh1_ff);

    // norm1 -> residual with x_in and the attention branch
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let dres1 = layer_norm_backward(&dh1, &lc.norm1, w(lo.ln1_g, d), &mut dg, &mut db, n, d);
    add_into(split_grad(grad, lo.ln1_g, d), &dg);
    add_into(split_grad(grad, lo.ln1_b, d), &db);

    let mut dattn = dres1.clone();
    apply_mask(&mut dattn, &lc.drop_attn);
    let mut dbo = vec![0.0; d];
    let dctx = linear_backward(&lc.ctx, &dattn, w(lo.wo, d * d), &mut grad[lo.wo..lo.wo + d * d], &mut dbo, n, d, d);
    add_into(split_grad(grad, lo.bo, d), &dbo);

    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dprob = vec![0.0; n];
    for head in 0..h {
        let c0 = head * dh;
        for i in 0..n {
            let a = &lc.probs[(head * n + i) * n..][..n];
            let mut dot = 0.0;
            for j in 0..n {
                if a[j] == 0.0 {
                    dprob[j] = 0.0;
                    continue;
                }
                let mut s = 0.0;
                for c in c0..c0 + dh {
                    s += dctx[i * d + c] * lc.v[j * d + c];
                    dv[j * d + c] += a[j] * dctx[i * d + c];
                }
                dprob[j] = s;
                dot += a[j] * s;
            }
            for j in 0..n {
                if a[j] == 0.0 {
                    continue;
                }
                let ds = a[j] * (dprob[j] - dot) * scale;
                for c in c0..c0 + dh {
                    dq[i * d + c] += ds * lc.k[j * d + c];
                    dk[j * d + c] += ds * lc.q[i * d + c];
                }
            }
        }
    }

    let mut dx = dres1;
    for (wo, bo, dy) in [(lo.wq, lo.bq, &dq), (lo.wk, lo.bk, &dk), (lo.wv, lo.bv, &dv)] {
        let mut dbias = vec![0.0; d];
        let dxi = linear_backward(&lc.x_in, dy, w(wo, d * d), &mut grad[wo..wo + d * d], &mut dbias, n, d, d);
        add_into(split_grad(grad, bo, d), &dbias);
        add_into(&mut dx, &dxi);
    }
    dx
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
