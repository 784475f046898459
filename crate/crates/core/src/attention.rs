//! Codebook-guided soft attention.
//!
//! Queries come from node states, keys from embedded codewords, and values
//! are codeword-level means of projected node states. Because every member
//! of a codeword shares one key, the dense score matrix factors exactly:
//! attending over B codewords with an additive `ln n_b` population term
//! equals attending over all N nodes with duplicated keys. The factored
//! path costs O(N·B·d') instead of O(N²·d').
//!
//! Nodes left unassigned by codebook truncation still issue queries and
//! receive an output row, but contribute to no codeword mean.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{group_means, scatter_group_grad, UNASSIGNED};

/// Normalization applied to embedded codewords before they act as keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedNorm {
    /// Rows scaled to unit Euclidean length (guarded at 1e-12).
    RowL2,
    /// Per-row standardization (mean 0, variance 1, eps 1e-5), no affine.
    LayerNorm,
}

/// Learnable pieces of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// d'×d' query projection.
    pub w_q: Array2<f64>,
    /// d'×d' value projection.
    pub w_v: Array2<f64>,
    /// D×d' codeword embedding.
    pub w_c: Array2<f64>,
    /// d' embedding bias.
    pub b_c: Array1<f64>,
}

const L2_GUARD: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

/// Cached quantities from embedding the codewords.
#[derive(Debug, Clone)]
pub struct EmbedForward {
    /// B×d' normalized key matrix G.
    pub g: Array2<f64>,
    /// Pre-normalization rows C_f·W_c + b_c.
    pub pre: Array2<f64>,
    /// Per-row normalizer: the guarded L2 norm, or LayerNorm's std.
    norm_denom: Array1<f64>,
}

/// Embeds float codewords and normalizes each row.
pub fn embed_codebook(
    c_float: &ArrayView2<f64>,
    params: &AttentionParams,
    norm: EmbedNorm,
) -> EmbedForward {
    let pre = c_float.dot(&params.w_c) + &params.b_c;
    let b = pre.nrows();
    let mut g = pre.clone();
    let mut norm_denom = Array1::<f64>::zeros(b);
    match norm {
        EmbedNorm::RowL2 => {
            for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                let n = row.dot(&row).sqrt().max(L2_GUARD);
                norm_denom[i] = n;
                row.mapv_inplace(|x| x / n);
            }
        }
        EmbedNorm::LayerNorm => {
            for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                let mean = row.mean().unwrap_or(0.0);
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>()
                    / row.len() as f64;
                let s = (var + LN_EPS).sqrt();
                norm_denom[i] = s;
                row.mapv_inplace(|x| (x - mean) / s);
            }
        }
    }
    EmbedForward { g, pre, norm_denom }
}

/// Backward through the row normalization alone: returns grad on `pre`.
fn embed_norm_backward(fwd: &EmbedForward, grad_g: &Array2<f64>, norm: EmbedNorm) -> Array2<f64> {
    let mut grad_pre = Array2::<f64>::zeros(fwd.pre.dim());
    match norm {
        EmbedNorm::RowL2 => {
            for i in 0..fwd.pre.nrows() {
                let g = fwd.g.row(i);
                let gg = grad_g.row(i);
                let n = fwd.norm_denom[i];
                let mut out = grad_pre.row_mut(i);
                if fwd.pre.row(i).dot(&fwd.pre.row(i)).sqrt() > L2_GUARD {
                    let proj = g.dot(&gg);
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = (gg[j] - g[j] * proj) / n;
                    }
                } else {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = gg[j] / n;
                    }
                }
            }
        }
        EmbedNorm::LayerNorm => {
            for i in 0..fwd.pre.nrows() {
                let g = fwd.g.row(i);
                let gg = grad_g.row(i);
                let s = fwd.norm_denom[i];
                let d = g.len() as f64;
                let mean_gg = gg.sum() / d;
                let mean_gg_g = gg.dot(&g) / d;
                let mut out = grad_pre.row_mut(i);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = (gg[j] - mean_gg - g[j] * mean_gg_g) / s;
                }
            }
        }
    }
    grad_pre
}

/// Everything the attention forward caches for its backward.
#[derive(Debug, Clone)]
pub struct CgsaForward {
    /// N×d' attention output Ẑ.
    pub out: Array2<f64>,
    /// N×B attention weights (rows sum to 1).
    pub weights: Array2<f64>,
    pub q: Array2<f64>,
    pub v: Array2<f64>,
    /// B×d' codeword-level value means.
    pub v_bar: Array2<f64>,
    pub embed: EmbedForward,
}

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_rows_inplace(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Attention weights over codewords for each node: softmax over
/// `Q·Gᵀ + ln n_b`. Exposed separately so the population term's
/// shift-invariance can be exercised directly.
pub fn attention_weights(
    q: &ArrayView2<f64>,
    g: &ArrayView2<f64>,
    populations: &[u32],
) -> Array2<f64> {
    let mut logits = q.dot(&g.t());
    let log_pop: Vec<f64> = populations.iter().map(|&p| (p as f64).ln()).collect();
    for mut row in logits.rows_mut() {
        for (b, v) in row.iter_mut().enumerate() {
            *v += log_pop[b];
        }
    }
    softmax_rows_inplace(&mut logits);
    logits
}

/// Factored attention forward. `h` is N×d' node state, `c_float` the B×D
/// float codewords (means of member spike-count rows), `assignment` and
/// `populations` the codebook structure.
pub fn cgsa_forward(
    h: &ArrayView2<f64>,
    c_float: &ArrayView2<f64>,
    assignment: &[u32],
    populations: &[u32],
    params: &AttentionParams,
    norm: EmbedNorm,
) -> Result<CgsaForward> {
    let n = h.nrows();
    let b = c_float.nrows();
    if assignment.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "assignment length {} vs {} nodes",
            assignment.len(),
            n
        )));
    }
    if populations.len() != b {
        return Err(Error::DimensionMismatch(format!(
            "populations length {} vs {} codewords",
            populations.len(),
            b
        )));
    }
    if let Some(&bad) = assignment
        .iter()
        .find(|&&a| a != UNASSIGNED && a as usize >= b)
    {
        return Err(Error::DimensionMismatch(format!(
            "assignment value {bad} out of range for {b} codewords"
        )));
    }

    let q = h.dot(&params.w_q);
    let v = h.dot(&params.w_v);
    let v_bar = group_means(&v.view(), assignment, b, populations);
    let embed = embed_codebook(c_float, params, norm);
    let weights = attention_weights(&q.view(), &embed.g.view(), populations);
    let out = weights.dot(&v_bar);
    Ok(CgsaForward {
        out,
        weights,
        q,
        v,
        v_bar,
        embed,
    })
}

/// Gradients of one attention layer.
#[derive(Debug, Clone)]
pub struct CgsaGrads {
    pub grad_h: Array2<f64>,
    /// Gradient on the float codewords, to be scattered back to counts.
    pub grad_c: Array2<f64>,
    pub grad_w_q: Array2<f64>,
    pub grad_w_v: Array2<f64>,
    pub grad_w_c: Array2<f64>,
    pub grad_b_c: Array1<f64>,
}

/// Reverse pass. The `ln n_b` term is a constant of the discrete codebook
/// structure, so the softmax Jacobian is the standard one; value means and
/// the codeword means route gradients to member rows scaled by 1/n_b.
pub fn cgsa_backward(
    fwd: &CgsaForward,
    h: &ArrayView2<f64>,
    c_float: &ArrayView2<f64>,
    assignment: &[u32],
    populations: &[u32],
    params: &AttentionParams,
    norm: EmbedNorm,
    grad_out: &ArrayView2<f64>,
) -> CgsaGrads {
    // out = W V̄.
    let grad_weights = grad_out.dot(&fwd.v_bar.t());
    let grad_v_bar = fwd.weights.t().dot(grad_out);

    // Softmax rows: grad_logits = w ⊙ (grad_w − (grad_w·w)).
    let mut grad_logits = grad_weights;
    for (mut gl, w) in grad_logits
        .rows_mut()
        .into_iter()
        .zip(fwd.weights.rows())
    {
        let dot = gl.dot(&w);
        for (g, &wi) in gl.iter_mut().zip(w) {
            *g = wi * (*g - dot);
        }
    }

    // logits = Q·Gᵀ (+ constants).
    let grad_q = grad_logits.dot(&fwd.embed.g);
    let grad_g = grad_logits.t().dot(&fwd.q);

    // V̄_b = mean of member V rows.
    let grad_v = scatter_group_grad(&grad_v_bar.view(), assignment, populations);

    // Q = H·W_q, V = H·W_v.
    let grad_h = grad_q.dot(&params.w_q.t()) + grad_v.dot(&params.w_v.t());
    let grad_w_q = h.t().dot(&grad_q);
    let grad_w_v = h.t().dot(&grad_v);

    // G = norm(C_f·W_c + b_c).
    let grad_pre = embed_norm_backward(&fwd.embed, &grad_g, norm);
    let grad_b_c = grad_pre.sum_axis(Axis(0));
    let grad_c = grad_pre.dot(&params.w_c.t());
    let grad_w_c = c_float.t().dot(&grad_pre);
    CgsaGrads {
        grad_h,
        grad_c,
        grad_w_q,
        grad_w_v,
        grad_w_c,
        grad_b_c,
    }
}

/// Dense attention reference: per query row, softmax over every key row of
/// `k_hat` (one per assigned node) applied to `v` rows. Streams one query at
/// a time so memory stays O(N·d') even though work is O(N²·d'). Also serves
/// as the quadratic-cost baseline in the scaling study.
pub fn dense_attention_oracle(
    q: &ArrayView2<f64>,
    k_hat: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
) -> Array2<f64> {
    let n = q.nrows();
    let m = k_hat.nrows();
    let d = v.ncols();
    let mut out = Array2::<f64>::zeros((n, d));
    let mut scores = vec![0.0f64; m];
    for (i, qrow) in q.rows().into_iter().enumerate() {
        let mut mx = f64::NEG_INFINITY;
        for (j, krow) in k_hat.rows().into_iter().enumerate() {
            let s = qrow.dot(&krow);
            scores[j] = s;
            mx = mx.max(s);
        }
        let mut denom = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            denom += *s;
        }
        let mut orow = out.row_mut(i);
        for (j, vrow) in v.rows().into_iter().enumerate() {
            let w = scores[j] / denom;
            for (o, &vv) in orow.iter_mut().zip(vrow) {
                *o += w * vv;
            }
        }
    }
    out
}
