//! Forward pass: embeddings, post-LN encoder layers, optional LSTM, and
//! the tied-projection MLM head. Caches carry every intermediate needed by
//! the backward pass.

use crate::error::{Error, Result};

use super::math::{
    gelu, layer_norm_rows, log_softmax_row, sigmoid, softmax_rows, Matrix,
};
use super::{GrammarModule, LstmParams, ModelConfig, ModelParams};

/// Hidden states and outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// L+1 states of shape T×d: the embedding output plus each layer.
    pub states: Vec<Matrix>,
    /// Grammar-module output (post head layer norm), T×d.
    pub grammar_out: Matrix,
    /// T×V.
    pub logits: Matrix,
}

pub(crate) struct LayerCache {
    pub x: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Vec<Matrix>,
    pub concat: Matrix,
    pub u1_xhat: Matrix,
    pub u1_rstd: Vec<f64>,
    pub y: Matrix,
    pub ffn_pre: Matrix,
    pub ffn_act: Matrix,
    pub u2_xhat: Matrix,
    pub u2_rstd: Vec<f64>,
}

pub(crate) struct LstmCache {
    pub x: Matrix,
    pub gate_i: Matrix,
    pub gate_f: Matrix,
    pub gate_g: Matrix,
    pub gate_o: Matrix,
    pub cs: Matrix,
    pub tanh_cs: Matrix,
    pub hs: Matrix,
}

pub(crate) struct HeadCache {
    pub h: Matrix,
    pub pre: Matrix,
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
}

pub(crate) struct Caches {
    pub layers: Vec<LayerCache>,
    pub lstm: Option<LstmCache>,
    pub head: HeadCache,
}

fn embed(params: &ModelParams, ids: &[u32]) -> Matrix {
    let d = params.embedding.data.cols;
    let mut out = Matrix::zeros(ids.len(), d);
    for (t, &id) in ids.iter().enumerate() {
        let e = params.embedding.data.row(id as usize);
        let p = params.position.data.row(t);
        for (o, (&a, &b)) in out.row_mut(t).iter_mut().zip(e.iter().zip(p)) {
            *o = a + b;
        }
    }
    out
}

fn layer_forward(l: &super::LayerParams, num_heads: usize, x: &Matrix) -> (Matrix, LayerCache) {
    let d = x.cols;
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut q = x.matmul(&l.wq.data);
    q.add_row_broadcast(&l.bq.data);
    let mut k = x.matmul(&l.wk.data);
    k.add_row_broadcast(&l.bk.data);
    let mut v = x.matmul(&l.wv.data);
    v.add_row_broadcast(&l.bv.data);

    let mut concat = Matrix::zeros(x.rows, d);
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let vh = v.slice_cols(lo, hi);
        let mut scores = qh.matmul_tb(&kh);
        scores.scale_assign(scale);
        softmax_rows(&mut scores);
        let outh = scores.matmul(&vh);
        concat.add_into_cols(lo, &outh);
        probs.push(scores);
    }
    let mut attn = concat.matmul(&l.wo.data);
    attn.add_row_broadcast(&l.bo.data);

    let mut u1 = x.clone();
    u1.add_assign(&attn);
    let (y, u1_xhat, u1_rstd) = layer_norm_rows(&u1, &l.attn_ln_gain.data, &l.attn_ln_bias.data);

    let mut ffn_pre = y.matmul(&l.ffn_w1.data);
    ffn_pre.add_row_broadcast(&l.ffn_b1.data);
    let mut ffn_act = ffn_pre.clone();
    for a in &mut ffn_act.data {
        *a = gelu(*a);
    }
    let mut ffn_out = ffn_act.matmul(&l.ffn_w2.data);
    ffn_out.add_row_broadcast(&l.ffn_b2.data);

    let mut u2 = y.clone();
    u2.add_assign(&ffn_out);
    let (out, u2_xhat, u2_rstd) = layer_norm_rows(&u2, &l.ffn_ln_gain.data, &l.ffn_ln_bias.data);

    let cache = LayerCache {
        x: x.clone(),
        q,
        k,
        v,
        probs,
        concat,
        u1_xhat,
        u1_rstd,
        y,
        ffn_pre,
        ffn_act,
        u2_xhat,
        u2_rstd,
    };
    (out, cache)
}

/// One LSTM recurrence step. `x_t`, `h_prev`, `c_prev` are length-d slices.
pub fn lstm_step(
    gates: &LstmParams,
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = gates.w_ih.data.rows;
    if gates.w_hh.data.rows != d
        || gates.w_ih.data.cols != 4 * d
        || gates.w_hh.data.cols != 4 * d
        || gates.bias.data.cols != 4 * d
    {
        return Err(Error::DimensionMismatch(format!(
            "lstm gate tensors inconsistent: w_ih {}×{}, w_hh {}×{}, bias {}",
            gates.w_ih.data.rows,
            gates.w_ih.data.cols,
            gates.w_hh.data.rows,
            gates.w_hh.data.cols,
            gates.bias.data.cols
        )));
    }
    if x_t.len() != d || h_prev.len() != d || c_prev.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "lstm step inputs must have length {d}: got x {}, h {}, c {}",
            x_t.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut g = gates.bias.data.data.clone();
    for (i, &xi) in x_t.iter().enumerate() {
        for (gj, &w) in g.iter_mut().zip(gates.w_ih.data.row(i)) {
            *gj += xi * w;
        }
    }
    for (i, &hi) in h_prev.iter().enumerate() {
        for (gj, &w) in g.iter_mut().zip(gates.w_hh.data.row(i)) {
            *gj += hi * w;
        }
    }
    let mut h_t = vec![0.0; d];
    let mut c_t = vec![0.0; d];
    for j in 0..d {
        let i_g = sigmoid(g[j]);
        let f_g = sigmoid(g[d + j]);
        let g_g = g[2 * d + j].tanh();
        let o_g = sigmoid(g[3 * d + j]);
        c_t[j] = f_g * c_prev[j] + i_g * g_g;
        h_t[j] = o_g * c_t[j].tanh();
    }
    Ok((h_t, c_t))
}

pub(crate) fn lstm_forward_cached(lstm: &LstmParams, x: &Matrix) -> LstmCache {
    let (t_len, d) = (x.rows, x.cols);
    let mut cache = LstmCache {
        x: x.clone(),
        gate_i: Matrix::zeros(t_len, d),
        gate_f: Matrix::zeros(t_len, d),
        gate_g: Matrix::zeros(t_len, d),
        gate_o: Matrix::zeros(t_len, d),
        cs: Matrix::zeros(t_len, d),
        tanh_cs: Matrix::zeros(t_len, d),
        hs: Matrix::zeros(t_len, d),
    };
    let mut h_prev = vec![0.0; d];
    let mut c_prev = vec![0.0; d];
    for t in 0..t_len {
        let mut g = lstm.bias.data.data.clone();
        for (i, &xi) in x.row(t).iter().enumerate() {
            for (gj, &w) in g.iter_mut().zip(lstm.w_ih.data.row(i)) {
                *gj += xi * w;
            }
        }
        for (i, &hi) in h_prev.iter().enumerate() {
            for (gj, &w) in g.iter_mut().zip(lstm.w_hh.data.row(i)) {
                *gj += hi * w;
            }
        }
        for j in 0..d {
            let i_g = sigmoid(g[j]);
            let f_g = sigmoid(g[d + j]);
            let g_g = g[2 * d + j].tanh();
            let o_g = sigmoid(g[3 * d + j]);
            let c = f_g * c_prev[j] + i_g * g_g;
            let tc = c.tanh();
            cache.gate_i.set(t, j, i_g);
            cache.gate_f.set(t, j, f_g);
            cache.gate_g.set(t, j, g_g);
            cache.gate_o.set(t, j, o_g);
            cache.cs.set(t, j, c);
            cache.tanh_cs.set(t, j, tc);
            cache.hs.set(t, j, o_g * tc);
        }
        h_prev.copy_from_slice(cache.hs.row(t));
        c_prev.copy_from_slice(cache.cs.row(t));
    }
    cache
}

/// LSTM output sequence (h_t rows), zero initial state.
pub fn lstm_forward(lstm: &LstmParams, x: &Matrix) -> Matrix {
    lstm_forward_cached(lstm, x).hs
}

fn head_forward(params: &ModelParams, h: &Matrix) -> (Matrix, Matrix, HeadCache) {
    let pre = h.matmul(&params.head_wp.data);
    let mut act = pre.clone();
    for a in &mut act.data {
        *a = gelu(*a);
    }
    let (g, xhat, rstd) =
        layer_norm_rows(&act, &params.head_ln_gain.data, &params.head_ln_bias.data);
    let mut logits = g.matmul_tb(&params.embedding.data);
    logits.add_row_broadcast(&params.out_bias.data);
    let cache = HeadCache { h: h.clone(), pre, xhat, rstd };
    (g, logits, cache)
}

/// Backbone states only: embedding output plus each of the L layers.
pub fn backbone_states(
    params: &ModelParams,
    config: &ModelConfig,
    ids: &[u32],
) -> Result<Vec<Matrix>> {
    if ids.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max: config.max_seq_len });
    }
    let (states, _) = backbone_states_cached(params, config, ids)?;
    Ok(states)
}

fn backbone_states_cached(
    params: &ModelParams,
    config: &ModelConfig,
    ids: &[u32],
) -> Result<(Vec<Matrix>, Vec<LayerCache>)> {
    for &id in ids {
        if id as usize >= config.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "token id {id} outside vocab of size {}",
                config.vocab_size
            )));
        }
    }
    let mut states = Vec::with_capacity(config.num_layers + 1);
    let mut caches = Vec::with_capacity(config.num_layers);
    states.push(embed(params, ids));
    for l in &params.layers {
        let (next, cache) = layer_forward(l, config.num_heads, states.last().unwrap());
        states.push(next);
        caches.push(cache);
    }
    Ok((states, caches))
}

/// Grammar module + head applied to an arbitrary T×d state: the LSTM (when
/// configured) feeds `LayerNorm(GeLU(·W_p))·Eᵀ + b`. Used both by the full
/// forward pass and by layer probing.
pub fn head_logits(params: &ModelParams, config: &ModelConfig, state: &Matrix) -> (Matrix, Matrix) {
    let h = match config.grammar_module {
        GrammarModule::MlpHead => state.clone(),
        GrammarModule::LstmHead => {
            let lstm = params.lstm.as_ref().expect("lstm params present for LstmHead");
            lstm_forward(lstm, state)
        }
    };
    let (g, logits, _) = head_forward(params, &h);
    (g, logits)
}

pub(crate) fn forward_cached(
    params: &ModelParams,
    config: &ModelConfig,
    ids: &[u32],
) -> Result<(ForwardTrace, Caches)> {
    if ids.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max: config.max_seq_len });
    }
    let (states, layer_caches) = backbone_states_cached(params, config, ids)?;
    let last = states.last().unwrap();
    let (h, lstm_cache) = match config.grammar_module {
        GrammarModule::MlpHead => (last.clone(), None),
        GrammarModule::LstmHead => {
            let lstm = params.lstm.as_ref().expect("lstm params present for LstmHead");
            let cache = lstm_forward_cached(lstm, last);
            (cache.hs.clone(), Some(cache))
        }
    };
    let (grammar_out, logits, head_cache) = head_forward(params, &h);
    debug_assert!(logits.data.iter().all(|x| x.is_finite()));
    let trace = ForwardTrace { states, grammar_out, logits };
    Ok((trace, Caches { layers: layer_caches, lstm: lstm_cache, head: head_cache }))
}

pub fn forward(params: &ModelParams, config: &ModelConfig, ids: &[u32]) -> Result<ForwardTrace> {
    forward_cached(params, config, ids).map(|(trace, _)| trace)
}

/// Mean cross-entropy of `targets` over the positions selected by
/// `loss_mask`.
pub fn mlm_loss(trace: &ForwardTrace, targets: &[u32], loss_mask: &[bool]) -> Result<f64> {
    let t_len = trace.logits.rows;
    if targets.len() != t_len || loss_mask.len() != t_len {
        return Err(Error::DimensionMismatch(format!(
            "loss over {t_len} positions, got {} targets and {} mask entries",
            targets.len(),
            loss_mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..t_len {
        if !loss_mask[t] {
            continue;
        }
        let ls = log_softmax_row(trace.logits.row(t));
        total -= ls[targets[t] as usize];
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}
