//! Exact reverse-mode gradients for the full model. Mirrors the forward
//! pass step by step in reverse, accumulating into a name-keyed gradient
//! map. Frozen tensors get no entry; gradients still flow through them to
//! tensors further down.

use crate::error::Result;

use super::forward::{forward_cached, mlm_loss, LstmCache};
use super::math::{gelu_deriv, layer_norm_backward, softmax_rows, Matrix};
use super::{Gradients, LayerParams, LstmParams, ModelConfig, ModelParams};

/// Loss and gradients for one sentence. The tied embedding gradient is the
/// sum of the input-lookup scatter and the output-projection contribution.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    ids: &[u32],
    targets: &[u32],
    loss_mask: &[bool],
) -> Result<(f64, Gradients)> {
    let (trace, caches) = forward_cached(params, config, ids)?;
    let loss = mlm_loss(&trace, targets, loss_mask)?;
    let masked = loss_mask.iter().filter(|&&m| m).count();

    let mut grads = Gradients::default();
    let mut store = |name: &str, trainable: bool, g: Matrix| {
        if trainable {
            grads.0.insert(name.to_string(), g);
        }
    };

    // d(loss)/d(logits): (softmax − onehot)/masked at masked rows.
    let mut dlogits = trace.logits.clone();
    softmax_rows(&mut dlogits);
    for t in 0..dlogits.rows {
        if loss_mask[t] {
            let row = dlogits.row_mut(t);
            row[targets[t] as usize] -= 1.0;
            for x in row.iter_mut() {
                *x /= masked as f64;
            }
        } else {
            for x in dlogits.row_mut(t) {
                *x = 0.0;
            }
        }
    }

    // Head: logits = G·Eᵀ + b.
    let head = &caches.head;
    let g_state = &trace.grammar_out;
    let dg = dlogits.matmul(&params.embedding.data);
    let de_out = dlogits.matmul_ta(g_state);
    store("out_bias", params.out_bias.trainable, dlogits.col_sums());

    // G = LN(act), act = GeLU(pre), pre = H·W_p.
    let (mut dact, dgain, dbias) =
        layer_norm_backward(&dg, &head.xhat, &head.rstd, &params.head_ln_gain.data);
    store("head_ln.gain", params.head_ln_gain.trainable, dgain);
    store("head_ln.bias", params.head_ln_bias.trainable, dbias);
    for (d, &p) in dact.data.iter_mut().zip(&head.pre.data) {
        *d *= gelu_deriv(p);
    }
    let dpre = dact;
    store("head.wp", params.head_wp.trainable, head.h.matmul_ta(&dpre));
    let dh = dpre.matmul_tb(&params.head_wp.data);

    // Grammar module: either identity (MlpHead) or LSTM back-propagation
    // through time.
    let dlast = match (&caches.lstm, &params.lstm) {
        (Some(cache), Some(lstm)) => {
            let (dx, dw_ih, dw_hh, db) = lstm_backward(lstm, cache, &dh);
            store("lstm.w_ih", lstm.w_ih.trainable, dw_ih);
            store("lstm.w_hh", lstm.w_hh.trainable, dw_hh);
            store("lstm.bias", lstm.bias.trainable, db);
            dx
        }
        _ => dh,
    };

    let backbone_live = params
        .tensors()
        .iter()
        .any(|(name, t)| ModelParams::is_backbone(name) && t.trainable);
    if backbone_live {
        let mut dout = dlast;
        for (i, (layer, cache)) in params.layers.iter().zip(&caches.layers).enumerate().rev() {
            let (dx, layer_grads) = layer_backward(layer, config.num_heads, cache, &dout);
            for (suffix, grad, trainable) in layer_grads {
                store(&format!("layer{i}.{suffix}"), trainable, grad);
            }
            dout = dx;
        }
        // Embedding scatter + position.
        if params.embedding.trainable {
            let mut de = de_out;
            for (t, &id) in ids.iter().enumerate() {
                let src = dout.row(t).to_vec();
                for (e, x) in de.row_mut(id as usize).iter_mut().zip(src) {
                    *e += x;
                }
            }
            grads.0.insert("embedding".into(), de);
        }
        if params.position.trainable {
            let mut dpos = Matrix::zeros(params.position.data.rows, params.position.data.cols);
            for t in 0..dout.rows {
                for (p, &x) in dpos.row_mut(t).iter_mut().zip(dout.row(t)) {
                    *p += x;
                }
            }
            grads.0.insert("position".into(), dpos);
        }
    } else if params.embedding.trainable {
        grads.0.insert("embedding".into(), de_out);
    }

    Ok((loss, grads))
}

type LayerGrads = Vec<(&'static str, Matrix, bool)>;

fn layer_backward(
    l: &LayerParams,
    num_heads: usize,
    cache: &super::forward::LayerCache,
    dout: &Matrix,
) -> (Matrix, LayerGrads) {
    let d = cache.x.cols;
    let dh_width = d / num_heads;
    let scale = 1.0 / (dh_width as f64).sqrt();
    let mut grads: LayerGrads = Vec::with_capacity(16);

    // out = LN2(y + ffn_out)
    let (du2, dg2, db2) =
        layer_norm_backward(dout, &cache.u2_xhat, &cache.u2_rstd, &l.ffn_ln_gain.data);
    grads.push(("ffn_ln.gain", dg2, l.ffn_ln_gain.trainable));
    grads.push(("ffn_ln.bias", db2, l.ffn_ln_bias.trainable));

    // ffn_out = GeLU(y·W1 + b1)·W2 + b2
    let dffn_out = &du2;
    grads.push(("ffn.b2", dffn_out.col_sums(), l.ffn_b2.trainable));
    grads.push(("ffn.w2", cache.ffn_act.matmul_ta(dffn_out), l.ffn_w2.trainable));
    let mut dffn_pre = dffn_out.matmul_tb(&l.ffn_w2.data);
    for (g, &p) in dffn_pre.data.iter_mut().zip(&cache.ffn_pre.data) {
        *g *= gelu_deriv(p);
    }
    grads.push(("ffn.b1", dffn_pre.col_sums(), l.ffn_b1.trainable));
    grads.push(("ffn.w1", cache.y.matmul_ta(&dffn_pre), l.ffn_w1.trainable));
    let mut dy = dffn_pre.matmul_tb(&l.ffn_w1.data);
    dy.add_assign(&du2); // residual branch

    // y = LN1(x + attn_out)
    let (du1, dg1, db1) =
        layer_norm_backward(&dy, &cache.u1_xhat, &cache.u1_rstd, &l.attn_ln_gain.data);
    grads.push(("attn_ln.gain", dg1, l.attn_ln_gain.trainable));
    grads.push(("attn_ln.bias", db1, l.attn_ln_bias.trainable));

    // attn_out = concat·W_o + b_o
    let dattn = &du1;
    grads.push(("attn.bo", dattn.col_sums(), l.bo.trainable));
    grads.push(("attn.wo", cache.concat.matmul_ta(dattn), l.wo.trainable));
    let dconcat = dattn.matmul_tb(&l.wo.data);

    // Per-head attention backward.
    let mut dq_full = Matrix::zeros(cache.x.rows, d);
    let mut dk_full = Matrix::zeros(cache.x.rows, d);
    let mut dv_full = Matrix::zeros(cache.x.rows, d);
    for h in 0..num_heads {
        let (lo, hi) = (h * dh_width, (h + 1) * dh_width);
        let dmix = dconcat.slice_cols(lo, hi);
        let qh = cache.q.slice_cols(lo, hi);
        let kh = cache.k.slice_cols(lo, hi);
        let vh = cache.v.slice_cols(lo, hi);
        let probs = &cache.probs[h];

        let dprobs = dmix.matmul_tb(&vh);
        dv_full.add_into_cols(lo, &probs.matmul_ta(&dmix));

        // softmax backward per row, then the 1/√dh score scale.
        let mut dscores = Matrix::zeros(probs.rows, probs.cols);
        for i in 0..probs.rows {
            let p = probs.row(i);
            let dp = dprobs.row(i);
            let dot: f64 = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
            for (j, out) in dscores.row_mut(i).iter_mut().enumerate() {
                *out = p[j] * (dp[j] - dot) * scale;
            }
        }
        dq_full.add_into_cols(lo, &dscores.matmul(&kh));
        dk_full.add_into_cols(lo, &dscores.matmul_ta(&qh));
    }

    grads.push(("attn.bq", dq_full.col_sums(), l.bq.trainable));
    grads.push(("attn.wq", cache.x.matmul_ta(&dq_full), l.wq.trainable));
    grads.push(("attn.bk", dk_full.col_sums(), l.bk.trainable));
    grads.push(("attn.wk", cache.x.matmul_ta(&dk_full), l.wk.trainable));
    grads.push(("attn.bv", dv_full.col_sums(), l.bv.trainable));
    grads.push(("attn.wv", cache.x.matmul_ta(&dv_full), l.wv.trainable));

    let mut dx = du1; // residual branch
    dx.add_assign(&dq_full.matmul_tb(&l.wq.data));
    dx.add_assign(&dk_full.matmul_tb(&l.wk.data));
    dx.add_assign(&dv_full.matmul_tb(&l.wv.data));
    (dx, grads)
}

fn lstm_backward(
    lstm: &LstmParams,
    cache: &LstmCache,
    dhs: &Matrix,
) -> (Matrix, Matrix, Matrix, Matrix) {
    let (t_len, d) = (cache.x.rows, cache.x.cols);
    let mut dx = Matrix::zeros(t_len, d);
    let mut dw_ih = Matrix::zeros(d, 4 * d);
    let mut dw_hh = Matrix::zeros(d, 4 * d);
    let mut db = Matrix::zeros(1, 4 * d);
    let mut dh_carry = vec![0.0; d];
    let mut dc_carry = vec![0.0; d];
    for t in (0..t_len).rev() {
        let i_g = cache.gate_i.row(t);
        let f_g = cache.gate_f.row(t);
        let g_g = cache.gate_g.row(t);
        let o_g = cache.gate_o.row(t);
        let tc = cache.tanh_cs.row(t);
        let mut dgates = vec![0.0; 4 * d];
        for j in 0..d {
            let dh = dhs.get(t, j) + dh_carry[j];
            let dc = dh * o_g[j] * (1.0 - tc[j] * tc[j]) + dc_carry[j];
            let do_g = dh * tc[j];
            let di = dc * g_g[j];
            let dg = dc * i_g[j];
            let c_prev = if t == 0 { 0.0 } else { cache.cs.get(t - 1, j) };
            let df = dc * c_prev;
            dgates[j] = di * i_g[j] * (1.0 - i_g[j]);
            dgates[d + j] = df * f_g[j] * (1.0 - f_g[j]);
            dgates[2 * d + j] = dg * (1.0 - g_g[j] * g_g[j]);
            dgates[3 * d + j] = do_g * o_g[j] * (1.0 - o_g[j]);
            dc_carry[j] = dc * f_g[j];
        }
        for (col, &dgc) in dgates.iter().enumerate() {
            db.data[col] += dgc;
        }
        let x_t = cache.x.row(t);
        for i in 0..d {
            let xi = x_t[i];
            for (col, &dgc) in dgates.iter().enumerate() {
                dw_ih.data[i * 4 * d + col] += xi * dgc;
            }
        }
        if t > 0 {
            let h_prev = cache.hs.row(t - 1);
            for i in 0..d {
                let hi = h_prev[i];
                for (col, &dgc) in dgates.iter().enumerate() {
                    dw_hh.data[i * 4 * d + col] += hi * dgc;
                }
            }
        }
        for i in 0..d {
            let mut acc_x = 0.0;
            let mut acc_h = 0.0;
            let w_ih_row = lstm.w_ih.data.row(i);
            let w_hh_row = lstm.w_hh.data.row(i);
            for (col, &dgc) in dgates.iter().enumerate() {
                acc_x += dgc * w_ih_row[col];
                acc_h += dgc * w_hh_row[col];
            }
            dx.data[t * d + i] = acc_x;
            dh_carry[i] = acc_h;
        }
    }
    (dx, dw_ih, dw_hh, db)
}
