//! MLM corruption, Adam, and the training loop. Batch gradients are
//! averaged in a fixed sentence order regardless of how the per-sentence
//! backward passes are scheduled, so parallel and sequential runs produce
//! bit-identical parameters.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par::par_map;
use crate::seeds::{mix2, mix3};
use crate::tokenizer::{TokenizedSentence, WordSpan, MASK_ID};

use super::backward::backward;
use super::math::Matrix;
use super::{Gradients, ModelConfig, ModelParams};

const MASK_PROB: f64 = 0.15;
const REPLACE_WITH_MASK: f64 = 0.8;
const REPLACE_WITH_RANDOM: f64 = 0.1;
const SPECIAL_COUNT: u32 = 5;

/// Standard MLM corruption: select word-span tokens at `mask_prob`; of the
/// selected, 80% become MASK, 10% a random non-special token, 10% stay.
/// Special tokens are never selected. Returns (corrupted ids, targets,
/// loss mask); targets hold the original id at selected positions.
pub fn mask_batch(
    ids: &[u32],
    word_spans: &[WordSpan],
    vocab_size: usize,
    mask_prob: f64,
    seed: u64,
) -> (Vec<u32>, Vec<u32>, Vec<bool>) {
    assert!(mask_prob > 0.0 && mask_prob < 1.0, "mask_prob in (0,1)");
    let mut maskable = vec![false; ids.len()];
    for span in word_spans {
        for m in &mut maskable[span.first..=span.last] {
            *m = true;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corrupted = ids.to_vec();
    let mut targets = vec![0u32; ids.len()];
    let mut loss_mask = vec![false; ids.len()];
    for (t, &id) in ids.iter().enumerate() {
        if !maskable[t] || rng.gen::<f64>() >= mask_prob {
            continue;
        }
        targets[t] = id;
        loss_mask[t] = true;
        let roll: f64 = rng.gen();
        if roll < REPLACE_WITH_MASK {
            corrupted[t] = MASK_ID;
        } else if roll < REPLACE_WITH_MASK + REPLACE_WITH_RANDOM {
            corrupted[t] = rng.gen_range(SPECIAL_COUNT..vocab_size as u32);
        }
    }
    (corrupted, targets, loss_mask)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
    t: u64,
}

/// One optimizer step over the trainable tensors present in `grads`.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (name, tensor) in params.tensors_mut() {
        if !tensor.trainable {
            continue;
        }
        let Some(g) = grads.0.get(&name) else { continue };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(g.rows, g.cols));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(g.rows, g.cols));
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            tensor.data.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Trains in place and returns the per-step loss curve. With
/// `freeze_backbone`, backbone tensors keep their exact bit patterns; only
/// the grammar module (and output bias) is updated. Sentences longer than
/// `max_seq_len` are skipped, matching the scoring paths.
#[allow(clippy::too_many_arguments)]
pub fn train(
    corpus: &[TokenizedSentence],
    config: &ModelConfig,
    params: &mut ModelParams,
    freeze_backbone: bool,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("training corpus is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be ≥ 1".into()));
    }
    params.set_backbone_trainable(!freeze_backbone);
    let mut adam = AdamState::default();
    let mut curve = Vec::new();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix2(seed, epoch as u64));
        order.shuffle(&mut epoch_rng);
        for (batch_no, batch) in order.chunks(batch_size).enumerate() {
            let offset = batch_no * batch_size;
            let jobs: Vec<(usize, usize)> = batch
                .iter()
                .enumerate()
                .map(|(k, &si)| (offset + k, si))
                .collect();
            let results: Vec<Result<Option<(f64, Gradients)>>> =
                par_map(&jobs, |&(slot, si)| {
                    let s = &corpus[si];
                    if s.ids.len() > config.max_seq_len {
                        return Ok(None);
                    }
                    let (corrupted, targets, loss_mask) = mask_batch(
                        &s.ids,
                        &s.word_spans,
                        config.vocab_size,
                        MASK_PROB,
                        mix3(seed, epoch as u64, slot as u64),
                    );
                    if !loss_mask.iter().any(|&m| m) {
                        return Ok(None);
                    }
                    backward(params, config, &corrupted, &targets, &loss_mask).map(Some)
                });
            let mut total = Gradients::default();
            let mut loss_sum = 0.0;
            let mut count = 0usize;
            for r in results {
                if let Some((loss, grads)) = r? {
                    total.add_assign(&grads);
                    loss_sum += loss;
                    count += 1;
                }
            }
            if count == 0 {
                continue;
            }
            total.scale_assign(1.0 / count as f64);
            curve.push(loss_sum / count as f64);
            adam_step(params, &total, &mut adam, lr);
        }
    }
    Ok(curve)
}
