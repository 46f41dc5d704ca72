//! PLL-word-l2r pseudo-log-likelihood scoring and pseudo-perplexity.
//!
//! Within a multi-piece word, token t_i is scored with t_i and every later
//! piece of the same word masked, while all other words stay fully
//! visible. Each token costs one forward pass.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::forward::forward;
use crate::model::math::log_softmax_row;
use crate::model::{ModelConfig, ModelParams};
use crate::par::par_map;
use crate::tokenizer::{encode, TokenizedSentence, Vocab, MASK_ID};
use crate::augment::AnnotatedSentence;

/// The masked input used to score each non-special position, in position
/// order: all other words visible, earlier pieces of the word visible, the
/// scored piece and the rest of its word replaced by MASK.
pub fn masked_inputs(t: &TokenizedSentence) -> Vec<(usize, Vec<u32>)> {
    let mut out = Vec::new();
    for span in &t.word_spans {
        for pos in span.first..=span.last {
            let mut input = t.ids.clone();
            for masked in input.iter_mut().take(span.last + 1).skip(pos) {
                *masked = MASK_ID;
            }
            out.push((pos, input));
        }
    }
    out
}

/// Log-probability of each non-special token under the word-l2r masking
/// scheme, in position order.
pub fn pll_word_l2r(
    params: &ModelParams,
    config: &ModelConfig,
    t: &TokenizedSentence,
) -> Result<Vec<f64>> {
    let inputs = masked_inputs(t);
    if inputs.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut scores = Vec::with_capacity(inputs.len());
    for (pos, input) in inputs {
        let trace = forward(params, config, &input)?;
        let ls = log_softmax_row(trace.logits.row(pos));
        scores.push(ls[t.ids[pos] as usize]);
    }
    Ok(scores)
}

/// exp(−mean(scores)); always ≥ 1 for log-probabilities.
pub fn sentence_pseudo_perplexity(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((-mean).exp())
}

#[derive(Debug, Clone)]
pub struct SentencePpl {
    pub id: String,
    pub n_tokens: usize,
    pub pll_sum: f64,
    pub pseudo_ppl: f64,
}

#[derive(Debug, Clone)]
pub struct PplReport {
    pub setting: String,
    pub per_sentence: Vec<SentencePpl>,
    /// Sentence-weighted mean of pseudo-perplexities.
    pub mean: f64,
    /// Population standard deviation of the per-sentence values.
    pub std: f64,
    pub sample_size: usize,
    /// Sentences dropped for exceeding max_seq_len.
    pub skipped: usize,
    /// exp(−total log-probability / total tokens).
    pub token_weighted_ppl: f64,
}

/// Scores a corpus sample. Sentences whose tokenization exceeds
/// max_seq_len are skipped and counted.
pub fn corpus_ppl(
    params: &ModelParams,
    config: &ModelConfig,
    vocab: &Vocab,
    sample: &[AnnotatedSentence],
    setting: &str,
) -> Result<PplReport> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let scored: Vec<Result<Option<SentencePpl>>> = par_map(sample, |s| {
        let t = encode(s, vocab);
        if t.ids.len() > config.max_seq_len {
            return Ok(None);
        }
        let scores = pll_word_l2r(params, config, &t)?;
        Ok(Some(SentencePpl {
            id: s.id.clone(),
            n_tokens: scores.len(),
            pll_sum: scores.iter().sum(),
            pseudo_ppl: sentence_pseudo_perplexity(&scores)?,
        }))
    });
    let mut per_sentence = Vec::with_capacity(sample.len());
    let mut skipped = 0usize;
    for r in scored {
        match r? {
            Some(s) => per_sentence.push(s),
            None => skipped += 1,
        }
    }
    if per_sentence.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = per_sentence.len() as f64;
    let mean = per_sentence.iter().map(|s| s.pseudo_ppl).sum::<f64>() / n;
    let var = per_sentence
        .iter()
        .map(|s| (s.pseudo_ppl - mean) * (s.pseudo_ppl - mean))
        .sum::<f64>()
        / n;
    let total_pll: f64 = per_sentence.iter().map(|s| s.pll_sum).sum();
    let total_tokens: usize = per_sentence.iter().map(|s| s.n_tokens).sum();
    Ok(PplReport {
        setting: setting.to_string(),
        sample_size: per_sentence.len(),
        skipped,
        mean,
        std: var.sqrt(),
        token_weighted_ppl: (-total_pll / total_tokens as f64).exp(),
        per_sentence,
    })
}

/// Per-sentence CSV: sentence_id, n_tokens, pll_sum, pseudo_ppl.
pub fn write_ppl_csv(report: &PplReport, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "sentence_id,n_tokens,pll_sum,pseudo_ppl").map_err(|e| Error::io(path, e))?;
    for s in &report.per_sentence {
        writeln!(file, "{},{},{},{}", s.id, s.n_tokens, s.pll_sum, s.pseudo_ppl)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
