//! Logit-lens probing of polypersonal inflections: each backbone layer's
//! hidden states are pushed through the fine-tuned grammar head and the
//! gold affix token's probability and rank are recorded per layer.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{select_affix, AnnotatedSentence, ParadigmTable, Placement};
use crate::error::{Error, Result};
use crate::model::forward::{backbone_states, head_logits};
use crate::model::{GrammarModule, ModelConfig, ModelParams};
use crate::par::par_map;
use crate::tokenizer::{encode, TokenizedSentence, Vocab, MASK_ID, UNK_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub sentence_id: String,
    /// 0 is the embedding output, `num_layers` the last encoder state.
    pub layer: usize,
    pub gold_id: u32,
    pub probability: f64,
    /// 1-based; ties in logit value break by ascending token id.
    pub rank: usize,
    pub variant: GrammarModule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSummary {
    /// Indexed by layer.
    pub mean_probability: Vec<f64>,
    pub mean_rank: Vec<f64>,
    /// Records per layer.
    pub sample_count: usize,
}

fn piece_char_len(vocab: &Vocab, id: u32, word_initial: bool) -> usize {
    if id == UNK_ID {
        return 1;
    }
    let piece = vocab.piece(id);
    if !word_initial && piece.starts_with("##") {
        piece.chars().count() - 2
    } else {
        piece.chars().count()
    }
}

/// Token positions whose pieces lie inside the affix character range of
/// each linked verb. A piece mixing base and affix characters makes the
/// alignment impossible and is an error; a sentence without links yields
/// an empty list.
pub fn locate_inflection_tokens(
    s: &AnnotatedSentence,
    t: &TokenizedSentence,
    vocab: &Vocab,
    table: &ParadigmTable,
) -> Result<Vec<usize>> {
    let mut positions = Vec::new();
    for link in &s.agreements {
        let word = &s.words[link.verb_index];
        let affix = select_affix(link.person, link.number, table);
        let word_chars = word.chars().count();
        let affix_chars = affix.chars().count();
        let (affix_start, affix_end) = match table.placement() {
            Placement::Suffix => (word_chars - affix_chars, word_chars),
            Placement::Prefix => (0, affix_chars),
        };
        let span = t
            .word_spans
            .iter()
            .find(|sp| sp.word == link.verb_index)
            .expect("every word has a span");
        let mut offset = 0usize;
        for pos in span.first..=span.last {
            let len = piece_char_len(vocab, t.ids[pos], pos == span.first);
            let (piece_start, piece_end) = (offset, offset + len);
            offset = piece_end;
            if piece_start >= affix_end || piece_end <= affix_start {
                continue;
            }
            if piece_start < affix_start || piece_end > affix_end {
                return Err(Error::AffixNotAligned {
                    word: word.clone(),
                    affix: affix.to_string(),
                });
            }
            positions.push(pos);
        }
    }
    positions.sort_unstable();
    Ok(positions)
}

/// The probed input: every inflection position replaced by MASK.
pub fn masked_input(t: &TokenizedSentence, positions: &[usize]) -> Vec<u32> {
    let mut input = t.ids.clone();
    for &p in positions {
        input[p] = MASK_ID;
    }
    input
}

/// Runs the layer probe for one sentence. All inflection positions are
/// masked together; metrics are recorded at the first one, reading
/// left to right. Returns one record per layer, 0..=L.
pub fn probe_layers(
    params: &ModelParams,
    config: &ModelConfig,
    t: &TokenizedSentence,
    positions: &[usize],
    sentence_id: &str,
) -> Result<Vec<ProbeRecord>> {
    if positions.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let input = masked_input(t, positions);
    let target = positions[0];
    let gold_id = t.ids[target];
    let states = backbone_states(params, config, &input)?;
    let mut records = Vec::with_capacity(states.len());
    for (layer, state) in states.iter().enumerate() {
        let (_, logits) = head_logits(params, config, state);
        let row = logits.row(target);
        let probs = softmax_slice(row);
        let gold_logit = row[gold_id as usize];
        let rank = 1 + row
            .iter()
            .enumerate()
            .filter(|&(id, &l)| l > gold_logit || (l == gold_logit && (id as u32) < gold_id))
            .count();
        records.push(ProbeRecord {
            sentence_id: sentence_id.to_string(),
            layer,
            gold_id,
            probability: probs[gold_id as usize],
            rank,
            variant: config.grammar_module,
        });
    }
    Ok(records)
}

fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probes every linked sentence in the sample; sentences without links,
/// too long for the model, or with affixes the tokenization cannot
/// delimit are skipped and counted.
pub fn probe_corpus(
    params: &ModelParams,
    config: &ModelConfig,
    vocab: &Vocab,
    table: &ParadigmTable,
    sample: &[AnnotatedSentence],
) -> Result<(Vec<ProbeRecord>, usize)> {
    let probed: Vec<Result<Option<Vec<ProbeRecord>>>> = par_map(sample, |s| {
        let t = encode(s, vocab);
        if t.ids.len() > config.max_seq_len {
            return Ok(None);
        }
        // Sentences whose tokenization merges affix and base characters
        // into one piece cannot be measured; they are skipped and counted
        // like over-length ones rather than aborting the sample.
        let positions = match locate_inflection_tokens(s, &t, vocab, table) {
            Ok(p) => p,
            Err(Error::AffixNotAligned { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        if positions.is_empty() {
            return Ok(None);
        }
        probe_layers(params, config, &t, &positions, &s.id).map(Some)
    });
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for r in probed {
        match r? {
            Some(mut rs) => records.append(&mut rs),
            None => skipped += 1,
        }
    }
    Ok((records, skipped))
}

/// Per-layer means over the records.
pub fn summarize(records: &[ProbeRecord]) -> Result<ProbeSummary> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let layers = records.iter().map(|r| r.layer).max().unwrap() + 1;
    let mut prob_sums = vec![0.0f64; layers];
    let mut rank_sums = vec![0.0f64; layers];
    let mut counts = vec![0usize; layers];
    for r in records {
        prob_sums[r.layer] += r.probability;
        rank_sums[r.layer] += r.rank as f64;
        counts[r.layer] += 1;
    }
    if counts.iter().any(|&c| c != counts[0]) {
        return Err(Error::DimensionMismatch(format!(
            "uneven per-layer record counts {counts:?}"
        )));
    }
    Ok(ProbeSummary {
        mean_probability: prob_sums.iter().map(|s| s / counts[0] as f64).collect(),
        mean_rank: rank_sums.iter().map(|s| s / counts[0] as f64).collect(),
        sample_count: counts[0],
    })
}

fn variant_label(v: GrammarModule) -> &'static str {
    match v {
        GrammarModule::MlpHead => "mlp",
        GrammarModule::LstmHead => "lstm",
    }
}

/// Raw records CSV: sentence_id, layer, gold_id, probability, rank,
/// variant.
pub fn write_records_csv(records: &[ProbeRecord], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "sentence_id,layer,gold_id,probability,rank,variant")
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(
            file,
            "{},{},{},{},{},{}",
            r.sentence_id,
            r.layer,
            r.gold_id,
            r.probability,
            r.rank,
            variant_label(r.variant)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Summary CSV: layer, mean_probability, mean_rank.
pub fn write_summary_csv(summary: &ProbeSummary, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "layer,mean_probability,mean_rank").map_err(|e| Error::io(path, e))?;
    for (layer, (p, r)) in summary.mean_probability.iter().zip(&summary.mean_rank).enumerate() {
        writeln!(file, "{layer},{p},{r}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{apply_polypersonality, generate_corpus, Lexicon};
    use crate::model::forward::forward;
    use crate::tokenizer::train_vocab;

    fn setup(placement: Placement, n: usize) -> (Vec<AnnotatedSentence>, Vocab, ParadigmTable) {
        let lex = Lexicon::builtin();
        let base = generate_corpus(&lex, n, 31).unwrap();
        let table = match placement {
            Placement::Suffix => ParadigmTable::default(),
            Placement::Prefix => ParadigmTable::default().with_placement(Placement::Prefix),
        };
        let poly: Vec<AnnotatedSentence> =
            base.iter().map(|s| apply_polypersonality(s, &table).unwrap()).collect();
        let vocab = train_vocab(&base, 2048, 0).unwrap();
        (poly, vocab, table)
    }

    fn config(vocab_size: usize, grammar: GrammarModule) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            vocab_size,
            max_seq_len: 64,
            grammar_module: grammar,
            seed: 11,
        }
    }

    #[test]
    fn sentences_without_links_locate_nothing() {
        let lex = Lexicon::builtin();
        let base = generate_corpus(&lex, 60, 8).unwrap();
        let table = ParadigmTable::default();
        let vocab = train_vocab(&base, 2048, 0).unwrap();
        let unlinked = base.iter().find(|s| s.agreements.is_empty()).unwrap();
        let t = encode(unlinked, &vocab);
        assert!(locate_inflection_tokens(unlinked, &t, &vocab, &table).unwrap().is_empty());
    }

    #[test]
    fn located_pieces_spell_the_affix_suffix() {
        let (poly, vocab, table) = setup(Placement::Suffix, 500);
        let mut checked = 0;
        for s in &poly {
            if s.agreements.is_empty() {
                continue;
            }
            let t = encode(s, &vocab);
            // Base-trained merges can straddle the affix boundary on some
            // forms; those sentences are skipped here as in probing.
            let positions = match locate_inflection_tokens(s, &t, &vocab, &table) {
                Err(Error::AffixNotAligned { .. }) => continue,
                r => r.unwrap(),
            };
            for link in &s.agreements {
                let affix = select_affix(link.person, link.number, &table);
                let span = t.word_spans.iter().find(|sp| sp.word == link.verb_index).unwrap();
                let spelled: String = positions
                    .iter()
                    .filter(|&&p| p >= span.first && p <= span.last)
                    .map(|&p| vocab.piece(t.ids[p]).trim_start_matches("##"))
                    .collect();
                assert_eq!(spelled, affix, "sentence {}", s.id);
                checked += 1;
            }
        }
        assert!(checked > 100, "enough aligned sentences in the sample, got {checked}");
    }

    #[test]
    fn located_pieces_spell_the_affix_prefix() {
        let (poly, vocab, table) = setup(Placement::Prefix, 200);
        let mut checked = 0;
        for s in poly.iter().filter(|s| !s.agreements.is_empty()) {
            let t = encode(s, &vocab);
            let positions = match locate_inflection_tokens(s, &t, &vocab, &table) {
                Err(Error::AffixNotAligned { .. }) => continue,
                r => r.unwrap(),
            };
            assert!(!positions.is_empty(), "sentence {}", s.id);
            let link = &s.agreements[0];
            let affix = select_affix(link.person, link.number, &table);
            let span = t.word_spans.iter().find(|sp| sp.word == link.verb_index).unwrap();
            assert_eq!(positions[0], span.first, "prefix affix starts the word");
            let spelled: String = positions
                .iter()
                .map(|&p| vocab.piece(t.ids[p]).trim_start_matches("##"))
                .collect();
            assert_eq!(spelled, affix);
            checked += 1;
        }
        assert!(checked > 40, "enough aligned sentences in the sample, got {checked}");
    }

    #[test]
    fn merged_affix_boundary_is_reported() {
        // Training the vocab on affixed text merges base and affix into
        // single pieces, so the affix range cannot be covered.
        let lex = Lexicon::builtin();
        let base = generate_corpus(&lex, 120, 77).unwrap();
        let table = ParadigmTable::default();
        let poly: Vec<AnnotatedSentence> =
            base.iter().map(|s| apply_polypersonality(s, &table).unwrap()).collect();
        let vocab = train_vocab(&poly, 4096, 0).unwrap();
        let mut hit = false;
        for s in poly.iter().filter(|s| !s.agreements.is_empty()) {
            let t = encode(s, &vocab);
            match locate_inflection_tokens(s, &t, &vocab, &table) {
                Err(Error::AffixNotAligned { word, affix }) => {
                    assert!(word.ends_with(&affix) || word.starts_with(&affix));
                    hit = true;
                    break;
                }
                Ok(_) => continue,
                Err(e) => panic!("unexpected error {e:?}"),
            }
        }
        assert!(hit, "at least one affixed verb merges across the boundary");
    }

    #[test]
    fn misaligned_sentences_are_skipped_not_fatal() {
        // Same fixture as above: a poly-trained vocab guarantees some
        // merged boundaries, which must reduce the sample rather than
        // abort it.
        let lex = Lexicon::builtin();
        let base = generate_corpus(&lex, 120, 77).unwrap();
        let table = ParadigmTable::default();
        let poly: Vec<AnnotatedSentence> =
            base.iter().map(|s| apply_polypersonality(s, &table).unwrap()).collect();
        let vocab = train_vocab(&poly, 4096, 0).unwrap();
        let cfg = config(vocab.len(), GrammarModule::MlpHead);
        let params = ModelParams::init(&cfg).unwrap();
        let (records, skipped) = probe_corpus(&params, &cfg, &vocab, &table, &poly).unwrap();
        assert!(skipped > 0, "fixture must produce at least one skip");
        let probed = records.len() / (cfg.num_layers + 1);
        assert!(probed > 0, "alignable sentences must still be probed");
        assert_eq!(probed + skipped, poly.len());
    }

    #[test]
    fn probe_masks_exactly_the_inflection_positions() {
        let (poly, vocab, table) = setup(Placement::Suffix, 100);
        let s = poly.iter().find(|s| !s.agreements.is_empty()).unwrap();
        let t = encode(s, &vocab);
        let positions = locate_inflection_tokens(s, &t, &vocab, &table).unwrap();
        let input = masked_input(&t, &positions);
        for (i, (&got, &orig)) in input.iter().zip(&t.ids).enumerate() {
            if positions.contains(&i) {
                assert_eq!(got, MASK_ID);
                assert_ne!(orig, MASK_ID, "gold is never MASK itself");
            } else {
                assert_eq!(got, orig);
            }
        }
    }

    #[test]
    fn last_layer_record_matches_model_output() {
        for grammar in [GrammarModule::MlpHead, GrammarModule::LstmHead] {
            let (poly, vocab, table) = setup(Placement::Suffix, 60);
            let c = config(vocab.len(), grammar);
            let mut params = ModelParams::init(&c).unwrap();
            for (_, tn) in params.tensors_mut() {
                for (i, x) in tn.data.data.iter_mut().enumerate() {
                    *x = ((i % 9) as f64 - 4.0) * 0.04;
                }
            }
            let s = poly.iter().find(|s| !s.agreements.is_empty()).unwrap();
            let t = encode(s, &vocab);
            let positions = locate_inflection_tokens(s, &t, &vocab, &table).unwrap();
            let records = probe_layers(&params, &c, &t, &positions, &s.id).unwrap();
            assert_eq!(records.len(), c.num_layers + 1);
            let input = masked_input(&t, &positions);
            let trace = forward(&params, &c, &input).unwrap();
            let row = trace.logits.row(positions[0]);
            let gold = t.ids[positions[0]] as usize;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let prob = exps[gold] / exps.iter().sum::<f64>();
            let last = &records[c.num_layers];
            assert_eq!(last.probability, prob, "bit-identical with the model's own head");
            assert!(last.rank >= 1 && last.rank <= c.vocab_size);
        }
    }

    #[test]
    fn uniform_logits_rank_by_token_id() {
        let (poly, vocab, table) = setup(Placement::Suffix, 40);
        let c = config(vocab.len(), GrammarModule::MlpHead);
        let mut params = ModelParams::init(&c).unwrap();
        for (_, tn) in params.tensors_mut() {
            for x in &mut tn.data.data {
                *x = 0.0;
            }
        }
        let s = poly.iter().find(|s| !s.agreements.is_empty()).unwrap();
        let t = encode(s, &vocab);
        let positions = locate_inflection_tokens(s, &t, &vocab, &table).unwrap();
        let records = probe_layers(&params, &c, &t, &positions, &s.id).unwrap();
        let gold = t.ids[positions[0]];
        for r in &records {
            assert_eq!(r.rank, gold as usize + 1, "ties break by ascending token id");
            assert!((r.probability - 1.0 / c.vocab_size as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_of_one_record_is_that_record() {
        let r = ProbeRecord {
            sentence_id: "s1".into(),
            layer: 0,
            gold_id: 9,
            probability: 0.25,
            rank: 3,
            variant: GrammarModule::MlpHead,
        };
        let summary = summarize(&[r.clone()]).unwrap();
        assert_eq!(summary.mean_probability, vec![0.25]);
        assert_eq!(summary.mean_rank, vec![3.0]);
        assert_eq!(summary.sample_count, 1);
        let dup = summarize(&[r.clone(), r.clone(), r]).unwrap();
        assert_eq!(dup.mean_probability, vec![0.25]);
        assert_eq!(dup.mean_rank, vec![3.0]);
        assert!(matches!(summarize(&[]).unwrap_err(), Error::EmptyRecords));
    }

    #[test]
    fn summary_means_match_flat_recomputation() {
        let (poly, vocab, table) = setup(Placement::Suffix, 30);
        let c = config(vocab.len(), GrammarModule::MlpHead);
        let params = ModelParams::init(&c).unwrap();
        let (records, skipped) = probe_corpus(&params, &c, &vocab, &table, &poly).unwrap();
        assert!(skipped > 0, "unlinked sentences are skipped");
        let summary = summarize(&records).unwrap();
        for layer in 0..=c.num_layers {
            let layer_records: Vec<&ProbeRecord> =
                records.iter().filter(|r| r.layer == layer).collect();
            assert_eq!(layer_records.len(), summary.sample_count);
            let p: f64 =
                layer_records.iter().map(|r| r.probability).sum::<f64>() / summary.sample_count as f64;
            assert!((summary.mean_probability[layer] - p).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let rec_path = dir.path().join("records.csv");
        let sum_path = dir.path().join("summary.csv");
        let r = ProbeRecord {
            sentence_id: "s7".into(),
            layer: 1,
            gold_id: 12,
            probability: 0.5,
            rank: 2,
            variant: GrammarModule::LstmHead,
        };
        write_records_csv(&[r], &rec_path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&rec_path).unwrap(),
            "sentence_id,layer,gold_id,probability,rank,variant\ns7,1,12,0.5,2,lstm\n"
        );
        let summary = ProbeSummary {
            mean_probability: vec![0.1, 0.5],
            mean_rank: vec![4.0, 2.0],
            sample_count: 10,
        };
        write_summary_csv(&summary, &sum_path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&sum_path).unwrap(),
            "layer,mean_probability,mean_rank\n0,0.1,4\n1,0.5,2\n"
        );
    }
}
