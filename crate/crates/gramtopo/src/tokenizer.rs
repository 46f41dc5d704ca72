//! Subword tokenization with word-boundary tracking.
//!
//! Trains a greedy pair-merge vocabulary over a corpus and encodes words
//! as longest-match pieces, marking non-initial pieces with a `##`
//! continuation prefix. Word spans are kept so that downstream scoring can
//! mask the remaining pieces of a multi-piece word.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_polypersonality, AnnotatedSentence, ParadigmTable};
use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

const SPECIALS: [&str; 5] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN];
const CONTINUATION: &str = "##";

/// Immutable subword vocabulary. Ids are dense indices into the piece list;
/// the five special tokens occupy ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_chars: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    pieces: Vec<String>,
    specials: BTreeMap<String, u32>,
}

impl Vocab {
    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocab piece {p:?}")));
            }
        }
        for (want_id, tok) in SPECIALS.iter().enumerate() {
            if index.get(*tok) != Some(&(want_id as u32)) {
                return Err(Error::InvalidConfig(format!(
                    "special token {tok} missing or not at id {want_id}"
                )));
            }
        }
        let max_piece_chars = pieces
            .iter()
            .filter(|p| !SPECIALS.contains(&p.as_str()))
            .map(|p| p.strip_prefix(CONTINUATION).unwrap_or(p).chars().count())
            .max()
            .unwrap_or(0);
        Ok(Vocab { pieces, index, max_piece_chars })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let specials = SPECIALS
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), i as u32))
            .collect();
        let file = VocabFile { pieces: self.pieces.clone(), specials };
        let text = serde_json::to_string_pretty(&file).expect("vocab serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "vocab",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        for (tok, id) in &file.specials {
            if file.pieces.get(*id as usize).map(String::as_str) != Some(tok.as_str()) {
                return Err(Error::Format {
                    what: "vocab",
                    path: path.to_path_buf(),
                    reason: format!("special {tok} does not match piece at id {id}"),
                });
            }
        }
        Vocab::from_pieces(file.pieces).map_err(|e| Error::Format {
            what: "vocab",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Token ids for one sentence, wrapped in CLS/SEP, plus the span of each
/// source word. Spans are inclusive and tile the non-special range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub ids: Vec<u32>,
    pub word_spans: Vec<WordSpan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordSpan {
    pub word: usize,
    pub first: usize,
    pub last: usize,
}

/// Trains a vocabulary by greedy pair merging: repeatedly merge the most
/// frequent adjacent piece pair (ties broken lexicographically) until the
/// target size is reached or no pair occurs twice. The seed is accepted for
/// interface stability; training has no random choices.
pub fn train_vocab(corpus: &[AnnotatedSentence], target_size: usize, _seed: u64) -> Result<Vocab> {
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for s in corpus {
        for w in &s.words {
            *word_freq.entry(w.to_lowercase()).or_insert(0) += 1;
        }
    }
    let mut alphabet: BTreeSet<char> = BTreeSet::new();
    for w in word_freq.keys() {
        alphabet.extend(w.chars());
    }
    let required = SPECIALS.len() + 2 * alphabet.len();
    if target_size < required {
        return Err(Error::TargetTooSmall { target: target_size, required });
    }

    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet.iter().map(|c| c.to_string()));
    pieces.extend(alphabet.iter().map(|c| format!("{CONTINUATION}{c}")));
    let mut known: BTreeSet<String> = pieces.iter().cloned().collect();

    // Each distinct word as its current piece sequence, weighted by count.
    let mut seqs: Vec<(Vec<String>, u64)> = word_freq
        .iter()
        .map(|(w, &n)| {
            let seq = w
                .chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                .collect();
            (seq, n)
        })
        .collect();

    while pieces.len() < target_size {
        let mut pair_counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (seq, n) in &seqs {
            for pair in seq.windows(2) {
                *pair_counts.entry((&pair[0], &pair[1])).or_insert(0) += n;
            }
        }
        let best = pair_counts
            .iter()
            .filter(|(_, &n)| n >= 2)
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)));
        let Some((&(left, right), _)) = best else { break };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{}", &right[CONTINUATION.len()..]);
        if known.insert(merged.clone()) {
            pieces.push(merged.clone());
        }
        for (seq, _) in &mut seqs {
            let mut i = 0;
            while i + 1 < seq.len() {
                if seq[i] == left && seq[i + 1] == right {
                    seq[i] = merged.clone();
                    seq.remove(i + 1);
                }
                i += 1;
            }
        }
    }
    Vocab::from_pieces(pieces)
}

fn encode_word(word: &str, v: &Vocab, out: &mut Vec<u32>) {
    let lower = word.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    if chars.is_empty() {
        out.push(UNK_ID);
        return;
    }
    let mut pos = 0;
    while pos < chars.len() {
        let max_len = (chars.len() - pos).min(v.max_piece_chars.max(1));
        let mut matched = None;
        for len in (1..=max_len).rev() {
            let body: String = chars[pos..pos + len].iter().collect();
            let cand = if pos == 0 { body } else { format!("{CONTINUATION}{body}") };
            if let Some(id) = v.id_of(&cand) {
                matched = Some((id, len));
                break;
            }
        }
        match matched {
            Some((id, len)) => {
                out.push(id);
                pos += len;
            }
            None => {
                out.push(UNK_ID);
                pos += 1;
            }
        }
    }
}

/// Greedy longest-match encoding. Unknown characters fall back to UNK one
/// character at a time, so encoding never fails.
pub fn encode(s: &AnnotatedSentence, v: &Vocab) -> TokenizedSentence {
    let mut ids = vec![CLS_ID];
    let mut word_spans = Vec::with_capacity(s.words.len());
    for (wi, word) in s.words.iter().enumerate() {
        let first = ids.len();
        encode_word(word, v, &mut ids);
        word_spans.push(WordSpan { word: wi, first, last: ids.len() - 1 });
    }
    ids.push(SEP_ID);
    TokenizedSentence { ids, word_spans }
}

/// Reassembles word strings from spans, stripping continuation markers.
/// Exact inverse of [`encode`] on UNK-free input.
pub fn decode(t: &TokenizedSentence, v: &Vocab) -> Vec<String> {
    t.word_spans
        .iter()
        .map(|span| {
            let mut word = String::new();
            for &id in &t.ids[span.first..=span.last] {
                let piece = v.piece(id);
                word.push_str(piece.strip_prefix(CONTINUATION).unwrap_or(piece));
            }
            word
        })
        .collect()
}

/// Mean number of extra pieces an affixed verb costs over its base form,
/// across all agreement links in the corpus.
pub fn affix_token_overhead(
    corpus: &[AnnotatedSentence],
    table: &ParadigmTable,
    v: &Vocab,
) -> Result<f64> {
    let mut total_extra = 0i64;
    let mut links = 0u64;
    for s in corpus {
        if s.agreements.is_empty() {
            continue;
        }
        let applied = apply_polypersonality(s, table)?;
        for link in &s.agreements {
            let mut base = Vec::new();
            let mut affixed = Vec::new();
            encode_word(&s.words[link.verb_index], v, &mut base);
            encode_word(&applied.words[link.verb_index], v, &mut affixed);
            total_extra += affixed.len() as i64 - base.len() as i64;
            links += 1;
        }
    }
    if links == 0 {
        return Err(Error::EmptySample);
    }
    Ok(total_extra as f64 / links as f64)
}
