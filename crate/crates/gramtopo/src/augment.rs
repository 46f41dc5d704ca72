//! Polypersonal agreement augmentation.
//!
//! Rewrites annotated Russian sentences by attaching an object-agreement
//! affix to each transitive verb, either as a suffix (`слышала` →
//! `слышалает`) or as a prefix (`слышала` → `етслышала`). Also generates
//! synthetic annotated corpora from a small template lexicon, which stands
//! in for a scraped text collection and keeps every agreement annotation
//! exact.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::par_map_indexed;
use crate::seeds::mix2;

/// Grammatical person of the agreement controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Person {
    First,
    Second,
    Third,
}

impl From<Person> for u8 {
    fn from(p: Person) -> u8 {
        match p {
            Person::First => 1,
            Person::Second => 2,
            Person::Third => 3,
        }
    }
}

impl TryFrom<u8> for Person {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Person::First),
            2 => Ok(Person::Second),
            3 => Ok(Person::Third),
            other => Err(format!("person must be 1, 2 or 3, got {other}")),
        }
    }
}

/// Grammatical number of the agreement controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Number {
    Singular,
    Plural,
}

pub const PERSONS: [Person; 3] = [Person::First, Person::Second, Person::Third];
pub const NUMBERS: [Number; 2] = [Number::Singular, Number::Plural];

/// One verb–object agreement relation inside a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementLink {
    #[serde(rename = "verb")]
    pub verb_index: usize,
    #[serde(rename = "object")]
    pub object_index: usize,
    pub person: Person,
    pub number: Number,
}

/// A sentence as a list of words plus its agreement annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub id: String,
    pub words: Vec<String>,
    pub agreements: Vec<AgreementLink>,
}

impl AnnotatedSentence {
    /// Checks the structural invariants: indices in range, verb and object
    /// distinct, no word indexed as the verb of two links, words non-empty
    /// and free of internal whitespace.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidAnnotation { id: self.id.clone(), reason };
        for (i, w) in self.words.iter().enumerate() {
            if w.is_empty() {
                return Err(fail(format!("word {i} is empty")));
            }
            if w.chars().any(char::is_whitespace) {
                return Err(fail(format!("word {i} ({w:?}) contains whitespace")));
            }
        }
        let mut seen_verbs = Vec::new();
        for (i, link) in self.agreements.iter().enumerate() {
            if link.verb_index >= self.words.len() || link.object_index >= self.words.len() {
                return Err(fail(format!("link {i} indexes outside the sentence")));
            }
            if link.verb_index == link.object_index {
                return Err(fail(format!("link {i} has verb_index == object_index")));
            }
            if seen_verbs.contains(&link.verb_index) {
                return Err(fail(format!("word {} is the verb of two links", link.verb_index)));
            }
            seen_verbs.push(link.verb_index);
        }
        Ok(())
    }
}

/// Where the agreement affix attaches to the verb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Suffix,
    Prefix,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Suffix => write!(f, "suffix"),
            Placement::Prefix => write!(f, "prefix"),
        }
    }
}

/// Total (person × number) → affix map plus the placement mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TableFile", into = "TableFile")]
pub struct ParadigmTable {
    placement: Placement,
    // Indexed by (person - 1) * 2 + number, number: singular = 0, plural = 1.
    entries: [String; 6],
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    placement: Placement,
    entries: BTreeMap<String, String>,
}

fn cell_key(person: Person, number: Number) -> String {
    let n = match number {
        Number::Singular => "sg",
        Number::Plural => "pl",
    };
    format!("{}{}", u8::from(person), n)
}

fn cell_index(person: Person, number: Number) -> usize {
    (u8::from(person) as usize - 1) * 2 + matches!(number, Number::Plural) as usize
}

impl From<ParadigmTable> for TableFile {
    fn from(t: ParadigmTable) -> TableFile {
        let mut entries = BTreeMap::new();
        for p in PERSONS {
            for n in NUMBERS {
                entries.insert(cell_key(p, n), t.entries[cell_index(p, n)].clone());
            }
        }
        TableFile { placement: t.placement, entries }
    }
}

impl TryFrom<TableFile> for ParadigmTable {
    type Error = String;
    fn try_from(f: TableFile) -> std::result::Result<Self, String> {
        let mut entries: [String; 6] = Default::default();
        let mut count = 0;
        for p in PERSONS {
            for n in NUMBERS {
                let key = cell_key(p, n);
                let affix = f
                    .entries
                    .get(&key)
                    .ok_or_else(|| format!("missing paradigm cell {key}"))?;
                entries[cell_index(p, n)] = affix.clone();
                count += 1;
            }
        }
        if f.entries.len() != count {
            return Err(format!("paradigm table must have exactly {count} cells"));
        }
        ParadigmTable::new(f.placement, entries).map_err(|e| e.to_string())
    }
}

fn is_lowercase_cyrillic(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| ('а'..='я').contains(&c) || c == 'ё')
}

impl ParadigmTable {
    pub fn new(placement: Placement, entries: [String; 6]) -> Result<Self> {
        for (i, affix) in entries.iter().enumerate() {
            if !is_lowercase_cyrillic(affix) {
                return Err(Error::InvalidParadigm(format!(
                    "affix {i} ({affix:?}) is not a non-empty lowercase Cyrillic string"
                )));
            }
        }
        for i in 0..entries.len() {
            for j in (i + 1)..entries.len() {
                if entries[i] == entries[j] {
                    return Err(Error::InvalidParadigm(format!(
                        "affixes must be pairwise distinct, {:?} repeats",
                        entries[i]
                    )));
                }
            }
        }
        Ok(ParadigmTable { placement, entries })
    }

    /// Standard first-conjugation endings with the given placement.
    pub fn default_with(placement: Placement) -> Self {
        let entries = ["у", "ешь", "ет", "ем", "ете", "ут"].map(str::to_string);
        // 1sg, 2sg, 3sg, 1pl, 2pl, 3pl in cell order (p-major, sg before pl):
        // cell order is 1sg,1pl,2sg,2pl,3sg,3pl — remap.
        let mut cells: [String; 6] = Default::default();
        cells[cell_index(Person::First, Number::Singular)] = entries[0].clone();
        cells[cell_index(Person::Second, Number::Singular)] = entries[1].clone();
        cells[cell_index(Person::Third, Number::Singular)] = entries[2].clone();
        cells[cell_index(Person::First, Number::Plural)] = entries[3].clone();
        cells[cell_index(Person::Second, Number::Plural)] = entries[4].clone();
        cells[cell_index(Person::Third, Number::Plural)] = entries[5].clone();
        ParadigmTable { placement, entries: cells }
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn with_placement(&self, placement: Placement) -> Self {
        ParadigmTable { placement, entries: self.entries.clone() }
    }

    pub fn affixes(&self) -> impl Iterator<Item = (Person, Number, &str)> {
        PERSONS.into_iter().flat_map(move |p| {
            NUMBERS.into_iter().map(move |n| (p, n, self.entries[cell_index(p, n)].as_str()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "paradigm table",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("table serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl Default for ParadigmTable {
    fn default() -> Self {
        ParadigmTable::default_with(Placement::Suffix)
    }
}

/// Looks up the affix for a person/number pair. Total on valid tables.
pub fn select_affix<'t>(person: Person, number: Number, table: &'t ParadigmTable) -> &'t str {
    &table.entries[cell_index(person, number)]
}

/// Attaches the agreement affix to every linked verb. All other words are
/// left byte-identical and the agreement links carry over unchanged.
pub fn apply_polypersonality(s: &AnnotatedSentence, table: &ParadigmTable) -> Result<AnnotatedSentence> {
    s.validate()?;
    let mut out = s.clone();
    for link in &s.agreements {
        let affix = select_affix(link.person, link.number, table);
        let verb = &mut out.words[link.verb_index];
        *verb = match table.placement {
            Placement::Suffix => format!("{verb}{affix}"),
            Placement::Prefix => format!("{affix}{verb}"),
        };
    }
    Ok(out)
}

/// Exact inverse of [`apply_polypersonality`] for sentences produced with
/// the same table.
pub fn strip_polypersonality(s: &AnnotatedSentence, table: &ParadigmTable) -> Result<AnnotatedSentence> {
    s.validate()?;
    let mut out = s.clone();
    for link in &s.agreements {
        let affix = select_affix(link.person, link.number, table);
        let verb = &mut out.words[link.verb_index];
        let stripped = match table.placement {
            Placement::Suffix => verb.strip_suffix(affix),
            Placement::Prefix => verb.strip_prefix(affix),
        };
        match stripped {
            Some(base) if !base.is_empty() => *verb = base.to_string(),
            _ => {
                return Err(Error::AffixNotFound {
                    id: s.id.clone(),
                    word: verb.clone(),
                    affix: affix.to_string(),
                })
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

/// Past-tense agreement class of a subject (selects the verb form).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PastForm {
    Masc,
    Fem,
    Neut,
    Plur,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub text: String,
    pub form: PastForm,
    /// Modifiers already inflected to agree with `text`; one may be
    /// prepended to the subject.
    #[serde(default)]
    pub modifiers: Vec<String>,
}

/// Past-tense forms of a verb, one per subject class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerbEntry {
    pub masc: String,
    pub fem: String,
    pub neut: String,
    pub plur: String,
}

impl VerbEntry {
    pub fn form(&self, f: PastForm) -> &str {
        match f {
            PastForm::Masc => &self.masc,
            PastForm::Fem => &self.fem,
            PastForm::Neut => &self.neut,
            PastForm::Plur => &self.plur,
        }
    }
}

/// A direct-object noun phrase with its person/number tag. `head` indexes
/// the agreement-controlling word within `words`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectNp {
    pub words: Vec<String>,
    pub head: usize,
    pub person: Person,
    pub number: Number,
}

/// Word lists backing the sentence templates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub subjects: Vec<SubjectEntry>,
    pub transitive_verbs: Vec<VerbEntry>,
    pub intransitive_verbs: Vec<VerbEntry>,
    pub object_nps: Vec<ObjectNp>,
    /// Invariant sentence-initial phrases ("вчера вечером", "у реки").
    #[serde(default)]
    pub adjuncts: Vec<Vec<String>>,
    /// Invariant pre-verb adverbs.
    #[serde(default)]
    pub adverbs: Vec<String>,
}

impl Lexicon {
    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::EmptyLexicon("subjects"));
        }
        if self.transitive_verbs.is_empty() {
            return Err(Error::EmptyLexicon("transitive_verbs"));
        }
        if self.intransitive_verbs.is_empty() {
            return Err(Error::EmptyLexicon("intransitive_verbs"));
        }
        if self.object_nps.is_empty() {
            return Err(Error::EmptyLexicon("object_nps"));
        }
        for (i, np) in self.object_nps.iter().enumerate() {
            if np.words.is_empty() || np.head >= np.words.len() {
                return Err(Error::InvalidLexicon(format!(
                    "object_nps[{i}] has an empty word list or an out-of-range head"
                )));
            }
        }
        for (i, a) in self.adjuncts.iter().enumerate() {
            if a.is_empty() || a.iter().any(|w| w.is_empty()) {
                return Err(Error::InvalidLexicon(format!("adjuncts[{i}] has an empty entry")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lex: Lexicon = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "lexicon",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("lexicon serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// The built-in lexicon used when no lexicon file is given.
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN_LEXICON).expect("builtin lexicon parses")
    }
}

const BUILTIN_LEXICON: &str = include_str!("builtin_lexicon.json");

const TEMPLATE_KINDS: usize = 2; // transitive SVO, intransitive SV

/// Samples `n` template sentences. Each sentence draws from its own derived
/// RNG, so the output is independent of scheduling. A sentence opens with an
/// optional adjunct, then the subject (optionally modified), an optional
/// adverb, the verb, and for transitive templates an object phrase.
/// Transitive sentences carry exactly one agreement link pointing at the
/// object head.
pub fn generate_corpus(lex: &Lexicon, n: usize, seed: u64) -> Result<Vec<AnnotatedSentence>> {
    lex.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("requested corpus size is 0".into()));
    }
    let sentences = par_map_indexed(&vec![(); n], |i, _| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, i as u64));
        let id = format!("s{i:06}");
        let subject = &lex.subjects[rng.gen_range(0..lex.subjects.len())];
        let mut words = Vec::new();
        if !lex.adjuncts.is_empty() && rng.gen_bool(0.5) {
            words.extend(lex.adjuncts[rng.gen_range(0..lex.adjuncts.len())].iter().cloned());
        }
        if !subject.modifiers.is_empty() && rng.gen_bool(0.4) {
            words.push(subject.modifiers[rng.gen_range(0..subject.modifiers.len())].clone());
        }
        words.push(subject.text.clone());
        if !lex.adverbs.is_empty() && rng.gen_bool(0.5) {
            words.push(lex.adverbs[rng.gen_range(0..lex.adverbs.len())].clone());
        }
        if rng.gen_range(0..TEMPLATE_KINDS) == 0 {
            let verb = &lex.transitive_verbs[rng.gen_range(0..lex.transitive_verbs.len())];
            let object = &lex.object_nps[rng.gen_range(0..lex.object_nps.len())];
            let verb_index = words.len();
            words.push(verb.form(subject.form).to_string());
            let object_index = words.len() + object.head;
            words.extend(object.words.iter().cloned());
            let link = AgreementLink {
                verb_index,
                object_index,
                person: object.person,
                number: object.number,
            };
            AnnotatedSentence { id, words, agreements: vec![link] }
        } else {
            let verb = &lex.intransitive_verbs[rng.gen_range(0..lex.intransitive_verbs.len())];
            words.push(verb.form(subject.form).to_string());
            AnnotatedSentence { id, words, agreements: Vec::new() }
        }
    });
    Ok(sentences)
}

// ---------------------------------------------------------------------------
// JSONL corpus I/O
// ---------------------------------------------------------------------------

pub fn read_jsonl(path: &Path) -> Result<Vec<AnnotatedSentence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: AnnotatedSentence = serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "jsonl corpus",
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, sentences: &[AnnotatedSentence]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in sentences {
        let line = serde_json::to_string(s).expect("sentence serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
