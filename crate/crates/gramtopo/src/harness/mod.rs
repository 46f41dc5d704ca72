//! End-to-end experiment orchestration with content-hash caching.
//!
//! A run executes the stage graph corpus → augmentation → vocab →
//! pretraining → fine-tuning → scoring/probing/TDA → report inside one
//! output directory. Every stage records the hashes of its input and
//! output files in the run manifest; a rerun skips stages whose inputs
//! and outputs are unchanged, rebuilds deleted artifacts, and refuses to
//! proceed over corrupted ones.

pub mod plot;
pub mod report;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{
    apply_polypersonality, generate_corpus, read_jsonl, write_jsonl, AnnotatedSentence, Lexicon,
    ParadigmTable, Placement,
};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint};
use crate::model::train::train;
use crate::model::{GrammarModule, ModelConfig, ModelParams};
use crate::pll::{corpus_ppl, write_ppl_csv, PplReport};
use crate::probe::{probe_corpus, summarize, write_records_csv, write_summary_csv};
use crate::seeds::seed_for;
use crate::tda::{setting_distance_matrix, write_distance_csv, CloudMetric, Setting, Tap};
use crate::tokenizer::{encode, train_vocab, TokenizedSentence, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Upper bound passed to the vocabulary trainer; the actual vocabulary
    /// may be smaller when merges run out.
    pub vocab_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseHyperparams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizes {
    pub ppl: usize,
    pub probe: usize,
    pub tda: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub lexicon_path: PathBuf,
    pub suffix_table_path: PathBuf,
    pub prefix_table_path: PathBuf,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub model: ModelShape,
    pub pretrain: PhaseHyperparams,
    pub finetune: PhaseHyperparams,
    pub samples: SampleSizes,
    pub master_seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "experiment config",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidExperimentConfig(m));
        for (label, path) in [
            ("lexicon_path", &self.lexicon_path),
            ("suffix_table_path", &self.suffix_table_path),
            ("prefix_table_path", &self.prefix_table_path),
        ] {
            if !path.is_file() {
                return fail(format!("{label} {} does not exist", path.display()));
            }
        }
        for (label, n) in [
            ("train_sentences", self.train_sentences),
            ("test_sentences", self.test_sentences),
            ("pretrain.epochs", self.pretrain.epochs),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("finetune.epochs", self.finetune.epochs),
            ("finetune.batch_size", self.finetune.batch_size),
            ("samples.ppl", self.samples.ppl),
            ("samples.probe", self.samples.probe),
            ("samples.tda", self.samples.tda),
            ("model.num_layers", self.model.num_layers),
            ("model.vocab_target", self.model.vocab_target),
        ] {
            if n == 0 {
                return fail(format!("{label} must be ≥ 1"));
            }
        }
        if self.model.hidden_dim == 0 || self.model.hidden_dim % self.model.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.model.hidden_dim, self.model.num_heads
            ));
        }
        if !(self.pretrain.lr.is_finite() && self.finetune.lr.is_finite()) {
            return fail("learning rates must be finite".into());
        }
        Ok(())
    }

    /// Hash of the run's semantic identity: every parameter plus the
    /// contents of the referenced files, with locations (output_dir, the
    /// paths themselves) left out so a run moved elsewhere hashes the
    /// same.
    pub fn semantic_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Identity<'a> {
            lexicon_sha256: String,
            suffix_table_sha256: String,
            prefix_table_sha256: String,
            train_sentences: usize,
            test_sentences: usize,
            model: &'a ModelShape,
            pretrain: &'a PhaseHyperparams,
            finetune: &'a PhaseHyperparams,
            samples: &'a SampleSizes,
            master_seed: u64,
        }
        let identity = Identity {
            lexicon_sha256: hash_file(&self.lexicon_path)?,
            suffix_table_sha256: hash_file(&self.suffix_table_path)?,
            prefix_table_sha256: hash_file(&self.prefix_table_path)?,
            train_sentences: self.train_sentences,
            test_sentences: self.test_sentences,
            model: &self.model,
            pretrain: &self.pretrain,
            finetune: &self.finetune,
            samples: &self.samples,
            master_seed: self.master_seed,
        };
        let json = serde_json::to_vec(&identity).expect("identity serializes");
        Ok(hex(&Sha256::digest(&json)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    /// Relative to the run directory for outputs; external inputs keep
    /// their configured path.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
    /// Unix seconds when the stage actually ran; kept verbatim when a
    /// rerun skips the stage.
    pub completed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "run manifest",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Hash of everything except the wall-clock timestamps; two runs of
    /// the same config agree on this even when they ran at different
    /// times.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        h.update(self.tool_version.as_bytes());
        for s in &self.stages {
            h.update(s.stage.as_bytes());
            for a in s.inputs.iter().chain(&s.outputs) {
                h.update(a.path.as_bytes());
                h.update(a.sha256.as_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub const PLACEMENTS: [Placement; 2] = [Placement::Suffix, Placement::Prefix];
pub const VARIANTS: [GrammarModule; 2] = [GrammarModule::MlpHead, GrammarModule::LstmHead];
/// Model arms scored for perplexity: the adapted pretrained checkpoint
/// and both fine-tuned grammar variants.
pub const PPL_MODELS: [&str; 3] = ["pre", "mlp", "lstm"];
pub const TEXTS: [&str; 2] = ["base", "poly"];

pub fn variant_name(v: GrammarModule) -> &'static str {
    match v {
        GrammarModule::MlpHead => "mlp",
        GrammarModule::LstmHead => "lstm",
    }
}

/// All artifact locations inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn base_corpus(&self, split: &str) -> PathBuf {
        self.root.join(format!("corpus/base_{split}.jsonl"))
    }

    pub fn poly_corpus(&self, placement: Placement, split: &str) -> PathBuf {
        self.root.join(format!("corpus/poly_{placement}_{split}.jsonl"))
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab/vocab.json")
    }

    pub fn pretrain_ckpt(&self, placement: Placement) -> PathBuf {
        self.root.join(format!("ckpt/pretrain_{placement}.bin"))
    }

    pub fn pretrain_loss(&self, placement: Placement) -> PathBuf {
        self.root.join(format!("ckpt/pretrain_{placement}_loss.csv"))
    }

    pub fn finetune_ckpt(&self, placement: Placement, v: GrammarModule) -> PathBuf {
        self.root.join(format!("ckpt/finetune_{placement}_{}.bin", variant_name(v)))
    }

    pub fn finetune_loss(&self, placement: Placement, v: GrammarModule) -> PathBuf {
        self.root.join(format!("ckpt/finetune_{placement}_{}_loss.csv", variant_name(v)))
    }

    pub fn ppl_csv(&self, placement: Placement, model: &str, text: &str) -> PathBuf {
        self.root.join(format!("scores/ppl_{placement}_{model}_{text}.csv"))
    }

    pub fn ppl_json(&self, placement: Placement, model: &str, text: &str) -> PathBuf {
        self.root.join(format!("scores/ppl_{placement}_{model}_{text}.json"))
    }

    pub fn probe_records(&self, placement: Placement, v: GrammarModule) -> PathBuf {
        self.root.join(format!("probe/records_{placement}_{}.csv", variant_name(v)))
    }

    pub fn probe_summary(&self, placement: Placement, v: GrammarModule) -> PathBuf {
        self.root.join(format!("probe/summary_{placement}_{}.csv", variant_name(v)))
    }

    pub fn tda_matrix(&self, placement: Placement, dim: usize) -> PathBuf {
        self.root.join(format!("tda/{placement}_h{dim}.csv"))
    }

    pub fn tda_manifest(&self, placement: Placement) -> PathBuf {
        self.root.join(format!("tda/{placement}_manifest.json"))
    }

    pub fn report_file(&self, name: &str) -> PathBuf {
        self.root.join(format!("report/{name}"))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| path.to_string_lossy().into_owned())
    }
}

/// Mean, spread, and token-weighted figure of one scored setting,
/// stripped of the per-sentence rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PplSummary {
    pub setting: String,
    pub mean: f64,
    pub std: f64,
    pub sample_size: usize,
    pub skipped: usize,
    pub token_weighted_ppl: f64,
}

impl PplSummary {
    pub fn of(report: &PplReport) -> Self {
        PplSummary {
            setting: report.setting.clone(),
            mean: report.mean,
            std: report.std,
            sample_size: report.sample_size,
            skipped: report.skipped,
            token_weighted_ppl: report.token_weighted_ppl,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "ppl summary",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TdaRunManifest {
    pub master_seed: u64,
    pub sample_size: usize,
    pub sentences_used: usize,
    pub sentences_skipped: usize,
    pub metric: CloudMetric,
    pub labels: Vec<String>,
}

struct Stage {
    name: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    run: Box<dyn Fn() -> Result<()>>,
}

fn hash_artifacts(paths: &RunPaths, files: &[PathBuf]) -> Result<Vec<ArtifactHash>> {
    files
        .iter()
        .map(|p| Ok(ArtifactHash { path: paths.rel(p), sha256: hash_file(p)? }))
        .collect()
}

fn execute_stage(
    stage: &Stage,
    previous: &BTreeMap<String, StageRecord>,
    paths: &RunPaths,
    verbose: bool,
) -> Result<StageRecord> {
    let inputs = hash_artifacts(paths, &stage.inputs)?;
    if let Some(prev) = previous.get(&stage.name) {
        if prev.inputs == inputs {
            let mut missing = false;
            for out in &prev.outputs {
                let path = paths.root.join(&out.path);
                if !path.is_file() {
                    missing = true;
                    continue;
                }
                let actual = hash_file(&path)?;
                if actual != out.sha256 {
                    return Err(Error::HashMismatch {
                        path,
                        expected: out.sha256.clone(),
                        actual,
                    });
                }
            }
            if !missing {
                if verbose {
                    println!("{}: unchanged, skipped", stage.name);
                }
                return Ok(prev.clone());
            }
        }
    }
    let start = Instant::now();
    (stage.run)()?;
    let outputs = hash_artifacts(paths, &stage.outputs)?;
    if verbose {
        println!("{}: done in {:.1}s", stage.name, start.elapsed().as_secs_f64());
    }
    Ok(StageRecord { stage: stage.name.clone(), inputs, outputs, completed_at: unix_now() })
}

fn tokenize_all(corpus: &[AnnotatedSentence], vocab: &Vocab) -> Vec<TokenizedSentence> {
    corpus.iter().map(|s| encode(s, vocab)).collect()
}

fn write_loss_csv(curve: &[f64], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "step,loss").map_err(|e| Error::io(path, e))?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(file, "{i},{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn model_config(
    shape: &ModelShape,
    vocab_size: usize,
    grammar: GrammarModule,
    seed: u64,
) -> ModelConfig {
    ModelConfig {
        num_layers: shape.num_layers,
        hidden_dim: shape.hidden_dim,
        num_heads: shape.num_heads,
        ffn_dim: shape.ffn_dim,
        vocab_size,
        max_seq_len: shape.max_seq_len,
        grammar_module: grammar,
        seed,
    }
}

/// Base and poly sentences interleaved one-to-one, mirroring the
/// equal-amounts adaptation mix.
fn mixed_corpus(base: &[AnnotatedSentence], poly: &[AnnotatedSentence]) -> Vec<AnnotatedSentence> {
    let mut mixed = Vec::with_capacity(base.len() + poly.len());
    for (b, p) in base.iter().zip(poly) {
        mixed.push(b.clone());
        mixed.push(p.clone());
    }
    mixed
}

fn sample_of(corpus: &[AnnotatedSentence], n: usize) -> &[AnnotatedSentence] {
    &corpus[..n.min(corpus.len())]
}

fn stage_gen_corpus(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    let lex = Lexicon::load(&cfg.lexicon_path)?;
    let train = generate_corpus(&lex, cfg.train_sentences, seed_for(cfg.master_seed, "gen/train"))?;
    let test = generate_corpus(&lex, cfg.test_sentences, seed_for(cfg.master_seed, "gen/test"))?;
    write_jsonl(&paths.base_corpus("train"), &train)?;
    write_jsonl(&paths.base_corpus("test"), &test)
}

fn stage_augment(cfg: &ExperimentConfig, paths: &RunPaths, placement: Placement) -> Result<()> {
    let table_path = match placement {
        Placement::Suffix => &cfg.suffix_table_path,
        Placement::Prefix => &cfg.prefix_table_path,
    };
    let table = ParadigmTable::load(table_path)?;
    if table.placement() != placement {
        return Err(Error::InvalidExperimentConfig(format!(
            "table {} declares {} placement",
            table_path.display(),
            table.placement()
        )));
    }
    for split in ["train", "test"] {
        let base = read_jsonl(&paths.base_corpus(split))?;
        let poly: Result<Vec<AnnotatedSentence>> =
            base.iter().map(|s| apply_polypersonality(s, &table)).collect();
        write_jsonl(&paths.poly_corpus(placement, split), &poly?)?;
    }
    Ok(())
}

fn stage_train_vocab(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    let base = read_jsonl(&paths.base_corpus("train"))?;
    let vocab = train_vocab(&base, cfg.model.vocab_target, seed_for(cfg.master_seed, "vocab"))?;
    vocab.save(&paths.vocab())
}

fn stage_pretrain(cfg: &ExperimentConfig, paths: &RunPaths, placement: Placement) -> Result<()> {
    let vocab = Vocab::load(&paths.vocab())?;
    let base = read_jsonl(&paths.base_corpus("train"))?;
    let poly = read_jsonl(&paths.poly_corpus(placement, "train"))?;
    let mixed = tokenize_all(&mixed_corpus(&base, &poly), &vocab);
    let seed = seed_for(cfg.master_seed, &format!("pretrain/{placement}"));
    let config = model_config(&cfg.model, vocab.len(), GrammarModule::MlpHead, seed);
    let mut params = ModelParams::init(&config)?;
    let curve = train(
        &mixed,
        &config,
        &mut params,
        false,
        cfg.pretrain.epochs,
        cfg.pretrain.lr,
        cfg.pretrain.batch_size,
        seed_for(cfg.master_seed, &format!("pretrain/{placement}/steps")),
    )?;
    write_loss_csv(&curve, &paths.pretrain_loss(placement))?;
    save_checkpoint(&params, &config, &paths.pretrain_ckpt(placement))
}

fn stage_finetune(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    placement: Placement,
    variant: GrammarModule,
) -> Result<()> {
    let vocab = Vocab::load(&paths.vocab())?;
    let base = read_jsonl(&paths.base_corpus("train"))?;
    let poly = read_jsonl(&paths.poly_corpus(placement, "train"))?;
    let mixed = tokenize_all(&mixed_corpus(&base, &poly), &vocab);
    let (pre_config, mut params) = load_checkpoint(&paths.pretrain_ckpt(placement))?;
    let seed = seed_for(cfg.master_seed, &format!("finetune/{placement}/{}", variant_name(variant)));
    let mut config = pre_config;
    config.grammar_module = variant;
    config.seed = seed;
    if variant == GrammarModule::LstmHead {
        // The pretrained checkpoint has no LSTM; it starts fresh while the
        // head weights carry over.
        params.lstm = ModelParams::init(&config)?.lstm;
    }
    let curve = train(
        &mixed,
        &config,
        &mut params,
        true,
        cfg.finetune.epochs,
        cfg.finetune.lr,
        cfg.finetune.batch_size,
        seed_for(cfg.master_seed, &format!("finetune/{placement}/{}/steps", variant_name(variant))),
    )?;
    write_loss_csv(&curve, &paths.finetune_loss(placement, variant))?;
    save_checkpoint(&params, &config, &paths.finetune_ckpt(placement, variant))
}

fn ckpt_for(paths: &RunPaths, placement: Placement, model: &str) -> PathBuf {
    match model {
        "pre" => paths.pretrain_ckpt(placement),
        "mlp" => paths.finetune_ckpt(placement, GrammarModule::MlpHead),
        "lstm" => paths.finetune_ckpt(placement, GrammarModule::LstmHead),
        other => unreachable!("unknown model arm {other}"),
    }
}

fn stage_ppl(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    placement: Placement,
    model: &str,
    text: &str,
) -> Result<()> {
    let vocab = Vocab::load(&paths.vocab())?;
    let (config, params) = load_checkpoint(&ckpt_for(paths, placement, model))?;
    let corpus = match text {
        "base" => read_jsonl(&paths.base_corpus("test"))?,
        _ => read_jsonl(&paths.poly_corpus(placement, "test"))?,
    };
    let label = format!("{placement}/{model}/{text}");
    let report = corpus_ppl(&params, &config, &vocab, sample_of(&corpus, cfg.samples.ppl), &label)?;
    write_ppl_csv(&report, &paths.ppl_csv(placement, model, text))?;
    let summary = serde_json::to_string_pretty(&PplSummary::of(&report)).expect("summary serializes");
    let json_path = paths.ppl_json(placement, model, text);
    std::fs::write(&json_path, summary).map_err(|e| Error::io(&json_path, e))
}

fn stage_probe(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    placement: Placement,
    variant: GrammarModule,
) -> Result<()> {
    let vocab = Vocab::load(&paths.vocab())?;
    let table = ParadigmTable::load(match placement {
        Placement::Suffix => &cfg.suffix_table_path,
        Placement::Prefix => &cfg.prefix_table_path,
    })?;
    let (config, params) = load_checkpoint(&paths.finetune_ckpt(placement, variant))?;
    let poly = read_jsonl(&paths.poly_corpus(placement, "test"))?;
    let (records, _skipped) =
        probe_corpus(&params, &config, &vocab, &table, sample_of(&poly, cfg.samples.probe))?;
    write_records_csv(&records, &paths.probe_records(placement, variant))?;
    write_summary_csv(&summarize(&records)?, &paths.probe_summary(placement, variant))
}

/// Setting labels for one placement's distance matrix: grammar taps of
/// the pretrained and both fine-tuned models on both texts, plus the
/// shared frozen backbone tap on both texts.
pub fn tda_labels() -> Vec<String> {
    let mut labels = Vec::new();
    for model in PPL_MODELS {
        for text in TEXTS {
            labels.push(format!("{model}/{text}/grammar"));
        }
    }
    for text in TEXTS {
        labels.push(format!("pre/{text}/backbone"));
    }
    labels
}

fn stage_tda(cfg: &ExperimentConfig, paths: &RunPaths, placement: Placement) -> Result<()> {
    let vocab = Vocab::load(&paths.vocab())?;
    let base = read_jsonl(&paths.base_corpus("test"))?;
    let poly = read_jsonl(&paths.poly_corpus(placement, "test"))?;
    let base_sample = sample_of(&base, cfg.samples.tda);
    let poly_sample = sample_of(&poly, cfg.samples.tda);
    let (pre_config, pre_params) = load_checkpoint(&paths.pretrain_ckpt(placement))?;
    let (mlp_config, mlp_params) =
        load_checkpoint(&paths.finetune_ckpt(placement, GrammarModule::MlpHead))?;
    let (lstm_config, lstm_params) =
        load_checkpoint(&paths.finetune_ckpt(placement, GrammarModule::LstmHead))?;
    let arms: [(&ModelConfig, &ModelParams); 3] =
        [(&pre_config, &pre_params), (&mlp_config, &mlp_params), (&lstm_config, &lstm_params)];
    let mut settings = Vec::new();
    for (model, (config, params)) in PPL_MODELS.iter().zip(arms) {
        for (text, sentences) in TEXTS.iter().zip([base_sample, poly_sample]) {
            settings.push(Setting {
                label: format!("{model}/{text}/grammar"),
                params,
                config,
                sentences,
                tap: Tap::Grammar,
            });
        }
    }
    for (text, sentences) in TEXTS.iter().zip([base_sample, poly_sample]) {
        settings.push(Setting {
            label: format!("pre/{text}/backbone"),
            params: &pre_params,
            config: &pre_config,
            sentences,
            tap: Tap::Backbone,
        });
    }
    let report = setting_distance_matrix(&settings, &vocab, CloudMetric::Euclidean)?;
    write_distance_csv(&report.labels, &report.h0, &paths.tda_matrix(placement, 0))?;
    write_distance_csv(&report.labels, &report.h1, &paths.tda_matrix(placement, 1))?;
    let manifest = TdaRunManifest {
        master_seed: cfg.master_seed,
        sample_size: cfg.samples.tda,
        sentences_used: report.sentences_used,
        sentences_skipped: report.sentences_skipped,
        metric: report.metric,
        labels: report.labels.clone(),
    };
    let path = paths.tda_manifest(placement);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&path, e))
}

fn build_stages(cfg: &ExperimentConfig, paths: &RunPaths) -> Vec<Stage> {
    let mut stages: Vec<Stage> = Vec::new();
    {
        let (cfg, paths) = (cfg.clone(), paths.clone());
        stages.push(Stage {
            name: "gen-corpus".into(),
            inputs: vec![cfg.lexicon_path.clone()],
            outputs: vec![paths.base_corpus("train"), paths.base_corpus("test")],
            run: Box::new(move || stage_gen_corpus(&cfg, &paths)),
        });
    }
    for placement in PLACEMENTS {
        let (cfg, paths) = (cfg.clone(), paths.clone());
        let table = match placement {
            Placement::Suffix => cfg.suffix_table_path.clone(),
            Placement::Prefix => cfg.prefix_table_path.clone(),
        };
        stages.push(Stage {
            name: format!("augment-{placement}"),
            inputs: vec![table, paths.base_corpus("train"), paths.base_corpus("test")],
            outputs: vec![
                paths.poly_corpus(placement, "train"),
                paths.poly_corpus(placement, "test"),
            ],
            run: Box::new(move || stage_augment(&cfg, &paths, placement)),
        });
    }
    {
        let (cfg, paths) = (cfg.clone(), paths.clone());
        stages.push(Stage {
            name: "train-vocab".into(),
            inputs: vec![paths.base_corpus("train")],
            outputs: vec![paths.vocab()],
            run: Box::new(move || stage_train_vocab(&cfg, &paths)),
        });
    }
    for placement in PLACEMENTS {
        let (cfg, paths) = (cfg.clone(), paths.clone());
        stages.push(Stage {
            name: format!("pretrain-{placement}"),
            inputs: vec![
                paths.vocab(),
                paths.base_corpus("train"),
                paths.poly_corpus(placement, "train"),
            ],
            outputs: vec![paths.pretrain_ckpt(placement), paths.pretrain_loss(placement)],
            run: Box::new(move || stage_pretrain(&cfg, &paths, placement)),
        });
    }
    for placement in PLACEMENTS {
        for variant in VARIANTS {
            let (cfg, paths) = (cfg.clone(), paths.clone());
            stages.push(Stage {
                name: format!("finetune-{placement}-{}", variant_name(variant)),
                inputs: vec![
                    paths.vocab(),
                    paths.base_corpus("train"),
                    paths.poly_corpus(placement, "train"),
                    paths.pretrain_ckpt(placement),
                ],
                outputs: vec![
                    paths.finetune_ckpt(placement, variant),
                    paths.finetune_loss(placement, variant),
                ],
                run: Box::new(move || stage_finetune(&cfg, &paths, placement, variant)),
            });
        }
    }
    for placement in PLACEMENTS {
        for model in PPL_MODELS {
            for text in TEXTS {
                let (cfg, paths) = (cfg.clone(), paths.clone());
                let corpus_input = match text {
                    "base" => paths.base_corpus("test"),
                    _ => paths.poly_corpus(placement, "test"),
                };
                stages.push(Stage {
                    name: format!("ppl-{placement}-{model}-{text}"),
                    inputs: vec![paths.vocab(), ckpt_for(&paths, placement, model), corpus_input],
                    outputs: vec![
                        paths.ppl_csv(placement, model, text),
                        paths.ppl_json(placement, model, text),
                    ],
                    run: Box::new(move || stage_ppl(&cfg, &paths, placement, model, text)),
                });
            }
        }
    }
    for placement in PLACEMENTS {
        for variant in VARIANTS {
            let (cfg, paths) = (cfg.clone(), paths.clone());
            let table = match placement {
                Placement::Suffix => cfg.suffix_table_path.clone(),
                Placement::Prefix => cfg.prefix_table_path.clone(),
            };
            stages.push(Stage {
                name: format!("probe-{placement}-{}", variant_name(variant)),
                inputs: vec![
                    paths.vocab(),
                    table,
                    paths.finetune_ckpt(placement, variant),
                    paths.poly_corpus(placement, "test"),
                ],
                outputs: vec![
                    paths.probe_records(placement, variant),
                    paths.probe_summary(placement, variant),
                ],
                run: Box::new(move || stage_probe(&cfg, &paths, placement, variant)),
            });
        }
    }
    for placement in PLACEMENTS {
        let (cfg, paths) = (cfg.clone(), paths.clone());
        stages.push(Stage {
            name: format!("tda-{placement}"),
            inputs: vec![
                paths.vocab(),
                paths.base_corpus("test"),
                paths.poly_corpus(placement, "test"),
                paths.pretrain_ckpt(placement),
                paths.finetune_ckpt(placement, GrammarModule::MlpHead),
                paths.finetune_ckpt(placement, GrammarModule::LstmHead),
            ],
            outputs: vec![
                paths.tda_matrix(placement, 0),
                paths.tda_matrix(placement, 1),
                paths.tda_manifest(placement),
            ],
            run: Box::new(move || stage_tda(&cfg, &paths, placement)),
        });
    }
    {
        let paths_in = paths.clone();
        let mut inputs: Vec<PathBuf> = Vec::new();
        for placement in PLACEMENTS {
            for model in PPL_MODELS {
                for text in TEXTS {
                    inputs.push(paths.ppl_json(placement, model, text));
                }
            }
            for variant in VARIANTS {
                inputs.push(paths.probe_summary(placement, variant));
            }
            inputs.push(paths.tda_matrix(placement, 0));
            inputs.push(paths.tda_matrix(placement, 1));
        }
        let outputs = report::REPORT_FILES
            .iter()
            .map(|name| paths.report_file(name))
            .collect();
        stages.push(Stage {
            name: "report".into(),
            inputs,
            outputs,
            run: Box::new(move || report::emit_report(&paths_in)),
        });
    }
    stages
}

/// Runs (or resumes) the whole experiment in `config.output_dir` and
/// returns the manifest. Stages whose recorded inputs and outputs are
/// unchanged are skipped; a changed config hash invalidates every record.
pub fn run_experiment(config: &ExperimentConfig, verbose: bool) -> Result<RunManifest> {
    config.validate()?;
    let paths = RunPaths::new(&config.output_dir);
    for sub in ["corpus", "vocab", "ckpt", "scores", "probe", "tda", "report"] {
        let dir = paths.root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let config_hash = config.semantic_hash()?;
    let mut previous: BTreeMap<String, StageRecord> = BTreeMap::new();
    if paths.manifest().is_file() {
        let old = RunManifest::load(&paths.manifest())?;
        if old.config_hash == config_hash {
            for s in old.stages {
                previous.insert(s.stage.clone(), s);
            }
        } else if verbose {
            println!("config changed, rebuilding every stage");
        }
    }
    let mut manifest = RunManifest {
        config_hash,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        stages: Vec::new(),
    };
    for stage in build_stages(config, &paths) {
        let record = execute_stage(&stage, &previous, &paths, verbose).map_err(|e| match e {
            already @ Error::Stage { .. } => already,
            other => Error::Stage {
                stage: stage.name.clone(),
                path: stage.outputs.first().cloned().unwrap_or_else(|| paths.root.clone()),
                source: Box::new(other),
            },
        })?;
        manifest.stages.push(record);
        manifest.save(&paths.manifest())?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn config_fixture(dir: &Path) -> ExperimentConfig {
        let lexicon_path = dir.join("lexicon.json");
        Lexicon::builtin().save(&lexicon_path).unwrap();
        let suffix_table_path = dir.join("suffix.json");
        ParadigmTable::default_with(Placement::Suffix).save(&suffix_table_path).unwrap();
        let prefix_table_path = dir.join("prefix.json");
        ParadigmTable::default_with(Placement::Prefix).save(&prefix_table_path).unwrap();
        ExperimentConfig {
            lexicon_path,
            suffix_table_path,
            prefix_table_path,
            train_sentences: 60,
            test_sentences: 30,
            model: ModelShape {
                num_layers: 1,
                hidden_dim: 8,
                num_heads: 2,
                ffn_dim: 16,
                max_seq_len: 32,
                vocab_target: 120,
            },
            pretrain: PhaseHyperparams { epochs: 1, lr: 1e-3, batch_size: 16 },
            finetune: PhaseHyperparams { epochs: 1, lr: 5e-4, batch_size: 16 },
            samples: SampleSizes { ppl: 8, probe: 8, tda: 6 },
            master_seed: 7,
            output_dir: dir.join("run"),
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let dir = TempDir::new().unwrap();
        let cfg = config_fixture(dir.path());
        let path = dir.path().join("config.json");
        cfg.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let dir = TempDir::new().unwrap();
        let good = config_fixture(dir.path());
        good.validate().unwrap();

        let mut zero = good.clone();
        zero.train_sentences = 0;
        assert!(matches!(zero.validate(), Err(Error::InvalidExperimentConfig(_))));

        let mut heads = good.clone();
        heads.model.hidden_dim = 9;
        assert!(matches!(heads.validate(), Err(Error::InvalidExperimentConfig(_))));

        let mut missing = good.clone();
        missing.lexicon_path = dir.path().join("absent.json");
        assert!(matches!(missing.validate(), Err(Error::InvalidExperimentConfig(_))));

        let mut lr = good;
        lr.pretrain.lr = f64::NAN;
        assert!(matches!(lr.validate(), Err(Error::InvalidExperimentConfig(_))));
    }

    #[test]
    fn semantic_hash_ignores_locations_but_not_parameters() {
        let dir = TempDir::new().unwrap();
        let cfg = config_fixture(dir.path());
        let h = cfg.semantic_hash().unwrap();

        let mut moved = cfg.clone();
        moved.output_dir = dir.path().join("elsewhere");
        let copied = dir.path().join("copied_lexicon.json");
        std::fs::copy(&cfg.lexicon_path, &copied).unwrap();
        moved.lexicon_path = copied;
        assert_eq!(moved.semantic_hash().unwrap(), h);

        let mut seeded = cfg.clone();
        seeded.master_seed += 1;
        assert_ne!(seeded.semantic_hash().unwrap(), h);

        let mut edited = cfg;
        let mut lex = Lexicon::load(&edited.lexicon_path).unwrap();
        lex.subjects.truncate(lex.subjects.len() - 1);
        edited.lexicon_path = dir.path().join("edited_lexicon.json");
        lex.save(&edited.lexicon_path).unwrap();
        assert_ne!(edited.semantic_hash().unwrap(), h);
    }

    #[test]
    fn manifest_digest_ignores_timestamps() {
        let record = |at: u64| StageRecord {
            stage: "gen-corpus".into(),
            inputs: vec![ArtifactHash { path: "lexicon.json".into(), sha256: "aa".into() }],
            outputs: vec![ArtifactHash { path: "corpus/base_train.jsonl".into(), sha256: "bb".into() }],
            completed_at: at,
        };
        let a = RunManifest {
            config_hash: "cfg".into(),
            tool_version: "0.1.0".into(),
            stages: vec![record(10)],
        };
        let mut b = a.clone();
        b.stages[0].completed_at = 99;
        assert_eq!(a.content_digest(), b.content_digest());

        let mut c = a.clone();
        c.stages[0].outputs[0].sha256 = "cc".into();
        assert_ne!(a.content_digest(), c.content_digest());

        let dir = TempDir::new().unwrap();
        let path = dir.path().join("manifest.json");
        a.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), a);
    }

    #[test]
    fn run_paths_relativize_into_run_directory() {
        let paths = RunPaths::new("/tmp/run");
        assert_eq!(paths.rel(&paths.vocab()), "vocab/vocab.json");
        assert_eq!(
            paths.rel(&paths.finetune_ckpt(Placement::Prefix, GrammarModule::LstmHead)),
            "ckpt/finetune_prefix_lstm.bin"
        );
        assert_eq!(paths.rel(Path::new("/etc/lexicon.json")), "/etc/lexicon.json");
    }

    #[test]
    fn mixed_corpus_interleaves_evenly() {
        let s = |id: &str| AnnotatedSentence {
            id: id.into(),
            words: vec!["слово".into()],
            agreements: vec![],
        };
        let base = vec![s("b0"), s("b1")];
        let poly = vec![s("p0"), s("p1")];
        let mixed = mixed_corpus(&base, &poly);
        let ids: Vec<&str> = mixed.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(ids, ["b0", "p0", "b1", "p1"]);
    }

    #[test]
    fn sample_is_a_prefix_and_clamps() {
        let s = |id: &str| AnnotatedSentence {
            id: id.into(),
            words: vec!["слово".into()],
            agreements: vec![],
        };
        let corpus = vec![s("a"), s("b"), s("c")];
        assert_eq!(sample_of(&corpus, 2).len(), 2);
        assert_eq!(sample_of(&corpus, 2)[1].id, "b");
        assert_eq!(sample_of(&corpus, 9).len(), 3);
    }

    #[test]
    fn tda_labels_cover_all_taps() {
        let labels = tda_labels();
        assert_eq!(labels.len(), 8);
        assert!(labels.contains(&"pre/poly/backbone".to_string()));
        assert!(labels.contains(&"lstm/base/grammar".to_string()));
    }
}
