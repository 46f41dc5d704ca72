//! Command-line driver: corpus generation and augmentation, vocabulary
//! and model training, scoring, probing, topological comparison, and the
//! cached end-to-end experiment.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gramtopo::augment::{
    apply_polypersonality, generate_corpus, read_jsonl, write_jsonl, AnnotatedSentence, Lexicon,
    ParadigmTable, Placement,
};
use gramtopo::harness::report::{emit_report, Trends};
use gramtopo::harness::{
    run_experiment, ExperimentConfig, PplSummary, RunPaths, TdaRunManifest,
};
use gramtopo::model::checkpoint::{load_checkpoint, save_checkpoint};
use gramtopo::model::train::train;
use gramtopo::model::{GrammarModule, ModelConfig, ModelParams};
use gramtopo::pll::{corpus_ppl, write_ppl_csv};
use gramtopo::probe::{probe_corpus, summarize, write_records_csv, write_summary_csv};
use gramtopo::tda::{setting_distance_matrix, write_distance_csv, CloudMetric, Setting, Tap};
use gramtopo::tokenizer::{encode, train_vocab, Vocab};
use gramtopo::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlacementArg {
    Suffix,
    Prefix,
}

impl From<PlacementArg> for Placement {
    fn from(p: PlacementArg) -> Placement {
        match p {
            PlacementArg::Suffix => Placement::Suffix,
            PlacementArg::Prefix => Placement::Prefix,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GrammarArg {
    Mlp,
    Lstm,
}

impl From<GrammarArg> for GrammarModule {
    fn from(g: GrammarArg) -> GrammarModule {
        match g {
            GrammarArg::Mlp => GrammarModule::MlpHead,
            GrammarArg::Lstm => GrammarModule::LstmHead,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

impl From<MetricArg> for CloudMetric {
    fn from(m: MetricArg) -> CloudMetric {
        match m {
            MetricArg::Euclidean => CloudMetric::Euclidean,
            MetricArg::Cosine => CloudMetric::Cosine,
        }
    }
}

#[derive(Debug, Args)]
struct ShapeArgs {
    /// Encoder layers.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Hidden dimension (multiple of --heads).
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Feed-forward inner dimension.
    #[arg(long, default_value_t = 256)]
    ffn: usize,
    /// Longest token sequence the model accepts.
    #[arg(long, default_value_t = 32)]
    max_seq_len: usize,
}

impl ShapeArgs {
    fn config(&self, vocab_size: usize, grammar: GrammarModule, seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: self.layers,
            hidden_dim: self.dim,
            num_heads: self.heads,
            ffn_dim: self.ffn,
            vocab_size,
            max_seq_len: self.max_seq_len,
            grammar_module: grammar,
            seed,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FinetuneTrainArgs {
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Parser)]
#[command(
    name = "gramtopo",
    version,
    about = "Polypersonal-agreement injection, grammar-module fine-tuning, and topological comparison of a tiny masked LM's latent space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an annotated base corpus from a lexicon.
    GenCorpus {
        /// Lexicon JSON; the built-in lexicon when omitted.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Number of sentences.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output corpus (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite verbs with object-agreement affixes.
    Augment {
        /// Paradigm table JSON.
        #[arg(long)]
        table: PathBuf,
        #[arg(long, value_enum)]
        placement: PlacementArg,
        /// Input corpus (JSONL).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output corpus (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a subword vocabulary on a corpus.
    TrainVocab {
        /// Upper bound on vocabulary size.
        #[arg(long)]
        size: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a model from scratch with masked-language-modeling loss.
    Pretrain {
        /// Training corpora (JSONL); several files are concatenated.
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum, default_value_t = GrammarArg::Mlp)]
        grammar: GrammarArg,
        #[command(flatten)]
        shape: ShapeArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step loss CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Continue training a checkpoint, optionally with the backbone frozen
    /// and a different grammar module.
    Finetune {
        /// Starting checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum)]
        grammar: GrammarArg,
        /// Train only the grammar module and output bias.
        #[arg(long)]
        freeze_backbone: bool,
        #[command(flatten)]
        train: FinetuneTrainArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Score a corpus with word-left-to-right pseudo-log-likelihood.
    ScorePpl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Label recorded in the report, e.g. suffix/pre/poly.
        #[arg(long)]
        setting: String,
        /// Score only the first N sentences.
        #[arg(long)]
        sample: Option<usize>,
        /// Per-sentence CSV.
        #[arg(long)]
        out: PathBuf,
        /// Optional summary JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Track the gold inflection token's probability and rank across
    /// layers with all inflection positions masked.
    Probe {
        #[arg(long)]
        model: PathBuf,
        /// Must match the grammar module stored in the checkpoint.
        #[arg(long, value_enum)]
        grammar: GrammarArg,
        #[arg(long)]
        vocab: PathBuf,
        /// Paradigm table that produced the corpus's affixes.
        #[arg(long)]
        table: PathBuf,
        /// Augmented corpus (JSONL).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 500)]
        sample: usize,
        /// Directory for records.csv and summary.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare latent spaces of several checkpoints by persistent
    /// homology of per-sentence activation clouds.
    Tda {
        /// Checkpoints to compare.
        #[arg(long = "models", required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        /// One label per checkpoint; file stems when omitted.
        #[arg(long, num_args = 1..)]
        labels: Option<Vec<String>>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Text label used in row names.
        #[arg(long, default_value = "text")]
        text: String,
        #[arg(long, default_value_t = 200)]
        sample: usize,
        /// Recorded in the manifest for provenance.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
        metric: MetricArg,
        /// Directory for h0.csv, h1.csv, and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute the full cached experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Suppress per-stage progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Rebuild figures and trend checks from a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn print_trends(trends: &Trends) {
    let mark = |pass: bool| if pass { "pass" } else { "fail" };
    println!(
        "trend a (pretrained model scores polypersonal text higher): {}",
        mark(trends.a_pretrained_poly_ppl_higher.pass)
    );
    println!(
        "trend b (fine-tuning shrinks the base/poly perplexity gap): {}",
        mark(trends.b_finetune_shrinks_gap.pass)
    );
    println!(
        "trend c (gold inflection probability rises across layers): {}",
        mark(trends.c_probe_rises_over_layers.pass)
    );
    println!(
        "trend d (poly fine-tuning moves the latent space farther than base): {}",
        mark(trends.d_tda_poly_shift_exceeds_base.pass)
    );
    println!("all trends: {}", mark(trends.all_pass));
}

fn load_corpus(path: &Path) -> Result<Vec<AnnotatedSentence>> {
    read_jsonl(path)
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus { lexicon, n, seed, out } => {
            let lex = match lexicon {
                Some(path) => Lexicon::load(&path)?,
                None => Lexicon::builtin(),
            };
            let corpus = generate_corpus(&lex, n, seed)?;
            write_jsonl(&out, &corpus)?;
            println!("wrote {} sentences to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::Augment { table, placement, input, out } => {
            let table = ParadigmTable::load(&table)?;
            let placement: Placement = placement.into();
            if table.placement() != placement {
                return Err(Error::InvalidExperimentConfig(format!(
                    "table declares {} placement but --placement is {}",
                    table.placement(),
                    placement
                )));
            }
            let base = load_corpus(&input)?;
            let poly: Result<Vec<AnnotatedSentence>> =
                base.iter().map(|s| apply_polypersonality(s, &table)).collect();
            let poly = poly?;
            write_jsonl(&out, &poly)?;
            println!("augmented {} sentences to {}", poly.len(), out.display());
            Ok(())
        }
        Command::TrainVocab { size, input, out, seed } => {
            let corpus = load_corpus(&input)?;
            let vocab = train_vocab(&corpus, size, seed)?;
            vocab.save(&out)?;
            println!("trained vocabulary of {} pieces to {}", vocab.len(), out.display());
            Ok(())
        }
        Command::Pretrain { input, vocab, grammar, shape, train: t, out, loss_csv } => {
            let vocab = Vocab::load(&vocab)?;
            let mut corpus = Vec::new();
            for path in &input {
                corpus.extend(load_corpus(path)?);
            }
            let tokenized: Vec<_> = corpus.iter().map(|s| encode(s, &vocab)).collect();
            let config = shape.config(vocab.len(), grammar.into(), t.seed);
            let mut params = ModelParams::init(&config)?;
            let curve =
                train(&tokenized, &config, &mut params, false, t.epochs, t.lr, t.batch, t.seed)?;
            if let Some(path) = loss_csv {
                write_loss_csv(&curve, &path)?;
            }
            save_checkpoint(&params, &config, &out)?;
            println!(
                "pretrained on {} sentences, final loss {:.4}, checkpoint at {}",
                tokenized.len(),
                curve.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Finetune {
            model,
            input,
            vocab,
            grammar,
            freeze_backbone,
            train: t,
            out,
            loss_csv,
        } => {
            let vocab = Vocab::load(&vocab)?;
            let corpus = load_corpus(&input)?;
            let tokenized: Vec<_> = corpus.iter().map(|s| encode(s, &vocab)).collect();
            let (mut config, mut params) = load_checkpoint(&model)?;
            let grammar: GrammarModule = grammar.into();
            if config.grammar_module != grammar {
                config.grammar_module = grammar;
                if grammar == GrammarModule::LstmHead {
                    params.lstm = ModelParams::init(&config)?.lstm;
                }
            }
            config.seed = t.seed;
            let curve = train(
                &tokenized,
                &config,
                &mut params,
                freeze_backbone,
                t.epochs,
                t.lr,
                t.batch,
                t.seed,
            )?;
            if let Some(path) = loss_csv {
                write_loss_csv(&curve, &path)?;
            }
            save_checkpoint(&params, &config, &out)?;
            println!(
                "fine-tuned on {} sentences ({} backbone), final loss {:.4}, checkpoint at {}",
                tokenized.len(),
                if freeze_backbone { "frozen" } else { "trainable" },
                curve.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::ScorePpl { model, vocab, input, setting, sample, out, summary } => {
            let vocab = Vocab::load(&vocab)?;
            let (config, params) = load_checkpoint(&model)?;
            let corpus = load_corpus(&input)?;
            let take = sample.unwrap_or(corpus.len()).min(corpus.len());
            let report = corpus_ppl(&params, &config, &vocab, &corpus[..take], &setting)?;
            write_ppl_csv(&report, &out)?;
            if let Some(path) = summary {
                let text = serde_json::to_string_pretty(&PplSummary::of(&report))
                    .expect("summary serializes");
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            println!(
                "{}: mean pseudo-ppl {:.4} (std {:.4}) over {} sentences, {} skipped",
                report.setting, report.mean, report.std, report.sample_size, report.skipped
            );
            Ok(())
        }
        Command::Probe { model, grammar, vocab, table, input, sample, out } => {
            let vocab = Vocab::load(&vocab)?;
            let table = ParadigmTable::load(&table)?;
            let (config, params) = load_checkpoint(&model)?;
            let grammar: GrammarModule = grammar.into();
            if config.grammar_module != grammar {
                return Err(Error::InvalidExperimentConfig(format!(
                    "checkpoint was trained with the {} module, not {}",
                    config.grammar_module, grammar
                )));
            }
            let corpus = load_corpus(&input)?;
            let take = sample.min(corpus.len());
            let (records, skipped) =
                probe_corpus(&params, &config, &vocab, &table, &corpus[..take])?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_records_csv(&records, &out.join("records.csv"))?;
            let summary = summarize(&records)?;
            write_summary_csv(&summary, &out.join("summary.csv"))?;
            println!(
                "probed {} sentences ({} skipped) across {} layers into {}",
                summary.sample_count,
                skipped,
                summary.mean_probability.len(),
                out.display()
            );
            Ok(())
        }
        Command::Tda { models, labels, vocab, input, text, sample, seed, metric, out } => {
            let vocab = Vocab::load(&vocab)?;
            let labels = match labels {
                Some(l) => {
                    if l.len() != models.len() {
                        return Err(Error::InvalidExperimentConfig(format!(
                            "{} labels given for {} models",
                            l.len(),
                            models.len()
                        )));
                    }
                    l
                }
                None => models
                    .iter()
                    .map(|p| {
                        p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
                    })
                    .collect(),
            };
            let corpus = load_corpus(&input)?;
            let take = sample.min(corpus.len());
            let sentences = &corpus[..take];
            let checkpoints: Result<Vec<_>> = models.iter().map(|p| load_checkpoint(p)).collect();
            let checkpoints = checkpoints?;
            let mut settings = Vec::new();
            for ((config, params), label) in checkpoints.iter().zip(&labels) {
                for tap in [Tap::Grammar, Tap::Backbone] {
                    settings.push(Setting {
                        label: format!("{label}/{text}/{}", tap.label()),
                        params,
                        config,
                        sentences,
                        tap,
                    });
                }
            }
            let report = setting_distance_matrix(&settings, &vocab, metric.into())?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_distance_csv(&report.labels, &report.h0, &out.join("h0.csv"))?;
            write_distance_csv(&report.labels, &report.h1, &out.join("h1.csv"))?;
            let manifest = TdaRunManifest {
                master_seed: seed,
                sample_size: take,
                sentences_used: report.sentences_used,
                sentences_skipped: report.sentences_skipped,
                metric: report.metric,
                labels: report.labels.clone(),
            };
            let path = out.join("manifest.json");
            let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            println!(
                "compared {} settings over {} sentences ({} skipped) into {}",
                report.labels.len(),
                report.sentences_used,
                report.sentences_skipped,
                out.display()
            );
            Ok(())
        }
        Command::Run { config, quiet } => {
            let config = ExperimentConfig::load(&config)?;
            run_experiment(&config, !quiet)?;
            let paths = RunPaths::new(&config.output_dir);
            let trends = Trends::load(&paths.report_file("trends.json"))?;
            print_trends(&trends);
            Ok(())
        }
        Command::Report { run } => {
            let paths = RunPaths::new(&run);
            emit_report(&paths)?;
            let trends = Trends::load(&paths.report_file("trends.json"))?;
            print_trends(&trends);
            Ok(())
        }
    }
}

fn write_loss_csv(curve: &[f64], path: &Path) -> Result<()> {
    use std::io::Write as _;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "step,loss").map_err(|e| Error::io(path, e))?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(file, "{i},{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    gramtopo::par::init_thread_cap();
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
