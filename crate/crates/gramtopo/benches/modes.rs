//! Sequential vs parallel throughput on the three fan-out hot paths:
//! batch-gradient accumulation, PLL-word-l2r scoring, and Vietoris–Rips
//! distance matrices.
//!
//! With the default `parallel` feature each group runs two arms: `seq`
//! pins a one-thread rayon pool, `par` uses one worker per CPU. Built
//! with `--no-default-features` the crate compiles the plain sequential
//! fallback instead and a single `seq-fallback` arm runs per group.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use gramtopo::augment::{
    apply_polypersonality, generate_corpus, AnnotatedSentence, Lexicon, ParadigmTable,
};
use gramtopo::model::train::train;
use gramtopo::model::{GrammarModule, ModelConfig, ModelParams};
use gramtopo::pll::corpus_ppl;
use gramtopo::tda::{setting_distance_matrix, CloudMetric, Setting, Tap};
use gramtopo::tokenizer::{encode, train_vocab, TokenizedSentence, Vocab};

struct Fixture {
    config: ModelConfig,
    params: ModelParams,
    vocab: Vocab,
    poly: Vec<AnnotatedSentence>,
    encoded: Vec<TokenizedSentence>,
}

fn fixture() -> Fixture {
    let lex = Lexicon::builtin();
    let base = generate_corpus(&lex, 160, 5).unwrap();
    let table = ParadigmTable::default();
    let poly: Vec<AnnotatedSentence> =
        base.iter().map(|s| apply_polypersonality(s, &table).unwrap()).collect();
    let vocab = train_vocab(&base, 512, 0).unwrap();
    let config = ModelConfig {
        num_layers: 2,
        hidden_dim: 32,
        num_heads: 2,
        ffn_dim: 64,
        vocab_size: vocab.len(),
        max_seq_len: 64,
        grammar_module: GrammarModule::MlpHead,
        seed: 7,
    };
    let params = ModelParams::init(&config).unwrap();
    let encoded: Vec<TokenizedSentence> = poly.iter().map(|s| encode(s, &vocab)).collect();
    Fixture { config, params, vocab, poly, encoded }
}

/// Runs `work` once per mode arm inside the matching thread context.
fn bench_modes<R: Send>(c: &mut Criterion, group: &str, work: impl Fn() -> R + Sync) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let seq = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let par = rayon::ThreadPoolBuilder::new().build().unwrap();
        g.bench_function("seq", |b| b.iter(|| seq.install(|| black_box(work()))));
        g.bench_function(format!("par-{}t", par.current_num_threads()), |b| {
            b.iter(|| par.install(|| black_box(work())))
        });
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function("seq-fallback", |b| b.iter(|| black_box(work())));
    g.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let f = fixture();
    let batch: Vec<TokenizedSentence> = f.encoded.iter().take(24).cloned().collect();
    bench_modes(c, "batch_gradients", || {
        let mut params = f.params.clone();
        train(&batch, &f.config, &mut params, false, 1, 1e-3, batch.len(), 3).unwrap()
    });
}

fn pll_scoring(c: &mut Criterion) {
    let f = fixture();
    let sample = &f.poly[..12];
    bench_modes(c, "pll_scoring", || {
        corpus_ppl(&f.params, &f.config, &f.vocab, sample, "bench").unwrap()
    });
}

fn rips_matrix(c: &mut Criterion) {
    let f = fixture();
    let sample = &f.poly[..16];
    bench_modes(c, "rips_matrix", || {
        let settings = vec![
            Setting {
                label: "backbone".into(),
                params: &f.params,
                config: &f.config,
                sentences: sample,
                tap: Tap::Backbone,
            },
            Setting {
                label: "grammar".into(),
                params: &f.params,
                config: &f.config,
                sentences: sample,
                tap: Tap::Grammar,
            },
        ];
        setting_distance_matrix(&settings, &f.vocab, CloudMetric::Euclidean).unwrap()
    });
}

criterion_group!(benches, batch_gradients, pll_scoring, rips_matrix);
criterion_main!(benches);
