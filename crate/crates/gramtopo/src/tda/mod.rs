//! Topological readout of hidden-state geometry.
//!
//! Token vectors from a chosen tap point form a per-sentence point cloud;
//! Vietoris-Rips persistence in H0 and H1 summarizes its shape, and
//! bottleneck distances between settings are averaged over sentences.

mod bottleneck;
mod rips;

pub use bottleneck::bottleneck_distance;
pub use rips::{rips_h0, rips_h1};

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AnnotatedSentence;
use crate::error::{Error, Result};
use crate::model::forward::{forward, ForwardTrace};
use crate::model::math::Matrix;
use crate::model::{ModelConfig, ModelParams};
use crate::par::par_map;
use crate::tokenizer::{encode, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudMetric {
    Euclidean,
    Cosine,
}

/// One point per retained token, rows = points.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Matrix,
    pub metric: CloudMetric,
}

/// Finite birth/death pairs of one homology dimension. H0 births are all
/// zero; the essential H0 class is dropped and any 1-cycle still open at
/// the top of the filtration dies at `cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceDiagram {
    pub dim: usize,
    pub pairs: Vec<(f64, f64)>,
    pub cap: f64,
}

/// Which hidden state feeds the point cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    /// Last encoder layer state.
    Backbone,
    /// Grammar-module output state.
    Grammar,
}

impl Tap {
    pub fn label(self) -> &'static str {
        match self {
            Tap::Backbone => "backbone",
            Tap::Grammar => "grammar",
        }
    }
}

/// Symmetric distance matrix with a zero diagonal.
pub fn pairwise_distances(cloud: &PointCloud) -> Matrix {
    let n = cloud.points.rows;
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = cloud.points.row(i);
            let b = cloud.points.row(j);
            let dist = match cloud.metric {
                CloudMetric::Euclidean => {
                    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                }
                CloudMetric::Cosine => {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if na == 0.0 || nb == 0.0 {
                        1.0
                    } else {
                        1.0 - dot / (na * nb)
                    }
                }
            };
            d.data[i * n + j] = dist;
            d.data[j * n + i] = dist;
        }
    }
    d
}

/// Point cloud of the non-special token vectors at a tap point. `ids` are
/// the input token ids, aligned with the trace rows.
pub fn sentence_cloud(
    trace: &ForwardTrace,
    tap: Tap,
    ids: &[u32],
    metric: CloudMetric,
) -> Result<PointCloud> {
    let source = match tap {
        Tap::Backbone => trace.states.last().expect("trace has states"),
        Tap::Grammar => &trace.grammar_out,
    };
    if ids.len() != source.rows {
        return Err(Error::DimensionMismatch(format!(
            "{} ids for {} state rows",
            ids.len(),
            source.rows
        )));
    }
    let keep: Vec<usize> =
        (0..ids.len()).filter(|&i| !Vocab::is_special(ids[i])).collect();
    if keep.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut points = Matrix::zeros(keep.len(), source.cols);
    for (r, &i) in keep.iter().enumerate() {
        points.data[r * source.cols..(r + 1) * source.cols].copy_from_slice(source.row(i));
    }
    Ok(PointCloud { points, metric })
}

/// One comparison arm: a checkpoint, the text variant it reads, and the
/// tap point. Sentence lists must be index-aligned across settings.
pub struct Setting<'a> {
    pub label: String,
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
    pub sentences: &'a [AnnotatedSentence],
    pub tap: Tap,
}

/// Averaged bottleneck distances between settings, one matrix per
/// homology dimension. Row/column order follows the setting labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceMatrixReport {
    pub labels: Vec<String>,
    pub h0: Vec<Vec<f64>>,
    pub h1: Vec<Vec<f64>>,
    pub sentences_used: usize,
    pub sentences_skipped: usize,
    pub metric: CloudMetric,
}

fn sentence_diagrams(
    setting: &Setting,
    idx: usize,
    vocab: &Vocab,
    metric: CloudMetric,
) -> Result<Option<(PersistenceDiagram, PersistenceDiagram)>> {
    let t = encode(&setting.sentences[idx], vocab);
    if t.ids.len() > setting.config.max_seq_len {
        return Ok(None);
    }
    let trace = forward(setting.params, setting.config, &t.ids)?;
    let cloud = match sentence_cloud(&trace, setting.tap, &t.ids, metric) {
        Ok(c) => c,
        Err(Error::EmptyCloud) => return Ok(None),
        Err(e) => return Err(e),
    };
    let dist = pairwise_distances(&cloud);
    let mut max_edge = 0.0f64;
    for i in 0..dist.rows {
        for j in (i + 1)..dist.cols {
            max_edge = max_edge.max(dist.data[i * dist.cols + j]);
        }
    }
    Ok(Some((rips_h0(&dist), rips_h1(&dist, max_edge)?)))
}

/// Per-sentence diagrams for every setting, bottleneck distances per
/// setting pair, means over the sentences that succeed in all settings.
pub fn setting_distance_matrix(
    settings: &[Setting],
    vocab: &Vocab,
    metric: CloudMetric,
) -> Result<DistanceMatrixReport> {
    if settings.is_empty() {
        return Err(Error::EmptySample);
    }
    let n_sentences = settings[0].sentences.len();
    if n_sentences == 0 {
        return Err(Error::EmptySample);
    }
    for s in settings {
        if s.sentences.len() != n_sentences {
            return Err(Error::DimensionMismatch(format!(
                "setting {} has {} sentences, expected {}",
                s.label,
                s.sentences.len(),
                n_sentences
            )));
        }
    }
    let indices: Vec<usize> = (0..n_sentences).collect();
    let per_sentence: Vec<Result<Option<Vec<(PersistenceDiagram, PersistenceDiagram)>>>> =
        par_map(&indices, |&i| {
            let mut row = Vec::with_capacity(settings.len());
            for s in settings {
                match sentence_diagrams(s, i, vocab, metric)? {
                    Some(d) => row.push(d),
                    None => return Ok(None),
                }
            }
            Ok(Some(row))
        });
    let k = settings.len();
    let mut h0 = vec![vec![0.0f64; k]; k];
    let mut h1 = vec![vec![0.0f64; k]; k];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for row in per_sentence {
        let Some(diagrams) = row? else {
            skipped += 1;
            continue;
        };
        used += 1;
        for a in 0..k {
            for b in (a + 1)..k {
                let d0 = bottleneck_distance(&diagrams[a].0, &diagrams[b].0)?;
                let d1 = bottleneck_distance(&diagrams[a].1, &diagrams[b].1)?;
                h0[a][b] += d0;
                h0[b][a] += d0;
                h1[a][b] += d1;
                h1[b][a] += d1;
            }
        }
    }
    if used == 0 {
        return Err(Error::EmptySample);
    }
    for m in [&mut h0, &mut h1] {
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v /= used as f64;
            }
        }
    }
    Ok(DistanceMatrixReport {
        labels: settings.iter().map(|s| s.label.clone()).collect(),
        h0,
        h1,
        sentences_used: used,
        sentences_skipped: skipped,
        metric,
    })
}

/// Labeled square CSV: first column and header row carry the setting
/// labels.
pub fn write_distance_csv(labels: &[String], matrix: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "setting,{}", labels.join(",")).map_err(|e| Error::io(path, e))?;
    for (label, row) in labels.iter().zip(matrix) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(file, "{},{}", label, cells.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::testutil::random_cloud;
    use super::*;
    use crate::model::GrammarModule;

    #[test]
    fn identical_points_are_at_distance_zero() {
        let points = Matrix { rows: 2, cols: 3, data: vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0] };
        let d = pairwise_distances(&PointCloud { points, metric: CloudMetric::Euclidean });
        assert_eq!(d.data, vec![0.0; 4]);
    }

    #[test]
    fn unit_square_distances() {
        let points = Matrix { rows: 4, cols: 2, data: vec![0., 0., 1., 0., 0., 1., 1., 1.] };
        let d = pairwise_distances(&PointCloud { points, metric: CloudMetric::Euclidean });
        assert_eq!(d.data[1], 1.0);
        assert_eq!(d.data[2], 1.0);
        assert!((d.data[3] - 2.0f64.sqrt()).abs() < 1e-15);
        assert!((d.data[1 * 4 + 2] - 2.0f64.sqrt()).abs() < 1e-15);
        for i in 0..4 {
            assert_eq!(d.data[i * 4 + i], 0.0);
            for j in 0..4 {
                assert_eq!(d.data[i * 4 + j], d.data[j * 4 + i]);
            }
        }
    }

    #[test]
    fn euclidean_matches_elementwise_recomputation() {
        let cloud = random_cloud(20, 6, 71);
        let d = pairwise_distances(&cloud);
        for i in 0..20 {
            for j in 0..20 {
                let expect: f64 = (0..6)
                    .map(|k| {
                        let diff = cloud.points.data[i * 6 + k] - cloud.points.data[j * 6 + k];
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt();
                assert!((d.data[i * 20 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_distance_basics() {
        let points = Matrix { rows: 3, cols: 2, data: vec![1., 0., 0., 2., -3., 0.] };
        let d = pairwise_distances(&PointCloud { points, metric: CloudMetric::Cosine });
        assert!((d.data[1] - 1.0).abs() < 1e-15, "orthogonal vectors at 1");
        assert!((d.data[2] - 2.0).abs() < 1e-15, "opposite vectors at 2");
        assert_eq!(d.data[0], 0.0);
    }

    fn tiny_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            vocab_size,
            max_seq_len: 32,
            grammar_module: GrammarModule::MlpHead,
            seed: 3,
        }
    }

    #[test]
    fn cloud_excludes_special_tokens() {
        let c = tiny_config(32);
        let params = ModelParams::init(&c).unwrap();
        let ids = vec![2u32, 7, 8, 9, 10, 11, 3];
        let trace = forward(&params, &c, &ids).unwrap();
        let cloud = sentence_cloud(&trace, Tap::Backbone, &ids, CloudMetric::Euclidean).unwrap();
        assert_eq!(cloud.points.rows, 5);
        assert_eq!(cloud.points.cols, 8);
        let state = trace.states.last().unwrap();
        assert_eq!(cloud.points.row(0), state.row(1));
    }

    #[test]
    fn cloud_of_only_specials_is_empty() {
        let c = tiny_config(32);
        let params = ModelParams::init(&c).unwrap();
        let ids = vec![2u32, 3];
        let trace = forward(&params, &c, &ids).unwrap();
        assert!(matches!(
            sentence_cloud(&trace, Tap::Backbone, &ids, CloudMetric::Euclidean).unwrap_err(),
            Error::EmptyCloud
        ));
    }

    #[test]
    fn taps_differ_on_a_random_model() {
        let c = tiny_config(32);
        let mut params = ModelParams::init(&c).unwrap();
        for (_, t) in params.tensors_mut() {
            for (i, x) in t.data.data.iter_mut().enumerate() {
                *x = ((i % 11) as f64 - 5.0) * 0.07;
            }
        }
        let ids = vec![2u32, 7, 8, 9, 3];
        let trace = forward(&params, &c, &ids).unwrap();
        let a = sentence_cloud(&trace, Tap::Backbone, &ids, CloudMetric::Euclidean).unwrap();
        let b = sentence_cloud(&trace, Tap::Grammar, &ids, CloudMetric::Euclidean).unwrap();
        assert_ne!(a.points.data, b.points.data);
    }

    #[test]
    fn self_comparison_matrix_is_zero() {
        let lex = crate::augment::Lexicon::builtin();
        let corpus = crate::augment::generate_corpus(&lex, 6, 5).unwrap();
        let vocab = crate::tokenizer::train_vocab(&corpus, 512, 0).unwrap();
        let c = tiny_config(vocab.len());
        let params = ModelParams::init(&c).unwrap();
        let settings = vec![
            Setting {
                label: "a/base/backbone".into(),
                params: &params,
                config: &c,
                sentences: &corpus,
                tap: Tap::Backbone,
            },
            Setting {
                label: "b/base/backbone".into(),
                params: &params,
                config: &c,
                sentences: &corpus,
                tap: Tap::Backbone,
            },
        ];
        let report = setting_distance_matrix(&settings, &vocab, CloudMetric::Euclidean).unwrap();
        assert_eq!(report.sentences_used, 6);
        assert_eq!(report.sentences_skipped, 0);
        for m in [&report.h0, &report.h1] {
            for row in m {
                for &v in row {
                    assert_eq!(v, 0.0, "identical checkpoints must give a zero matrix");
                }
            }
        }
    }

    #[test]
    fn distinct_params_give_symmetric_positive_offdiagonal() {
        let lex = crate::augment::Lexicon::builtin();
        let corpus = crate::augment::generate_corpus(&lex, 5, 9).unwrap();
        let vocab = crate::tokenizer::train_vocab(&corpus, 512, 0).unwrap();
        let c = tiny_config(vocab.len());
        let params_a = ModelParams::init(&c).unwrap();
        let mut params_b = ModelParams::init(&c).unwrap();
        for (_, t) in params_b.tensors_mut() {
            for x in &mut t.data.data {
                *x += 0.05;
            }
        }
        let settings = vec![
            Setting {
                label: "a/base/backbone".into(),
                params: &params_a,
                config: &c,
                sentences: &corpus,
                tap: Tap::Backbone,
            },
            Setting {
                label: "b/base/backbone".into(),
                params: &params_b,
                config: &c,
                sentences: &corpus,
                tap: Tap::Backbone,
            },
        ];
        let report = setting_distance_matrix(&settings, &vocab, CloudMetric::Euclidean).unwrap();
        assert_eq!(report.h0[0][1], report.h0[1][0]);
        assert_eq!(report.h0[0][0], 0.0);
        assert_eq!(report.h0[1][1], 0.0);
        assert!(report.h0[0][1] > 0.0);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let labels = vec!["a/base/backbone".to_string(), "b/poly/grammar".to_string()];
        let matrix = vec![vec![0.0, 0.25], vec![0.25, 0.0]];
        write_distance_csv(&labels, &matrix, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "setting,a/base/backbone,b/poly/grammar\n\
             a/base/backbone,0,0.25\n\
             b/poly/grammar,0.25,0\n"
        );
    }
}
