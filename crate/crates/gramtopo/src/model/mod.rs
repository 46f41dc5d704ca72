//! Tiny BERT-style masked LM: parameters, forward/backward passes, MLM
//! training with optional backbone freezing, and checkpoint I/O.
//!
//! The head computes `logits = LayerNorm(GeLU(H·W_p))·Eᵀ + b` with the
//! output projection tied to the input embedding matrix `E` (single
//! storage). The grammar module on top of the frozen backbone is either the
//! head alone or a unidirectional LSTM feeding the head.

pub mod backward;
pub mod checkpoint;
pub mod forward;
pub mod math;
pub mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use math::{sample_normal, Matrix};

/// Which trainable block sits between the backbone and the tied output
/// projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GrammarModule {
    #[serde(rename = "mlp")]
    MlpHead,
    #[serde(rename = "lstm")]
    LstmHead,
}

impl std::fmt::Display for GrammarModule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GrammarModule::MlpHead => write!(f, "mlp"),
            GrammarModule::LstmHead => write!(f, "lstm"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub grammar_module: GrammarModule,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be ≥ 1")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "num_heads {} must divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// One parameter matrix plus its update flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Matrix,
    pub trainable: bool,
}

impl Tensor {
    fn new(data: Matrix) -> Self {
        Tensor { data, trainable: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub bo: Tensor,
    pub attn_ln_gain: Tensor,
    pub attn_ln_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ffn_ln_gain: Tensor,
    pub ffn_ln_bias: Tensor,
}

/// Gate order within the stacked LSTM weights: input, forget, candidate,
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub position: Tensor,
    pub layers: Vec<LayerParams>,
    pub head_wp: Tensor,
    pub head_ln_gain: Tensor,
    pub head_ln_bias: Tensor,
    pub out_bias: Tensor,
    pub lstm: Option<LstmParams>,
}

impl ModelParams {
    /// Fresh parameters: weights ~ N(0, 0.02²), gains 1, biases 0, all
    /// tensors trainable.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let mut weight =
            |r: usize, c: usize| Tensor::new(Matrix::from_fn(r, c, |_, _| sample_normal(&mut rng, 0.0, 0.02)));
        let ones = |c: usize| Tensor::new(Matrix::from_fn(1, c, |_, _| 1.0));
        let zeros = |c: usize| Tensor::new(Matrix::zeros(1, c));

        let embedding = weight(config.vocab_size, d);
        let position = weight(config.max_seq_len, d);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerParams {
                wq: weight(d, d),
                wk: weight(d, d),
                wv: weight(d, d),
                wo: weight(d, d),
                bq: zeros(d),
                bk: zeros(d),
                bv: zeros(d),
                bo: zeros(d),
                attn_ln_gain: ones(d),
                attn_ln_bias: zeros(d),
                ffn_w1: weight(d, config.ffn_dim),
                ffn_b1: zeros(config.ffn_dim),
                ffn_w2: weight(config.ffn_dim, d),
                ffn_b2: zeros(d),
                ffn_ln_gain: ones(d),
                ffn_ln_bias: zeros(d),
            });
        }
        let head_wp = weight(d, d);
        let lstm = match config.grammar_module {
            GrammarModule::MlpHead => None,
            GrammarModule::LstmHead => Some(LstmParams {
                w_ih: weight(d, 4 * d),
                w_hh: weight(d, 4 * d),
                bias: zeros(4 * d),
            }),
        };
        Ok(ModelParams {
            embedding,
            position,
            layers,
            head_wp,
            head_ln_gain: ones(d),
            head_ln_bias: zeros(d),
            out_bias: zeros(config.vocab_size),
            lstm,
        })
    }

    /// Stable name → tensor listing; ordering matches between the `&self`
    /// and `&mut self` variants and across runs.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedding".into(), &self.embedding),
            ("position".into(), &self.position),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("attn.wq", &l.wq),
                ("attn.wk", &l.wk),
                ("attn.wv", &l.wv),
                ("attn.wo", &l.wo),
                ("attn.bq", &l.bq),
                ("attn.bk", &l.bk),
                ("attn.bv", &l.bv),
                ("attn.bo", &l.bo),
                ("attn_ln.gain", &l.attn_ln_gain),
                ("attn_ln.bias", &l.attn_ln_bias),
                ("ffn.w1", &l.ffn_w1),
                ("ffn.b1", &l.ffn_b1),
                ("ffn.w2", &l.ffn_w2),
                ("ffn.b2", &l.ffn_b2),
                ("ffn_ln.gain", &l.ffn_ln_gain),
                ("ffn_ln.bias", &l.ffn_ln_bias),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("head.wp".into(), &self.head_wp));
        out.push(("head_ln.gain".into(), &self.head_ln_gain));
        out.push(("head_ln.bias".into(), &self.head_ln_bias));
        out.push(("out_bias".into(), &self.out_bias));
        if let Some(l) = &self.lstm {
            out.push(("lstm.w_ih".into(), &l.w_ih));
            out.push(("lstm.w_hh".into(), &l.w_hh));
            out.push(("lstm.bias".into(), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embedding".into(), &mut self.embedding),
            ("position".into(), &mut self.position),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in [
                ("attn.wq", &mut l.wq),
                ("attn.wk", &mut l.wk),
                ("attn.wv", &mut l.wv),
                ("attn.wo", &mut l.wo),
                ("attn.bq", &mut l.bq),
                ("attn.bk", &mut l.bk),
                ("attn.bv", &mut l.bv),
                ("attn.bo", &mut l.bo),
                ("attn_ln.gain", &mut l.attn_ln_gain),
                ("attn_ln.bias", &mut l.attn_ln_bias),
                ("ffn.w1", &mut l.ffn_w1),
                ("ffn.b1", &mut l.ffn_b1),
                ("ffn.w2", &mut l.ffn_w2),
                ("ffn.b2", &mut l.ffn_b2),
                ("ffn_ln.gain", &mut l.ffn_ln_gain),
                ("ffn_ln.bias", &mut l.ffn_ln_bias),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("head.wp".into(), &mut self.head_wp));
        out.push(("head_ln.gain".into(), &mut self.head_ln_gain));
        out.push(("head_ln.bias".into(), &mut self.head_ln_bias));
        out.push(("out_bias".into(), &mut self.out_bias));
        if let Some(l) = &mut self.lstm {
            out.push(("lstm.w_ih".into(), &mut l.w_ih));
            out.push(("lstm.w_hh".into(), &mut l.w_hh));
            out.push(("lstm.bias".into(), &mut l.bias));
        }
        out
    }

    /// Backbone tensors are the embeddings, positions and encoder layers;
    /// everything else (head, LSTM, output bias) is the grammar module.
    pub fn is_backbone(name: &str) -> bool {
        name == "embedding" || name == "position" || name.starts_with("layer")
    }

    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for (name, t) in self.tensors_mut() {
            if Self::is_backbone(&name) {
                t.trainable = trainable;
            }
        }
    }

    /// Bitwise equality of the backbone tensors, for freeze verification.
    pub fn backbone_bits_equal(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() {
            return false;
        }
        a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
            if na != nb {
                return false;
            }
            if !Self::is_backbone(na) {
                return true;
            }
            ta.data.rows == tb.data.rows
                && ta.data.cols == tb.data.cols
                && ta.data.data.iter().zip(&tb.data.data).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

/// Per-tensor gradients keyed by the names from [`ModelParams::tensors`].
#[derive(Debug, Clone, Default)]
pub struct Gradients(pub BTreeMap<String, Matrix>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for g in self.0.values_mut() {
            g.scale_assign(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(grammar: GrammarModule) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            vocab_size: 16,
            max_seq_len: 10,
            grammar_module: grammar,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(GrammarModule::MlpHead);
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 2;
        c.max_seq_len = 1;
        assert!(c.validate().is_err());
        c.max_seq_len = 4;
        c.vocab_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn tensor_listing_is_stable_and_complete() {
        let p = ModelParams::init(&tiny_config(GrammarModule::LstmHead)).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 2 + 2 * 16 + 4 + 3);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "tensor names are unique");
        let mut p2 = ModelParams::init(&tiny_config(GrammarModule::LstmHead)).unwrap();
        let names_mut: Vec<String> = p2.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
    }

    #[test]
    fn freezing_targets_only_backbone() {
        let mut p = ModelParams::init(&tiny_config(GrammarModule::LstmHead)).unwrap();
        p.set_backbone_trainable(false);
        for (name, t) in p.tensors() {
            assert_eq!(t.trainable, !ModelParams::is_backbone(&name), "{name}");
        }
        let trainable: Vec<String> = p
            .tensors()
            .into_iter()
            .filter(|(_, t)| t.trainable)
            .map(|(n, _)| n)
            .collect();
        assert_eq!(
            trainable,
            ["head.wp", "head_ln.gain", "head_ln.bias", "out_bias", "lstm.w_ih", "lstm.w_hh", "lstm.bias"]
                .map(String::from)
        );
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let c = tiny_config(GrammarModule::MlpHead);
        let a = ModelParams::init(&c).unwrap();
        let b = ModelParams::init(&c).unwrap();
        assert_eq!(a, b);
        let mut c2 = c.clone();
        c2.seed = 4;
        let d = ModelParams::init(&c2).unwrap();
        assert_ne!(a, d);
    }
}
