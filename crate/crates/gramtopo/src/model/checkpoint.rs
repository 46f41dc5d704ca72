//! Versioned binary checkpoints: magic, config JSON block, then named
//! tensors with trainable flags and little-endian f64 data. Loading is
//! bit-exact.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::math::Matrix;
use super::{ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"GTPO";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config_json = serde_json::to_vec(config).expect("config serializes");
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    let tensors = params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(t.trainable as u8);
        buf.extend_from_slice(&(t.data.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.data.cols as u32).to_le_bytes());
        for &x in &t.data.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;

    let count = cur.u32()? as usize;
    let mut loaded: Vec<(String, bool, Matrix)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?
            .to_string();
        let trainable = match cur.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: bad trainable flag {other}"
                )))
            }
        };
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let raw = cur.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push((name, trainable, Matrix { rows, cols, data }));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - cur.pos
        )));
    }

    let mut params = ModelParams::init(&config)?;
    let mut loaded_iter = loaded.into_iter();
    for (name, tensor) in params.tensors_mut() {
        let Some((got_name, trainable, data)) = loaded_iter.next() else {
            return Err(Error::Checkpoint(format!("tensor {name} missing from file")));
        };
        if got_name != name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected {name}, found {got_name}"
            )));
        }
        if (data.rows, data.cols) != (tensor.data.rows, tensor.data.cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: stored shape {}×{} does not match config shape {}×{}",
                data.rows, data.cols, tensor.data.rows, tensor.data.cols
            )));
        }
        tensor.data = data;
        tensor.trainable = trainable;
    }
    if loaded_iter.next().is_some() {
        return Err(Error::Checkpoint("file contains extra tensors".into()));
    }
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GrammarModule;

    fn config(seed: u64, grammar: GrammarModule) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 10,
            vocab_size: 24,
            max_seq_len: 12,
            grammar_module: grammar,
            seed,
        }
    }

    fn bit_identical(a: &ModelParams, b: &ModelParams) -> bool {
        let ta = a.tensors();
        let tb = b.tensors();
        ta.len() == tb.len()
            && ta.iter().zip(&tb).all(|((na, x), (nb, y))| {
                na == nb
                    && x.trainable == y.trainable
                    && x.data.data.len() == y.data.data.len()
                    && x.data.data.iter().zip(&y.data.data).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = config(5, GrammarModule::LstmHead);
        let mut params = ModelParams::init(&c).unwrap();
        params.set_backbone_trainable(false);
        save_checkpoint(&params, &c, &path).unwrap();
        let (c2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(c, c2);
        assert!(bit_identical(&params, &p2));
    }

    #[test]
    fn ten_random_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10u64 {
            let grammar = if i % 2 == 0 { GrammarModule::MlpHead } else { GrammarModule::LstmHead };
            let c = config(100 + i, grammar);
            let params = ModelParams::init(&c).unwrap();
            let path = dir.path().join(format!("m{i}.ckpt"));
            save_checkpoint(&params, &c, &path).unwrap();
            let (c2, p2) = load_checkpoint(&path).unwrap();
            assert_eq!(c, c2);
            assert!(bit_identical(&params, &p2));
        }
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = config(1, GrammarModule::MlpHead);
        let params = ModelParams::init(&c).unwrap();
        save_checkpoint(&params, &c, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Checkpoint(_)));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'G';
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = config(2, GrammarModule::MlpHead);
        let params = ModelParams::init(&c).unwrap();
        save_checkpoint(&params, &c, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 11]).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Checkpoint(_)));
    }
}
