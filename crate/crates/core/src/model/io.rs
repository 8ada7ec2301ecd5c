//! Binary weights file.
//!
//! Layout (all little-endian):
//!   magic `CRCT` | format version u32 | config as u32s in the order
//!   layers, hidden, heads, ffn, vocab, max_seq, activation-code | tensors.
//!
//! Tensors are `f32`, each preceded by rank and dims as u32s, written in
//! declaration order: embedding, unembedding, then per layer Q, K, V, O,
//! up, down, attention-LN gain/bias, FFN-LN gain/bias, then the final LN
//! gain/bias and the positional embeddings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::numerics::Mat;

use super::config::{Activation, ModelConfig};
use super::weights::ModelWeights;

const MAGIC: &[u8; 4] = b"CRCT";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CoreError::WeightsTruncated { what: what.into() }
        } else {
            CoreError::Io(e)
        }
    })?;
    Ok(u32::from_le_bytes(buf))
}

fn write_tensor(w: &mut impl Write, dims: &[usize], data: impl Iterator<Item = f64>) -> Result<()> {
    write_u32(w, dims.len() as u32)?;
    for &d in dims {
        write_u32(w, d as u32)?;
    }
    for v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, name: &str, expected_dims: &[usize]) -> Result<Vec<f64>> {
    let rank = read_u32(r, name)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r, name)? as usize);
    }
    if dims != expected_dims {
        return Err(CoreError::WeightsShapeMismatch {
            tensor: name.into(),
            expected: expected_dims.to_vec(),
            got: dims,
        });
    }
    let count: usize = dims.iter().product();
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CoreError::WeightsTruncated { what: name.into() }
        } else {
            CoreError::Io(e)
        }
    })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn read_mat(r: &mut impl Read, name: &str, rows: usize, cols: usize) -> Result<Mat> {
    let data = read_tensor(r, name, &[rows, cols])?;
    Mat::from_vec(rows, cols, data)
}

/// Write weights to `path`. Values are stored as `f32`.
pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let cfg = &weights.config;
    for v in [
        cfg.layers,
        cfg.hidden,
        cfg.heads,
        cfg.ffn,
        cfg.vocab,
        cfg.max_seq,
    ] {
        write_u32(&mut w, v as u32)?;
    }
    write_u32(&mut w, cfg.activation.code())?;

    let mat = |m: &Mat| m.data().iter().copied().collect::<Vec<_>>();
    write_tensor(&mut w, &[cfg.hidden, cfg.vocab], mat(&weights.w_embed).into_iter())?;
    write_tensor(&mut w, &[cfg.vocab, cfg.hidden], mat(&weights.w_unembed).into_iter())?;
    for layer in &weights.layers {
        write_tensor(&mut w, &[cfg.hidden, cfg.hidden], mat(&layer.w_q).into_iter())?;
        write_tensor(&mut w, &[cfg.hidden, cfg.hidden], mat(&layer.w_k).into_iter())?;
        write_tensor(&mut w, &[cfg.hidden, cfg.hidden], mat(&layer.w_v).into_iter())?;
        write_tensor(&mut w, &[cfg.hidden, cfg.hidden], mat(&layer.w_o).into_iter())?;
        write_tensor(&mut w, &[cfg.ffn, cfg.hidden], mat(&layer.w_up).into_iter())?;
        write_tensor(&mut w, &[cfg.hidden, cfg.ffn], mat(&layer.w_down).into_iter())?;
        write_tensor(&mut w, &[cfg.hidden], layer.ln_attn.gain.iter().copied())?;
        write_tensor(&mut w, &[cfg.hidden], layer.ln_attn.bias.iter().copied())?;
        write_tensor(&mut w, &[cfg.hidden], layer.ln_ffn.gain.iter().copied())?;
        write_tensor(&mut w, &[cfg.hidden], layer.ln_ffn.bias.iter().copied())?;
    }
    write_tensor(&mut w, &[cfg.hidden], weights.ln_final.gain.iter().copied())?;
    write_tensor(&mut w, &[cfg.hidden], weights.ln_final.bias.iter().copied())?;
    write_tensor(&mut w, &[cfg.max_seq, cfg.hidden], mat(&weights.pos_embed).into_iter())?;
    w.flush()?;
    Ok(())
}

/// Read weights written by [`save_weights`].
pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CoreError::WeightsTruncated {
                what: "magic".into(),
            }
        } else {
            CoreError::Io(e)
        }
    })?;
    if &magic != MAGIC {
        return Err(CoreError::WeightsFormat {
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CoreError::WeightsFormat {
            reason: format!("unsupported version {version}"),
        });
    }
    let layers = read_u32(&mut r, "config.layers")? as usize;
    let hidden = read_u32(&mut r, "config.hidden")? as usize;
    let heads = read_u32(&mut r, "config.heads")? as usize;
    let ffn = read_u32(&mut r, "config.ffn")? as usize;
    let vocab = read_u32(&mut r, "config.vocab")? as usize;
    let max_seq = read_u32(&mut r, "config.max_seq")? as usize;
    let activation = Activation::from_code(read_u32(&mut r, "config.activation")?)?;
    let config = ModelConfig {
        layers,
        hidden,
        heads,
        ffn,
        vocab,
        max_seq,
        activation,
    };
    config.validate().map_err(|e| CoreError::WeightsFormat {
        reason: format!("config in file invalid: {e}"),
    })?;

    let mut weights = ModelWeights::zeros(config)?;
    weights.w_embed = read_mat(&mut r, "w_embed", hidden, vocab)?;
    weights.w_unembed = read_mat(&mut r, "w_unembed", vocab, hidden)?;
    for (i, layer) in weights.layers.iter_mut().enumerate() {
        layer.w_q = read_mat(&mut r, &format!("layer{i}.w_q"), hidden, hidden)?;
        layer.w_k = read_mat(&mut r, &format!("layer{i}.w_k"), hidden, hidden)?;
        layer.w_v = read_mat(&mut r, &format!("layer{i}.w_v"), hidden, hidden)?;
        layer.w_o = read_mat(&mut r, &format!("layer{i}.w_o"), hidden, hidden)?;
        layer.w_up = read_mat(&mut r, &format!("layer{i}.w_up"), ffn, hidden)?;
        layer.w_down = read_mat(&mut r, &format!("layer{i}.w_down"), hidden, ffn)?;
        layer.ln_attn.gain = read_tensor(&mut r, &format!("layer{i}.ln_attn.gain"), &[hidden])?;
        layer.ln_attn.bias = read_tensor(&mut r, &format!("layer{i}.ln_attn.bias"), &[hidden])?;
        layer.ln_ffn.gain = read_tensor(&mut r, &format!("layer{i}.ln_ffn.gain"), &[hidden])?;
        layer.ln_ffn.bias = read_tensor(&mut r, &format!("layer{i}.ln_ffn.bias"), &[hidden])?;
    }
    weights.ln_final.gain = read_tensor(&mut r, "ln_final.gain", &[hidden])?;
    weights.ln_final.bias = read_tensor(&mut r, "ln_final.bias", &[hidden])?;
    weights.pos_embed = read_mat(&mut r, "pos_embed", max_seq, hidden)?;

    // Anything past the declared tensors is a format violation.
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(weights),
        _ => Err(CoreError::WeightsFormat {
            reason: "trailing bytes after final tensor".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Activation;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 10,
            vocab: 7,
            max_seq: 4,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn round_trip_identical_after_quantize() {
        let mut w = ModelWeights::random(cfg(), 42).unwrap();
        w.quantize_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crct");
        save_weights(&w, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(w, loaded);
        // And the byte stream is a fixed point of save/load.
        let path2 = dir.path().join("model2.crct");
        save_weights(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_reported_as_truncation() {
        let mut w = ModelWeights::random(cfg(), 1).unwrap();
        w.quantize_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crct");
        save_weights(&w, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.crct");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_weights(&cut),
            Err(CoreError::WeightsTruncated { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.crct");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(
            load_weights(&path),
            Err(CoreError::WeightsFormat { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_distinct() {
        let mut w = ModelWeights::random(cfg(), 1).unwrap();
        w.quantize_f32();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.crct");
        save_weights(&w, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Header is 4 magic + 4 version + 7 * 4 config bytes; the first
        // tensor's rank/dims follow. Corrupt the first dim.
        let dim_offset = 4 + 4 + 28 + 4;
        bytes[dim_offset] = bytes[dim_offset].wrapping_add(1);
        let bad = dir.path().join("bad.crct");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_weights(&bad),
            Err(CoreError::WeightsShapeMismatch { .. })
        ));
    }
}
