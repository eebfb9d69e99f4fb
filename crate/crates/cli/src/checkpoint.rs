//! Single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"PSCK"                      4 bytes
//! version u32                          currently 1
//! meta_len u64
//! meta    JSON {"config": ModelConfig, "vocab": Vocab}
//! blocks, in order:
//!   embed            vocab_size*d_model f64
//!   pos              max_len*d_model    f64
//!   per layer:
//!     wq, wk, wv, wo, w1, w2   each: packed 4-bit codes (two per byte,
//!                              low nibble first) then per-group f64 scales
//!     lora_q.a, lora_q.b, lora_v.a, lora_v.b   f64
//!   unembed          packed codes + scales
//! ```
//!
//! The vocabulary travels inside the checkpoint, so loading never needs
//! the original corpus. A version mismatch or a short file is an error;
//! no partial model is ever returned.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use phishscope_core::model::{Layer, LoraAdapter, Model, ModelConfig, QuantizedLinear};
use phishscope_core::tensor::Mat;
use phishscope_core::tokenizer::Vocab;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vocab,
}

fn corrupt(why: impl Into<String>) -> CliError {
    CliError::new("model", "MODEL_CHECKPOINT_CORRUPT", why)
}

fn pack_codes(codes: &[i8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(codes.len().div_ceil(2));
    for pair in codes.chunks(2) {
        let lo = (pair[0] as u8) & 0x0f;
        let hi = if pair.len() == 2 { (pair[1] as u8) & 0x0f } else { 0 };
        out.push(lo | (hi << 4));
    }
    out
}

fn unpack_codes(bytes: &[u8], n: usize) -> Vec<i8> {
    let mut out = Vec::with_capacity(n);
    for &b in bytes {
        for nibble in [b & 0x0f, b >> 4] {
            if out.len() == n {
                break;
            }
            // sign-extend the 4-bit code
            let v = if nibble & 0x08 != 0 {
                (nibble | 0xf0) as i8
            } else {
                nibble as i8
            };
            out.push(v);
        }
    }
    out
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| corrupt(format!("short read of {n} f64 values: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_quant(w: &mut impl Write, q: &QuantizedLinear) -> Result<()> {
    w.write_all(&pack_codes(&q.codes))?;
    write_f64s(w, &q.scales)
}

fn read_quant(r: &mut impl Read, rows: usize, cols: usize, group: usize) -> Result<QuantizedLinear> {
    let n = rows * cols;
    let mut packed = vec![0u8; n.div_ceil(2)];
    r.read_exact(&mut packed)
        .map_err(|e| corrupt(format!("short read of quantized block: {e}")))?;
    let codes = unpack_codes(&packed, n);
    let scales = read_f64s(r, n.div_ceil(group))?;
    Ok(QuantizedLinear::from_parts(rows, cols, group, codes, scales)?)
}

fn write_mat(w: &mut impl Write, m: &Mat) -> Result<()> {
    write_f64s(w, &m.data)
}

fn read_mat(r: &mut impl Read, rows: usize, cols: usize) -> Result<Mat> {
    let data = read_f64s(r, rows * cols)?;
    Ok(Mat { rows, cols, data })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&Meta {
        config: model.cfg.clone(),
        vocab: model.vocab.clone(),
    })?;
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);

    write_mat(&mut out, &model.embed)?;
    write_mat(&mut out, &model.pos)?;
    for layer in &model.layers {
        for q in [&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w1, &layer.w2] {
            write_quant(&mut out, q)?;
        }
        for m in [&layer.lora_q.a, &layer.lora_q.b, &layer.lora_v.a, &layer.lora_v.b] {
            write_mat(&mut out, m)?;
        }
    }
    write_quant(&mut out, &model.unembed)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut r: &[u8] = &bytes;

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("file too short for header"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic; not a phishscope checkpoint"));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|_| corrupt("file too short for version"))?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(CliError::new(
            "model",
            "MODEL_CHECKPOINT_VERSION",
            format!("checkpoint is version {version}, this build reads version {VERSION}"),
        ));
    }
    let mut l = [0u8; 8];
    r.read_exact(&mut l).map_err(|_| corrupt("file too short for metadata length"))?;
    let meta_len = u64::from_le_bytes(l) as usize;
    if meta_len > r.len() {
        return Err(corrupt("metadata extends past end of file"));
    }
    let meta: Meta = serde_json::from_slice(&r[..meta_len])
        .map_err(|e| corrupt(format!("metadata JSON: {e}")))?;
    r = &r[meta_len..];

    let cfg = meta.config;
    cfg.validate()?;
    if meta.vocab.len() != cfg.vocab_size {
        return Err(corrupt("embedded vocabulary does not match config vocab_size"));
    }
    let d = cfg.d_model;
    let g = cfg.quant_group;
    let embed = read_mat(&mut r, cfg.vocab_size, d)?;
    let pos = read_mat(&mut r, cfg.max_len, d)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let wq = read_quant(&mut r, d, d, g)?;
        let wk = read_quant(&mut r, d, d, g)?;
        let wv = read_quant(&mut r, d, d, g)?;
        let wo = read_quant(&mut r, d, d, g)?;
        let w1 = read_quant(&mut r, cfg.d_ff, d, g)?;
        let w2 = read_quant(&mut r, d, cfg.d_ff, g)?;
        let qa = read_mat(&mut r, cfg.lora_rank, d)?;
        let qb = read_mat(&mut r, d, cfg.lora_rank)?;
        let va = read_mat(&mut r, cfg.lora_rank, d)?;
        let vb = read_mat(&mut r, d, cfg.lora_rank)?;
        layers.push(Layer {
            ln1: phishscope_core::model::LayerNorm::identity_of(d),
            wq,
            wk,
            wv,
            wo,
            lora_q: LoraAdapter { a: qa, b: qb },
            lora_v: LoraAdapter { a: va, b: vb },
            ln2: phishscope_core::model::LayerNorm::identity_of(d),
            w1,
            w2,
        });
    }
    let unembed = read_quant(&mut r, cfg.vocab_size, d, g)?;
    if !r.is_empty() {
        return Err(corrupt(format!("{} trailing bytes after the last block", r.len())));
    }
    Ok(Model {
        cfg,
        vocab: meta.vocab,
        embed,
        pos,
        layers,
        final_ln: phishscope_core::model::LayerNorm::identity_of(d),
        unembed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use phishscope_core::corpus::{Corpus, CorpusStyle, EmailRecord, Label};
    use phishscope_core::tokenizer::encode;

    fn toy() -> Model {
        let records = vec![EmailRecord {
            id: "a".into(),
            text: "free money now meeting notes tomorrow".into(),
            label: Label::Spam,
            source: "t".into(),
            split: None,
        }];
        let c = Corpus::new("t", CorpusStyle::External, records).unwrap();
        let vocab = Vocab::build(&[&c], 24).unwrap();
        let cfg = ModelConfig::tiny(vocab.len(), 77);
        Model::init(cfg, vocab).unwrap()
    }

    #[test]
    fn roundtrip_preserves_predictions_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.psck");
        let model = toy();
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        let seq = encode(&model.vocab, "free money now", 16);
        let a = model.forward(&seq, false).unwrap().label_logits;
        let b = loaded.forward(&seq, false).unwrap().label_logits;
        assert_eq!(a, b, "bit-identical logits after roundtrip");
        assert_eq!(model.base_digest(), loaded.base_digest());
    }

    #[test]
    fn truncated_file_is_rejected_without_partial_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.psck");
        let model = toy();
        save(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load(&path).unwrap_err();
        assert_eq!(err.code, "MODEL_CHECKPOINT_CORRUPT");
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.psck");
        let model = toy();
        save(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9; // bump version field
        fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert_eq!(err.code, "MODEL_CHECKPOINT_VERSION");
        assert!(err.message.contains('9') && err.message.contains('1'));
    }

    #[test]
    fn checkpoint_carries_the_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.psck");
        let model = toy();
        save(&model, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.vocab, model.vocab);
    }

    #[test]
    fn nibble_packing_roundtrips_all_codes() {
        let codes: Vec<i8> = (-8..8).collect();
        assert_eq!(unpack_codes(&pack_codes(&codes), codes.len()), codes);
        let odd: Vec<i8> = vec![-8, 7, 3];
        assert_eq!(unpack_codes(&pack_codes(&odd), odd.len()), odd);
    }
}
