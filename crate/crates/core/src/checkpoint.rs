//! Versioned binary model checkpoints.
//!
//! Layout: magic + format version, a key=value text block describing the
//! [`ModelConfig`], then each tensor as (name, rank, dims, raw little-endian
//! `f64` payload), and a trailing FNV-1a checksum of everything before it.
//! Values are stored in `f64` regardless of the model's scalar type: `f32`
//! round-trips losslessly through the widening, and `f64` is stored bit for
//! bit, so save followed by load is always exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{self, fnv1a64};
use crate::error::{Error, Result};
use crate::model::{Layer, ModelConfig, ModelParameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AMVCKPT\x01";
const VERSION: u32 = 1;

/// Serialize the config as stable `key=value` lines. Floats use Rust's
/// shortest round-trip formatting, so parsing them back is bit-exact.
fn config_to_kv(cfg: &ModelConfig) -> String {
    let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
    let mut out = String::new();
    out.push_str(&format!("n_items={}\n", cfg.n_items));
    out.push_str(&format!("enc_hidden={}\n", join(&cfg.enc_hidden)));
    out.push_str(&format!("latent={}\n", cfg.latent));
    match &cfg.dec_hidden {
        Some(d) => out.push_str(&format!("dec_hidden={}\n", join(d))),
        None => out.push_str("dec_hidden=mirror\n"),
    }
    out.push_str(&format!("adversarial={}\n", u8::from(cfg.adversarial)));
    out.push_str(&format!("adv_hidden={}\n", join(&cfg.adv_hidden)));
    out.push_str(&format!("n_classes={}\n", cfg.n_classes));
    out.push_str(&format!("beta={:?}\n", cfg.beta));
    out.push_str(&format!("lambda={:?}\n", cfg.lambda));
    out.push_str(&format!("input_dropout={:?}\n", cfg.input_dropout));
    out
}

fn config_from_kv(text: &str) -> Result<ModelConfig> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<String> {
        map.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("checkpoint config missing {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad {k} in checkpoint config")))
    };
    let parse_f64 = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad {k} in checkpoint config")))
    };
    let parse_dims = |s: &str, k: &str| -> Result<Vec<usize>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad {k} in checkpoint config"))))
            .collect()
    };
    let dec_raw = get("dec_hidden")?;
    Ok(ModelConfig {
        n_items: parse_usize("n_items")?,
        enc_hidden: parse_dims(&get("enc_hidden")?, "enc_hidden")?,
        latent: parse_usize("latent")?,
        dec_hidden: if dec_raw == "mirror" { None } else { Some(parse_dims(&dec_raw, "dec_hidden")?) },
        adversarial: get("adversarial")? == "1",
        adv_hidden: parse_dims(&get("adv_hidden")?, "adv_hidden")?,
        n_classes: parse_usize("n_classes")?,
        beta: parse_f64("beta")?,
        lambda: parse_f64("lambda")?,
        input_dropout: parse_f64("input_dropout")?,
    })
}

/// Write a checkpoint. Identical parameters always produce identical bytes.
pub fn save<S: Scalar>(params: &ModelParameters<S>, path: &Path) -> Result<()> {
    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    binio::write_u32(&mut body, VERSION).expect("vec write");
    let kv = config_to_kv(&params.config);
    binio::write_u32(&mut body, kv.len() as u32).expect("vec write");
    body.extend_from_slice(kv.as_bytes());
    let tensors = params.named_tensors();
    binio::write_u32(&mut body, tensors.len() as u32).expect("vec write");
    for (name, tensor) in tensors {
        binio::write_u32(&mut body, name.len() as u32).expect("vec write");
        body.extend_from_slice(name.as_bytes());
        binio::write_u32(&mut body, 2).expect("vec write"); // rank
        binio::write_u64(&mut body, tensor.rows() as u64).expect("vec write");
        binio::write_u64(&mut body, tensor.cols() as u64).expect("vec write");
        for &v in tensor.data() {
            binio::write_f64(&mut body, v.as_f64()).expect("vec write");
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&body).map_err(|e| Error::io(path, e))?;
    binio::write_u64(&mut w, fnv1a64(&body)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read and fully validate a checkpoint: checksum, magic, version, config
/// consistency and per-tensor names plus shapes (in the canonical order).
pub fn load<S: Scalar>(path: &Path) -> Result<ModelParameters<S>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut all = Vec::new();
    r.read_to_end(&mut all).map_err(|e| Error::io(path, e))?;
    if all.len() < 8 {
        return Err(Error::Checkpoint("checkpoint too short".into()));
    }
    let (body, tail) = all.split_at(all.len() - 8);
    if fnv1a64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::Checkpoint("checkpoint checksum mismatch".into()));
    }
    let mut r = body;
    if binio::read_bytes(&mut r, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = binio::read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let kv_len = binio::checked_len(binio::read_u32(&mut r, "config length")? as u64, 1 << 20, "config")?;
    let kv = String::from_utf8(binio::read_bytes(&mut r, kv_len, "config")?)
        .map_err(|_| Error::Checkpoint("checkpoint config is not UTF-8".into()))?;
    let config = config_from_kv(&kv)?;
    config.validate().map_err(|e| Error::Checkpoint(format!("checkpoint config invalid: {e}")))?;

    // Reconstruct the expected tensor sequence from the config; the file
    // must match it exactly (names, order and shapes).
    let reference = ModelParameters::<f64>::init(config.clone(), &crate::rng::SeedStream::new(0))?;
    let expected: Vec<(String, (usize, usize))> =
        reference.named_tensors().into_iter().map(|(n, t)| (n, t.shape())).collect();

    let count = binio::read_u32(&mut r, "tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, file has {count}", expected.len())));
    }
    let mut loaded: Vec<Tensor<S>> = Vec::with_capacity(count);
    for (name, (rows, cols)) in &expected {
        let name_len = binio::checked_len(binio::read_u32(&mut r, "name length")? as u64, 1 << 12, "name")?;
        let got_name = String::from_utf8(binio::read_bytes(&mut r, name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if got_name != *name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {got_name}")));
        }
        let rank = binio::read_u32(&mut r, "rank")?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}, expected 2")));
        }
        let got_rows = binio::read_u64(&mut r, "rows")? as usize;
        let got_cols = binio::read_u64(&mut r, "cols")? as usize;
        if (got_rows, got_cols) != (*rows, *cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {got_rows}x{got_cols}, config implies {rows}x{cols}"
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(S::of_f64(binio::read_f64(&mut r, "tensor payload")?));
        }
        loaded.push(Tensor::from_vec(*rows, *cols, data)?);
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }

    // Reassemble layers in role order (encoder, decoder, adversary).
    let mut iter = loaded.into_iter();
    let mut take_layers = |n: usize| -> Vec<Layer<S>> {
        (0..n)
            .map(|_| {
                let w = iter.next().expect("counted above");
                let b = iter.next().expect("counted above");
                Layer { w, b }
            })
            .collect()
    };
    let encoder = take_layers(reference.encoder.len());
    let decoder = take_layers(reference.decoder.len());
    let adversary = take_layers(reference.adversary.len());
    Ok(ModelParameters { config, encoder, decoder, adversary })
}
