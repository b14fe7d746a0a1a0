//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "TDMCKPT\0" | format version u32 | config JSON (len u32 + UTF-8)
//!   | step u64 | optimizer update count u64 | 4 sections.
//! Each section: name (len u32 + UTF-8) | tensor count u32 | tensors.
//! Each tensor: name (len u32 + UTF-8) | rows u32 | cols u32 | f32 data.
//!
//! Sections are `params`, `ema`, `opt_m`, `opt_v`; a load restores every
//! tensor bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::training::AdamState;
use crate::transformer::{ModelParams, TransformerConfig};

const MAGIC: &[u8; 8] = b"TDMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything a resumed run needs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: TransformerConfig,
    /// Opaque run-level config snapshot (UTF-8 JSON) stored by the writer.
    pub run_config_json: String,
    pub step: u64,
    pub params: ModelParams<f32>,
    pub ema: ModelParams<f32>,
    pub opt: AdamState,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ConfigEnvelope {
    model: TransformerConfig,
    run: serde_json::Value,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Mat<f32>) -> Result<()> {
    write_str(w, name)?;
    write_u32(w, t.rows() as u32)?;
    write_u32(w, t.cols() as u32)?;
    for &v in t.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_section(w: &mut impl Write, name: &str, params: &ModelParams<f32>) -> Result<()> {
    write_str(w, name)?;
    let tensors = params.named_tensors();
    write_u32(w, tensors.len() as u32)?;
    for (tname, t) in tensors {
        write_tensor(w, &tname, t)?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 64 * 1024 * 1024 {
        return Err(Error::Format(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
}

fn read_section(r: &mut impl Read, expect_name: &str, into: &mut ModelParams<f32>) -> Result<()> {
    let name = read_str(r)?;
    if name != expect_name {
        return Err(Error::Format(format!(
            "expected section {expect_name}, found {name}"
        )));
    }
    let count = read_u32(r)? as usize;
    let mut tensors = into.named_tensors_mut();
    if count != tensors.len() {
        return Err(Error::Format(format!(
            "section {name} holds {count} tensors, model expects {}",
            tensors.len()
        )));
    }
    for (tname, t) in tensors.iter_mut() {
        let stored_name = read_str(r)?;
        if &stored_name != tname {
            return Err(Error::Format(format!(
                "tensor order mismatch: stored {stored_name}, expected {tname}"
            )));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        if (rows, cols) != t.shape() {
            return Err(Error::Format(format!(
                "tensor {tname}: stored shape {rows}x{cols} does not match configured {:?}",
                t.shape()
            )));
        }
        let mut b = [0u8; 4];
        for v in t.as_mut_slice() {
            read_exact(r, &mut b)?;
            *v = f32::from_le_bytes(b);
        }
    }
    Ok(())
}

/// Write params, EMA, optimizer state, the step counter, and a config
/// snapshot to `path`.
pub fn save_checkpoint(
    params: &ModelParams<f32>,
    ema: &ModelParams<f32>,
    opt: &AdamState,
    run_config: &serde_json::Value,
    step: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    let envelope = ConfigEnvelope {
        model: params.config.clone(),
        run: run_config.clone(),
    };
    let config_json = serde_json::to_string(&envelope)
        .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
    write_str(&mut w, &config_json)?;
    write_u64(&mut w, step)?;
    write_u64(&mut w, opt.updates)?;
    write_section(&mut w, "params", params)?;
    write_section(&mut w, "ema", ema)?;
    write_section(&mut w, "opt_m", &opt.m)?;
    write_section(&mut w, "opt_v", &opt.v)?;
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back; every tensor round-trips bit-exactly.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = File::open(path.as_ref())?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes; not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let config_json = read_str(&mut r)?;
    let envelope: ConfigEnvelope = serde_json::from_str(&config_json)
        .map_err(|e| Error::Format(format!("config snapshot unreadable: {e}")))?;
    let step = read_u64(&mut r)?;
    let updates = read_u64(&mut r)?;

    let zero = ModelParams::<f32>::init(&envelope.model, 0)?.zeros_like();
    let mut params = zero.clone();
    let mut ema = zero.clone();
    let mut m = zero.clone();
    let mut v = zero;
    read_section(&mut r, "params", &mut params)?;
    read_section(&mut r, "ema", &mut ema)?;
    read_section(&mut r, "opt_m", &mut m)?;
    read_section(&mut r, "opt_v", &mut v)?;

    // trailing garbage means the file is not what we wrote
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("unexpected trailing bytes".into()));
    }

    let run_config_json = serde_json::to_string(&envelope.run)
        .map_err(|e| Error::Format(format!("config snapshot unreadable: {e}")))?;
    Ok(Checkpoint {
        model_config: envelope.model,
        run_config_json,
        step,
        params,
        ema,
        opt: AdamState { m, v, updates },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoregression::Vocabulary;
    use std::io::Write as _;

    fn config() -> TransformerConfig {
        TransformerConfig {
            depth: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: Vocabulary::SIZE,
            max_seq_len: 32,
            latent_token_width: 12,
        }
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("tdm_ckpt_{name}_{}", std::process::id()))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = ModelParams::<f32>::init(&config(), 42).unwrap();
        let mut ema = params.clone();
        ema.token_embedding.set(0, 0, 0.123_456_7);
        let mut opt = AdamState::new(&params);
        opt.updates = 9;
        opt.m.ar_head.set(3, 3, -1.5e-8);
        let path = tmp("roundtrip");
        let run_cfg = serde_json::json!({"note": "test"});
        save_checkpoint(&params, &ema, &opt, &run_cfg, 77, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 77);
        assert_eq!(loaded.opt.updates, 9);
        assert_eq!(loaded.model_config, config());
        for ((_, a), (_, b)) in loaded
            .params
            .named_tensors()
            .iter()
            .zip(params.named_tensors())
        {
            assert_eq!(a.as_slice(), b.as_slice());
        }
        assert_eq!(loaded.ema.token_embedding.get(0, 0), 0.123_456_7);
        assert_eq!(loaded.opt.m.ar_head.get(3, 3), -1.5e-8);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let params = ModelParams::<f32>::init(&config(), 1).unwrap();
        let opt = AdamState::new(&params);
        let path = tmp("truncated");
        save_checkpoint(&params, &params, &opt, &serde_json::json!({}), 1, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn version_mismatch_is_refused() {
        let params = ModelParams::<f32>::init(&config(), 1).unwrap();
        let opt = AdamState::new(&params);
        let path = tmp("version");
        save_checkpoint(&params, &params, &opt, &serde_json::json!({}), 1, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // bump the version field
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&bytes).unwrap();
        drop(f);
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn non_checkpoint_file_is_refused() {
        let path = tmp("garbage");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        std::fs::remove_file(&path).ok();
    }
}
