//! Versioned parameter checkpoints.
//!
//! Layout: a text manifest followed by one little-endian `f64` payload.
//!
//! ```text
//! MMSC-CKPT-1
//! config_hash <hex>
//! entries <count>
//! <name>\t<dims joined by 'x'>\t<byte offset into payload>
//! ...
//! payload <byte length>
//! <raw bytes>
//! ```

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "MMSC-CKPT-1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint was written for config {found}, expected {expected}")]
    Incompatible { expected: String, found: String },
}

pub struct Checkpoint {
    pub config_hash: String,
    pub params: ParamStore,
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore, config_hash: &str) -> Result<(), CheckpointError> {
    if config_hash.chars().any(char::is_whitespace) || config_hash.is_empty() {
        return Err(CheckpointError::Format("config hash must be a non-empty token".into()));
    }
    let mut manifest = format!("{MAGIC}\nconfig_hash {config_hash}\nentries {}\n", params.len());
    let mut payload = Vec::with_capacity(params.numel() * 8);
    for (name, value) in params.iter() {
        if name.contains(['\t', '\n']) {
            return Err(CheckpointError::Format(format!("invalid parameter name {name:?}")));
        }
        let dims: Vec<String> = value.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\t{}\n", dims.join("x"), payload.len()));
        for v in value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.push_str(&format!("payload {}\n", payload.len()));
    w.write_all(manifest.as_bytes())?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String, CheckpointError> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(CheckpointError::Format("unexpected end of manifest".into()));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn keyed(line: &str, key: &str) -> Result<String, CheckpointError> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .map(str::to_string)
        .ok_or_else(|| CheckpointError::Format(format!("expected `{key}` line, found {line:?}")))
}

fn parse_num(s: &str, what: &str) -> Result<usize, CheckpointError> {
    s.parse()
        .map_err(|_| CheckpointError::Format(format!("bad {what}: {s:?}")))
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let magic = read_line(&mut r)?;
    if magic != MAGIC {
        return Err(CheckpointError::Format(format!("bad magic {magic:?}")));
    }
    let config_hash = keyed(&read_line(&mut r)?, "config_hash")?;
    let count = parse_num(&keyed(&read_line(&mut r)?, "entries")?, "entry count")?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = read_line(&mut r)?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CheckpointError::Format(format!("bad manifest entry {line:?}")));
        }
        let shape = fields[1]
            .split('x')
            .map(|d| parse_num(d, "dimension"))
            .collect::<Result<Vec<_>, _>>()?;
        let offset = parse_num(fields[2], "offset")?;
        entries.push((fields[0].to_string(), shape, offset));
    }
    let payload_len = parse_num(&keyed(&read_line(&mut r)?, "payload")?, "payload length")?;
    let mut payload = vec![0u8; payload_len];
    r.read_exact(&mut payload)
        .map_err(|_| CheckpointError::Format(format!("payload shorter than {payload_len} bytes")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(CheckpointError::Format("trailing bytes after payload".into()));
    }

    let mut params = ParamStore::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        if end > payload.len() {
            return Err(CheckpointError::Format(format!(
                "entry {name} runs past the payload (offset {offset})"
            )));
        }
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
        params
            .insert(name, t)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
    }
    Ok(Checkpoint { config_hash, params })
}

/// Reads a checkpoint and rejects it unless it was written for `expected_hash`.
pub fn read_checkpoint_for<R: BufRead>(r: R, expected_hash: &str) -> Result<ParamStore, CheckpointError> {
    let ck = read_checkpoint(r)?;
    if ck.config_hash != expected_hash {
        return Err(CheckpointError::Incompatible {
            expected: expected_hash.to_string(),
            found: ck.config_hash,
        });
    }
    Ok(ck.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::vector(vec![0.1, -0.2, 1e-300]).unwrap()).unwrap();
        s.insert("a.w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut first = Vec::new();
        write_checkpoint(&mut first, &sample(), "abc123").unwrap();
        let ck = read_checkpoint(first.as_slice()).unwrap();
        assert_eq!(ck.config_hash, "abc123");
        assert_eq!(ck.params, sample());
        let mut second = Vec::new();
        write_checkpoint(&mut second, &ck.params, "abc123").unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample(), "h").unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_checkpoint(bytes.as_slice()), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample(), "h").unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_checkpoint(bytes.as_slice()), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn hash_mismatch_is_incompatible() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample(), "one").unwrap();
        assert!(matches!(
            read_checkpoint_for(bytes.as_slice(), "two"),
            Err(CheckpointError::Incompatible { .. })
        ));
        assert!(read_checkpoint_for(bytes.as_slice(), "one").is_ok());
    }
}
