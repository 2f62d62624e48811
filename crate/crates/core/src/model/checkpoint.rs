//! Checkpoint container.
//!
//! ```text
//! versegen-checkpoint <version>\n
//! <key> = <value>\n        (ModelConfig fields plus free-form metadata)
//! tensors = <count>\n
//! end\n
//! then per tensor: u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//! u32 rank, u64 dims, row-major little-endian payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "versegen-checkpoint";
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const RESERVED_KEYS: [&str; 1] = ["tensors"];

fn ck(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

/// Writes params plus extra `metadata` (written after the config keys).
pub fn write_checkpoint<W: Write>(
    w: &mut W,
    params: &ModelParams,
    metadata: &BTreeMap<String, String>,
) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ck(e.to_string());
    let config = params.config.to_kv();
    let mut header = format!("{MAGIC} {CHECKPOINT_VERSION}\n");
    for (k, v) in config.iter().chain(metadata.iter().filter(|(k, _)| !config.contains_key(*k))) {
        if RESERVED_KEYS.contains(&k.as_str()) || k.contains('\n') || v.contains('\n') || k.contains('=') {
            return Err(ck(format!("metadata entry {k:?} cannot be stored")));
        }
        header.push_str(&format!("{k} = {v}\n"));
    }
    let tensors = params.tensors();
    header.push_str(&format!("tensors = {}\nend\n", tensors.len()));
    w.write_all(header.as_bytes()).map_err(io)?;
    for (name, data, shape) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[DTYPE_F64]).map_err(io)?;
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
        for dim in &shape {
            w.write_all(&(*dim as u64).to_le_bytes()).map_err(io)?;
        }
        let mut payload = Vec::with_capacity(data.len() * 8);
        for x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&payload).map_err(io)?;
    }
    Ok(())
}

fn read_line<R: Read>(r: &mut R) -> Result<String, ModelError> {
    let mut bytes = Vec::new();
    let mut b = [0u8; 1];
    loop {
        r.read_exact(&mut b).map_err(|e| ck(format!("truncated header: {e}")))?;
        if b[0] == b'\n' {
            break;
        }
        bytes.push(b[0]);
        if bytes.len() > 1 << 16 {
            return Err(ck("header line too long"));
        }
    }
    String::from_utf8(bytes).map_err(|_| ck("header is not UTF-8"))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| ck(format!("truncated tensor record: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| ck(format!("truncated tensor record: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

/// Reads params and the full header key-value map. Shapes and names are
/// validated against the config in the header.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelParams, BTreeMap<String, String>), ModelError> {
    let first = read_line(r)?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| ck(format!("not a checkpoint (header {first:?})")))?;
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported checkpoint version {version}")));
    }
    let mut kv = BTreeMap::new();
    loop {
        let line = read_line(r)?;
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once(" = ").ok_or_else(|| ck(format!("bad header line {line:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let config = ModelConfig::from_kv(&kv)?;
    let count: usize = kv
        .get("tensors")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ck("missing tensor count"))?;
    let mut params = ModelParams::zeros(&config);
    let expected = params.shapes();
    if count != expected.len() {
        return Err(ck(format!("header lists {count} tensors, config implies {}", expected.len())));
    }
    for (ti, (exp_name, exp_shape)) in expected.iter().enumerate() {
        let name_len = read_u32(r)? as usize;
        if name_len > 1024 {
            return Err(ck("tensor name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| ck(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|_| ck("tensor name is not UTF-8"))?;
        if &name != exp_name {
            return Err(ck(format!("expected tensor {exp_name}, found {name}")));
        }
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype).map_err(|e| ck(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if &shape != exp_shape {
            return Err(ck(format!("tensor {name} has shape {shape:?}, config implies {exp_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let dst = &mut params.tensors_mut()[ti];
        match dtype[0] {
            DTYPE_F64 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf).map_err(|e| ck(format!("truncated payload for {name}: {e}")))?;
                for (x, chunk) in dst.iter_mut().zip(buf.chunks_exact(8)) {
                    *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                }
            }
            DTYPE_F32 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf).map_err(|e| ck(format!("truncated payload for {name}: {e}")))?;
                for (x, chunk) in dst.iter_mut().zip(buf.chunks_exact(4)) {
                    *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
                }
            }
            other => return Err(ck(format!("unknown dtype tag {other} for {name}"))),
        }
    }
    Ok((params, kv))
}

/// Writes to a temporary sibling and renames, so an interrupted save never
/// clobbers an existing checkpoint.
pub fn save_checkpoint(path: &Path, params: &ModelParams, metadata: &BTreeMap<String, String>) -> Result<(), ModelError> {
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("ckpt.tmp");
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, metadata)?;
    std::fs::write(&tmp, &buf).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, BTreeMap<String, String>), ModelError> {
    let f = std::fs::File::open(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    read_checkpoint(&mut std::io::BufReader::new(f))
}
