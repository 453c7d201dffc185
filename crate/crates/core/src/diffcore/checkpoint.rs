//! Flat binary checkpoint.
//!
//! Layout: 8-byte magic `PSEGCKPT`, `u32` version, `u64` manifest byte length,
//! a UTF-8 manifest with one `name<TAB>d0,d1,..<TAB>offset` line per parameter
//! (offset counted in values), then every value as little-endian `f64`.

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"PSEGCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut manifest = String::new();
    let mut offset = 0usize;
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", p.name, dims.join(","), offset));
        offset += p.tensor.len();
    }
    let mut buf = Vec::with_capacity(20 + manifest.len() + offset * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(manifest.as_bytes());
    for (_, p) in store.iter() {
        for v in p.tensor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let bad = |d: &str| Error::format("checkpoint", d);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest = std::str::from_utf8(&bytes[20..body]).map_err(|_| bad("manifest is not UTF-8"))?;
    let data = &bytes[body..];
    if data.len() % 8 != 0 {
        return Err(bad("value section not a multiple of 8 bytes"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut out = Vec::new();
    for line in manifest.lines().filter(|l| !l.is_empty()) {
        let mut parts = line.split('\t');
        let (Some(name), Some(dims), Some(off), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad(&format!("bad manifest line {line:?}")));
        };
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(&format!("bad shape in {line:?}")))?
        };
        let off: usize = off.parse().map_err(|_| bad(&format!("bad offset in {line:?}")))?;
        let n: usize = shape.iter().product();
        let slice = values
            .get(off..off + n)
            .ok_or_else(|| bad(&format!("parameter {name} runs past end of data")))?;
        out.push(CheckpointEntry {
            name: name.to_string(),
            shape,
            values: slice.to_vec(),
        });
    }
    Ok(out)
}

/// Copies checkpoint values into `store`. Every parameter of the store must be
/// present with an identical shape; checkpoint entries without a matching
/// parameter are accepted only if `may_skip(name)` is true.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore, may_skip: impl Fn(&str) -> bool) -> Result<()> {
    let entries = read_checkpoint(path)?;
    let mut seen = vec![false; store.len()];
    for e in entries {
        match store.id(&e.name) {
            Some(id) => {
                let p = store.get_mut(id);
                if p.tensor.shape() != e.shape.as_slice() {
                    return Err(Error::CheckpointMismatch(format!(
                        "{}: checkpoint shape {:?}, model shape {:?}",
                        e.name,
                        e.shape,
                        p.tensor.shape()
                    )));
                }
                let mut t = Tensor::new(e.shape, e.values)?;
                if p.trainable {
                    t.ensure_grad();
                }
                p.tensor = t;
                seen[id.0] = true;
            }
            None if may_skip(&e.name) => {}
            None => {
                return Err(Error::CheckpointMismatch(format!("unexpected parameter {}", e.name)));
            }
        }
    }
    if let Some((id, _)) = seen.iter().enumerate().find(|(_, s)| !**s) {
        return Err(Error::CheckpointMismatch(format!(
            "missing parameter {}",
            store.get(super::ParamId(id)).name
        )));
    }
    Ok(())
}
