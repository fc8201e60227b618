//! Named-array weight container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "RAGW" | version (1) | entry count
//! per entry: name length | UTF-8 name | ndim | dims... | f32 LE data, row-major
//! ```

use std::io::Write;
use std::path::Path;

use ragan_tensor::{ParamStore, Scalar, Tensor};

use crate::error::{RaganError, Result};

pub const MAGIC: &[u8; 4] = b"RAGW";
pub const VERSION: u32 = 1;

pub type NamedArrays = Vec<(String, Tensor<f32>)>;

pub fn encode(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| RaganError::Weights(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedArrays> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(RaganError::Weights("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(RaganError::Weights(format!(
            "unsupported version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| RaganError::Weights("entry name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape: Vec<usize> = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| RaganError::Weights("entry too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(RaganError::Weights(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| RaganError::io(dir, e))?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    res.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        RaganError::io(path, e)
    })
}

pub fn save(path: &Path, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    write_atomic(path, &encode(entries))
}

pub fn load(path: &Path) -> Result<NamedArrays> {
    let bytes = std::fs::read(path).map_err(|e| RaganError::io(path, e))?;
    decode(&bytes)
}

/// Parameters whose name starts with `prefix`, in store order, as f32.
pub fn export_params<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> NamedArrays {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| (p.name.clone(), p.value.cast()))
        .collect()
}

/// Overwrites store parameters from `entries`. Every entry must name an
/// existing parameter of identical shape; with `require_all`, every store
/// parameter under `prefix` must be covered.
pub fn import_params<T: Scalar>(
    store: &mut ParamStore<T>,
    entries: &[(String, Tensor<f32>)],
    prefix: &str,
    require_all: bool,
) -> Result<usize> {
    let mut covered = std::collections::HashSet::new();
    for (name, t) in entries {
        let id = store
            .id(name)
            .map_err(|_| RaganError::Weights(format!("unexpected entry `{name}`")))?;
        store.set(id, t.cast()).map_err(|_| {
            RaganError::Weights(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.shape(),
                store.value(id).shape()
            ))
        })?;
        covered.insert(id);
    }
    if require_all {
        if let Some((_, p)) = store
            .iter()
            .find(|(id, p)| p.name.starts_with(prefix) && !covered.contains(id))
        {
            return Err(RaganError::Weights(format!("missing entry `{}`", p.name)));
        }
    }
    Ok(covered.len())
}
