//! Parameter checkpoints: a text manifest plus a flat little-endian `f64` blob.
//!
//! ```text
//! collabqa-checkpoint 1
//! #kind=panelist
//! tensor	gnn.mlp.w	dtype=f64	shape=120x80
//! ```
//!
//! The blob holds the tensors' values concatenated in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{NumericsError, ParameterStore, Tensor};

const MAGIC: &str = "collabqa-checkpoint 1";

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "manifest")
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "bin")
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Renders the manifest text and the blob bytes for a store.
pub fn encode(header: &BTreeMap<String, String>, store: &ParameterStore) -> (String, Vec<u8>) {
    let mut manifest = String::from(MAGIC);
    manifest.push('\n');
    for (k, v) in header {
        manifest.push_str(&format!("#{k}={v}\n"));
    }
    let mut blob = Vec::with_capacity(store.total_values() * 8);
    for (name, t) in store.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("tensor\t{name}\tdtype=f64\tshape={}\n", shape.join("x")));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (manifest, blob)
}

pub fn decode(manifest: &str, blob: &[u8]) -> Result<(BTreeMap<String, String>, ParameterStore), NumericsError> {
    let bad = |line: usize, msg: &str| NumericsError::Checkpoint(format!("line {line}: {msg}"));
    let mut lines = manifest.lines().enumerate();
    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => return Err(bad(1, "missing checkpoint magic")),
    }
    let mut header = BTreeMap::new();
    let mut store = ParameterStore::new();
    let mut offset = 0usize;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(kv) = line.strip_prefix('#') {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(lineno, "header without `=`"))?;
            header.insert(k.to_string(), v.to_string());
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 || fields[0] != "tensor" {
            return Err(bad(lineno, "expected `tensor<TAB>name<TAB>dtype<TAB>shape`"));
        }
        if fields[2] != "dtype=f64" {
            return Err(bad(lineno, "only dtype=f64 is supported"));
        }
        let shape: Vec<usize> = fields[3]
            .strip_prefix("shape=")
            .ok_or_else(|| bad(lineno, "missing shape="))?
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(lineno, "unparseable shape"))?;
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        if end > blob.len() {
            return Err(bad(lineno, "blob shorter than manifest"));
        }
        let data = blob[offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        offset = end;
        let t = Tensor::new(shape, data).map_err(|e| bad(lineno, &e.to_string()))?;
        store.insert(fields[1], t)?;
    }
    if offset != blob.len() {
        return Err(NumericsError::Checkpoint(format!("blob has {} trailing bytes", blob.len() - offset)));
    }
    Ok((header, store))
}

pub fn save_checkpoint(
    prefix: &Path,
    header: &BTreeMap<String, String>,
    store: &ParameterStore,
) -> Result<(), NumericsError> {
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let (manifest, blob) = encode(header, store);
    fs::write(manifest_path(prefix), manifest)?;
    fs::write(blob_path(prefix), blob)?;
    Ok(())
}

pub fn load_checkpoint(prefix: &Path) -> Result<(BTreeMap<String, String>, ParameterStore), NumericsError> {
    let manifest = fs::read_to_string(manifest_path(prefix))?;
    let blob = fs::read(blob_path(prefix))?;
    decode(&manifest, &blob)
}
