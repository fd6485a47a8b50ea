//! Embedding dumps: `EMBD`, u32 version, u32 rows, u32 width, then
//! little-endian f32 values, plus a sidecar TSV mapping rows to
//! `(lang, sentence_id)`.

use std::fs;
use std::path::{Path, PathBuf};

use super::retrieval::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".tsv");
    PathBuf::from(s)
}

pub fn encode_embd(mats: &[EmbeddingMatrix]) -> Result<(Vec<u8>, String)> {
    let dim = mats.first().map_or(0, |m| m.dim);
    if let Some(m) = mats.iter().find(|m| m.dim != dim) {
        return Err(Error::Format(format!("`{}` has width {}, expected {dim}", m.lang, m.dim)));
    }
    let n: usize = mats.iter().map(|m| m.rows()).sum();
    let mut bytes = Vec::with_capacity(HEADER + 4 * n * dim);
    bytes.extend_from_slice(EMBD_MAGIC);
    for v in [EMBD_VERSION, n as u32, dim as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut tsv = String::from("row\tlang\tsentence_id\n");
    let mut row = 0;
    for m in mats {
        for x in &m.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        for id in &m.ids {
            tsv.push_str(&format!("{row}\t{}\t{id}\n", m.lang));
            row += 1;
        }
    }
    Ok((bytes, tsv))
}

fn u32_at(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated(off))
}

/// Parses a dump and its sidecar back into per-language matrices, in order of
/// first appearance.
pub fn decode_embd(bytes: &[u8], tsv: &str) -> Result<Vec<EmbeddingMatrix>> {
    if bytes.len() < 4 || &bytes[..4] != EMBD_MAGIC {
        return Err(Error::Format("bad magic, expected EMBD".into()));
    }
    let version = u32_at(bytes, 4)?;
    if version != EMBD_VERSION {
        return Err(Error::Format(format!("unsupported EMBD version {version}")));
    }
    let n = u32_at(bytes, 8)? as usize;
    let p = u32_at(bytes, 12)? as usize;
    let need = HEADER + 4 * n * p;
    if bytes.len() < need {
        return Err(Error::Truncated(bytes.len()));
    }
    if bytes.len() > need {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - need)));
    }
    let values: Vec<f32> = bytes[HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let mut lines = tsv.lines();
    if lines.next() != Some("row\tlang\tsentence_id") {
        return Err(Error::Format("sidecar header must be row, lang, sentence_id".into()));
    }
    let mut groups: Vec<(String, Vec<u64>, Vec<f32>)> = Vec::new();
    let mut count = 0;
    for (k, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Format(format!("sidecar line {}: `{line}`", k + 2));
        if f.len() != 3 {
            return Err(bad());
        }
        let row: usize = f[0].parse().map_err(|_| bad())?;
        let id: u64 = f[2].parse().map_err(|_| bad())?;
        if row != k || row >= n {
            return Err(bad());
        }
        let slice = &values[row * p..(row + 1) * p];
        match groups.iter_mut().find(|g| g.0 == f[1]) {
            Some(g) => {
                g.1.push(id);
                g.2.extend_from_slice(slice);
            }
            None => groups.push((f[1].to_string(), vec![id], slice.to_vec())),
        }
        count += 1;
    }
    if count != n {
        return Err(Error::Format(format!("sidecar lists {count} rows, dump has {n}")));
    }
    groups
        .into_iter()
        .map(|(lang, ids, data)| EmbeddingMatrix::new(lang, ids, p, data))
        .collect()
}

pub fn write_embd(path: &Path, mats: &[EmbeddingMatrix]) -> Result<()> {
    let (bytes, tsv) = encode_embd(mats)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    let side = sidecar_path(path);
    fs::write(&side, tsv).map_err(|e| Error::io(side.display().to_string(), e))
}

pub fn read_embd(path: &Path) -> Result<Vec<EmbeddingMatrix>> {
    let side = sidecar_path(path);
    for p in [path, side.as_path()] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.to_path_buf()));
        }
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let tsv = fs::read_to_string(&side).map_err(|e| Error::io(side.display().to_string(), e))?;
    decode_embd(&bytes, &tsv)
}
