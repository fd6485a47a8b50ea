//! `XALN` tensor files: magic, u32 version, u32 tensor count, then per tensor
//! a u16 name length, the UTF-8 name, a u8 rank, u32 dims and little-endian
//! f32 values. Alignment checkpoints and pretrained text models share the
//! format; their metadata travels as a rank-1 tensor named [`META_TENSOR`]
//! holding the bytes of a JSON object, one byte per value.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{AlignmentCheckpoint, CheckpointMeta};
use crate::encoders::{EncoderConfig, ParamGroup, ParamStore, TextModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const XALN_MAGIC: &[u8; 4] = b"XALN";
pub const XALN_VERSION: u32 = 1;
pub const META_TENSOR: &str = "meta.json";
const HEADER: usize = 12;

/// One stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Bytes taken by one record: name length, name, rank, dims, payload.
pub fn record_size(name: &str, shape: &[usize]) -> usize {
    2 + name.len() + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn encode_xaln(records: &[Record]) -> Result<Vec<u8>> {
    let total = HEADER + records.iter().map(|r| record_size(&r.name, &r.shape)).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(XALN_MAGIC);
    out.extend_from_slice(&XALN_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name_len = u16::try_from(r.name.len())
            .map_err(|_| Error::Format(format!("tensor name `{}` too long", r.name)))?;
        let rank = u8::try_from(r.shape.len())
            .map_err(|_| Error::Format(format!("tensor `{}` has rank {}", r.name, r.shape.len())))?;
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(Error::Format(format!("tensor `{}` shape does not match its data", r.name)));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(rank);
        for &d in &r.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in &r.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.off..self.off.saturating_add(n))
            .ok_or(Error::Truncated(self.off))?;
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_xaln(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 4 || &bytes[..4] != XALN_MAGIC {
        return Err(Error::Format("bad magic, expected XALN".into()));
    }
    let mut r = Reader { bytes, off: 4 };
    let version = r.u32()?;
    if version != XALN_VERSION {
        return Err(Error::Format(format!("unsupported XALN version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format(format!("tensor name at byte {} is not UTF-8", r.off - name_len)))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Truncated(r.off))?;
        let payload = r.take(n.checked_mul(4).ok_or(Error::Truncated(r.off))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        out.push(Record { name, shape, data });
    }
    if r.off != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.off)));
    }
    Ok(out)
}

fn meta_record<M: Serialize>(meta: &M) -> Result<Record> {
    let json = serde_json::to_vec(meta)?;
    Ok(Record {
        name: META_TENSOR.into(),
        shape: vec![json.len()],
        data: json.iter().map(|&b| b as f32).collect(),
    })
}

fn read_meta<M: for<'de> Deserialize<'de>>(records: &[Record]) -> Result<M> {
    let r = records
        .iter()
        .find(|r| r.name == META_TENSOR)
        .ok_or_else(|| Error::Format(format!("no `{META_TENSOR}` tensor")))?;
    let bytes = r
        .data
        .iter()
        .map(|&v| (v.fract() == 0.0 && (0.0..256.0).contains(&v)).then_some(v as u8))
        .collect::<Option<Vec<u8>>>()
        .ok_or_else(|| Error::Format("metadata tensor holds non-byte values".into()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn store_records(store: &ParamStore<f32>) -> Vec<Record> {
    store
        .entries()
        .iter()
        .map(|e| Record {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            data: e.tensor.data().to_vec(),
        })
        .collect()
}

fn records_store(records: &[Record]) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for r in records.iter().filter(|r| r.name != META_TENSOR) {
        if store.find(&r.name).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{}`", r.name)));
        }
        // The group is irrelevant here: values are copied by name.
        store.add(r.name.clone(), ParamGroup::Aux, Tensor::new(r.shape.clone(), r.data.clone())?);
    }
    Ok(store)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn encode_checkpoint(ck: &AlignmentCheckpoint<f32>) -> Result<Vec<u8>> {
    let mut records = vec![meta_record(&ck.meta)?];
    records.extend(store_records(&ck.store));
    encode_xaln(&records)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AlignmentCheckpoint<f32>> {
    let records = decode_xaln(bytes)?;
    let meta: CheckpointMeta = read_meta(&records)?;
    AlignmentCheckpoint::from_store(meta, &records_store(&records)?)
}

pub fn save_checkpoint(ck: &AlignmentCheckpoint<f32>, path: &Path) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<AlignmentCheckpoint<f32>> {
    decode_checkpoint(&read_bytes(path)?)
}

/// Metadata of a pretrained text model file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainedMeta {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
}

pub fn encode_text_model(model: &TextModel<f32>) -> Result<Vec<u8>> {
    let meta = PretrainedMeta {
        encoder: model.encoder.config,
        vocab_size: model.encoder.vocab_size,
    };
    let mut records = vec![meta_record(&meta)?];
    records.extend(store_records(&model.store));
    encode_xaln(&records)
}

pub fn decode_text_model(bytes: &[u8]) -> Result<TextModel<f32>> {
    let records = decode_xaln(bytes)?;
    let meta: PretrainedMeta = read_meta(&records)?;
    let stored = records_store(&records)?;
    let mut model = TextModel::init(meta.encoder, meta.vocab_size, 0)?;
    if stored.len() != model.store.len() {
        return Err(Error::Format(format!(
            "model file has {} tensors, architecture needs {}",
            stored.len(),
            model.store.len()
        )));
    }
    model.store.copy_prefix_from(&stored, "")?;
    Ok(model)
}

pub fn save_text_model(model: &TextModel<f32>, path: &Path) -> Result<()> {
    write_bytes(path, &encode_text_model(model)?)
}

pub fn load_text_model(path: &Path) -> Result<TextModel<f32>> {
    decode_text_model(&read_bytes(path)?)
}
