//! Line-delimited JSON corpus files and inline hex images.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::scene::{CHANNELS, IMAGE_SIZE};

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

/// Hex of the little-endian f32 bytes of an image.
pub fn image_to_hex(img: &Tensor<f32>) -> String {
    let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    hex::encode(bytes)
}

pub fn image_from_hex(s: &str) -> Result<Tensor<f32>> {
    let bytes = hex::decode(s).map_err(|e| Error::Format(format!("image hex: {e}")))?;
    let n = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "image has {} bytes, expected {}",
            bytes.len(),
            4 * n
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(vec![CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_scene, render_image, CaptionRecord};

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let recs = vec![CaptionRecord {
            scene_id: 9,
            lang: "en".into(),
            tokens: vec![3, 4],
            text: "a b".into(),
            image: None,
        }];
        write_jsonl(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "{\"scene_id\":9,\"lang\":\"en\",\"tokens\":[3,4],\"text\":\"a b\"}\n"
        );
        let back: Vec<CaptionRecord> = read_jsonl(&p).unwrap();
        assert_eq!(back, recs);
        assert!(matches!(
            read_jsonl::<CaptionRecord>(&dir.path().join("nope.jsonl")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn image_hex_round_trip() {
        let img: Tensor<f32> = render_image(&generate_scene(4));
        let back = image_from_hex(&image_to_hex(&img)).unwrap();
        assert_eq!(back, img);
        assert!(image_from_hex("00ff").is_err());
    }
}
