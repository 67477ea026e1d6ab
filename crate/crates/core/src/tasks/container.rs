//! Binary container for one dataset split. The byte layout is documented in
//! `docs/FORMATS.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::{Dataset, Record, Split, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"CBNDSET\0";
pub const FORMAT_VERSION: u64 = 1;
const HEADER_WORDS: usize = 9;
const HEADER_BYTES: usize = MAGIC.len() + 8 * HEADER_WORDS;
const CHANNELS: u64 = 3;

#[derive(Serialize, Deserialize)]
struct Index {
    scenes: Vec<Scene>,
    records: Vec<Record>,
}

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let index = serde_json::to_vec(&Index { scenes: self.scenes.clone(), records: self.records.clone() })?;
        let s = self.image_size;
        let mut out = Vec::with_capacity(HEADER_BYTES + self.images.len() * 3 * s * s * 8 + index.len());
        out.extend_from_slice(&MAGIC);
        for word in [
            FORMAT_VERSION,
            self.seed,
            self.kind.code(),
            self.split.code(),
            self.images.len() as u64,
            self.records.len() as u64,
            CHANNELS,
            s as u64,
            index.len() as u64,
        ] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for img in &self.images {
            if img.shape() != [3, s, s] {
                return Err(Error::Validation(format!("image shape {:?} in a {s}-pixel dataset", img.shape())));
            }
            for v in img.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&index);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES || bytes[..8] != MAGIC {
            return Err(Error::Load("not a dataset container".into()));
        }
        let word = |i: usize| {
            let at = MAGIC.len() + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().expect("eight bytes"))
        };
        if word(0) != FORMAT_VERSION {
            return Err(Error::Version { found: word(0), expected: FORMAT_VERSION });
        }
        let seed = word(1);
        let kind = TaskKind::from_code(word(2)).ok_or_else(|| Error::Load(format!("unknown task code {}", word(2))))?;
        let split = Split::from_code(word(3)).ok_or_else(|| Error::Load(format!("unknown split code {}", word(3))))?;
        let (n_images, n_records, channels, s, index_len) =
            (word(4) as usize, word(5) as usize, word(6), word(7) as usize, word(8) as usize);
        if channels != CHANNELS {
            return Err(Error::Load(format!("expected {CHANNELS} channels, found {channels}")));
        }
        let per_image = 3 * s * s;
        let pixels_end = HEADER_BYTES + n_images * per_image * 8;
        if bytes.len() != pixels_end + index_len {
            return Err(Error::Load(format!(
                "container is {} bytes, header implies {}",
                bytes.len(),
                pixels_end + index_len
            )));
        }
        let mut images = Vec::with_capacity(n_images);
        for i in 0..n_images {
            let base = HEADER_BYTES + i * per_image * 8;
            let data: Vec<f64> = bytes[base..base + per_image * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            images.push(Tensor::new(&[3, s, s], data)?);
        }
        let index: Index = serde_json::from_slice(&bytes[pixels_end..])?;
        if index.scenes.len() != n_images || index.records.len() != n_records {
            return Err(Error::Load("index counts disagree with the header".into()));
        }
        if let Some(r) = index.records.iter().find(|r| r.scene >= n_images) {
            return Err(Error::Load(format!("record refers to missing scene {}", r.scene)));
        }
        Ok(Self { kind, split, seed, image_size: s, scenes: index.scenes, images, records: index.records })
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    Dataset::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_oracle_dataset, DataConfig};

    #[test]
    fn round_trip_and_rejects_damage() {
        let cfg = DataConfig { image_size: 16, scenes: 20, questions_per_scene: 2, max_objects: 3 };
        let splits = generate_oracle_dataset(&cfg, 9).unwrap();
        let bytes = splits.train.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, splits.train);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut skew = bytes.clone();
        skew[8] = 7;
        assert!(matches!(Dataset::from_bytes(&skew), Err(Error::Version { found: 7, .. })));
    }
}
