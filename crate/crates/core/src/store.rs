//! On-disk dataset format.
//!
//! A dataset directory holds two files:
//!
//! * `index.sspg.txt`: JSON metadata (dims, labeled flag, phrase tags and
//!   embeddings as decimal text). Floats are written in shortest round-trip
//!   form, so they reload bit-exactly.
//! * `blobs.sspg.bin`: little-endian pixel payload. Header is the magic
//!   `SSPG`, a `u16` version and a `u32` sample count; each sample is then
//!   `u32` height, width, channels, mask count, the image as `f64` in H×W×C
//!   order, and one byte (0/1) per mask pixel, mask by mask, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{Category, Image, MaskGrid, Phrase, Plurality, Sample, CHANNELS};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.sspg.txt";
pub const BLOB_FILE: &str = "blobs.sspg.bin";
pub const BLOB_MAGIC: &[u8; 4] = b"SSPG";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u16,
    samples: Vec<IndexSample>,
}

#[derive(Serialize, Deserialize)]
struct IndexSample {
    height: usize,
    width: usize,
    labeled: bool,
    phrases: Vec<IndexPhrase>,
}

#[derive(Serialize, Deserialize)]
struct IndexPhrase {
    id: u32,
    category: String,
    plurality: String,
    embedding: Vec<f64>,
}

/// Writes `samples` into directory `dir`, creating it if needed.
pub fn save_dataset(samples: &[Sample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let index = IndexFile {
        format: "sspg-index".into(),
        version: FORMAT_VERSION,
        samples: samples
            .iter()
            .map(|s| IndexSample {
                height: s.image.height(),
                width: s.image.width(),
                labeled: s.truth.is_some(),
                phrases: s
                    .phrases
                    .iter()
                    .map(|p| IndexPhrase {
                        id: p.id,
                        category: p.category.as_str().into(),
                        plurality: p.plurality.as_str().into(),
                        embedding: p.embedding.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    let index_path = dir.join(INDEX_FILE);
    fs::write(&index_path, text + "\n").map_err(|e| Error::io(&index_path, e))?;

    let mut blob = Vec::new();
    blob.extend_from_slice(BLOB_MAGIC);
    blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    blob.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        let masks = s.truth.as_deref().unwrap_or(&[]);
        for v in [s.image.height(), s.image.width(), CHANNELS, masks.len()] {
            blob.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in s.image.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        for m in masks {
            blob.extend(m.as_slice().iter().map(|&b| b as u8));
        }
    }
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "unexpected end of file, wanted {n} more bytes"
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn json_offset(text: &str, err: &serde_json::Error) -> u64 {
    let line = err.line().saturating_sub(1);
    let before: usize = text.split_inclusive('\n').take(line).map(str::len).sum();
    (before + err.column().saturating_sub(1)) as u64
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: IndexFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: index_path.clone(),
        offset: json_offset(&text, &e),
        message: e.to_string(),
    })?;
    let index_err = |message: String| Error::Format {
        path: index_path.clone(),
        offset: 0,
        message,
    };
    if index.format != "sspg-index" || index.version != FORMAT_VERSION {
        return Err(index_err(format!(
            "unsupported index {} v{}",
            index.format, index.version
        )));
    }

    let blob_path: PathBuf = dir.join(BLOB_FILE);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut r = Reader {
        path: &blob_path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != BLOB_MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(r.fail(format!("unsupported blob version {version}")));
    }
    let count = r.u32()? as usize;
    if count != index.samples.len() {
        return Err(r.fail(format!(
            "blob holds {count} samples, index lists {}",
            index.samples.len()
        )));
    }

    let mut samples = Vec::with_capacity(count);
    for (i, meta) in index.samples.into_iter().enumerate() {
        let at = r.pos;
        let (h, w, c, n_masks) = (
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        let expected_masks = if meta.labeled { meta.phrases.len() } else { 0 };
        if (h, w, c, n_masks) != (meta.height, meta.width, CHANNELS, expected_masks) {
            r.pos = at;
            return Err(r.fail(format!("sample {i} header disagrees with index")));
        }
        let raw = r.take(h * w * c * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let image = Image::new(h, w, data)?;
        let mut masks = Vec::with_capacity(n_masks);
        for _ in 0..n_masks {
            let at = r.pos;
            let raw = r.take(h * w)?;
            if raw.iter().any(|&b| b > 1) {
                r.pos = at;
                return Err(r.fail("mask byte other than 0/1"));
            }
            masks.push(MaskGrid::from_values(h, w, raw.iter().map(|&b| b == 1).collect())?);
        }

        let mut phrases = Vec::with_capacity(meta.phrases.len());
        for p in meta.phrases {
            let category = Category::parse(&p.category)
                .ok_or_else(|| index_err(format!("unknown category {:?}", p.category)))?;
            let plurality = Plurality::parse(&p.plurality)
                .ok_or_else(|| index_err(format!("unknown plurality {:?}", p.plurality)))?;
            phrases.push(Phrase {
                id: p.id,
                embedding: p.embedding,
                category,
                plurality,
            });
        }
        samples.push(Sample {
            image,
            phrases,
            truth: meta.labeled.then_some(masks),
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last sample"));
    }
    Ok(samples)
}
