//! Embedding sets and token feature maps: validation, indexing and file I/O.
//!
//! Two interchange formats are supported for embedding sets:
//!
//! * JSONL, one record per line:
//!   `{"image_id": str, "instance_id": str, "category": str, "vector": [f32, ...]}`
//! * `EMB1` binary, little-endian:
//!   magic `b"EMB1"`, `u32` dimension, `u32` record count, then per record
//!   three length-prefixed (`u32`) UTF-8 strings (image_id, instance_id,
//!   category) followed by `dimension` raw `f32` values.
//!
//! Vectors are kept exactly as the encoder produced them (no normalization).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BIN_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Bin,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "bin" => Ok(Format::Bin),
            other => Err(Error::invalid(format!("unknown format {other:?}"))),
        }
    }
}

impl Format {
    /// Guess the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("emb") => Format::Bin,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub instance_id: String,
    pub category: String,
    pub vector: Vec<f32>,
}

/// A validated, immutable set of embeddings produced by one encoder view.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    encoder_name: String,
    dimension: usize,
    records: Vec<EmbeddingRecord>,
    instance_index: BTreeMap<String, Vec<String>>,
    positions: HashMap<String, usize>,
}

impl PartialEq for EmbeddingSet {
    fn eq(&self, other: &Self) -> bool {
        self.encoder_name == other.encoder_name
            && self.dimension == other.dimension
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.image_id == b.image_id
                    && a.instance_id == b.instance_id
                    && a.category == b.category
                    && a.vector.len() == b.vector.len()
                    && a.vector
                        .iter()
                        .zip(&b.vector)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl EmbeddingSet {
    pub fn new(encoder_name: impl Into<String>, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let encoder_name = encoder_name.into();
        let locations: Vec<String> = (1..=records.len()).map(|i| format!("record {i}")).collect();
        Self::build(encoder_name, records, &locations)
    }

    fn build(
        encoder_name: String,
        records: Vec<EmbeddingRecord>,
        locations: &[String],
    ) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::EmptySet(encoder_name.clone()))?;
        let dimension = first.vector.len();
        if dimension == 0 {
            return Err(Error::Malformed {
                location: locations[0].clone(),
                message: "vector must have at least one component".into(),
            });
        }
        let mut positions = HashMap::with_capacity(records.len());
        let mut instance_index: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.vector.len() != dimension {
                return Err(Error::DimensionMismatch {
                    location: locations[i].clone(),
                    expected: dimension,
                    found: rec.vector.len(),
                });
            }
            if rec.instance_id.is_empty() {
                return Err(Error::Malformed {
                    location: locations[i].clone(),
                    message: "instance_id must be non-empty".into(),
                });
            }
            if rec.image_id.is_empty() {
                return Err(Error::Malformed {
                    location: locations[i].clone(),
                    message: "image_id must be non-empty".into(),
                });
            }
            if positions.insert(rec.image_id.clone(), i).is_some() {
                return Err(Error::DuplicateImageId {
                    location: locations[i].clone(),
                    image_id: rec.image_id.clone(),
                });
            }
            instance_index
                .entry(rec.instance_id.clone())
                .or_default()
                .push(rec.image_id.clone());
        }
        Ok(EmbeddingSet {
            encoder_name,
            dimension,
            records,
            instance_index,
            positions,
        })
    }

    pub fn encoder_name(&self) -> &str {
        &self.encoder_name
    }

    pub fn with_encoder_name(mut self, name: impl Into<String>) -> Self {
        self.encoder_name = name.into();
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// instance_id → image_ids, in record order.
    pub fn instance_index(&self) -> &BTreeMap<String, Vec<String>> {
        &self.instance_index
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.positions.get(image_id).copied()
    }

    pub fn get(&self, image_id: &str) -> Option<&EmbeddingRecord> {
        self.position(image_id).map(|i| &self.records[i])
    }

    pub fn require(&self, image_id: &str) -> Result<&EmbeddingRecord> {
        self.get(image_id).ok_or_else(|| {
            Error::invalid(format!(
                "image {image_id:?} not present in set {:?}",
                self.encoder_name
            ))
        })
    }

    /// Instance → category, taken from the first image of each instance.
    pub fn instance_categories(&self) -> BTreeMap<String, String> {
        self.instance_index
            .iter()
            .map(|(inst, imgs)| {
                let cat = self.get(&imgs[0]).map(|r| r.category.clone());
                (inst.clone(), cat.unwrap_or_default())
            })
            .collect()
    }

    /// Sorted list of categories present in the set.
    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self.records.iter().map(|r| r.category.clone()).collect();
        cats.sort();
        cats.dedup();
        cats
    }

    /// Subset containing only images whose instance satisfies `keep`.
    pub fn filter_instances(&self, keep: impl Fn(&str) -> bool) -> Result<EmbeddingSet> {
        let records = self
            .records
            .iter()
            .filter(|r| keep(&r.instance_id))
            .cloned()
            .collect();
        EmbeddingSet::new(self.encoder_name.clone(), records)
    }
}

/// N×d general-encoder token features of one image, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFeatureMap {
    pub image_id: String,
    pub tokens: Vec<Vec<f32>>,
}

impl TokenFeatureMap {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }
}

pub fn load_embedding_set(path: &Path, format: Format) -> Result<EmbeddingSet> {
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("embeddings")
        .to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let (records, locations) = match format {
        Format::Jsonl => read_jsonl_records(&mut reader, path)?,
        Format::Bin => read_bin_records(&mut reader, path)?,
    };
    if records.is_empty() {
        return Err(Error::EmptySet(path.display().to_string()));
    }
    EmbeddingSet::build(name, records, &locations)
}

fn read_jsonl_records(
    reader: &mut impl BufRead,
    path: &Path,
) -> Result<(Vec<EmbeddingRecord>, Vec<String>)> {
    let mut records = Vec::new();
    let mut locations = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{}: line {}", path.display(), i + 1);
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            location: location.clone(),
            message: e.to_string(),
        })?;
        records.push(rec);
        locations.push(location);
    }
    Ok((records, locations))
}

struct ByteCursor<'a, R> {
    inner: &'a mut R,
    offset: u64,
    path: &'a Path,
}

impl<R: Read> ByteCursor<'_, R> {
    fn malformed(&self, message: impl Into<String>) -> Error {
        Error::Malformed {
            location: format!("{}: offset {}", self.path.display(), self.offset),
            message: message.into(),
        }
    }

    fn exact<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.malformed("unexpected end of file"))?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.exact::<4>()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.malformed("unexpected end of file in string"))?;
        let s = String::from_utf8(buf).map_err(|_| self.malformed("invalid UTF-8"))?;
        self.offset += len as u64;
        Ok(s)
    }
}

fn read_bin_records(
    reader: &mut impl Read,
    path: &Path,
) -> Result<(Vec<EmbeddingRecord>, Vec<String>)> {
    let mut cur = ByteCursor {
        inner: reader,
        offset: 0,
        path,
    };
    let magic = cur.exact::<4>()?;
    if &magic != BIN_MAGIC {
        return Err(Error::Malformed {
            location: format!("{}: offset 0", path.display()),
            message: "bad magic, expected EMB1".into(),
        });
    }
    let dim = cur.u32()? as usize;
    let count = cur.u32()? as usize;
    if count == 0 {
        return Err(Error::EmptySet(path.display().to_string()));
    }
    if dim == 0 {
        return Err(cur.malformed("dimension must be positive"));
    }
    let mut records = Vec::with_capacity(count);
    let mut locations = Vec::with_capacity(count);
    for _ in 0..count {
        locations.push(format!("{}: offset {}", path.display(), cur.offset));
        let image_id = cur.string()?;
        let instance_id = cur.string()?;
        let category = cur.string()?;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            vector.push(f32::from_le_bytes(cur.exact::<4>()?));
        }
        records.push(EmbeddingRecord {
            image_id,
            instance_id,
            category,
            vector,
        });
    }
    let mut trailing = [0u8; 1];
    if cur.inner.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(cur.malformed("trailing bytes after last record"));
    }
    Ok((records, locations))
}

pub fn save_embedding_set(set: &EmbeddingSet, path: &Path, format: Format) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptySet(set.encoder_name.clone()));
    }
    let mut buf = Vec::new();
    write_embedding_set(set, &mut buf, format)?;
    crate::io::write_atomic(path, &buf)
}

pub fn write_embedding_set(set: &EmbeddingSet, out: &mut impl Write, format: Format) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptySet(set.encoder_name.clone()));
    }
    let to_io = |e| Error::io("<buffer>", e);
    match format {
        Format::Jsonl => {
            for rec in &set.records {
                serde_json::to_writer(&mut *out, rec)?;
                out.write_all(b"\n").map_err(to_io)?;
            }
        }
        Format::Bin => {
            let mut w = BufWriter::new(out);
            w.write_all(BIN_MAGIC).map_err(to_io)?;
            w.write_all(&(set.dimension as u32).to_le_bytes())
                .map_err(to_io)?;
            w.write_all(&(set.records.len() as u32).to_le_bytes())
                .map_err(to_io)?;
            for rec in &set.records {
                for s in [&rec.image_id, &rec.instance_id, &rec.category] {
                    w.write_all(&(s.len() as u32).to_le_bytes()).map_err(to_io)?;
                    w.write_all(s.as_bytes()).map_err(to_io)?;
                }
                for v in &rec.vector {
                    w.write_all(&v.to_le_bytes()).map_err(to_io)?;
                }
            }
            w.flush().map_err(to_io)?;
        }
    }
    Ok(())
}

/// Validate a sequence of token maps: non-empty, constant N×d, all finite,
/// unique image ids.
pub fn validate_token_maps(maps: &[TokenFeatureMap]) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::EmptySet("token maps".into()))?;
    let (n, d) = (first.n_tokens(), first.dim());
    if n == 0 || d == 0 {
        return Err(Error::Malformed {
            location: format!("token map {:?}", first.image_id),
            message: "token map must have at least one token of positive dimension".into(),
        });
    }
    let mut seen = HashMap::new();
    for (i, m) in maps.iter().enumerate() {
        let location = format!("token map {} ({:?})", i + 1, m.image_id);
        if m.tokens.len() != n {
            return Err(Error::DimensionMismatch {
                location,
                expected: n,
                found: m.tokens.len(),
            });
        }
        for row in &m.tokens {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    location,
                    expected: d,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "token map".into(),
                    image_id: m.image_id.clone(),
                });
            }
        }
        if seen.insert(m.image_id.clone(), i).is_some() {
            return Err(Error::DuplicateImageId {
                location,
                image_id: m.image_id.clone(),
            });
        }
    }
    Ok(())
}

pub fn load_token_maps(path: &Path) -> Result<Vec<TokenFeatureMap>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut maps = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // NaN is not valid JSON; accept the common "NaN"/"Infinity" spellings so
        // the error names the offending image instead of a parse position.
        let map: TokenFeatureMap = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => {
                return Err(match lenient_token_map(&line) {
                    Some(image_id) => Error::NonFinite {
                        what: "token map".into(),
                        image_id,
                    },
                    None => Error::Malformed {
                        location: format!("{}: line {}", path.display(), i + 1),
                        message: e.to_string(),
                    },
                })
            }
        };
        maps.push(map);
    }
    validate_token_maps(&maps)?;
    Ok(maps)
}

fn lenient_token_map(line: &str) -> Option<String> {
    let has_nonfinite = ["NaN", "Infinity", "nan", "inf"]
        .iter()
        .any(|tok| line.contains(tok));
    if !has_nonfinite {
        return None;
    }
    let re = regex::Regex::new(r#""image_id"\s*:\s*"((?:[^"\\]|\\.)*)""#).ok()?;
    let raw = re.captures(line)?.get(1)?.as_str();
    serde_json::from_str::<String>(&format!("\"{raw}\"")).ok()
}

pub fn save_token_maps(maps: &[TokenFeatureMap], path: &Path) -> Result<()> {
    validate_token_maps(maps)?;
    let mut buf = Vec::new();
    for m in maps {
        serde_json::to_writer(&mut buf, m)?;
        buf.push(b'\n');
    }
    crate::io::write_atomic(path, &buf)
}
