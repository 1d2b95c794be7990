//! Caption text embedding, category prompt expansion and per-scene caption banks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::RegionLanguagePair;

pub const DEFAULT_TEMPLATES: [&str; 2] = ["a photo of a {}", "{}"];

/// Function words get a reduced share of the synthetic embedding so that
/// captions about the same object stay close to each other.
const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "photo", "in", "on", "with", "near", "next", "to", "and", "is", "this", "there",
];
const STOPWORD_WEIGHT: f64 = 0.25;

/// Lowercases, strips punctuation at both ends and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    let lower = text.to_lowercase();
    let trimmed = lower.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn unit(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-9) || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingProvider {
    /// Precomputed vectors keyed by normalized text.
    FileTable { dim: usize, table: HashMap<String, Vec<f64>> },
    /// Bag of seeded pseudo-random token vectors; captions sharing content
    /// words share direction.
    SyntheticHash { dim: usize, seed: u64 },
}

impl EmbeddingProvider {
    pub fn synthetic(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config("embedding dim must be >= 2"));
        }
        Ok(EmbeddingProvider::SyntheticHash { dim, seed })
    }

    /// Builds a table provider; rows are re-normalized and keys normalized
    /// (first occurrence wins on key collisions).
    pub fn from_table(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config("embedding dim must be >= 2"));
        }
        let mut table = HashMap::new();
        for (text, v) in entries {
            if v.len() != dim {
                return Err(Error::invalid(format!("embedding for `{text}` has dim {} != {dim}", v.len())));
            }
            let v = unit(v).ok_or_else(|| Error::invalid(format!("zero embedding for `{text}`")))?;
            table.entry(normalize_text(&text)).or_insert(v);
        }
        Ok(EmbeddingProvider::FileTable { dim, table })
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::FileTable { dim, .. } | EmbeddingProvider::SyntheticHash { dim, .. } => *dim,
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let key = normalize_text(text);
        if key.is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        match self {
            EmbeddingProvider::FileTable { table, .. } => table
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("no embedding for `{key}`"))),
            EmbeddingProvider::SyntheticHash { dim, seed } => {
                let mut acc = vec![0.0; *dim];
                for tok in key.split(' ') {
                    let tok = tok.trim_matches(|c: char| c.is_ascii_punctuation());
                    if tok.is_empty() {
                        continue;
                    }
                    let w = if STOPWORDS.contains(&tok) { STOPWORD_WEIGHT } else { 1.0 };
                    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ fnv1a(tok.as_bytes())));
                    for a in acc.iter_mut() {
                        let g: f64 = rng.sample(StandardNormal);
                        *a += w * g;
                    }
                }
                unit(acc).ok_or_else(|| Error::invalid(format!("text `{key}` has no embeddable tokens")))
            }
        }
    }

    pub fn embed_category(&self, spec: &CategorySpec) -> Result<Vec<f64>> {
        spec.validate()?;
        let mut acc = vec![0.0; self.dim()];
        for prompt in spec.prompts() {
            for (a, x) in acc.iter_mut().zip(self.embed_text(&prompt)?) {
                *a += x;
            }
        }
        unit(acc).ok_or_else(|| Error::DegenerateMean(spec.name.clone()))
    }

    /// Unit rows, one per category, in input order.
    pub fn embed_categories(&self, specs: &[CategorySpec]) -> Result<Array2<f64>> {
        let mut m = Array2::zeros((specs.len(), self.dim()));
        for (i, s) in specs.iter().enumerate() {
            let v = self.embed_category(s)?;
            m.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub templates: Vec<String>,
}

impl CategorySpec {
    /// Name as sole synonym, default templates.
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            synonyms: vec![name.to_string()],
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Fills omitted synonyms with the name and omitted templates with the defaults.
    pub fn with_defaults(mut self) -> Self {
        if self.synonyms.is_empty() {
            self.synonyms.push(self.name.clone());
        }
        if self.templates.is_empty() {
            self.templates = DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.synonyms.is_empty() {
            return Err(Error::invalid(format!("category `{}` has no synonyms", self.name)));
        }
        if self.templates.is_empty() {
            return Err(Error::invalid(format!("category `{}` has no templates", self.name)));
        }
        if let Some(t) = self.templates.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(Error::invalid(format!("template `{t}` must contain exactly one {{}} slot")));
        }
        Ok(())
    }

    /// Every template filled with every synonym.
    pub fn prompts(&self) -> impl Iterator<Item = String> + '_ {
        self.templates
            .iter()
            .flat_map(move |t| self.synonyms.iter().map(move |s| t.replacen("{}", s, 1)))
    }
}

pub fn read_category_specs(path: &Path) -> Result<Vec<CategorySpec>> {
    let specs: Vec<CategorySpec> = serde_json::from_str(&fs::read_to_string(path)?)?;
    let specs: Vec<_> = specs.into_iter().map(CategorySpec::with_defaults).collect();
    specs.iter().try_for_each(CategorySpec::validate)?;
    Ok(specs)
}

/// Deduplicated caption embeddings of one scene plus each pair's column.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionBank {
    pub texts: Vec<String>,
    pub embeddings: Array2<f64>,
    pub target_index: Vec<usize>,
}

impl CaptionBank {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

pub fn build_caption_bank(pairs: &[RegionLanguagePair], provider: &EmbeddingProvider) -> Result<CaptionBank> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::invalid("caption bank needs at least one pair"))?;
    let mut texts: Vec<String> = Vec::new();
    let mut column: HashMap<String, usize> = HashMap::new();
    let mut target_index = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.scene_id != first.scene_id {
            return Err(Error::invalid(format!(
                "caption bank mixes scenes `{}` and `{}`",
                first.scene_id, p.scene_id
            )));
        }
        let key = normalize_text(&p.caption);
        let next = texts.len();
        let col = *column.entry(key.clone()).or_insert_with(|| {
            texts.push(key);
            next
        });
        target_index.push(col);
    }
    let mut embeddings = Array2::zeros((texts.len(), provider.dim()));
    for (i, t) in texts.iter().enumerate() {
        let v = provider.embed_text(t)?;
        embeddings.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
    }
    Ok(CaptionBank {
        texts,
        embeddings,
        target_index,
    })
}

pub const TABLE_MAGIC: &[u8; 4] = b"PLCE";

/// Embedding table layout: `"PLCE"`, dim u32, count u32, then per entry
/// u16 byte length, UTF-8 text, f32 x dim (all little-endian).
pub fn encode_embedding_table(dim: usize, entries: &[(String, Vec<f64>)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TABLE_MAGIC);
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (text, v) in entries {
        let bytes = text.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::invalid(format!("text too long: `{text}`")))?;
        if v.len() != dim {
            return Err(Error::invalid(format!("entry `{text}` has dim {}", v.len())));
        }
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        for x in v {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

/// Text and vector pairs of an embedding table.
pub type EmbeddingEntries = Vec<(String, Vec<f64>)>;

pub fn decode_embedding_table(buf: &[u8]) -> Result<(usize, EmbeddingEntries)> {
    let bad = |d: &str| Error::format("embedding table", d);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf.get(pos..pos + n).ok_or_else(|| bad("unexpected end of data"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != TABLE_MAGIC {
        return Err(bad("bad magic"));
    }
    let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let text = std::str::from_utf8(take(len)?)
            .map_err(|e| bad(&e.to_string()))?
            .to_string();
        let v = take(4 * dim)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push((text, v));
    }
    if pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((dim, entries))
}

pub fn write_embedding_table(path: &Path, dim: usize, entries: &[(String, Vec<f64>)]) -> Result<()> {
    fs::write(path, encode_embedding_table(dim, entries)?)?;
    Ok(())
}

pub fn read_embedding_table(path: &Path) -> Result<EmbeddingProvider> {
    let (dim, entries) = decode_embedding_table(&fs::read(path)?)?;
    EmbeddingProvider::from_table(dim, entries)
}
