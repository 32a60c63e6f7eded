//! On-disk feature bundle.
//!
//! Layout: `b"CIRB"`, `u32` LE version, `u64` LE header length, a UTF-8 JSON
//! header, then the `f64` LE payload. The payload holds, for each entry in
//! header order, its L, M and H maps; then for each query its L, M and H maps
//! followed by its token matrix. All tensors are row-major.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, Level, LevelDims, MultiLevelFeatures, TokenEmbeddings};
use crate::retrieval::{Database, DatabaseEntry, QueryRecord};

pub const BUNDLE_MAGIC: [u8; 4] = *b"CIRB";
pub const BUNDLE_VERSION: u32 = 1;

/// Free-form key/value notes on where a bundle came from.
pub type Provenance = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub level_dims: [LevelDims; 3],
    pub text_dim: usize,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
    pub entries: Vec<DatabaseEntry>,
    pub queries: Vec<QueryRecord>,
}

impl FeatureBundle {
    /// Check dims, id uniqueness and that every label is a declared class.
    pub fn validate(&self) -> Result<()> {
        if self.level_dims.iter().any(LevelDims::is_empty) || self.text_dim == 0 {
            return Err(Error::arg("bundle dims must be positive"));
        }
        let classes: HashSet<&str> = self.class_names.iter().map(String::as_str).collect();
        if classes.len() != self.class_names.len() {
            return Err(Error::config("duplicate class name"));
        }
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::config(format!("duplicate entry id {:?}", e.id)));
            }
            if !classes.contains(e.label.as_str()) {
                return Err(Error::config(format!("entry {:?} has undeclared label {:?}", e.id, e.label)));
            }
            if !e.features.conforms_to(&self.level_dims) {
                return Err(Error::dim(format!("entry {:?} does not match bundle dims", e.id)));
            }
        }
        let mut ids = HashSet::new();
        for q in &self.queries {
            if !ids.insert(q.id.as_str()) {
                return Err(Error::config(format!("duplicate query id {:?}", q.id)));
            }
            if !classes.contains(q.label.as_str()) {
                return Err(Error::config(format!("query {:?} has undeclared label {:?}", q.id, q.label)));
            }
            if !q.image_features.conforms_to(&self.level_dims) {
                return Err(Error::dim(format!("query {:?} does not match bundle dims", q.id)));
            }
            if q.text.dim() != self.text_dim {
                return Err(Error::dim(format!(
                    "query {:?} text width {} != {}",
                    q.id,
                    q.text.dim(),
                    self.text_dim
                )));
            }
        }
        Ok(())
    }

    pub fn database(&self) -> Result<Database> {
        Database::new(self.entries.clone())
    }

    pub fn query(&self, id: &str) -> Option<&QueryRecord> {
        self.queries.iter().find(|q| q.id == id)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    id: String,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct HeaderQuery {
    id: String,
    label: String,
    tokens: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    level_dims: [LevelDims; 3],
    text_dim: usize,
    class_names: Vec<String>,
    #[serde(default)]
    provenance: Provenance,
    entries: Vec<HeaderEntry>,
    queries: Vec<HeaderQuery>,
}

/// Write the container framing around an already-serialized header.
pub(crate) fn write_container(
    path: &Path,
    magic: [u8; 4],
    version: u32,
    header: &[u8],
    payload: &[f64],
) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + header.len() + payload.len() * 8);
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

/// Parsed framing of a container file.
pub(crate) struct Container<'a> {
    pub header: &'a [u8],
    pub payload: &'a [u8],
}

pub(crate) fn read_container<'a>(
    bytes: &'a [u8],
    magic: [u8; 4],
    supported: u32,
    what: &str,
) -> Result<Container<'a>> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(Error::Format(format!(
            "not a {what} file (expected magic {:?})",
            String::from_utf8_lossy(&magic)
        )));
    }
    if bytes.len() < 16 {
        return Err(Error::Corruption(format!("{what} file truncated inside its preamble")));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != supported {
        return Err(Error::Version {
            found: version,
            supported,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Corruption(format!("{what} header length {header_len} exceeds file size")))?;
    Ok(Container {
        header: &bytes[16..end],
        payload: &bytes[end..],
    })
}

/// Sequential reader over an `f64` LE payload.
pub(crate) struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Take `n` values or fail with a corruption error naming `owner`.
    pub fn take(&mut self, n: usize, owner: &str) -> Result<Vec<f64>> {
        let need = n
            .checked_mul(8)
            .ok_or_else(|| Error::Corruption(format!("{owner}: declared size overflows")))?;
        if self.bytes.len() - self.pos < need {
            return Err(Error::Corruption(format!(
                "payload truncated in {owner}: need {need} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.pos += need;
        Ok(out)
    }

    pub fn finish(&self) -> Result<()> {
        let left = self.bytes.len() - self.pos;
        if left != 0 {
            return Err(Error::Corruption(format!("{left} trailing bytes after payload")));
        }
        Ok(())
    }
}

fn push_features(payload: &mut Vec<f64>, f: &MultiLevelFeatures) {
    for m in f.maps() {
        payload.extend_from_slice(m.data());
    }
}

/// Serialize to the container format. Validates first; nothing is written
/// for an invalid bundle.
pub fn save_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let header = Header {
        level_dims: bundle.level_dims,
        text_dim: bundle.text_dim,
        class_names: bundle.class_names.clone(),
        provenance: bundle.provenance.clone(),
        entries: bundle
            .entries
            .iter()
            .map(|e| HeaderEntry {
                id: e.id.clone(),
                label: e.label.clone(),
            })
            .collect(),
        queries: bundle
            .queries
            .iter()
            .map(|q| HeaderQuery {
                id: q.id.clone(),
                label: q.label.clone(),
                tokens: q.text.tokens(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut payload = Vec::new();
    for e in &bundle.entries {
        push_features(&mut payload, &e.features);
    }
    for q in &bundle.queries {
        push_features(&mut payload, &q.image_features);
        payload.extend_from_slice(q.text.data());
    }
    write_container(path.as_ref(), BUNDLE_MAGIC, BUNDLE_VERSION, &header, &payload)
}

fn read_features(r: &mut PayloadReader, dims: &[LevelDims; 3], owner: &str) -> Result<MultiLevelFeatures> {
    let mut maps = Vec::with_capacity(3);
    for level in Level::ALL {
        let d = dims[level.index()];
        let data = r.take(d.len(), &format!("{owner} level {level}"))?;
        maps.push(FeatureMap::new(level, d, data)?);
    }
    MultiLevelFeatures::from_maps(maps.try_into().expect("three levels"))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let bytes = fs::read(path)?;
    decode_bundle(&bytes)
}

/// Parse and fully validate a bundle held in memory.
pub fn decode_bundle(bytes: &[u8]) -> Result<FeatureBundle> {
    let c = read_container(bytes, BUNDLE_MAGIC, BUNDLE_VERSION, "bundle")?;
    let header: Header = serde_json::from_slice(c.header)
        .map_err(|e| Error::Format(format!("bundle header: {e}")))?;
    if header.level_dims.iter().any(LevelDims::is_empty) || header.text_dim == 0 {
        return Err(Error::Format("bundle header declares an empty dimension".into()));
    }
    let mut r = PayloadReader::new(c.payload);
    let mut entries = Vec::with_capacity(header.entries.len());
    for e in header.entries {
        let owner = format!("entry {:?}", e.id);
        let features = read_features(&mut r, &header.level_dims, &owner)?;
        entries.push(DatabaseEntry {
            id: e.id,
            label: e.label,
            features,
        });
    }
    let mut queries = Vec::with_capacity(header.queries.len());
    for q in header.queries {
        let owner = format!("query {:?}", q.id);
        let image_features = read_features(&mut r, &header.level_dims, &owner)?;
        let n = q
            .tokens
            .checked_mul(header.text_dim)
            .ok_or_else(|| Error::Corruption(format!("{owner}: token count overflows")))?;
        let data = r.take(n, &format!("{owner} text"))?;
        let text = TokenEmbeddings::new(q.tokens, header.text_dim, data)
            .map_err(|e| Error::Corruption(format!("{owner}: {e}")))?;
        queries.push(QueryRecord {
            id: q.id,
            label: q.label,
            image_features,
            text,
        });
    }
    r.finish()?;
    let bundle = FeatureBundle {
        level_dims: header.level_dims,
        text_dim: header.text_dim,
        class_names: header.class_names,
        provenance: header.provenance,
        entries,
        queries,
    };
    bundle.validate().map_err(|e| Error::Corruption(e.to_string()))?;
    Ok(bundle)
}
