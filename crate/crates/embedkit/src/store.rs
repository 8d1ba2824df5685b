//! The "EMB1" on-disk container, the dataset manifest, and the sample
//! metadata table.
//!
//! Container layout, in order:
//!
//! 1. magic bytes `E M B 1`
//! 2. unsigned 32-bit little-endian header length
//! 3. UTF-8 JSON header
//! 4. little-endian f32 payload, row-major
//!
//! Embedding headers carry `kind:"emb1"` plus the required keys `n_rows`,
//! `n_cols`, `dtype` ("f32"), `order` ("row_major"), `model_id` and the
//! optional keys `season` and `row_ids`. The same container frames fitted SVD
//! factors (`svd1`), trained linear maps (`map1`) and conv weight tensors
//! (`cw4d`); those headers live next to their types.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::EmbeddingMatrix;

pub const MAGIC: &[u8; 4] = b"EMB1";

/// Serializes `header` (already JSON bytes) and `payload` into the container
/// framing. Used by every file kind in the toolkit.
pub(crate) fn write_container(path: &Path, header: &[u8], payload: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + header.len() + payload.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&u32::try_from(header.len()).map_err(|_| {
        Error::InvalidHeader("header exceeds u32 length".into())
    })?.to_le_bytes());
    buf.extend_from_slice(header);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads magic, header JSON, and the f32 payload. Rejects bad magic,
/// truncated framing, payloads that are not a whole number of f32s, and
/// non-finite values.
pub(crate) fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(Error::Truncated("file shorter than magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("file ends inside header length".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload_start = 8 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Truncated(format!(
            "header declares {header_len} bytes but file ends early"
        )));
    }
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| Error::InvalidHeader(e.to_string()))?;
    let payload_bytes = &bytes[payload_start..];
    if payload_bytes.len() % 4 != 0 {
        return Err(Error::Truncated(format!(
            "payload of {} bytes is not a whole number of f32s",
            payload_bytes.len()
        )));
    }
    let mut payload = Vec::with_capacity(payload_bytes.len() / 4);
    for (i, chunk) in payload_bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
        payload.push(v);
    }
    Ok((header, payload))
}

pub(crate) fn header_kind(header: &serde_json::Value) -> &str {
    header.get("kind").and_then(|k| k.as_str()).unwrap_or("emb1")
}

pub(crate) fn expect_kind(header: &serde_json::Value, kind: &str) -> Result<()> {
    let found = header_kind(header);
    if found != kind {
        return Err(Error::InvalidHeader(format!(
            "expected kind {kind:?}, found {found:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbHeader {
    #[serde(default = "default_kind")]
    kind: String,
    n_rows: usize,
    n_cols: usize,
    dtype: String,
    order: String,
    model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    season: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    row_ids: Option<Vec<String>>,
    /// Provenance-only; written by ensemble composition, ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layout: Option<serde_json::Value>,
}

fn default_kind() -> String {
    "emb1".into()
}

/// Writes an embedding matrix as an EMB1 file. Round-trips bit-exactly
/// through [`load_embeddings`].
pub fn save_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    save_embeddings_impl(m, path.as_ref(), None)
}

/// Like [`save_embeddings`] but embeds a `layout` value in the header for
/// provenance (used for composed ensemble outputs).
pub fn save_embeddings_with_layout(
    m: &EmbeddingMatrix,
    path: impl AsRef<Path>,
    layout: serde_json::Value,
) -> Result<()> {
    save_embeddings_impl(m, path.as_ref(), Some(layout))
}

fn save_embeddings_impl(
    m: &EmbeddingMatrix,
    path: &Path,
    layout: Option<serde_json::Value>,
) -> Result<()> {
    let header = EmbHeader {
        kind: default_kind(),
        n_rows: m.n_rows(),
        n_cols: m.n_cols(),
        dtype: "f32".into(),
        order: "row_major".into(),
        model_id: m.model_id().to_string(),
        season: m.season().map(str::to_string),
        row_ids: m.row_ids().map(|ids| ids.to_vec()),
        layout,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    write_container(path, &header_bytes, m.data())
}

/// Loads an EMB1 embedding file, validating magic, framing, declared shape,
/// dtype/order, finiteness, and row-id uniqueness.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let (header_value, payload) = read_container(path.as_ref())?;
    expect_kind(&header_value, "emb1")?;
    let header: EmbHeader =
        serde_json::from_value(header_value).map_err(|e| Error::InvalidHeader(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(Error::InvalidHeader(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.order != "row_major" {
        return Err(Error::InvalidHeader(format!(
            "unsupported order {:?}",
            header.order
        )));
    }
    let expected = header
        .n_rows
        .checked_mul(header.n_cols)
        .ok_or_else(|| Error::InvalidHeader("n_rows * n_cols overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let mut m = EmbeddingMatrix::new(header.model_id, header.n_rows, header.n_cols, payload)?;
    if let Some(season) = header.season {
        m = m.with_season(season);
    }
    if let Some(ids) = header.row_ids {
        m = m.with_row_ids(ids)?;
    }
    Ok(m)
}

/// One manifest row: where a model's (optionally season-tagged) embedding
/// file lives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub season: Option<String>,
    pub path: String,
}

impl ManifestEntry {
    /// Slot key used by layouts and plans: `model_id` alone, or
    /// `model_id_season` for season-tagged entries.
    pub fn slot_key(&self) -> String {
        match &self.season {
            Some(s) => format!("{}_{}", self.model_id, s),
            None => self.model_id.clone(),
        }
    }
}

/// Dataset manifest: the set of embedding files the pipeline consumes, plus
/// an optional metadata table. Entry paths are resolved relative to the
/// manifest file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata_path: Option<String>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            entries,
            metadata_path: None,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert((e.model_id.clone(), e.season.clone())) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate manifest entry for model {:?} season {:?}",
                    e.model_id, e.season
                )));
            }
        }
        Ok(())
    }

    pub fn entry_path(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn resolved_metadata_path(&self) -> Option<PathBuf> {
        self.metadata_path.as_ref().map(|p| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.base_dir.join(p)
            }
        })
    }
}

/// Per-sample geospatial metadata. Every value column may be empty; lat/lon
/// are range-checked when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub sample_id: String,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub forest_cover: Option<f64>,
    pub elevation: Option<f64>,
    pub nightlights: Option<f64>,
    pub population: Option<f64>,
}

pub const METADATA_HEADER: [&str; 7] = [
    "sample_id",
    "lat",
    "lon",
    "forest_cover",
    "elevation",
    "nightlights",
    "population",
];

/// Loads the metadata CSV (`sample_id,lat,lon,forest_cover,elevation,
/// nightlights,population`, empty cells allowed).
pub fn load_metadata_csv(path: impl AsRef<Path>) -> Result<Vec<SampleMetadata>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    {
        let headers = reader.headers()?;
        let found: Vec<&str> = headers.iter().collect();
        if found != METADATA_HEADER {
            return Err(Error::InvalidHeader(format!(
                "metadata CSV header {:?} does not match {:?}",
                found, METADATA_HEADER
            )));
        }
    }
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let row: SampleMetadata = record?;
        if let Some(lat) = row.lat {
            if !(-90.0..=90.0).contains(&lat) {
                return Err(Error::OutOfRange(format!(
                    "lat {lat} for sample {:?}",
                    row.sample_id
                )));
            }
        }
        if let Some(lon) = row.lon {
            if !(-180.0..=180.0).contains(&lon) {
                return Err(Error::OutOfRange(format!(
                    "lon {lon} for sample {:?}",
                    row.sample_id
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}
