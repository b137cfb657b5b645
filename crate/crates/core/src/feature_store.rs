//! Feature matrix files and dataset manifests.
//!
//! A feature file is a fixed little-endian layout:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 8    | magic `CFLWFEAT`           |
//! | 8      | 4    | version (`u32`, currently 1) |
//! | 12     | 8    | row count N (`u64`)        |
//! | 20     | 4    | dimension D (`u32`)        |
//! | 24     | 4    | reserved, must be zero     |
//! | 28     | 4·N·D | `f32` payload, row-major  |
//!
//! Manifests are UTF-8 text, one `path<TAB>label<TAB>dataset<TAB>role` entry
//! per line. Blank lines and lines starting with `#` are ignored; relative
//! paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const FEATURE_MAGIC: [u8; 8] = *b"CFLWFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 28;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("not a feature file: {0}")]
    NotFeatureFile(PathBuf),
    #[error("corrupt feature file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unsupported feature file version {found} (this build reads {FEATURE_VERSION})")]
    Version { found: u32 },
    #[error("invalid feature matrix shape: {0}")]
    Shape(String),
    #[error("manifest line {line}: labels are binary (got {token:?})")]
    Label { line: usize, token: String },
    #[error("manifest line {line}: unknown role {token:?}")]
    Role { line: usize, token: String },
    #[error("manifest line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("manifest line {line}: missing feature file {path}")]
    MissingFile { line: usize, path: PathBuf },
    #[error("manifest line {line}: duplicate dataset {dataset:?} with label {label} in role {role}")]
    Duplicate {
        line: usize,
        dataset: String,
        label: Label,
        role: Role,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dense row-major `f32` matrix of raw embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::Shape("dimension must be positive".into()));
        }
        if rows.checked_mul(dim) != Some(data.len()) {
            return Err(StoreError::Shape(format!(
                "{rows}x{dim} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, StoreError> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(StoreError::Shape(format!(
                    "row {i} has {} values, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    fn check_finite(&self) -> Result<(), StoreError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(StoreError::NonFinite {
                row: i / self.dim,
                col: i % self.dim,
            }),
            None => Ok(()),
        }
    }

    /// Serialized bytes, header included.
    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        if self.rows == 0 {
            return Err(StoreError::Shape("at least one row is required".into()));
        }
        self.check_finite()?;
        let dim = u32::try_from(self.dim)
            .map_err(|_| StoreError::Shape("dimension exceeds u32".into()))?;
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, StoreError> {
        if bytes.len() < 8 || bytes[..8] != FEATURE_MAGIC {
            return Err(StoreError::NotFeatureFile(path.to_path_buf()));
        }
        let corrupt = |reason: String| StoreError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(corrupt(format!("header truncated at {} bytes", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FEATURE_VERSION {
            return Err(StoreError::Version { found: version });
        }
        let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let reserved = u32::from_le_bytes(bytes[24..28].try_into().unwrap());
        if reserved != 0 {
            return Err(corrupt("reserved header field is nonzero".into()));
        }
        if dim == 0 {
            return Err(corrupt("zero dimension".into()));
        }
        let payload = &bytes[FEATURE_HEADER_LEN..];
        let expected = usize::try_from(rows)
            .ok()
            .and_then(|r| r.checked_mul(dim))
            .and_then(|n| n.checked_mul(4));
        if expected != Some(payload.len()) {
            return Err(corrupt(format!(
                "header declares {rows}x{dim} but payload has {} bytes",
                payload.len()
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Self {
            rows: rows as usize,
            dim,
            data,
        };
        m.check_finite().map_err(|e| corrupt(e.to_string()))?;
        Ok(m)
    }
}

/// Writes `features` to `path`. Non-finite entries are rejected before the
/// file is touched.
pub fn write_feature_file(features: &FeatureMatrix, path: &Path) -> Result<(), StoreError> {
    let bytes = features.to_bytes()?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    FeatureMatrix::from_bytes(&bytes, path)
}

/// Natural (0) or generated/proxy (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Natural,
    Generated,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Generated
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Natural => 0,
            Label::Generated => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        })
    }
}

impl FromStr for Role {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub dataset: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.role == role)
    }

    /// Dataset names in first-appearance order for the given role.
    pub fn datasets(&self, role: Role) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.with_role(role)
            .filter(|e| seen.insert(e.dataset.as_str()))
            .map(|e| e.dataset.as_str())
            .collect()
    }

    /// Renders the manifest in its text form. Paths are written as stored.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.path.display(),
                e.label,
                e.dataset,
                e.role
            ));
        }
        s
    }
}

/// Parses manifest text. `base` resolves relative paths; file existence is
/// checked after resolution.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest, StoreError> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 4 {
            return Err(StoreError::Malformed {
                line,
                reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let label = match fields[1].trim() {
            "0" => Label::Natural,
            "1" => Label::Generated,
            other => {
                return Err(StoreError::Label {
                    line,
                    token: other.to_string(),
                })
            }
        };
        let dataset = fields[2].trim().to_string();
        if dataset.is_empty() {
            return Err(StoreError::Malformed {
                line,
                reason: "dataset name is empty".into(),
            });
        }
        let role = fields[3]
            .trim()
            .parse::<Role>()
            .map_err(|_| StoreError::Role {
                line,
                token: fields[3].trim().to_string(),
            })?;
        let rel = PathBuf::from(fields[0].trim());
        if rel.as_os_str().is_empty() {
            return Err(StoreError::Malformed {
                line,
                reason: "path is empty".into(),
            });
        }
        let path = if rel.is_absolute() { rel } else { base.join(rel) };
        if !path.is_file() {
            return Err(StoreError::MissingFile { line, path });
        }
        if !seen.insert((dataset.clone(), label, role)) {
            return Err(StoreError::Duplicate {
                line,
                dataset,
                label,
                role,
            });
        }
        entries.push(ManifestEntry {
            path,
            label,
            dataset,
            role,
        });
    }
    Ok(DatasetManifest { entries })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// Reads and vertically stacks every file matching `filter`.
pub fn load_stacked<'a>(
    entries: impl IntoIterator<Item = &'a ManifestEntry>,
) -> Result<Option<FeatureMatrix>, StoreError> {
    let mut dim = None;
    let mut rows = 0;
    let mut data = Vec::new();
    for e in entries {
        let m = read_feature_file(&e.path)?;
        match dim {
            None => dim = Some(m.dim),
            Some(d) if d != m.dim => {
                return Err(StoreError::Shape(format!(
                    "{} has dimension {}, expected {d}",
                    e.path.display(),
                    m.dim
                )))
            }
            _ => {}
        }
        rows += m.rows;
        data.extend_from_slice(&m.data);
    }
    match dim {
        Some(d) => Ok(Some(FeatureMatrix::new(rows, d, data)?)),
        None => Ok(None),
    }
}
