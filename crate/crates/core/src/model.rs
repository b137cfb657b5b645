//! The deployable detector: optional reduction adapter, flow, and metadata,
//! persisted as a single checksummed binary file.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "CFLWMODL" | version u32
//! mode u8 | adapter_kind u8 | adapter_frozen u8 | has_threshold u8
//! in_dim u32 | dim u32 | blocks u32 | hidden u32
//! clamp f64 | seed u64 | threshold f64
//! permutations: blocks × dim u32
//! adapter weight (dim × in_dim f64), present iff adapter_kind == 1
//! per block: w1, b1, w2, b2 as f64
//! crc64 (ECMA-182) of every preceding byte
//! ```

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crc::{Crc, CRC_64_ECMA_182};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::adapter::{AdapterError, AdapterParams};
use crate::flow::{CouplingBlock, FlowError, FlowParams};

pub const MODEL_MAGIC: [u8; 8] = *b"CFLWMODL";
pub const MODEL_VERSION: u32 = 1;
const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a model file")]
    BadMagic,
    #[error("model file version {found} is not supported (this build reads version {MODEL_VERSION})")]
    Version { found: u32 },
    #[error("model checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Which likelihood terms the model was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainingMode {
    /// Naturals only, likelihood maximized.
    Natural,
    /// Proxies only, likelihood minimized.
    Proxy,
    /// Both terms.
    NaturalProxy,
}

impl TrainingMode {
    pub fn uses_natural(self) -> bool {
        matches!(self, TrainingMode::Natural | TrainingMode::NaturalProxy)
    }

    pub fn uses_proxy(self) -> bool {
        matches!(self, TrainingMode::Proxy | TrainingMode::NaturalProxy)
    }

    fn tag(self) -> u8 {
        match self {
            TrainingMode::Natural => 0,
            TrainingMode::Proxy => 1,
            TrainingMode::NaturalProxy => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(TrainingMode::Natural),
            1 => Some(TrainingMode::Proxy),
            2 => Some(TrainingMode::NaturalProxy),
            _ => None,
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::Natural => "N",
            TrainingMode::Proxy => "P",
            TrainingMode::NaturalProxy => "N+P",
        })
    }
}

impl FromStr for TrainingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "N" | "n" => Ok(TrainingMode::Natural),
            "P" | "p" => Ok(TrainingMode::Proxy),
            "N+P" | "n+p" | "NP" => Ok(TrainingMode::NaturalProxy),
            other => Err(format!("unknown training mode {other:?} (expected N, P or N+P)")),
        }
    }
}

/// How raw features reach the flow.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureAdapter {
    /// Linear reduction followed by unit-norm projection.
    Reduce(AdapterParams),
    /// Raw features are fed to the flow unchanged.
    Passthrough { dim: usize },
}

impl FeatureAdapter {
    pub fn in_dim(&self) -> usize {
        match self {
            FeatureAdapter::Reduce(p) => p.in_dim(),
            FeatureAdapter::Passthrough { dim } => *dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            FeatureAdapter::Reduce(p) => p.out_dim(),
            FeatureAdapter::Passthrough { dim } => *dim,
        }
    }

    pub fn params(&self) -> Option<&AdapterParams> {
        match self {
            FeatureAdapter::Reduce(p) => Some(p),
            FeatureAdapter::Passthrough { .. } => None,
        }
    }

    pub fn adapt_batch(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>, AdapterError> {
        match self {
            FeatureAdapter::Reduce(p) => Ok(p.adapt_batch(raw)?.z),
            FeatureAdapter::Passthrough { dim } => {
                if raw.ncols() != *dim {
                    return Err(AdapterError::InputDim {
                        expected: *dim,
                        got: raw.ncols(),
                    });
                }
                if raw.iter().any(|v| !v.is_finite()) {
                    return Err(AdapterError::NonFinite);
                }
                Ok(raw.to_owned())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub mode: TrainingMode,
    pub seed: u64,
    pub adapter_frozen: bool,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub adapter: FeatureAdapter,
    pub flow: FlowParams,
    pub meta: ModelMeta,
}

impl Model {
    pub fn new(adapter: FeatureAdapter, flow: FlowParams, meta: ModelMeta) -> Result<Self, ModelError> {
        if adapter.out_dim() != flow.dim {
            return Err(ModelError::Malformed(format!(
                "adapter output {} does not match flow dimension {}",
                adapter.out_dim(),
                flow.dim
            )));
        }
        flow.validate()?;
        Ok(Self { adapter, flow, meta })
    }

    pub fn in_dim(&self) -> usize {
        self.adapter.in_dim()
    }

    pub fn dim(&self) -> usize {
        self.flow.dim
    }

    /// Per-dimension negative log-likelihood without the `ln(2π)/2` constant:
    /// `(‖u‖² − 2·logdet) / (2C)`. Higher means more anomalous.
    pub fn score_batch(&self, raw: ArrayView2<f64>) -> Result<Array1<f64>, ModelError> {
        let z = self.adapter.adapt_batch(raw)?;
        let (u, logdet) = self.flow.forward_batch(z.view())?;
        let c = self.dim() as f64;
        Ok(u
            .axis_iter(Axis(0))
            .zip(logdet.iter())
            .map(|(row, ld)| (row.dot(&row) - 2.0 * ld) / (2.0 * c))
            .collect())
    }

    pub fn score(&self, raw: ArrayView1<f64>) -> Result<f64, ModelError> {
        Ok(self.score_batch(raw.insert_axis(Axis(0)))?[0])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(&MODEL_MAGIC);
        w.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let adapter_kind = match self.adapter {
            FeatureAdapter::Reduce(_) => 1u8,
            FeatureAdapter::Passthrough { .. } => 0u8,
        };
        w.extend_from_slice(&[
            self.meta.mode.tag(),
            adapter_kind,
            self.meta.adapter_frozen as u8,
            self.meta.threshold.is_some() as u8,
        ]);
        for v in [
            self.in_dim(),
            self.flow.dim,
            self.flow.blocks.len(),
            self.flow.hidden,
        ] {
            w.extend_from_slice(&(v as u32).to_le_bytes());
        }
        w.extend_from_slice(&self.flow.clamp.to_le_bytes());
        w.extend_from_slice(&self.meta.seed.to_le_bytes());
        w.extend_from_slice(&self.meta.threshold.unwrap_or(0.0).to_le_bytes());
        for b in &self.flow.blocks {
            for &p in &b.permutation {
                w.extend_from_slice(&(p as u32).to_le_bytes());
            }
        }
        let mut put = |vals: &[f64]| {
            for v in vals {
                w.extend_from_slice(&v.to_le_bytes());
            }
        };
        if let FeatureAdapter::Reduce(p) = &self.adapter {
            put(p.weight.as_slice().expect("standard layout"));
        }
        for b in &self.flow.blocks {
            put(b.w1.as_slice().expect("standard layout"));
            put(b.b1.as_slice().expect("standard layout"));
            put(b.w2.as_slice().expect("standard layout"));
            put(b.b2.as_slice().expect("standard layout"));
        }
        let sum = CHECKSUM.checksum(&w);
        w.extend_from_slice(&sum.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 12 || bytes[..8] != MODEL_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(ModelError::Version { found: version });
        }
        if bytes.len() < 20 {
            return Err(ModelError::Checksum);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if CHECKSUM.checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(ModelError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 12 };
        let mode = TrainingMode::from_tag(r.u8()?)
            .ok_or_else(|| ModelError::Malformed("unknown training mode tag".into()))?;
        let adapter_kind = r.u8()?;
        let adapter_frozen = r.u8()? != 0;
        let has_threshold = r.u8()? != 0;
        let in_dim = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let n_blocks = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let clamp = r.f64()?;
        let seed = r.u64()?;
        let threshold = r.f64()?;
        if dim == 0 || n_blocks == 0 || hidden == 0 || dim % 2 != 0 {
            return Err(ModelError::Malformed("invalid flow header".into()));
        }
        let mut perms = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let p = (0..dim)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()?;
            perms.push(p);
        }
        let adapter = match adapter_kind {
            1 => FeatureAdapter::Reduce(AdapterParams::from_weight(r.matrix(dim, in_dim)?)?),
            0 if in_dim == dim => FeatureAdapter::Passthrough { dim },
            _ => return Err(ModelError::Malformed("invalid adapter header".into())),
        };
        let half = dim / 2;
        let blocks = perms
            .into_iter()
            .map(|permutation| {
                Ok(CouplingBlock {
                    permutation,
                    w1: r.matrix(hidden, half)?,
                    b1: r.vector(hidden)?,
                    w2: r.matrix(dim, hidden)?,
                    b2: r.vector(dim)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        if r.pos != body.len() {
            return Err(ModelError::Malformed("trailing bytes after parameters".into()));
        }
        let flow = FlowParams {
            dim,
            hidden,
            clamp,
            blocks,
        };
        Model::new(
            adapter,
            flow,
            ModelMeta {
                mode,
                seed,
                adapter_frozen,
                threshold: has_threshold.then_some(threshold),
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Malformed("parameter payload too short".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            ModelError::Malformed("parameter count overflow".into())
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>, ModelError> {
        let v = self.values(rows * cols)?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("length checked"))
    }

    fn vector(&mut self, n: usize) -> Result<Array1<f64>, ModelError> {
        Ok(Array1::from(self.values(n)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_model() -> Model {
        let adapter = AdapterParams::init(24, 8, 1).unwrap();
        let mut flow = FlowParams::init(
            &FlowConfig {
                dim: 8,
                blocks: 3,
                hidden: 5,
                clamp: 1.9,
            },
            2,
        )
        .unwrap();
        flow.randomize_subnets(3, 0.4);
        Model::new(
            FeatureAdapter::Reduce(adapter),
            flow,
            ModelMeta {
                mode: TrainingMode::NaturalProxy,
                seed: 99,
                adapter_frozen: false,
                threshold: Some(0.25),
            },
        )
        .unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = sample_model();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw = Array2::from_shape_simple_fn((100, 24), || rng.gen_range(-1.0..1.0));
        let a = m.score_batch(raw.view()).unwrap();
        let b = back.score_batch(raw.view()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let bytes = sample_model().to_bytes();
        let err = Model::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, ModelError::Checksum), "{err}");
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Model::from_bytes(&flipped), Err(ModelError::Checksum)));
    }

    #[test]
    fn newer_version_is_explicit() {
        let mut bytes = sample_model().to_bytes();
        bytes[8..12].copy_from_slice(&(MODEL_VERSION + 1).to_le_bytes());
        let err = Model::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, ModelError::Version { found } if found == MODEL_VERSION + 1));
    }

    #[test]
    fn passthrough_round_trip() {
        let flow = FlowParams::init(&FlowConfig::new(2), 4).unwrap();
        let m = Model::new(
            FeatureAdapter::Passthrough { dim: 2 },
            flow,
            ModelMeta {
                mode: TrainingMode::Proxy,
                seed: 4,
                adapter_frozen: false,
                threshold: None,
            },
        )
        .unwrap();
        assert_eq!(Model::from_bytes(&m.to_bytes()).unwrap(), m);
    }
}
