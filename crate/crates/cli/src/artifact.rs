//! Versioned JSON model artifacts.
//!
//! Every floating-point array is stored as little-endian `f64` bytes, either
//! base64-encoded inline or as a byte range of a sidecar `.bin` file next to
//! the JSON. Either way a loaded model reproduces the saved one bit for bit.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use regcopula::basis::{Basis, BasisSpec, Standardization};
use regcopula::margins::{Bounds, KdeMargin, Margin};
use regcopula::model::{Layout, PriorKind};
use regcopula::predict::FittedModel;
use regcopula::vi::VariationalParams;

use crate::config::{basis_kind, basis_name, BasisName};
use crate::csvio::write_atomic;
use crate::error::{CliError, CliResult};

pub const FORMAT_NAME: &str = "regcopula-model";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRef {
    /// `[len]` for vectors, `[rows, cols]` for column-major matrices.
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base64: Option<String>,
    /// Byte offset into the sidecar blob.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
}

impl ArrayRef {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    Inline,
    Sidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorRecord {
    MatrixLog,
    Factor { factors: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutRecord {
    pub responses: usize,
    pub columns: usize,
    pub prior: PriorRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisRecord {
    pub kind: BasisName,
    pub knots: usize,
    pub max_degree: u32,
    pub radial_exponent: i32,
    pub seed: u64,
    pub means: ArrayRef,
    pub sds: ArrayRef,
    pub knot_matrix: ArrayRef,
    pub monomials: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginRecord {
    Kernel { bounds: ArrayRef, grid: ArrayRef, density: ArrayRef, cdf: ArrayRef },
    Normal { params: ArrayRef },
    LogNormal { params: ArrayRef },
    Exponential { params: ArrayRef },
    LogInverseGamma { params: ArrayRef },
    Kumaraswamy { params: ArrayRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationalRecord {
    pub mu: ArrayRef,
    pub loadings: ArrayRef,
    pub delta: ArrayRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub library_version: String,
    /// Seconds since the Unix epoch; the only field that differs between identical runs.
    pub created_unix: u64,
}

impl Provenance {
    pub fn new(command: &str, config_sha256: String, seed: u64) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            command: command.to_string(),
            config_sha256,
            seed,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactFile {
    pub format: String,
    pub schema_version: u32,
    pub storage: Storage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar_sha256: Option<String>,
    pub response_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub layout: LayoutRecord,
    pub basis: BasisRecord,
    pub margins: Vec<MarginRecord>,
    pub variational: VariationalRecord,
    pub provenance: Provenance,
}

/// A fitted model with the column names it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub model: FittedModel,
    pub response_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub provenance: Provenance,
}

struct Encoder {
    blob: Option<Vec<u8>>,
}

impl Encoder {
    fn put(&mut self, shape: Vec<usize>, data: &[f64]) -> ArrayRef {
        let mut bytes = Vec::with_capacity(8 * data.len());
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        match self.blob.as_mut() {
            Some(blob) => {
                let offset = blob.len() as u64;
                blob.extend_from_slice(&bytes);
                ArrayRef { shape, base64: None, offset: Some(offset) }
            }
            None => ArrayRef { shape, base64: Some(STANDARD.encode(&bytes)), offset: None },
        }
    }

    fn vector(&mut self, v: &[f64]) -> ArrayRef {
        self.put(vec![v.len()], v)
    }

    fn matrix(&mut self, m: &DMatrix<f64>) -> ArrayRef {
        self.put(vec![m.nrows(), m.ncols()], m.as_slice())
    }
}

struct Decoder {
    blob: Option<Vec<u8>>,
}

impl Decoder {
    fn get(&self, a: &ArrayRef) -> CliResult<Vec<f64>> {
        let n = a.len();
        let owned;
        let bytes: &[u8] = match (&a.base64, a.offset, &self.blob) {
            (Some(text), None, _) => {
                owned = STANDARD.decode(text).map_err(|e| CliError::input(format!("artifact: bad base64: {e}")))?;
                &owned
            }
            (None, Some(off), Some(blob)) => {
                let start = usize::try_from(off).map_err(|_| CliError::input("artifact: offset overflow"))?;
                blob.get(start..start + 8 * n).ok_or_else(|| CliError::input("artifact: array outside sidecar"))?
            }
            (None, Some(_), None) => return Err(CliError::input("artifact: array refers to a missing sidecar")),
            _ => return Err(CliError::input("artifact: array needs exactly one of base64 or offset")),
        };
        if bytes.len() != 8 * n {
            return Err(CliError::input(format!("artifact: array holds {} bytes, shape needs {}", bytes.len(), 8 * n)));
        }
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
    }

    fn vector(&self, a: &ArrayRef) -> CliResult<Vec<f64>> {
        if a.shape.len() != 1 {
            return Err(CliError::input("artifact: expected a vector"));
        }
        self.get(a)
    }

    fn matrix(&self, a: &ArrayRef) -> CliResult<DMatrix<f64>> {
        if a.shape.len() != 2 {
            return Err(CliError::input("artifact: expected a matrix"));
        }
        Ok(DMatrix::from_vec(a.shape[0], a.shape[1], self.get(a)?))
    }

    fn params<const N: usize>(&self, a: &ArrayRef) -> CliResult<[f64; N]> {
        self.vector(a)?.try_into().map_err(|_| CliError::input(format!("artifact: margin needs {N} parameters")))
    }
}

fn encode_margin(enc: &mut Encoder, m: &Margin) -> MarginRecord {
    match m {
        Margin::Tabulated(k) => MarginRecord::Kernel {
            bounds: enc.vector(&[k.bounds.lower, k.bounds.upper]),
            grid: enc.vector(&k.grid),
            density: enc.vector(&k.density),
            cdf: enc.vector(&k.cdf),
        },
        Margin::Normal { mean, sd } => MarginRecord::Normal { params: enc.vector(&[*mean, *sd]) },
        Margin::LogNormal { meanlog, sdlog } => MarginRecord::LogNormal { params: enc.vector(&[*meanlog, *sdlog]) },
        Margin::Exponential { rate } => MarginRecord::Exponential { params: enc.vector(&[*rate]) },
        Margin::LogInverseGamma { shape, scale } => MarginRecord::LogInverseGamma { params: enc.vector(&[*shape, *scale]) },
        Margin::Kumaraswamy { a, b } => MarginRecord::Kumaraswamy { params: enc.vector(&[*a, *b]) },
    }
}

fn decode_margin(dec: &Decoder, r: &MarginRecord) -> CliResult<Margin> {
    Ok(match r {
        MarginRecord::Kernel { bounds, grid, density, cdf } => {
            let [lower, upper] = dec.params::<2>(bounds)?;
            let k = KdeMargin { bounds: Bounds::new(lower, upper)?, grid: dec.vector(grid)?, density: dec.vector(density)?, cdf: dec.vector(cdf)? };
            if k.grid.len() < 2 || k.density.len() != k.grid.len() || k.cdf.len() != k.grid.len() {
                return Err(CliError::input("artifact: kernel margin tables disagree in length"));
            }
            Margin::Tabulated(k)
        }
        MarginRecord::Normal { params } => {
            let [mean, sd] = dec.params(params)?;
            Margin::Normal { mean, sd }
        }
        MarginRecord::LogNormal { params } => {
            let [meanlog, sdlog] = dec.params(params)?;
            Margin::LogNormal { meanlog, sdlog }
        }
        MarginRecord::Exponential { params } => {
            let [rate] = dec.params(params)?;
            Margin::Exponential { rate }
        }
        MarginRecord::LogInverseGamma { params } => {
            let [shape, scale] = dec.params(params)?;
            Margin::LogInverseGamma { shape, scale }
        }
        MarginRecord::Kumaraswamy { params } => {
            let [a, b] = dec.params(params)?;
            Margin::Kumaraswamy { a, b }
        }
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sidecar_path(json: &Path) -> PathBuf {
    json.with_extension("bin")
}

impl ModelArtifact {
    /// Serialize; returns the JSON text and, for sidecar storage, the blob.
    pub fn encode(&self, storage: Storage, sidecar_name: Option<String>) -> (Vec<u8>, Option<Vec<u8>>) {
        let mut enc = Encoder { blob: (storage == Storage::Sidecar).then(Vec::new) };
        let m = &self.model;
        let b = &m.basis;
        let basis = BasisRecord {
            kind: basis_name(b.spec.kind),
            knots: b.spec.knots,
            max_degree: b.spec.max_degree,
            radial_exponent: b.spec.radial_exponent,
            seed: b.spec.seed,
            means: enc.vector(&b.standardization.means),
            sds: enc.vector(&b.standardization.sds),
            knot_matrix: enc.matrix(&b.knots),
            monomials: b.monomials.clone(),
        };
        let margins = m.margins.iter().map(|g| encode_margin(&mut enc, g)).collect();
        let variational = VariationalRecord {
            mu: enc.vector(&m.variational.mu),
            loadings: enc.matrix(&m.variational.loadings),
            delta: enc.vector(&m.variational.delta),
        };
        let prior = match m.layout.prior {
            PriorKind::MatrixLog => PriorRecord::MatrixLog,
            PriorKind::Factor { factors } => PriorRecord::Factor { factors },
        };
        let blob = enc.blob;
        let file = ArtifactFile {
            format: FORMAT_NAME.to_string(),
            schema_version: SCHEMA_VERSION,
            storage,
            sidecar: blob.as_ref().and(sidecar_name),
            sidecar_sha256: blob.as_deref().map(sha256_hex),
            response_names: self.response_names.clone(),
            covariate_names: self.covariate_names.clone(),
            layout: LayoutRecord { responses: m.layout.responses, columns: m.layout.columns, prior },
            basis,
            margins,
            variational,
            provenance: self.provenance.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&file).expect("artifact serializes");
        json.push(b'\n');
        (json, blob)
    }

    pub fn decode(json: &[u8], blob: Option<Vec<u8>>) -> CliResult<Self> {
        let file: ArtifactFile =
            serde_json::from_slice(json).map_err(|e| CliError::input(format!("artifact: {e}")))?;
        if file.format != FORMAT_NAME {
            return Err(CliError::input(format!("artifact: unknown format '{}'", file.format)));
        }
        if file.schema_version != SCHEMA_VERSION {
            return Err(CliError::input(format!("artifact: unsupported schema version {}", file.schema_version)));
        }
        if let (Some(b), Some(want)) = (&blob, &file.sidecar_sha256) {
            if &sha256_hex(b) != want {
                return Err(CliError::input("artifact: sidecar checksum mismatch"));
            }
        }
        let dec = Decoder { blob };
        let prior = match file.layout.prior {
            PriorRecord::MatrixLog => PriorKind::MatrixLog,
            PriorRecord::Factor { factors } => PriorKind::Factor { factors },
        };
        let layout = Layout::new(file.layout.responses, file.layout.columns, prior)?;
        let r = &file.basis;
        let basis = Basis {
            spec: BasisSpec {
                kind: basis_kind(r.kind),
                knots: r.knots,
                max_degree: r.max_degree,
                radial_exponent: r.radial_exponent,
                seed: r.seed,
            },
            standardization: Standardization { means: dec.vector(&r.means)?, sds: dec.vector(&r.sds)? },
            knots: dec.matrix(&r.knot_matrix)?,
            monomials: r.monomials.clone(),
        };
        if basis.standardization.sds.len() != basis.standardization.means.len() {
            return Err(CliError::input("artifact: standardization vectors disagree in length"));
        }
        let margins = file.margins.iter().map(|m| decode_margin(&dec, m)).collect::<CliResult<Vec<_>>>()?;
        let variational = VariationalParams {
            mu: dec.vector(&file.variational.mu)?,
            loadings: dec.matrix(&file.variational.loadings)?,
            delta: dec.vector(&file.variational.delta)?,
        };
        if variational.loadings.nrows() != variational.mu.len() || variational.delta.len() != variational.mu.len() {
            return Err(CliError::input("artifact: variational blocks disagree in dimension"));
        }
        if file.response_names.len() != layout.responses || file.covariate_names.len() != basis.dim() {
            return Err(CliError::input("artifact: column names do not match the model dimensions"));
        }
        Ok(Self {
            model: FittedModel::new(layout, basis, margins, variational)?,
            response_names: file.response_names,
            covariate_names: file.covariate_names,
            provenance: file.provenance,
        })
    }

    /// Atomically write the JSON file and, for sidecar storage, `<stem>.bin` beside it.
    pub fn save(&self, path: &Path, storage: Storage) -> CliResult<()> {
        let side = sidecar_path(path);
        let name = side.file_name().map(|n| n.to_string_lossy().into_owned());
        let (json, blob) = self.encode(storage, name);
        if let Some(blob) = blob {
            write_atomic(&side, &blob)?;
        }
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let json = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let head: serde_json::Value =
            serde_json::from_slice(&json).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let blob = match head.get("sidecar").and_then(|v| v.as_str()) {
            Some(name) => {
                let p = path.parent().unwrap_or(Path::new(".")).join(name);
                Some(std::fs::read(&p).map_err(|e| CliError::io(&p, e))?)
            }
            None => None,
        };
        Self::decode(&json, blob)
    }
}
