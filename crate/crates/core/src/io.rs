//! On-disk formats: binary datasets with JSON sidecars, parameter files and
//! content hashes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neural::{Activation, MlpParams};
use crate::rng::Substream;
use crate::synthdata::{Dataset, DatasetKind};

const DATASET_MAGIC: &[u8; 4] = b"BDLD";
const PARAMS_MAGIC: &[u8; 4] = b"BDLP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub spec_id: String,
    pub seed: u64,
    pub stream: u64,
    pub view_id: Option<String>,
    pub dim: usize,
    pub len: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn kind_code(kind: &DatasetKind) -> u16 {
    match kind {
        DatasetKind::Full => 0,
        DatasetKind::View { .. } => 1,
    }
}

/// Header `magic | version u16 | kind u16 | m u32 | N u32`, then the samples
/// as little-endian `f64`.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let m = u32::try_from(ds.dim).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
    let n = u32::try_from(ds.len()).map_err(|_| Error::Format("sample count exceeds u32".into()))?;
    let mut out = Vec::with_capacity(16 + 8 * ds.flat().len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&kind_code(&ds.kind).to_le_bytes());
    out.extend_from_slice(&m.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    for v in ds.flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn le_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_dataset(ds)?)?;
    let sidecar = DatasetSidecar {
        spec_id: ds.spec_id.clone(),
        seed: ds.provenance.seed,
        stream: ds.provenance.stream,
        view_id: match &ds.kind {
            DatasetKind::View { view_id } => Some(view_id.clone()),
            DatasetKind::Full => None,
        },
        dim: ds.dim,
        len: ds.len(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != DATASET_MAGIC {
        return Err(Error::Format(format!("{} is not a dataset file", path.display())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let kind = u16::from_le_bytes([bytes[6], bytes[7]]);
    let m = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let n = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 16 + 8 * m * n {
        return Err(Error::Format(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            8 * m * n,
            bytes.len() - 16
        )));
    }
    let sidecar: DatasetSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let kind = match (kind, sidecar.view_id) {
        (0, None) => DatasetKind::Full,
        (1, Some(view_id)) => DatasetKind::View { view_id },
        (k, v) => {
            return Err(Error::Format(format!("dataset kind {k} disagrees with sidecar view id {v:?}")));
        }
    };
    Dataset::from_flat(
        sidecar.spec_id,
        kind,
        m,
        le_f64s(&bytes[16..]),
        Substream::new(sidecar.seed, sidecar.stream),
    )
}

/// JSON header of a parameter file. `extra` carries preconditioner
/// constants, adapters and training provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamHeader {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// `magic | header length u32 | JSON header | little-endian f64 weights`.
pub fn encode_params(params: &MlpParams, extra: serde_json::Value) -> Result<Vec<u8>> {
    let header = ParamHeader {
        sizes: params.sizes.clone(),
        activation: params.activation,
        seed: params.seed,
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let flat = params.to_flat();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * flat.len());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<(MlpParams, ParamHeader)> {
    if bytes.len() < 8 || &bytes[0..4] != PARAMS_MAGIC {
        return Err(Error::Format("not a parameter file".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Format("truncated parameter header".into()))?;
    let header: ParamHeader = serde_json::from_slice(json)?;
    let mut params = MlpParams::zeros(&header.sizes, header.activation)?;
    params.seed = header.seed;
    let payload = &bytes[8 + len..];
    if payload.len() != 8 * params.num_params() {
        return Err(Error::Format(format!(
            "expected {} weights, found {} bytes",
            params.num_params(),
            payload.len()
        )));
    }
    params.set_flat(&le_f64s(payload))?;
    Ok((params, header))
}

pub fn write_params(path: &Path, params: &MlpParams, extra: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_params(params, extra)?)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<(MlpParams, ParamHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_params(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Hash of the bit patterns of a parameter set.
pub fn params_hash(params: &MlpParams) -> String {
    let mut h = Sha256::new();
    for v in params.to_flat() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}
