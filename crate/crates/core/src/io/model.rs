//! Model files: `"PSM1"`, version u16, u32 header length, JSON header,
//! u64 parameter count, then the parameters as f64, all little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dcnn::{param_count, NetworkConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::training::TrainingConfig;

const MAGIC: &[u8; 4] = b"PSM1";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub config: NetworkConfig,
    pub param_count: usize,
    pub seed: u64,
    pub training: TrainingConfig,
    /// SHA-256 over the training configuration and the training data.
    pub training_fingerprint: String,
    /// SHA-256 of the little-endian parameter bytes.
    pub param_sha256: String,
}

#[derive(Debug, Clone)]
pub struct ModelFile {
    pub header: ModelHeader,
    pub params: NetworkParams,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn param_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl ModelFile {
    pub fn new(params: NetworkParams, training: TrainingConfig, training_fingerprint: String) -> Self {
        let header = ModelHeader {
            config: params.config().clone(),
            param_count: params.len(),
            seed: training.seed,
            training,
            training_fingerprint,
            param_sha256: hex(&Sha256::digest(param_bytes(params.values()))),
        };
        Self { header, params }
    }

    /// Fingerprint of a training run from its configuration and a digest
    /// of the data it saw.
    pub fn fingerprint(training: &TrainingConfig, data_digest: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(training).expect("config serialises"));
        h.update(data_digest);
        hex(&h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.header).expect("header serialises");
        let values = self.params.values();
        let mut out = Vec::with_capacity(18 + json.len() + 8 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        out.extend_from_slice(&param_bytes(values));
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err(bad("not a model file (magic PSM1 missing)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[10..];
        if rest.len() < hlen + 8 {
            return Err(bad("truncated header".into()));
        }
        let header: ModelHeader =
            serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?;
        let count = u64::from_le_bytes(rest[hlen..hlen + 8].try_into().expect("8 bytes")) as usize;
        let payload = &rest[hlen + 8..];
        if payload.len() != 8 * count {
            return Err(bad(format!("payload holds {} bytes for {count} parameters", payload.len())));
        }
        let expected = param_count(&header.config)?.total;
        if count != expected || header.param_count != expected {
            return Err(bad(format!(
                "configuration has {expected} parameters, file declares {} and stores {count}",
                header.param_count
            )));
        }
        if hex(&Sha256::digest(payload)) != header.param_sha256 {
            return Err(bad("parameter checksum mismatch".into()));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let params = NetworkParams::from_values(&header.config, values)?;
        Ok(Self { header, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read_file(path)?, path)
    }
}
