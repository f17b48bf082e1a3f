//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "NXACKPT\0"
//! version    u32
//! header_len u64
//! header     header_len bytes of JSON (architecture, pipeline, thresholds, ...)
//! count      u64      number of stored values
//! values     count × f64 (little-endian)
//! digest     32 bytes SHA-256 of everything above
//! ```
//!
//! Values are the model's trainable parameters followed by the batch-norm
//! running statistics, in [`PredictorModel::flat_state`] order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::ActivityCatalog;
use crate::error::{Error, Result};
use crate::features::{ContextMask, FeaturePipeline, InputLayout};
use crate::metrics::ThresholdVector;
use crate::nn::{AdamState, FocalLossConfig, Mode, PredictorModel};
use crate::training::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NXACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with everything needed to run it on raw cases.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: PredictorModel,
    pub pipeline: FeaturePipeline,
    pub train_config: TrainConfig,
    pub focal: FocalLossConfig,
    pub optimizer: AdamState,
    pub thresholds: Option<ThresholdVector>,
    /// Per-label F1 on the test split, when evaluated.
    pub test_label_f1: Option<Vec<f64>>,
}

impl ModelBundle {
    pub fn mask(&self) -> ContextMask {
        self.model.layout.mask
    }

    pub fn catalog(&self) -> &ActivityCatalog {
        &self.pipeline.manifest.catalog
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    layout: InputLayout,
    hidden: Vec<usize>,
    mode: Mode,
    pipeline: FeaturePipeline,
    train_config: TrainConfig,
    focal: FocalLossConfig,
    optimizer: AdamState,
    thresholds: Option<ThresholdVector>,
    test_label_f1: Option<Vec<f64>>,
    catalog_hash: String,
}

pub fn encode_checkpoint(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let header = Header {
        layout: bundle.model.layout,
        hidden: bundle.model.hidden_widths(),
        mode: bundle.model.mode,
        pipeline: bundle.pipeline.clone(),
        train_config: bundle.train_config.clone(),
        focal: bundle.focal.clone(),
        optimizer: bundle.optimizer.clone(),
        thresholds: bundle.thresholds.clone(),
        test_label_f1: bundle.test_label_f1.clone(),
        catalog_hash: bundle.catalog().hash(),
    };
    let header = serde_json::to_vec(&header)?;
    let values = bundle.model.flat_state();

    let mut out = Vec::with_capacity(64 + header.len() + 8 * values.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint; when `expected` is given the catalog hash must match.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ActivityCatalog>) -> Result<ModelBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = r.u64()? as usize;
    let header_bytes = r.take(header_len)?;
    let count = r.u64()? as usize;
    let raw = r.take(count.checked_mul(8).ok_or_else(|| {
        Error::CorruptCheckpoint("value count overflows".into())
    })?)?;
    let body_end = r.pos;
    let digest = r.take(32)?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("digest mismatch".into()));
    }
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;

    let found = header.pipeline.manifest.catalog.hash();
    if found != header.catalog_hash {
        return Err(Error::CorruptCheckpoint("catalog hash does not match header catalog".into()));
    }
    if let Some(expected) = expected {
        let expected = expected.hash();
        if expected != found {
            return Err(Error::CatalogMismatch { expected, found });
        }
    }

    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut model = PredictorModel::new(header.layout, &header.hidden, 0)?;
    model
        .load_flat_state(&values)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    model.set_mode(header.mode);
    Ok(ModelBundle {
        model,
        pipeline: header.pipeline,
        train_config: header.train_config,
        focal: header.focal,
        optimizer: header.optimizer,
        thresholds: header.thresholds,
        test_label_f1: header.test_label_f1,
    })
}

pub fn save_checkpoint(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(bundle)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ActivityCatalog>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
