//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `GRCKPT01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor listed in the header as row-major
//! little-endian `f64` values in header order.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::util::atomic_write;

const MAGIC: &[u8; 8] = b"GRCKPT01";
const FORMAT: &str = "genret-checkpoint";
const VERSION: u32 = 1;

/// Which pipeline stage produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Init,
    /// Dense encoder.
    M0,
    /// Sequence-to-sequence pretraining.
    M1,
    /// Full-length rank fine-tuning.
    M2,
    /// Progressive prefix fine-tuning.
    M3,
    /// Self-negative fine-tuning.
    M4,
}

impl StageTag {
    /// The stage whose checkpoint this stage consumes.
    pub fn predecessor(self) -> Option<StageTag> {
        use StageTag::*;
        match self {
            Init => None,
            M0 => Some(Init),
            M1 => Some(M0),
            M2 => Some(M1),
            M3 => Some(M2),
            M4 => Some(M3),
        }
    }

    pub fn parse(s: &str) -> Result<StageTag> {
        match s.to_ascii_lowercase().as_str() {
            "init" => Ok(StageTag::Init),
            "m0" => Ok(StageTag::M0),
            "m1" => Ok(StageTag::M1),
            "m2" => Ok(StageTag::M2),
            "m3" => Ok(StageTag::M3),
            "m4" => Ok(StageTag::M4),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StageTag::Init => "init",
            StageTag::M0 => "m0",
            StageTag::M1 => "m1",
            StageTag::M2 => "m2",
            StageTag::M3 => "m3",
            StageTag::M4 => "m4",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    stage: StageTag,
    seed: u64,
    /// True once identifier codebooks have been written into the tables.
    quantized: bool,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Parameters plus the metadata needed to resume the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub seed: u64,
    pub quantized: bool,
    pub params: Params,
}

impl Checkpoint {
    pub fn new(stage: StageTag, seed: u64, params: Params) -> Self {
        Checkpoint {
            stage,
            seed,
            quantized: false,
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let lay = self.params.layout();
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            stage: self.stage,
            seed: self.seed,
            quantized: self.quantized,
            config: self.params.config().clone(),
            tensors: lay
                .entries()
                .iter()
                .map(|(name, s)| TensorEntry {
                    name: name.clone(),
                    shape: [s.rows, s.cols],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let data = self.params.as_slice();
        for (_, s) in lay.entries() {
            for v in &data[s.range()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::parse(origin, 0, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad(&format!(
                "unsupported checkpoint format {} v{}",
                header.format, header.version
            )));
        }
        header.config.validate()?;
        let init = Params::init(&header.config, 0)?;
        let lay = init.layout();
        let mut data = vec![0.0; init.len()];
        let mut pos = body;
        for entry in &header.tensors {
            let slot = lay
                .find(&entry.name)
                .ok_or_else(|| bad(&format!("unknown tensor {}", entry.name)))?;
            if [slot.rows, slot.cols] != entry.shape {
                return Err(bad(&format!(
                    "tensor {} has shape {:?}",
                    entry.name, entry.shape
                )));
            }
            let end = pos + 8 * slot.len();
            if end > bytes.len() {
                return Err(bad(&format!("truncated data for tensor {}", entry.name)));
            }
            for (dst, chunk) in data[slot.range()]
                .iter_mut()
                .zip(bytes[pos..end].chunks_exact(8))
            {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            pos = end;
        }
        if header.tensors.len() != lay.entries().len() {
            return Err(bad("checkpoint is missing tensors"));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            stage: header.stage,
            seed: header.seed,
            quantized: header.quantized,
            params: Params::from_flat(&header.config, data)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    /// Refuses a checkpoint that is not the input `stage` expects.
    pub fn require_input_for(&self, stage: StageTag) -> Result<()> {
        let expected = stage
            .predecessor()
            .ok_or_else(|| Error::Config("the init stage does not consume a checkpoint".into()))?;
        if self.stage != expected {
            return Err(Error::StageOrder {
                expected: expected.to_string(),
                found: self.stage.to_string(),
            });
        }
        if stage == StageTag::M1 && !self.quantized {
            return Err(Error::StageOrder {
                expected: "quantized m0".into(),
                found: "m0 without identifiers".into(),
            });
        }
        Ok(())
    }
}
