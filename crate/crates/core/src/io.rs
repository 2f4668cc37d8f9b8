//! On-disk formats shared by the pipeline stages.
//!
//! * Dataset manifest: JSON Lines, one [`ManifestEntry`] per line.
//! * Feature store: little-endian binary
//!
//!   ```text
//!   offset  size  field
//!   0       4     magic "RFV1"
//!   4       4     u32 version (1)
//!   8       4     u32 dim
//!   12      8     u64 count
//!   20      4     f32 model_ar (0 for fused stores)
//!   24      ...   count x { u64 vehicle_id, u32 camera_id, dim x f32 }
//!   ```
//!
//! * Run config: JSON, see [`RunConfig`].

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionPolicy;
use crate::patch_geometry::{ImageShape, ResizePlan};
use crate::patch_mixup::MixupConfig;
use crate::reid_eval::{EvalProtocol, FeatureSet};
use crate::toy_vit::{ToyViTConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub vehicle_id: u64,
    pub camera_id: u32,
    pub width: usize,
    pub height: usize,
}

impl ManifestEntry {
    pub fn shape(&self) -> ImageShape {
        ImageShape {
            height: self.height,
            width: self.width,
        }
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.shape().aspect_ratio()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn shapes(&self) -> Vec<ImageShape> {
        self.entries.iter().map(ManifestEntry::shape).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }
}

/// Parses JSON Lines; blank lines are ignored, line numbers are 1-based.
pub fn parse_manifest<R: BufRead>(reader: R, base_dir: PathBuf) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        if entry.width == 0 || entry.height == 0 {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("non-positive size {}x{}", entry.height, entry.width),
            });
        }
        if !seen.insert(entry.path.clone()) {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("duplicate path {}", entry.path),
            });
        }
        entries.push(entry);
    }
    Ok(DatasetManifest { entries, base_dir })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(BufReader::new(file), base)
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, manifest.to_jsonl())?;
    Ok(())
}

pub const STORE_MAGIC: [u8; 4] = *b"RFV1";
pub const STORE_VERSION: u32 = 1;
pub const STORE_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub vehicle_id: u64,
    pub camera_id: u32,
    pub vector: Vec<f32>,
}

/// Feature vectors of one model (or a fusion of several) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub dim: u32,
    pub model_ar: f32,
    pub records: Vec<FeatureRecord>,
}

pub fn store_size(dim: u32, count: u64) -> u64 {
    STORE_HEADER_LEN as u64 + count * (12 + 4 * dim as u64)
}

impl FeatureStore {
    pub fn new(dim: u32, model_ar: f32, records: Vec<FeatureRecord>) -> Result<Self> {
        let store = Self {
            dim,
            model_ar,
            records,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Format("feature dimension must be positive".into()));
        }
        if let Some((i, r)) = self
            .records
            .iter()
            .enumerate()
            .find(|(_, r)| r.vector.len() != self.dim as usize)
        {
            return Err(Error::Format(format!(
                "record {i} has {} values, header says {}",
                r.vector.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(store_size(self.dim, self.records.len() as u64) as usize);
        out.extend_from_slice(&STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.model_ar.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.vehicle_id.to_le_bytes());
            out.extend_from_slice(&r.camera_id.to_le_bytes());
            for v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < STORE_HEADER_LEN {
            return Err(Error::Format(format!(
                "truncated header: {} of {STORE_HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        if bytes[0..4] != STORE_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = u32_at(8);
        if dim == 0 {
            return Err(Error::Format("feature dimension must be positive".into()));
        }
        let count = u64_at(12);
        let model_ar = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let expected = (count as u128) * (12 + 4 * dim as u128) + STORE_HEADER_LEN as u128;
        if bytes.len() as u128 != expected {
            return Err(Error::Format(format!(
                "size mismatch: header implies {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let rec_len = 12 + 4 * dim as usize;
        let records = bytes[STORE_HEADER_LEN..]
            .chunks_exact(rec_len)
            .map(|rec| FeatureRecord {
                vehicle_id: u64::from_le_bytes(rec[0..8].try_into().unwrap()),
                camera_id: u32::from_le_bytes(rec[8..12].try_into().unwrap()),
                vector: rec[12..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            })
            .collect();
        Ok(Self {
            dim,
            model_ar,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_feature_set(&self) -> FeatureSet {
        let d = self.dim as usize;
        let features = Array2::from_shape_fn((self.records.len(), d), |(i, j)| {
            self.records[i].vector[j] as f64
        });
        FeatureSet {
            features,
            vehicle_ids: self.records.iter().map(|r| r.vehicle_id).collect(),
            camera_ids: self.records.iter().map(|r| r.camera_id).collect(),
        }
    }

    pub fn from_feature_set(set: &FeatureSet, model_ar: f32) -> Result<Self> {
        let records = (0..set.len())
            .map(|i| FeatureRecord {
                vehicle_id: set.vehicle_ids[i],
                camera_id: set.camera_ids[i],
                vector: set.features.row(i).iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self::new(set.dim() as u32, model_ar, records)
    }
}

pub fn write_feature_store(path: impl AsRef<Path>, store: &FeatureStore) -> Result<()> {
    fs::write(path, store.to_bytes()?)?;
    Ok(())
}

pub fn read_feature_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    FeatureStore::from_bytes(&fs::read(path)?)
}

/// Everything a pipeline run needs besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub mixup: MixupConfig,
    #[serde(default)]
    pub policy: FusionPolicy,
    #[serde(default)]
    pub protocol: EvalProtocol,
    #[serde(default)]
    pub toy_vit: ToyViTConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "empty_plan")]
    pub resize: ResizePlan,
}

fn empty_plan() -> ResizePlan {
    ResizePlan { targets: vec![] }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mixup: MixupConfig::default(),
            policy: FusionPolicy::default(),
            protocol: EvalProtocol::default(),
            toy_vit: ToyViTConfig::default(),
            train: TrainConfig::default(),
            resize: empty_plan(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.mixup.validate()?;
        self.policy.validate()?;
        self.protocol.validate()?;
        self.toy_vit.validate()?;
        self.train.validate()?;
        self.resize.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 of the compact JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let cfg = RunConfig::from_json(&fs::read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}
