//! Single-file parameter container: a magic tag, a JSON manifest (tensor
//! names, groups, shapes, dtypes, offsets and per-group fingerprints) and
//! the flat little-endian tensor bytes. Saving is deterministic, so a
//! load/save round trip reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use streamconv_nn::{Module, Real};

use crate::backbone::{Backbone, BackboneDims};
use crate::config::{ExperimentConfig, FinalLinear};
use crate::connector::Connector;
use crate::encoder::{EncoderDims, SemanticEncoder};
use crate::error::{Error, Result};
use crate::model::{extract_linear, ConversionModel, NonStreamParams, TaskParams};

const MAGIC: &[u8; 8] = b"SCVCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Group name to the fingerprint of the configuration that shaped it.
    pub groups: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    data: Vec<u8>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                groups: BTreeMap::new(),
                tensors: Vec::new(),
                metadata: BTreeMap::new(),
            },
            data: Vec::new(),
        }
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.manifest.groups.contains_key(group)
    }

    pub fn fingerprint(&self, group: &str) -> Option<&str> {
        self.manifest.groups.get(group).map(String::as_str)
    }

    /// Appends every tensor of `module` under `group`. Replacing an existing
    /// group is refused so earlier stages stay untouched.
    pub fn add_group<S: Real>(&mut self, group: &str, fingerprint: &str, module: &dyn Module<S>) -> Result<()> {
        if self.has_group(group) {
            return Err(Error::State(format!("checkpoint already holds group {group}")));
        }
        self.manifest.groups.insert(group.to_string(), fingerprint.to_string());
        let (tensors, data) = (&mut self.manifest.tensors, &mut self.data);
        module.visit("", &mut |name, p| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                group: group.to_string(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                dtype: S::DTYPE.to_string(),
                offset: data.len(),
            });
            for v in p.value.data() {
                v.write_le(data);
            }
        });
        Ok(())
    }

    /// Fills `module` from `group`. Fails with a version error when the
    /// stored fingerprint differs from `fingerprint`, and when names, shapes
    /// or dtypes disagree.
    pub fn load_group<S: Real>(&self, group: &str, fingerprint: &str, module: &mut dyn Module<S>) -> Result<()> {
        let stored = self
            .fingerprint(group)
            .ok_or_else(|| Error::Argument(format!("checkpoint has no group {group}")))?;
        if stored != fingerprint {
            return Err(Error::Version(format!(
                "group {group} was written for configuration {stored}, current configuration is {fingerprint}"
            )));
        }
        let entries: BTreeMap<&str, &TensorEntry> = self
            .manifest
            .tensors
            .iter()
            .filter(|t| t.group == group)
            .map(|t| (t.name.as_str(), t))
            .collect();
        let mut seen = 0usize;
        let mut err = None;
        module.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let Some(e) = entries.get(name) else {
                err = Some(Error::Version(format!("group {group} lacks tensor {name}")));
                return;
            };
            if (e.rows, e.cols) != p.value.shape() || e.dtype != S::DTYPE {
                err = Some(Error::Version(format!(
                    "tensor {group}/{name}: stored {}x{} {}, expected {}x{} {}",
                    e.rows,
                    e.cols,
                    e.dtype,
                    p.value.rows(),
                    p.value.cols(),
                    S::DTYPE
                )));
                return;
            }
            let bytes = e.rows * e.cols * S::BYTES;
            let Some(src) = self.data.get(e.offset..e.offset + bytes) else {
                err = Some(Error::Version(format!("tensor {group}/{name} runs past the data block")));
                return;
            };
            for (v, b) in p.value.data_mut().iter_mut().zip(src.chunks_exact(S::BYTES)) {
                *v = S::read_le(b);
            }
            seen += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != entries.len() {
            return Err(Error::Version(format!(
                "group {group} holds {} tensors, the model expects {seen}",
                entries.len()
            )));
        }
        Ok(())
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.manifest.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<Option<T>> {
        self.manifest
            .metadata
            .get(key)
            .map(|v| serde_json::from_value(v.clone()).map_err(Error::from))
            .transpose()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Version("not a streamconv checkpoint".into()));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + n)
            .ok_or_else(|| Error::Version("truncated checkpoint manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        Ok(Self {
            manifest,
            data: bytes[16 + n..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

// ---- group names used by the training stages ----

pub const GROUP_ENCODER: &str = "encoder";
pub const GROUP_BACKBONE: &str = "backbone";
pub const GROUP_LINEAR: &str = "linear";
pub const GROUP_CONNECTOR: &str = "connector";
pub const GROUP_BACKBONE_LORA: &str = "backbone-lora";
/// A fully fine-tuned backbone replacing the pre-trained one.
pub const GROUP_BACKBONE_TUNED: &str = "backbone-tuned";
pub const GROUP_ENCODER_LORA: &str = "encoder-lora";
pub const GROUP_LINEAR2: &str = "linear2";
pub const GROUP_CONNECTOR2: &str = "connector2";
pub const GROUP_BACKBONE_LORA2: &str = "backbone-lora2";

/// Groups added by the offline-mode extension.
pub const DUAL_GROUPS: [&str; 4] = [GROUP_ENCODER_LORA, GROUP_LINEAR2, GROUP_CONNECTOR2, GROUP_BACKBONE_LORA2];

/// Fresh modules with the shapes `cfg` implies, to be filled from disk.
pub fn empty_encoder(cfg: &ExperimentConfig) -> SemanticEncoder<f32> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    SemanticEncoder::new(EncoderDims::from_config(cfg), &mut rng)
}

pub fn empty_backbone(cfg: &ExperimentConfig) -> Backbone<f32> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Backbone::new(BackboneDims::from_config(cfg), &mut rng)
}

fn empty_connector(cfg: &ExperimentConfig) -> Connector<f32> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Connector::new(
        cfg.encoder.hidden,
        cfg.backbone.hidden,
        cfg.corpus.semantic_vocab,
        cfg.connector.residual_dim,
        !cfg.connector.reuse_backbone_table,
        &mut rng,
    )
}

pub fn save_pretrained(ck: &mut Checkpoint, cfg: &ExperimentConfig, enc: &SemanticEncoder<f32>, bb: &Backbone<f32>) -> Result<()> {
    ck.add_group(GROUP_ENCODER, &cfg.encoder_fingerprint(), enc)?;
    ck.add_group(GROUP_BACKBONE, &cfg.backbone_fingerprint(), bb)
}

pub fn load_pretrained(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<(SemanticEncoder<f32>, Backbone<f32>)> {
    let mut enc = empty_encoder(cfg);
    ck.load_group(GROUP_ENCODER, &cfg.encoder_fingerprint(), &mut enc)?;
    let mut bb = empty_backbone(cfg);
    ck.load_group(GROUP_BACKBONE, &cfg.backbone_fingerprint(), &mut bb)?;
    Ok((enc, bb))
}

fn save_task(ck: &mut Checkpoint, cfg: &ExperimentConfig, t: &TaskParams<f32>, names: [&str; 3]) -> Result<()> {
    let fp = cfg.task_fingerprint();
    ck.add_group(names[0], &fp, &t.linear)?;
    ck.add_group(names[1], &fp, &t.connector)?;
    if let Some(l) = &t.lora {
        ck.add_group(names[2], &fp, l)?;
    }
    if let Some(b) = &t.backbone {
        ck.add_group(GROUP_BACKBONE_TUNED, &fp, b)?;
    }
    Ok(())
}

fn load_task(ck: &Checkpoint, cfg: &ExperimentConfig, base: &SemanticEncoder<f32>, bb: &Backbone<f32>, names: [&str; 3]) -> Result<TaskParams<f32>> {
    let fp = cfg.task_fingerprint();
    let mut linear = extract_linear(base, cfg.encoder.final_linear);
    ck.load_group(names[0], &fp, &mut linear)?;
    let mut connector = empty_connector(cfg);
    ck.load_group(names[1], &fp, &mut connector)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let lora = if ck.has_group(names[2]) {
        let mut l = bb.new_lora(cfg.lora.rank, cfg.lora.alpha, &mut rng);
        ck.load_group(names[2], &fp, &mut l)?;
        Some(l)
    } else {
        None
    };
    let backbone = if names[2] == GROUP_BACKBONE_LORA && ck.has_group(GROUP_BACKBONE_TUNED) {
        let mut b = empty_backbone(cfg);
        ck.load_group(GROUP_BACKBONE_TUNED, &fp, &mut b)?;
        Some(b)
    } else {
        None
    };
    Ok(TaskParams {
        linear,
        connector,
        lora,
        backbone,
    })
}

const STREAM_NAMES: [&str; 3] = [GROUP_LINEAR, GROUP_CONNECTOR, GROUP_BACKBONE_LORA];
const DUAL_NAMES: [&str; 3] = [GROUP_LINEAR2, GROUP_CONNECTOR2, GROUP_BACKBONE_LORA2];

/// Writes the streaming task groups (after pre-trained groups).
pub fn save_stream_task(ck: &mut Checkpoint, cfg: &ExperimentConfig, t: &TaskParams<f32>) -> Result<()> {
    save_task(ck, cfg, t, STREAM_NAMES)
}

/// Appends the offline-mode groups; existing groups are left as they are.
pub fn save_dual(ck: &mut Checkpoint, cfg: &ExperimentConfig, ns: &NonStreamParams<f32>) -> Result<()> {
    ck.add_group(GROUP_ENCODER_LORA, &cfg.task_fingerprint(), &ns.encoder_lora)?;
    save_task(ck, cfg, &ns.task, DUAL_NAMES)
}

/// Whole model in one container.
pub fn save_model(cfg: &ExperimentConfig, model: &ConversionModel<f32>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    save_pretrained(&mut ck, cfg, &model.encoder, &model.backbone)?;
    save_stream_task(&mut ck, cfg, &model.stream)?;
    if let Some(ns) = &model.nonstream {
        save_dual(&mut ck, cfg, ns)?;
    }
    Ok(ck)
}

pub fn load_model(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<ConversionModel<f32>> {
    let (encoder, backbone) = load_pretrained(ck, cfg)?;
    if !ck.has_group(GROUP_LINEAR) {
        return Err(Error::State("checkpoint holds no fine-tuned parameters (run finetune)".into()));
    }
    let stream = load_task(ck, cfg, &encoder, &backbone, STREAM_NAMES)?;
    let nonstream = if ck.has_group(GROUP_ENCODER_LORA) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut encoder_lora = encoder.new_lora(cfg.lora.rank, cfg.lora.alpha, &mut rng);
        ck.load_group(GROUP_ENCODER_LORA, &cfg.task_fingerprint(), &mut encoder_lora)?;
        let task = load_task(ck, cfg, &encoder, &backbone, DUAL_NAMES)?;
        Some(NonStreamParams { encoder_lora, task })
    } else {
        None
    };
    Ok(ConversionModel {
        cfg: cfg.clone(),
        encoder,
        backbone,
        stream,
        nonstream,
    })
}

/// Which encoder tensor the task linear replaces, for reports.
pub fn linear_target(which: FinalLinear) -> &'static str {
    match which {
        FinalLinear::Logits => "encoder.head",
        FinalLinear::LastBlockOutput => "encoder.blocks[-1].attn.wo",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use streamconv_nn::{Linear, Param};

    #[test]
    fn round_trip_is_byte_identical() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let lin = Linear::<f32>::new(3, 2, true, 0.5, &mut rng);
        let mut ck = Checkpoint::new();
        ck.add_group("g", "fp", &lin).unwrap();
        ck.set_meta("train_speakers", &vec![1u32, 2]).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let mut other = Linear::<f32>::new(3, 2, true, 0.0, &mut rng);
        back.load_group("g", "fp", &mut other).unwrap();
        assert_eq!(other.weight.value, lin.weight.value);
        assert_eq!(back.meta::<Vec<u32>>("train_speakers").unwrap(), Some(vec![1, 2]));
    }

    #[test]
    fn fingerprint_and_shape_mismatches_are_version_errors() {
        let p = Param::<f32>::zeros(2, 3);
        let mut ck = Checkpoint::new();
        ck.add_group("g", "aaa", &p).unwrap();
        let mut q = Param::<f32>::zeros(2, 3);
        assert!(matches!(ck.load_group("g", "bbb", &mut q), Err(Error::Version(_))));
        let mut r = Param::<f32>::zeros(3, 2);
        assert!(matches!(ck.load_group("g", "aaa", &mut r), Err(Error::Version(_))));
        let mut wrong_dtype = Param::<f64>::zeros(2, 3);
        assert!(matches!(ck.load_group("g", "aaa", &mut wrong_dtype), Err(Error::Version(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Version(_))));
        assert!(matches!(ck.add_group("g", "aaa", &p), Err(Error::State(_))));
    }
}
