//! Run directory: every stage artifact lives under one root next to a
//! `run.json` manifest recording, per stage, a digest of its inputs and of
//! the files it wrote. A stage whose record still matches is skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use streamconv::corpus::{AcousticTokens, SpeakerProfile};
use streamconv::trainer::RefinementPair;
use streamconv::{Error, Result};

pub const MANIFEST: &str = "run.json";
pub const CONFIG: &str = "config.toml";
pub const TRAIN_DATA: &str = "data/train";
pub const TEST_DATA: &str = "data/test";
pub const PRETRAINED: &str = "pretrained.ckpt";
pub const PAIRS: &str = "pairs.json";
pub const MODEL: &str = "model.ckpt";
pub const METRICS: &str = "metrics.jsonl";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: String,
    /// Output path (relative to the run root) to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_fingerprints: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub struct RunDir {
    root: PathBuf,
    pub manifest: RunManifest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a file, or of every file below a directory in name order.
fn digest_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let mut h = Sha256::new();
        for p in names {
            h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            h.update(digest_path(&p)?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    } else {
        Ok(sha256_hex(&std::fs::read(path)?))
    }
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let m = root.join(MANIFEST);
        let manifest = if m.exists() {
            serde_json::from_str(&std::fs::read_to_string(&m)?)?
        } else {
            RunManifest::default()
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Fails with an actionable message when an upstream artifact is absent.
    pub fn require(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::State(format!(
                "missing {} (run `streamconv {producer}` first)",
                p.display()
            )));
        }
        Ok(p)
    }

    /// Input key of a stage: its name, the active configuration and the
    /// digests of the artifacts it reads.
    pub fn inputs_key(&self, stage: &str, config_text: &str, upstream: &[&str]) -> Result<String> {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update(config_text.as_bytes());
        for rel in upstream {
            h.update(digest_path(&self.path(rel))?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn up_to_date(&self, stage: &str, inputs: &str) -> bool {
        let Some(rec) = self.manifest.stages.get(stage) else {
            return false;
        };
        rec.inputs == inputs
            && rec
                .outputs
                .iter()
                .all(|(rel, d)| digest_path(&self.path(rel)).is_ok_and(|got| &got == d))
    }

    pub fn record(&mut self, stage: &str, inputs: String, outputs: &[&str]) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|rel| Ok((rel.to_string(), digest_path(&self.path(rel))?)))
            .collect::<Result<_>>()?;
        self.manifest.stages.insert(stage.to_string(), StageRecord { inputs, outputs });
        self.save()
    }

    pub fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.path(MANIFEST), text + "\n")?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    source: usize,
    target_speaker: SpeakerProfile,
    quantizers: usize,
    codes: Vec<u32>,
}

pub fn save_pairs(path: &Path, pairs: &[RefinementPair]) -> Result<()> {
    let recs: Vec<PairRecord> = pairs
        .iter()
        .map(|p| PairRecord {
            source: p.source,
            target_speaker: p.target_speaker,
            quantizers: p.synthetic.quantizers(),
            codes: p.synthetic.codes().to_vec(),
        })
        .collect();
    std::fs::write(path, serde_json::to_vec(&recs)?)?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<RefinementPair>> {
    let recs: Vec<PairRecord> = serde_json::from_slice(&std::fs::read(path)?)?;
    recs.into_iter()
        .map(|r| {
            Ok(RefinementPair {
                source: r.source,
                target_speaker: r.target_speaker,
                synthetic: AcousticTokens::new(r.codes, r.quantizers)?,
            })
        })
        .collect()
}
