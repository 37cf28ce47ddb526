//! Zero-shot evaluation on held-out speakers and ablation reports.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Sampling;
use crate::config::{AttentionMode, ExperimentConfig};
use crate::corpus::{Corpus, SpeakerProfile, World};
use crate::error::{arg, Error, Result};
use crate::model::{ConversionMode, ConversionModel};
use crate::pipeline::{Lab, TrainSet};
use crate::trainer::BackboneTuning;

/// Source utterance converted towards the speaker of the prompt utterance.
/// Both index the test corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub source: usize,
    pub prompt: usize,
    /// Source and prompt share a speaker; excluded from speaker transfer.
    pub identity: bool,
}

/// Draws `n` pairs whose source and prompt speakers differ.
pub fn zero_shot_pairs(test: &Corpus, n: usize, seed: u64) -> Result<Vec<EvalPair>> {
    let speakers = test.speakers();
    if speakers.len() < 2 {
        return arg("zero-shot evaluation needs at least two test speakers");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..test.utterances.len()).collect();
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let s = *idx.choose(&mut rng).expect("non-empty");
        let p = *idx.choose(&mut rng).expect("non-empty");
        if test.utterances[s].speaker == test.utterances[p].speaker {
            continue;
        }
        pairs.push(EvalPair {
            source: s,
            prompt: p,
            identity: false,
        });
    }
    Ok(pairs)
}

/// Marks pairs whose source and prompt speakers coincide.
pub fn flag_identity(test: &Corpus, pairs: &mut [EvalPair]) {
    for p in pairs {
        p.identity = test.utterances[p.source].speaker == test.utterances[p.prompt].speaker;
    }
}

/// Fails when any test speaker was seen in training.
pub fn check_protocol(train_speakers: &[u32], test: &Corpus) -> Result<()> {
    let overlap: Vec<u32> = test
        .speakers()
        .iter()
        .map(|s| s.speaker_id)
        .filter(|id| train_speakers.contains(id))
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Protocol(format!(
            "test speakers {overlap:?} also appear in training; zero-shot evaluation needs unseen speakers"
        )))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Frame-level agreement of the content probe on converted speech with
    /// the source content.
    pub content_accuracy: f64,
    /// Fraction of non-identity pairs the speaker probe assigns to the
    /// prompt speaker.
    pub speaker_transfer_accuracy: f64,
    /// Mean timbre agreement with the prompt speaker.
    pub speaker_similarity: f64,
    /// Causal-encoder token accuracy on the test sources.
    pub encoder_accuracy: f64,
}

/// Converts every pair greedily and scores the result with the probes.
pub fn evaluate(
    model: &ConversionModel<f32>,
    world: &World,
    test: &Corpus,
    pairs: &[EvalPair],
    mode: ConversionMode,
) -> Result<Metrics> {
    if pairs.is_empty() {
        return arg("no evaluation pairs");
    }
    let path = model.path(mode)?;
    let prompt_frames = model.cfg.corpus.prompt_frames;
    let candidates: Vec<SpeakerProfile> = test.speakers();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut content_hits, mut content_total) = (0usize, 0usize);
    let (mut spk_hits, mut spk_total) = (0usize, 0usize);
    let mut sim = 0.0;
    for pair in pairs {
        let src = &test.utterances[pair.source];
        let prompt = test.utterances[pair.prompt].crop(prompt_frames);
        let out = path.convert(&prompt.acoustic_tokens, &src.acoustic_tokens, Sampling::Greedy, &mut rng)?;
        let reading = world.content_probe(&out.tokens)?;
        // the trailing pauses are implied by the probe, not read
        let n = src.content.len().saturating_sub(world.trailing_pauses());
        content_hits += (0..n).filter(|&t| reading.symbols[t] == src.content[t]).count();
        content_total += n;
        let target = prompt.speaker;
        sim += world.speaker_similarity(&out.tokens, &target)?;
        if !pair.identity {
            spk_total += 1;
            if world.speaker_probe(&out.tokens, &candidates)?.speaker_id == target.speaker_id {
                spk_hits += 1;
            }
        }
    }
    Ok(Metrics {
        content_accuracy: content_hits as f64 / content_total.max(1) as f64,
        speaker_transfer_accuracy: spk_hits as f64 / spk_total.max(1) as f64,
        speaker_similarity: sim / pairs.len() as f64,
        encoder_accuracy: encoder_accuracy(model, test, pairs)?,
    })
}

/// Argmax accuracy of the causal pre-trained encoder against ground-truth
/// semantic tokens of the pair sources.
pub fn encoder_accuracy(model: &ConversionModel<f32>, test: &Corpus, pairs: &[EvalPair]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for pair in pairs {
        let u = &test.utterances[pair.source];
        let h = model.encoder.encode(&u.acoustic_tokens, AttentionMode::Causal, None)?;
        hits += h
            .argmax()
            .iter()
            .zip(&u.semantic_tokens.codes)
            .filter(|(a, b)| a == b)
            .count();
        total += u.semantic_tokens.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Delay,
    Layers,
    Residual,
    SelfRefine,
    Lora,
    DataSize,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "delay" => Self::Delay,
            "layers" => Self::Layers,
            "residual" => Self::Residual,
            "self-refine" => Self::SelfRefine,
            "lora" => Self::Lora,
            "data-size" => Self::DataSize,
            other => {
                return arg(format!(
                    "unknown ablation axis {other:?} (delay | layers | residual | self-refine | lora | data-size)"
                ))
            }
        })
    }
}

/// Fraction of the training corpus kept by the `small` data-size arm.
pub const SMALL_DATA_FRACTION: f64 = 0.25;

/// One configuration of an ablation axis.
#[derive(Clone, Debug)]
pub struct Arm {
    pub label: String,
    /// Human-readable difference from the base configuration.
    pub delta: String,
    pub cfg: ExperimentConfig,
    pub tuning: BackboneTuning,
    pub data_fraction: f64,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        Self::Delay,
        Self::Layers,
        Self::Residual,
        Self::SelfRefine,
        Self::Lora,
        Self::DataSize,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Delay => "delay",
            Self::Layers => "layers",
            Self::Residual => "residual",
            Self::SelfRefine => "self-refine",
            Self::Lora => "lora",
            Self::DataSize => "data-size",
        }
    }

    pub fn arms(&self, base: &ExperimentConfig) -> Vec<Arm> {
        let arm = |label: String, delta: String, f: &dyn Fn(&mut ExperimentConfig)| {
            let mut cfg = base.clone();
            f(&mut cfg);
            Arm {
                label,
                delta,
                cfg,
                tuning: BackboneTuning::Lora,
                data_fraction: 1.0,
            }
        };
        match self {
            Self::Delay => [0usize, 2, 4]
                .iter()
                .map(|&k| arm(k.to_string(), format!("encoder.delay_steps = {k}"), &|c| c.encoder.delay_steps = k))
                .collect(),
            Self::Layers => [1usize, 2, 3]
                .iter()
                .map(|&n| arm(n.to_string(), format!("backbone.layers = {n}"), &|c| c.backbone.layers = n))
                .collect(),
            Self::Residual => [0usize, 16, 64]
                .iter()
                .map(|&r| arm(r.to_string(), format!("connector.residual_dim = {r}"), &|c| c.connector.residual_dim = r))
                .collect(),
            Self::SelfRefine => [0.0f64, 0.5]
                .iter()
                .map(|&p| arm(p.to_string(), format!("train.self_refine_prob = {p}"), &|c| c.train.self_refine_prob = p))
                .collect(),
            Self::Lora => [
                (BackboneTuning::Lora, "lora", "backbone adapted with LoRA"),
                (BackboneTuning::Frozen, "frozen", "backbone frozen, no adapters"),
                (BackboneTuning::Full, "trainable", "backbone fully fine-tuned"),
            ]
            .iter()
            .map(|&(t, label, delta)| {
                let mut a = arm(label.into(), delta.into(), &|_| {});
                a.tuning = t;
                a
            })
            .collect(),
            Self::DataSize => [("small", SMALL_DATA_FRACTION), ("full", 1.0)]
                .iter()
                .map(|&(label, f)| {
                    let mut a = arm(label.into(), format!("training corpus fraction = {f}"), &|_| {});
                    a.data_fraction = f;
                    a
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub arm: String,
    pub delta: String,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub task_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ConversionMode,
    pub pairs: usize,
    pub identity_pairs: usize,
    pub content_accuracy: f64,
    pub speaker_transfer_accuracy: f64,
    pub speaker_similarity: f64,
    pub encoder_accuracy: f64,
    /// No prosody model exists in this setting.
    pub style_correlation: String,
    pub ablations: Vec<AblationRow>,
    /// Component name to fingerprint, for every checkpoint used.
    pub checkpoints: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(mode: ConversionMode, pairs: &[EvalPair], m: Metrics, checkpoints: BTreeMap<String, String>) -> Self {
        Self {
            mode,
            pairs: pairs.len(),
            identity_pairs: pairs.iter().filter(|p| p.identity).count(),
            content_accuracy: m.content_accuracy,
            speaker_transfer_accuracy: m.speaker_transfer_accuracy,
            speaker_similarity: m.speaker_similarity,
            encoder_accuracy: m.encoder_accuracy,
            style_correlation: "n/a".into(),
            ablations: Vec::new(),
            checkpoints,
        }
    }
}

/// Fingerprints of the components a model was built from.
pub fn model_fingerprints(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("backbone".to_string(), cfg.backbone_fingerprint()),
        ("encoder".to_string(), cfg.encoder_fingerprint()),
        ("task".to_string(), cfg.task_fingerprint()),
    ])
}

/// Trains and evaluates every arm of `axis`, reusing pre-trained parts
/// through `lab`.
pub fn run_ablation(
    lab: &mut Lab,
    axis: AblationAxis,
    base: &ExperimentConfig,
    world: &World,
    train: &Corpus,
    test: &Corpus,
    pairs: &[EvalPair],
) -> Result<Vec<AblationRow>> {
    axis.arms(base)
        .into_iter()
        .map(|arm| run_arm(lab, axis, arm, world, train, test, pairs))
        .collect()
}

/// Trains one arm (streaming parameters only) and evaluates it.
pub fn run_arm(
    lab: &mut Lab,
    axis: AblationAxis,
    arm: Arm,
    world: &World,
    train: &Corpus,
    test: &Corpus,
    pairs: &[EvalPair],
) -> Result<AblationRow> {
    arm.cfg.validate()?;
    let (tag, corpus) = if arm.data_fraction < 1.0 {
        (format!("fraction-{}", arm.data_fraction), train.subsample(arm.data_fraction))
    } else {
        ("full".to_string(), train.clone())
    };
    let model = lab.train(&arm.cfg, TrainSet { tag: &tag, corpus: &corpus }, arm.tuning, false)?;
    let metrics = evaluate(&model, world, test, pairs, ConversionMode::Stream)?;
    Ok(AblationRow {
        axis,
        arm: arm.label,
        delta: arm.delta,
        metrics,
        task_fingerprint: arm.cfg.task_fingerprint(),
    })
}
