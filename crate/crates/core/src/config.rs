//! Experiment configuration: one TOML document with a section per component.
//!
//! Every default is the desk-scale value; where a full-scale reference value
//! exists it is noted next to the field.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable naming the default config file for the CLI.
pub const CONFIG_ENV: &str = "STREAMCONV_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Total speakers; the last `holdout_speakers` ids are never trained on.
    pub num_speakers: usize,
    pub holdout_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Utterance length bounds in semantic frames.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Speaker-prompt length in semantic frames.
    pub prompt_frames: usize,
    pub content_states: usize,
    /// Successors per Markov state.
    pub branching: usize,
    /// Content states that share a semantic token with another state.
    pub tokenizer_merges: usize,
    pub semantic_vocab: usize,
    /// Full scale: 1024.
    pub codec_vocab: usize,
    /// Full scale: 4.
    pub num_quantizers: usize,
    /// Distinct timbre offsets per code; `codec_vocab` must be a multiple.
    pub timbre_levels: usize,
    /// Content classes with an independent timbre offset per speaker.
    pub timbre_classes: usize,
    /// Acoustic groups by which the rendering of a content symbol trails it.
    pub acoustic_lag: usize,
    pub sem_dim: usize,
    pub feature_noise: f64,
    /// Seeds the content language and codec layout, which are shared by
    /// every corpus drawn from the same world.
    pub world_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_speakers: 64,
            holdout_speakers: 16,
            utterances_per_speaker: 96,
            min_frames: 8,
            max_frames: 16,
            prompt_frames: 6,
            content_states: 32,
            branching: 6,
            tokenizer_merges: 3,
            semantic_vocab: 32,
            codec_vocab: 64,
            num_quantizers: 4,
            timbre_levels: 4,
            timbre_classes: 1,
            acoustic_lag: 2,
            sem_dim: 32,
            feature_noise: 0.05,
            world_seed: 0x5eed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalLinear {
    /// The projection from encoder states to semantic logits.
    Logits,
    /// The attention output projection of the last encoder block.
    LastBlockOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Full scale: 3.
    pub layers: usize,
    /// Full scale: 8.
    pub heads: usize,
    /// Full scale: 1024.
    pub hidden: usize,
    /// Full scale: 4096.
    pub intermediate: usize,
    /// Lookahead in 20 ms acoustic frames. Full scale: 4 (80 ms).
    pub delay_steps: usize,
    pub attention: AttentionMode,
    /// Longest input in semantic frames (learned positions).
    pub max_frames: usize,
    pub final_linear: FinalLinear,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            intermediate: 128,
            delay_steps: 4,
            attention: AttentionMode::Causal,
            max_frames: 64,
            final_linear: FinalLinear::Logits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnectorConfig {
    /// Bottleneck width of the residual path; 0 disables it. Full scale: 16.
    pub residual_dim: usize,
    /// Soft lookup into the backbone's semantic table (true) or into a
    /// connector-owned table (false).
    pub reuse_backbone_table: bool,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            residual_dim: 16,
            reuse_backbone_table: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Full scale: 6.
    pub layers: usize,
    /// Also the connector unit size. Full scale: 1024.
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    /// Acoustic frames per semantic frame.
    pub interleave_ratio: usize,
    /// Teacher rows averaged by the foresight target.
    pub foresight_horizon: usize,
    pub foresight_loss: bool,
    pub mask_prob: f64,
    /// Longest masked span as a fraction of the source length.
    pub mask_span_ratio: f64,
    /// Longest prompt + source, in semantic frames.
    pub max_frames: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 64,
            heads: 4,
            intermediate: 128,
            interleave_ratio: 2,
            foresight_horizon: 2,
            foresight_loss: true,
            mask_prob: 0.5,
            mask_span_ratio: 0.3,
            max_frames: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    /// Full scale: 32.
    pub rank: usize,
    /// Full scale: 1.
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Full scale: 500k.
    pub pretrain_steps: usize,
    pub encoder_steps: usize,
    /// Full scale: 100k.
    pub finetune_steps: usize,
    pub dual_steps: usize,
    /// Full scale: 5e-4.
    pub pretrain_lr: f64,
    /// Full scale: 4e-4.
    pub finetune_lr: f64,
    /// Multiplicative decay applied once per period.
    pub lr_decay: f64,
    pub pretrain_decay_period: usize,
    /// Full scale: 10k.
    pub finetune_decay_period: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub self_refine_prob: f64,
    pub refine_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            batch_size: 16,
            pretrain_steps: 2000,
            encoder_steps: 2000,
            finetune_steps: 500,
            dual_steps: 300,
            pretrain_lr: 2e-3,
            finetune_lr: 4e-4,
            lr_decay: 0.5,
            pretrain_decay_period: 1000,
            finetune_decay_period: 250,
            weight_decay: 0.01,
            grad_clip: 1.0,
            self_refine_prob: 0.5,
            refine_pairs: 768,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Decode cost of the (absent) neural codec as a real-time factor.
    pub rtf_codec: f64,
    pub token_ms: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            rtf_codec: 0.004,
            token_ms: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Full scale: 600.
    pub test_pairs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { test_pairs: 100, seed: 99 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub connector: ConnectorConfig,
    pub backbone: BackboneConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub stream: StreamConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        let bad = |m: String| Err(Error::Config(m));
        if c.num_speakers < 2 {
            return bad("corpus.num_speakers must be at least 2".into());
        }
        if c.holdout_speakers >= c.num_speakers {
            return bad("corpus.holdout_speakers must leave training speakers".into());
        }
        if c.min_frames < 4 || c.max_frames < c.min_frames {
            return bad("corpus frame bounds need max_frames >= min_frames >= 4".into());
        }
        if c.prompt_frames == 0 || c.prompt_frames > c.min_frames {
            return bad("corpus.prompt_frames must be in [1, min_frames]".into());
        }
        if c.tokenizer_merges * 2 > c.content_states || c.content_states - c.tokenizer_merges > c.semantic_vocab {
            return bad("content_states - tokenizer_merges must fit semantic_vocab".into());
        }
        if c.branching == 0 || c.branching > c.content_states - c.tokenizer_merges {
            return bad("corpus.branching out of range".into());
        }
        if c.timbre_levels == 0 || c.codec_vocab % c.timbre_levels != 0 {
            return bad("corpus.codec_vocab must be a multiple of timbre_levels".into());
        }
        if c.acoustic_lag >= c.min_frames {
            return bad("corpus.acoustic_lag must be below min_frames".into());
        }
        if c.num_quantizers == 0 || c.timbre_classes == 0 || c.sem_dim == 0 {
            return bad("corpus dimensions must be positive".into());
        }
        let e = &self.encoder;
        if e.layers == 0 || e.heads == 0 || e.hidden % e.heads != 0 {
            return bad("encoder.hidden must be divisible by encoder.heads".into());
        }
        let b = &self.backbone;
        if b.layers == 0 || b.heads == 0 || b.hidden % b.heads != 0 {
            return bad("backbone.hidden must be divisible by backbone.heads".into());
        }
        if b.interleave_ratio != 2 {
            return bad("backbone.interleave_ratio is fixed at 2 by the 40/20 ms frame rates".into());
        }
        if b.foresight_horizon == 0 {
            return bad("backbone.foresight_horizon must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&b.mask_prob) || !(0.0..=1.0).contains(&b.mask_span_ratio) {
            return bad("backbone masking ratios must lie in [0, 1]".into());
        }
        if b.max_frames < c.prompt_frames + c.max_frames {
            return bad("backbone.max_frames must cover prompt_frames + corpus.max_frames".into());
        }
        if e.max_frames < c.max_frames {
            return bad("encoder.max_frames must cover corpus.max_frames".into());
        }
        if self.lora.rank == 0 {
            return bad("lora.rank must be >= 1".into());
        }
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.self_refine_prob) {
            return bad("train.self_refine_prob must lie in [0, 1]".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.stream.rtf_codec < 0.0 || self.stream.token_ms < 0.0 {
            return bad("stream timings must be non-negative".into());
        }
        Ok(())
    }

    /// Fingerprint of everything that shapes the pre-trained backbone.
    pub fn backbone_fingerprint(&self) -> String {
        fingerprint(&(
            "backbone",
            self.vocab_shape(),
            &self.backbone,
        ))
    }

    /// Fingerprint of everything that shapes the semantic encoder, including
    /// the delay (a k=0 encoder must not load into a k=4 run).
    pub fn encoder_fingerprint(&self) -> String {
        let e = &self.encoder;
        fingerprint(&(
            "encoder",
            self.vocab_shape(),
            (e.layers, e.heads, e.hidden, e.intermediate, e.delay_steps, e.max_frames),
        ))
    }

    /// Fingerprint for fine-tuned task parameters; covers both pre-trained
    /// parts as well as the connector, adapters and trainable final linear.
    pub fn task_fingerprint(&self) -> String {
        fingerprint(&(
            "task",
            self.backbone_fingerprint(),
            self.encoder_fingerprint(),
            &self.connector,
            &self.lora,
            self.encoder.final_linear,
        ))
    }

    fn vocab_shape(&self) -> (usize, usize, usize, usize) {
        let c = &self.corpus;
        (c.codec_vocab, c.num_quantizers, c.semantic_vocab, c.sem_dim)
    }
}

fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("fingerprint input serializes");
    hex::encode(&Sha256::digest(&json)[..12])
}

/// The default config as commented TOML, as written by `streamconv init-config`.
pub fn default_config_text() -> String {
    const NOTES: &[(&str, &str, &str)] = &[
        ("corpus", "codec_vocab", "full scale: 1024"),
        ("encoder", "layers", "full scale: 3"),
        ("encoder", "heads", "full scale: 8"),
        ("encoder", "hidden", "full scale: 1024"),
        ("encoder", "intermediate", "full scale: 4096"),
        ("encoder", "delay_steps", "20 ms acoustic frames; 4 = 80 ms"),
        ("connector", "residual_dim", "0 disables the residual path; full scale: 16"),
        ("backbone", "layers", "full scale: 6"),
        ("backbone", "hidden", "also the connector unit size; full scale: 1024"),
        ("lora", "rank", "full scale: 32"),
        ("train", "pretrain_steps", "full scale: 500k"),
        ("train", "finetune_steps", "full scale: 100k"),
        ("train", "finetune_decay_period", "full scale: 10k"),
        ("eval", "test_pairs", "full scale: 600"),
    ];
    let mut out = String::from(
        "# streamconv experiment config. Omitted keys take these defaults and\n\
         # unknown keys are rejected.\n\n",
    );
    let mut section = "";
    let body = ExperimentConfig::default().to_toml();
    for line in body.lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name;
        }
        let key = line.split(" = ").next().unwrap_or("");
        match NOTES.iter().find(|(s, k, _)| *s == section && *k == key) {
            Some((_, _, note)) => out.push_str(&format!("{line}  # {note}\n")),
            None => {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let commented = ExperimentConfig::from_toml(&default_config_text()).unwrap();
        assert_eq!(commented, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[encoder]\nlayers = 2\nlayer_count = 3\n").unwrap_err();
        assert!(err.to_string().contains("layer_count"), "{err}");
    }

    #[test]
    fn parse_errors_cite_the_line() {
        let err = ExperimentConfig::from_toml("[lora]\nrank = 4\nalpha = \n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("[connector]\nresidual_dim = 0\n").unwrap();
        assert_eq!(cfg.connector.residual_dim, 0);
        assert_eq!(cfg.encoder, EncoderConfig::default());
    }

    #[test]
    fn fingerprints_track_only_relevant_sections() {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.connector.residual_dim = 0;
        assert_eq!(base.backbone_fingerprint(), other.backbone_fingerprint());
        assert_eq!(base.encoder_fingerprint(), other.encoder_fingerprint());
        assert_ne!(base.task_fingerprint(), other.task_fingerprint());
        other.encoder.delay_steps = 0;
        assert_ne!(base.encoder_fingerprint(), other.encoder_fingerprint());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = ExperimentConfig::default();
        cfg.encoder.heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.train.self_refine_prob = 1.5;
        assert!(cfg.validate().is_err());
    }
}
