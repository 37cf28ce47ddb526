//! Assembled conversion model: pre-trained encoder and backbone plus the
//! task-specific parameter sets for streaming and (optionally) offline mode.

use rand::Rng;
use streamconv_nn::{Linear, Mat, Real};

use crate::backbone::{Backbone, BackboneDims, BackboneLora, Generation, Sampling, SemInput};
use crate::config::{AttentionMode, ExperimentConfig, FinalLinear};
use crate::connector::Connector;
use crate::corpus::AcousticTokens;
use crate::encoder::{EncoderDims, EncoderLora, SemanticEncoder, SemanticHidden};
use crate::error::{arg, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConversionMode {
    Stream,
    NonStream,
}

impl std::str::FromStr for ConversionMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stream" => Ok(Self::Stream),
            "nonstream" | "non-stream" => Ok(Self::NonStream),
            other => arg(format!("unknown mode {other:?} (stream | nonstream)")),
        }
    }
}

/// Parameters learned during fine-tuning for one inference mode.
#[derive(Clone, Debug)]
pub struct TaskParams<S> {
    /// Fine-tuned copy of the encoder's final linear.
    pub linear: Linear<S>,
    pub connector: Connector<S>,
    /// Backbone adapters; `None` when the backbone was frozen or fully tuned.
    pub lora: Option<BackboneLora<S>>,
    /// A fully fine-tuned backbone replacing the pre-trained one.
    pub backbone: Option<Backbone<S>>,
}

/// Extra parameters for offline conversion with a bidirectional encoder.
#[derive(Clone, Debug)]
pub struct NonStreamParams<S> {
    pub encoder_lora: EncoderLora<S>,
    pub task: TaskParams<S>,
}

pub fn extract_linear<S: Real>(enc: &SemanticEncoder<S>, which: FinalLinear) -> Linear<S> {
    match which {
        FinalLinear::Logits => enc.head.clone(),
        FinalLinear::LastBlockOutput => enc.blocks.last().expect("encoder has blocks").attn.wo.clone(),
    }
}

pub fn install_linear<S: Real>(enc: &mut SemanticEncoder<S>, which: FinalLinear, linear: &Linear<S>) {
    let slot = match which {
        FinalLinear::Logits => &mut enc.head,
        FinalLinear::LastBlockOutput => &mut enc.blocks.last_mut().expect("encoder has blocks").attn.wo,
    };
    *slot = linear.clone();
}

/// Encoder with a task linear installed, plus how to run it.
#[derive(Clone, Debug)]
pub struct EncoderView<S> {
    pub encoder: SemanticEncoder<S>,
    pub mode: AttentionMode,
    pub lora: Option<EncoderLora<S>>,
}

impl<S: Real> EncoderView<S> {
    pub fn encode(&self, a: &AcousticTokens) -> Result<SemanticHidden<S>> {
        self.encoder.encode(a, self.mode, self.lora.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct ConversionModel<S> {
    pub cfg: ExperimentConfig,
    pub encoder: SemanticEncoder<S>,
    pub backbone: Backbone<S>,
    pub stream: TaskParams<S>,
    pub nonstream: Option<NonStreamParams<S>>,
}

/// Task parameters of one mode, without the encoder.
pub struct SharedPath<'a, S> {
    pub connector: &'a Connector<S>,
    pub backbone: &'a Backbone<S>,
    pub lora: Option<&'a BackboneLora<S>>,
}

/// Borrowed view of everything one inference mode uses.
pub struct ModePath<'a, S> {
    pub view: EncoderView<S>,
    pub connector: &'a Connector<S>,
    pub backbone: &'a Backbone<S>,
    pub lora: Option<&'a BackboneLora<S>>,
}

impl<S: Real> ModePath<'_, S> {
    /// Connector output `s_e` for an acoustic stream.
    pub fn semantic_embeddings(&self, a: &AcousticTokens) -> Result<Mat<S>> {
        let h = self.view.encode(a)?;
        let (out, _) = self.connector.connect(&h.states, &h.logits, &self.backbone.sem_emb.table.value)?;
        Ok(out.embeddings)
    }
}

impl<S: Real> ConversionModel<S> {
    /// Freshly initialised model with the shapes `cfg` implies. `dual` adds
    /// offline-mode parameters.
    pub fn init<R: Rng + ?Sized>(cfg: &ExperimentConfig, dual: bool, rng: &mut R) -> Self {
        let encoder = SemanticEncoder::new(EncoderDims::from_config(cfg), rng);
        let backbone = Backbone::new(BackboneDims::from_config(cfg), rng);
        let task = |rng: &mut R| TaskParams {
            linear: extract_linear(&encoder, cfg.encoder.final_linear),
            connector: Connector::new(
                cfg.encoder.hidden,
                cfg.backbone.hidden,
                cfg.corpus.semantic_vocab,
                cfg.connector.residual_dim,
                !cfg.connector.reuse_backbone_table,
                rng,
            ),
            lora: Some(backbone.new_lora(cfg.lora.rank, cfg.lora.alpha, rng)),
            backbone: None,
        };
        let stream = task(rng);
        let nonstream = dual.then(|| NonStreamParams {
            encoder_lora: encoder.new_lora(cfg.lora.rank, cfg.lora.alpha, rng),
            task: task(rng),
        });
        Self {
            cfg: cfg.clone(),
            encoder,
            backbone,
            stream,
            nonstream,
        }
    }

    /// Like [`ConversionModel::path`] without building an encoder view.
    pub fn path_shared(&self, mode: ConversionMode) -> Result<SharedPath<'_, S>> {
        let task = self.task(mode)?;
        Ok(SharedPath {
            connector: &task.connector,
            backbone: task.backbone.as_ref().unwrap_or(&self.backbone),
            lora: task.lora.as_ref(),
        })
    }

    fn task(&self, mode: ConversionMode) -> Result<&TaskParams<S>> {
        match mode {
            ConversionMode::Stream => Ok(&self.stream),
            ConversionMode::NonStream => self
                .nonstream
                .as_ref()
                .map(|n| &n.task)
                .ok_or_else(|| crate::Error::Mode("offline parameters not trained (run extend-dual)".into())),
        }
    }

    pub fn path(&self, mode: ConversionMode) -> Result<ModePath<'_, S>> {
        let (task, attn, enc_lora) = match mode {
            ConversionMode::Stream => (&self.stream, AttentionMode::Causal, None),
            ConversionMode::NonStream => {
                let ns = self
                    .nonstream
                    .as_ref()
                    .ok_or_else(|| crate::Error::Mode("offline parameters not trained (run extend-dual)".into()))?;
                (&ns.task, AttentionMode::Bidirectional, Some(ns.encoder_lora.clone()))
            }
        };
        let mut encoder = self.encoder.clone();
        install_linear(&mut encoder, self.cfg.encoder.final_linear, &task.linear);
        Ok(ModePath {
            view: EncoderView {
                encoder,
                mode: attn,
                lora: enc_lora,
            },
            connector: &task.connector,
            backbone: task.backbone.as_ref().unwrap_or(&self.backbone),
            lora: task.lora.as_ref(),
        })
    }

    /// Offline conversion of a whole source utterance.
    pub fn convert<R: Rng + ?Sized>(
        &self,
        prompt: &AcousticTokens,
        source: &AcousticTokens,
        mode: ConversionMode,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Generation<S>> {
        let path = self.path(mode)?;
        path.convert(prompt, source, sampling, rng)
    }
}

impl<S: Real> ModePath<'_, S> {
    pub fn convert<R: Rng + ?Sized>(
        &self,
        prompt: &AcousticTokens,
        source: &AcousticTokens,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Generation<S>> {
        if prompt.frames() % 2 != 0 {
            return arg("prompt must hold two acoustic frames per semantic frame");
        }
        let prompt_e = if prompt.is_empty() {
            Mat::zeros(0, self.backbone.dims.hidden)
        } else {
            self.semantic_embeddings(prompt)?
        };
        let source_e = if source.is_empty() {
            Mat::zeros(0, self.backbone.dims.hidden)
        } else {
            self.semantic_embeddings(source)?
        };
        let mut g = self.backbone.generate(
            SemInput::Embeddings(&prompt_e),
            prompt,
            SemInput::Embeddings(&source_e),
            self.lora,
            sampling,
            rng,
        )?;
        if g.tokens.frames() > source.frames() {
            g.tokens = g.tokens.slice(0, source.frames());
            g.logits.truncate(source.frames());
        }
        Ok(g)
    }
}
