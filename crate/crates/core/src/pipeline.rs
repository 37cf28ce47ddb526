//! End-to-end training runs with reuse of pre-trained components across
//! runs that share them (ablations mostly vary fine-tuning).

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::config::{AttentionMode, ExperimentConfig};
use crate::corpus::Corpus;
use crate::encoder::SemanticEncoder;
use crate::error::Result;
use crate::model::ConversionModel;
use crate::trainer::{
    build_refinement_pairs, extend_dual_mode, finetune, pretrain_backbone, pretrain_encoder, BackboneTuning,
    FinetuneSetup, MetricsLog, RefinementPair, Stage,
};

/// Pre-trained backbone and the refinement pairs synthesised with it.
pub struct PretrainedBackbone {
    pub backbone: Backbone<f32>,
    pub pairs: Vec<RefinementPair>,
}

/// Training corpus plus a short tag naming it in cache keys and reports.
#[derive(Clone, Copy)]
pub struct TrainSet<'a> {
    pub tag: &'a str,
    pub corpus: &'a Corpus,
}

/// Memoises pre-training by (fingerprint, training settings, corpus).
#[derive(Default)]
pub struct Lab {
    backbones: HashMap<String, Arc<PretrainedBackbone>>,
    encoders: HashMap<String, Arc<SemanticEncoder<f32>>>,
    pub log: MetricsLog,
}

fn key<T: Serialize>(fp: &str, cfg: &ExperimentConfig, extra: &T, tag: &str) -> String {
    let json = serde_json::to_vec(&(fp, &cfg.train, &cfg.corpus, extra, tag)).expect("serializable");
    hex::encode(&Sha256::digest(&json)[..12])
}

impl Lab {
    pub fn new(log: MetricsLog) -> Self {
        Self {
            log,
            ..Self::default()
        }
    }

    pub fn backbone(&mut self, cfg: &ExperimentConfig, data: TrainSet<'_>) -> Result<Arc<PretrainedBackbone>> {
        let k = key(&cfg.backbone_fingerprint(), cfg, &(), data.tag);
        if let Some(b) = self.backbones.get(&k) {
            return Ok(b.clone());
        }
        let backbone = pretrain_backbone(cfg, data.corpus, &mut self.log)?;
        let pairs = build_refinement_pairs(cfg, &backbone, data.corpus, cfg.train.refine_pairs, cfg.train.seed ^ 0x9a1)?;
        let b = Arc::new(PretrainedBackbone { backbone, pairs });
        self.backbones.insert(k, b.clone());
        Ok(b)
    }

    pub fn encoder(&mut self, cfg: &ExperimentConfig, data: TrainSet<'_>) -> Result<Arc<SemanticEncoder<f32>>> {
        let k = key(&cfg.encoder_fingerprint(), cfg, &cfg.encoder.attention, data.tag);
        if let Some(e) = self.encoders.get(&k) {
            return Ok(e.clone());
        }
        let e = Arc::new(pretrain_encoder(cfg, data.corpus, &mut self.log)?);
        self.encoders.insert(k, e.clone());
        Ok(e)
    }

    /// Registers components trained elsewhere (e.g. loaded from a run
    /// directory) so runs that share them skip pre-training.
    pub fn seed(
        &mut self,
        cfg: &ExperimentConfig,
        tag: &str,
        backbone: Option<PretrainedBackbone>,
        encoder: Option<SemanticEncoder<f32>>,
    ) {
        if let Some(b) = backbone {
            let k = key(&cfg.backbone_fingerprint(), cfg, &(), tag);
            self.backbones.insert(k, Arc::new(b));
        }
        if let Some(e) = encoder {
            let k = key(&cfg.encoder_fingerprint(), cfg, &cfg.encoder.attention, tag);
            self.encoders.insert(k, Arc::new(e));
        }
    }

    /// Pre-trains what is missing, then fine-tunes streaming parameters and,
    /// when `dual` is set, the offline extension.
    pub fn train(
        &mut self,
        cfg: &ExperimentConfig,
        data: TrainSet<'_>,
        tuning: BackboneTuning,
        dual: bool,
    ) -> Result<ConversionModel<f32>> {
        let pre = self.backbone(cfg, data)?;
        let encoder = self.encoder(cfg, data)?;
        let stream = finetune(
            cfg,
            &FinetuneSetup {
                encoder: &encoder,
                encoder_lora: None,
                mode: AttentionMode::Causal,
                backbone: &pre.backbone,
                train: data.corpus,
                pairs: &pre.pairs,
                tuning,
                self_refine_prob: cfg.train.self_refine_prob,
                steps: cfg.train.finetune_steps,
                stage: Stage::Finetune,
            },
            &mut self.log,
        )?;
        let nonstream = if dual {
            Some(extend_dual_mode(cfg, &encoder, &pre.backbone, data.corpus, &pre.pairs, &mut self.log)?)
        } else {
            None
        };
        Ok(ConversionModel {
            cfg: cfg.clone(),
            encoder: (*encoder).clone(),
            backbone: pre.backbone.clone(),
            stream,
            nonstream,
        })
    }
}
