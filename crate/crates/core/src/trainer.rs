//! Training stages: backbone and encoder pre-training, refinement-pair
//! synthesis, fine-tuning (with optional self-refinement) and the offline
//! mode extension. Every stage is deterministic given its seed.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use streamconv_nn::optim::{clip_scale, grad_norm, AdamW, ExpDecay};
use streamconv_nn::{Mat, Module, Real};

use crate::backbone::{
    apply_semantic_mask, build_sequence, Backbone, BackboneDims, BackboneLora, InterleavedSequence, Sampling,
    SemInput, Targets,
};
use crate::config::{AttentionMode, ExperimentConfig};
use crate::connector::Connector;
use crate::corpus::{AcousticTokens, Corpus, SpeakerProfile, Utterance};
use crate::encoder::{encoder_loss, stack_targets, EncoderDims, EncoderGrads, EncoderLora, SemanticEncoder};
use crate::error::{arg, Error, Result};
use crate::loss::LossReport;
use crate::model::{extract_linear, install_linear, NonStreamParams, TaskParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    PretrainEncoder,
    RefinePairs,
    Finetune,
    EncoderLora,
    ExtendDual,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Append-only JSON-lines metrics sink; records are also kept in memory.
#[derive(Debug, Default)]
pub struct MetricsLog {
    file: Option<File>,
    records: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Some(file),
            records: Vec::new(),
        })
    }

    pub fn record(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Mean loss over the last `n` records of a stage.
    pub fn tail_mean(&self, stage: Stage, n: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.loss.total)
            .collect();
        let tail = &v[v.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// SHA-256 of every tensor's little-endian bytes, keyed by name.
pub fn param_digests<S: Real>(m: &dyn Module<S>, prefix: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    m.visit(prefix, &mut |name, p| {
        let mut bytes = Vec::with_capacity(p.numel() * S::BYTES);
        for v in p.value.data() {
            v.write_le(&mut bytes);
        }
        out.insert(name.to_string(), hex::encode(Sha256::digest(&bytes)));
    });
    out
}

/// Fails unless exactly the tensors outside `allowed` kept their digests.
pub fn check_frozen(before: &BTreeMap<String, String>, after: &BTreeMap<String, String>, allowed: &[String]) -> Result<()> {
    for (name, d) in before {
        if allowed.iter().any(|a| a == name) {
            continue;
        }
        match after.get(name) {
            Some(x) if x == d => {}
            Some(_) => return Err(Error::Invariant(format!("frozen tensor {name} changed"))),
            None => return Err(Error::Invariant(format!("frozen tensor {name} disappeared"))),
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct Schedule {
    steps: usize,
    lr: ExpDecay,
    batch: usize,
    clip: f64,
    weight_decay: f64,
}

impl Schedule {
    fn pretrain(cfg: &ExperimentConfig, steps: usize) -> Self {
        let t = &cfg.train;
        Self {
            steps,
            lr: ExpDecay {
                base_lr: t.pretrain_lr,
                gamma: t.lr_decay,
                period: t.pretrain_decay_period,
            },
            batch: t.batch_size,
            clip: t.grad_clip,
            weight_decay: t.weight_decay,
        }
    }

    fn finetune(cfg: &ExperimentConfig, steps: usize) -> Self {
        let t = &cfg.train;
        Self {
            steps,
            lr: ExpDecay {
                base_lr: t.finetune_lr,
                gamma: t.lr_decay,
                period: t.finetune_decay_period,
            },
            batch: t.batch_size,
            clip: t.grad_clip,
            weight_decay: t.weight_decay,
        }
    }
}

/// Utterance indices grouped by speaker, for prompt sampling.
struct SpeakerIndex {
    by_speaker: HashMap<u32, Vec<usize>>,
    speakers: Vec<u32>,
}

impl SpeakerIndex {
    fn new(corpus: &Corpus) -> Result<Self> {
        if corpus.utterances.is_empty() {
            return arg("training corpus is empty");
        }
        let mut by_speaker: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, u) in corpus.utterances.iter().enumerate() {
            by_speaker.entry(u.speaker.speaker_id).or_default().push(i);
        }
        let mut speakers: Vec<u32> = by_speaker.keys().copied().collect();
        speakers.sort_unstable();
        Ok(Self { by_speaker, speakers })
    }

    /// Another utterance of the same speaker when one exists.
    fn prompt_for<R: Rng + ?Sized>(&self, corpus: &Corpus, idx: usize, rng: &mut R) -> usize {
        let spk = corpus.utterances[idx].speaker.speaker_id;
        let pool = &self.by_speaker[&spk];
        if pool.len() < 2 {
            return idx;
        }
        loop {
            let j = *pool.choose(rng).expect("non-empty");
            if j != idx {
                return j;
            }
        }
    }

    fn any_of<R: Rng + ?Sized>(&self, speaker: u32, rng: &mut R) -> Option<usize> {
        self.by_speaker.get(&speaker)?.choose(rng).copied()
    }
}

fn prompt_crop(u: &Utterance, frames: usize) -> Utterance {
    u.crop(frames)
}

fn step_lr(opt: &mut AdamW, sched: &Schedule, step: usize, norm: f64) -> (f64, f64) {
    opt.begin_step();
    (sched.lr.lr(step), clip_scale(norm, sched.clip))
}

/// Pre-trains the language-model backbone on ground-truth semantic tokens.
pub fn pretrain_backbone(cfg: &ExperimentConfig, train: &Corpus, log: &mut MetricsLog) -> Result<Backbone<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xb4c0);
    let mut bb = Backbone::<f32>::new(BackboneDims::from_config(cfg), &mut rng);
    let sched = Schedule::pretrain(cfg, cfg.train.pretrain_steps);
    let index = SpeakerIndex::new(train)?;
    let mut opt = AdamW::new(sched.weight_decay);
    for step in 0..sched.steps {
        let mut seqs = Vec::with_capacity(sched.batch);
        let mut picks = Vec::with_capacity(sched.batch);
        for _ in 0..sched.batch {
            let i = rng.random_range(0..train.utterances.len());
            let u = &train.utterances[i];
            let p = prompt_crop(&train.utterances[index.prompt_for(train, i, &mut rng)], cfg.corpus.prompt_frames);
            let mut seq = build_sequence::<f32>(
                SemInput::Tokens(&p.semantic_tokens.codes),
                &p.acoustic_tokens,
                SemInput::Tokens(&u.semantic_tokens.codes),
                Some(&u.acoustic_tokens),
            )?;
            let span = ((cfg.backbone.mask_span_ratio * u.semantic_frames() as f64).round() as usize).max(1);
            apply_semantic_mask(&mut seq, cfg.backbone.mask_prob, span, &mut rng);
            seqs.push(seq);
            picks.push(i);
        }
        let refs: Vec<&InterleavedSequence<f32>> = seqs.iter().collect();
        let targets: Vec<Targets<'_, f32>> = picks
            .iter()
            .map(|&i| Targets {
                semantic: &train.utterances[i].semantic_tokens.codes,
                teacher: Some(&train.utterances[i].continuous_semantic.features),
            })
            .collect();
        bb.zero_grad();
        let (out, cache) = bb.forward(&refs, None)?;
        let (report, grads) = bb.loss(&out, &targets)?;
        bb.backward(&refs, &out, &cache, &grads, None);
        let norm = grad_norm(&[&bb as &dyn Module<f32>]);
        let (lr, scale) = step_lr(&mut opt, &sched, step, norm);
        opt.update(&mut bb, "backbone", lr, scale);
        log.record(StepRecord {
            stage: Stage::Pretrain,
            step,
            lr,
            grad_norm: norm,
            loss: report,
        })?;
    }
    Ok(bb)
}

/// Trains the causal semantic encoder with `L_Encoder` on acoustic tokens.
pub fn pretrain_encoder(cfg: &ExperimentConfig, train: &Corpus, log: &mut MetricsLog) -> Result<SemanticEncoder<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xe4c0);
    let mut enc = SemanticEncoder::<f32>::new(EncoderDims::from_config(cfg), &mut rng);
    let sched = Schedule::pretrain(cfg, cfg.train.encoder_steps);
    run_encoder_training(&mut enc, None, cfg.encoder.attention, train, sched, &mut rng, Stage::PretrainEncoder, log)?;
    Ok(enc)
}

/// Trains offline-mode encoder adapters (bidirectional attention) with the
/// base encoder frozen.
pub fn train_encoder_lora(
    cfg: &ExperimentConfig,
    encoder: &SemanticEncoder<f32>,
    train: &Corpus,
    log: &mut MetricsLog,
) -> Result<EncoderLora<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xd0a1);
    let mut enc = encoder.clone();
    enc.set_requires_grad(false);
    let mut lora = enc.new_lora(cfg.lora.rank, cfg.lora.alpha, &mut rng);
    let before = param_digests(&enc, "encoder");
    let sched = Schedule::finetune(cfg, cfg.train.dual_steps);
    run_encoder_training(
        &mut enc,
        Some(&mut lora),
        AttentionMode::Bidirectional,
        train,
        sched,
        &mut rng,
        Stage::EncoderLora,
        log,
    )?;
    check_frozen(&before, &param_digests(&enc, "encoder"), &[])?;
    Ok(lora)
}

#[allow(clippy::too_many_arguments)]
fn run_encoder_training(
    enc: &mut SemanticEncoder<f32>,
    mut lora: Option<&mut EncoderLora<f32>>,
    mode: AttentionMode,
    train: &Corpus,
    sched: Schedule,
    rng: &mut ChaCha8Rng,
    stage: Stage,
    log: &mut MetricsLog,
) -> Result<()> {
    if train.utterances.is_empty() {
        return arg("training corpus is empty");
    }
    let mut opt = AdamW::new(sched.weight_decay);
    for step in 0..sched.steps {
        let batch: Vec<&Utterance> = (0..sched.batch)
            .map(|_| &train.utterances[rng.random_range(0..train.utterances.len())])
            .collect();
        let inputs: Vec<&AcousticTokens> = batch.iter().map(|u| &u.acoustic_tokens).collect();
        let items: Vec<_> = batch.iter().map(|u| (&u.semantic_tokens, &u.continuous_semantic)).collect();
        let (tokens, teacher) = stack_targets::<f32>(&items);
        enc.zero_grad();
        if let Some(l) = lora.as_deref_mut() {
            l.zero_grad();
        }
        let (h, cache) = enc.forward(&inputs, mode, lora.as_deref())?;
        let (report, grads) = encoder_loss(&h, &tokens, &teacher)?;
        enc.backward(&cache, &grads, lora.as_deref_mut());
        let mut mods: Vec<&dyn Module<f32>> = vec![&*enc];
        if let Some(l) = lora.as_deref() {
            mods.push(l);
        }
        let norm = grad_norm(&mods);
        let (lr, scale) = step_lr(&mut opt, &sched, step, norm);
        opt.update(enc, "encoder", lr, scale);
        if let Some(l) = lora.as_deref_mut() {
            opt.update(l, "encoder-lora", lr, scale);
        }
        log.record(StepRecord {
            stage,
            step,
            lr,
            grad_norm: norm,
            loss: report,
        })?;
    }
    Ok(())
}

/// A synthetic utterance: the content of `source` rendered by the
/// pre-trained backbone in the voice of `target_speaker`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementPair {
    /// Index into the training corpus.
    pub source: usize,
    pub target_speaker: SpeakerProfile,
    pub synthetic: AcousticTokens,
}

/// Greedy conversion of `count` training utterances towards a different
/// training speaker, prompted with ground-truth tokens.
pub fn build_refinement_pairs(
    cfg: &ExperimentConfig,
    backbone: &Backbone<f32>,
    train: &Corpus,
    count: usize,
    seed: u64,
) -> Result<Vec<RefinementPair>> {
    let index = SpeakerIndex::new(train)?;
    if index.speakers.len() < 2 {
        return arg("refinement pairs need at least two training speakers");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let source = rng.random_range(0..train.utterances.len());
        let u = &train.utterances[source];
        let target = loop {
            let s = *index.speakers.choose(&mut rng).expect("speakers");
            if s != u.speaker.speaker_id {
                break s;
            }
        };
        let p = prompt_crop(
            &train.utterances[index.any_of(target, &mut rng).expect("speaker has utterances")],
            cfg.corpus.prompt_frames,
        );
        let g = backbone.generate(
            SemInput::Tokens(&p.semantic_tokens.codes),
            &p.acoustic_tokens,
            SemInput::Tokens(&u.semantic_tokens.codes),
            None,
            Sampling::Greedy,
            &mut rng,
        )?;
        pairs.push(RefinementPair {
            source,
            target_speaker: SpeakerProfile::new(target),
            synthetic: g.tokens,
        });
    }
    Ok(pairs)
}

/// How the backbone is adapted during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneTuning {
    Lora,
    Frozen,
    Full,
}

impl std::str::FromStr for BackboneTuning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Self::Lora),
            "frozen" => Ok(Self::Frozen),
            "trainable" | "full" => Ok(Self::Full),
            other => arg(format!("unknown backbone tuning {other:?} (lora | frozen | trainable)")),
        }
    }
}

/// Inputs that stay fixed during one fine-tuning run.
pub struct FinetuneSetup<'a> {
    pub encoder: &'a SemanticEncoder<f32>,
    /// Frozen encoder adapters (offline mode only).
    pub encoder_lora: Option<&'a EncoderLora<f32>>,
    pub mode: AttentionMode,
    pub backbone: &'a Backbone<f32>,
    pub train: &'a Corpus,
    pub pairs: &'a [RefinementPair],
    pub tuning: BackboneTuning,
    pub self_refine_prob: f64,
    pub steps: usize,
    pub stage: Stage,
}

/// One fine-tuning example before encoding.
struct Sample<'a> {
    utterance: &'a Utterance,
    input: &'a AcousticTokens,
    prompt: Utterance,
    target: &'a AcousticTokens,
}

fn draw_sample<'a, R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    s: &FinetuneSetup<'a>,
    index: &SpeakerIndex,
    rng: &mut R,
) -> Sample<'a> {
    let train = s.train;
    if s.self_refine_prob > 0.0 && rng.random_bool(s.self_refine_prob.min(1.0)) {
        let pair = s.pairs.choose(rng).expect("pairs checked non-empty");
        let u = &train.utterances[pair.source];
        if rng.random_bool(0.5) {
            // synthetic input, original target
            let prompt = prompt_crop(&train.utterances[index.prompt_for(train, pair.source, rng)], cfg.corpus.prompt_frames);
            Sample {
                utterance: u,
                input: &pair.synthetic,
                prompt,
                target: &u.acoustic_tokens,
            }
        } else {
            // original input, synthetic target in the other voice
            let p = index
                .any_of(pair.target_speaker.speaker_id, rng)
                .expect("pair speaker is in the training corpus");
            Sample {
                utterance: u,
                input: &u.acoustic_tokens,
                prompt: prompt_crop(&train.utterances[p], cfg.corpus.prompt_frames),
                target: &pair.synthetic,
            }
        }
    } else {
        let i = rng.random_range(0..train.utterances.len());
        let u = &train.utterances[i];
        Sample {
            utterance: u,
            input: &u.acoustic_tokens,
            prompt: prompt_crop(&train.utterances[index.prompt_for(train, i, rng)], cfg.corpus.prompt_frames),
            target: &u.acoustic_tokens,
        }
    }
}

/// Mutable state of an end-to-end fine-tuning pass.
pub struct FinetuneModel<S> {
    pub encoder: SemanticEncoder<S>,
    pub encoder_lora: Option<EncoderLora<S>>,
    pub mode: AttentionMode,
    pub connector: Connector<S>,
    pub backbone: Backbone<S>,
    pub lora: Option<BackboneLora<S>>,
}

/// Acoustic inputs and targets of one training example.
pub struct Example<'a, S> {
    pub prompt: &'a AcousticTokens,
    pub input: &'a AcousticTokens,
    pub target: &'a AcousticTokens,
    pub semantic: &'a [u32],
    pub teacher: &'a Mat<S>,
}

impl<S: Real> FinetuneModel<S> {
    /// Forward, loss and backward of `L_Backbone` through backbone,
    /// connector and encoder. Gradients accumulate into trainable tensors.
    pub fn step(&mut self, batch: &[Example<'_, S>]) -> Result<LossReport> {
        let mut enc_inputs = Vec::with_capacity(2 * batch.len());
        for ex in batch {
            if ex.input.frames() != ex.target.frames() {
                return arg("input and target must have the same number of frames");
            }
            enc_inputs.push(ex.prompt);
            enc_inputs.push(ex.input);
        }
        let (h, ecache) = self.encoder.forward(&enc_inputs, self.mode, self.encoder_lora.as_ref())?;
        let (conn, ccache) = self
            .connector
            .connect(&h.states, &h.logits, &self.backbone.sem_emb.table.value)?;
        let mut seqs = Vec::with_capacity(batch.len());
        for (b, ex) in batch.iter().enumerate() {
            let (ps, pn) = h.segments[2 * b];
            let (ss, sn) = h.segments[2 * b + 1];
            let pe = conn.embeddings.slice_rows(ps, ps + pn);
            let se = conn.embeddings.slice_rows(ss, ss + sn);
            seqs.push(build_sequence(
                SemInput::Embeddings(&pe),
                ex.prompt,
                SemInput::Embeddings(&se),
                Some(ex.target),
            )?);
        }
        let refs: Vec<&InterleavedSequence<S>> = seqs.iter().collect();
        let targets: Vec<Targets<'_, S>> = batch
            .iter()
            .map(|ex| Targets {
                semantic: ex.semantic,
                teacher: Some(ex.teacher),
            })
            .collect();
        let (out, bcache) = self.backbone.forward(&refs, self.lora.as_ref())?;
        let (report, grads) = self.backbone.loss(&out, &targets)?;
        let drows = self.backbone.backward(&refs, &out, &bcache, &grads, self.lora.as_mut());
        let mut ds = Mat::zeros(0, conn.embeddings.cols());
        for d in &drows {
            ds.append_rows(d);
        }
        let (dstates, dlogits) = self.connector.backward(&ccache, &ds, &mut self.backbone.sem_emb.table);
        self.encoder.backward(
            &ecache,
            &EncoderGrads {
                logits: Some(dlogits),
                intermediate: Vec::new(),
                states: Some(dstates),
            },
            self.encoder_lora.as_mut(),
        );
        Ok(report)
    }

    fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.connector.zero_grad();
        self.backbone.zero_grad();
        if let Some(l) = &mut self.lora {
            l.zero_grad();
        }
    }

    fn modules(&self) -> Vec<&dyn Module<S>> {
        let mut m: Vec<&dyn Module<S>> = vec![&self.encoder, &self.connector, &self.backbone];
        if let Some(l) = &self.lora {
            m.push(l);
        }
        m
    }
}

/// Fine-tunes the task parameters (final encoder linear, connector and
/// backbone adapters) with `L_Backbone` only.
pub fn finetune(cfg: &ExperimentConfig, setup: &FinetuneSetup<'_>, log: &mut MetricsLog) -> Result<TaskParams<f32>> {
    if setup.self_refine_prob > 0.0 && setup.pairs.is_empty() {
        return arg("self-refinement requested without refinement pairs");
    }
    if !(0.0..=1.0).contains(&setup.self_refine_prob) {
        return arg("self_refine_prob must lie in [0, 1]");
    }
    let which = cfg.encoder.final_linear;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xf1e7 ^ ((setup.stage as u64) << 8));
    let mut encoder = setup.encoder.clone();
    encoder.set_requires_grad(false);
    let mut linear = extract_linear(setup.encoder, which);
    linear.set_requires_grad(true);
    install_linear(&mut encoder, which, &linear);
    let linear_names: Vec<String> = match which {
        crate::config::FinalLinear::Logits => linear.param_names().iter().map(|n| format!("encoder.head.{n}")).collect(),
        crate::config::FinalLinear::LastBlockOutput => linear
            .param_names()
            .iter()
            .map(|n| format!("encoder.blocks.{}.attn.wo.{n}", encoder.blocks.len() - 1))
            .collect(),
    };
    let mut backbone = setup.backbone.clone();
    backbone.set_requires_grad(setup.tuning == BackboneTuning::Full);
    let lora = (setup.tuning == BackboneTuning::Lora).then(|| backbone.new_lora(cfg.lora.rank, cfg.lora.alpha, &mut rng));
    let connector = Connector::new(
        encoder.dims.hidden,
        backbone.dims.hidden,
        backbone.dims.semantic_vocab,
        cfg.connector.residual_dim,
        !cfg.connector.reuse_backbone_table,
        &mut rng,
    );
    let mut model = FinetuneModel {
        encoder,
        encoder_lora: setup.encoder_lora.cloned().map(|mut l| {
            l.set_requires_grad(false);
            l
        }),
        mode: setup.mode,
        connector,
        backbone,
        lora,
    };
    let enc_before = param_digests(&model.encoder, "encoder");
    let bb_before = param_digests(&model.backbone, "backbone");
    let enc_lora_before = setup.encoder_lora.map(|l| param_digests(l, "encoder-lora"));

    let index = SpeakerIndex::new(setup.train)?;
    let sched = Schedule::finetune(cfg, setup.steps);
    let mut opt = AdamW::new(sched.weight_decay);
    for step in 0..sched.steps {
        let samples: Vec<Sample<'_>> = (0..sched.batch).map(|_| draw_sample(cfg, setup, &index, &mut rng)).collect();
        let batch: Vec<Example<'_, f32>> = samples
            .iter()
            .map(|s| Example {
                prompt: &s.prompt.acoustic_tokens,
                input: s.input,
                target: s.target,
                semantic: &s.utterance.semantic_tokens.codes,
                teacher: &s.utterance.continuous_semantic.features,
            })
            .collect();
        model.zero_grad();
        let report = model.step(&batch)?;
        let norm = grad_norm(&model.modules());
        let (lr, scale) = step_lr(&mut opt, &sched, step, norm);
        opt.update(&mut model.encoder, "encoder", lr, scale);
        opt.update(&mut model.connector, "connector", lr, scale);
        if setup.tuning == BackboneTuning::Full {
            opt.update(&mut model.backbone, "backbone", lr, scale);
        }
        if let Some(l) = &mut model.lora {
            opt.update(l, "backbone-lora", lr, scale);
        }
        log.record(StepRecord {
            stage: setup.stage,
            step,
            lr,
            grad_norm: norm,
            loss: report,
        })?;
    }

    check_frozen(&enc_before, &param_digests(&model.encoder, "encoder"), &linear_names)?;
    if setup.tuning != BackboneTuning::Full {
        check_frozen(&bb_before, &param_digests(&model.backbone, "backbone"), &[])?;
    }
    if let (Some(before), Some(l)) = (enc_lora_before, &model.encoder_lora) {
        check_frozen(&before, &param_digests(l, "encoder-lora"), &[])?;
    }
    Ok(TaskParams {
        linear: extract_linear(&model.encoder, which),
        connector: model.connector,
        lora: model.lora,
        backbone: (setup.tuning == BackboneTuning::Full).then_some(model.backbone),
    })
}

/// Adds offline-mode parameters: bidirectional encoder adapters, then a
/// second linear, connector and backbone adapter set. Streaming parameters
/// are not touched.
pub fn extend_dual_mode(
    cfg: &ExperimentConfig,
    encoder: &SemanticEncoder<f32>,
    backbone: &Backbone<f32>,
    train: &Corpus,
    pairs: &[RefinementPair],
    log: &mut MetricsLog,
) -> Result<NonStreamParams<f32>> {
    let encoder_lora = train_encoder_lora(cfg, encoder, train, log)?;
    let task = finetune(
        cfg,
        &FinetuneSetup {
            encoder,
            encoder_lora: Some(&encoder_lora),
            mode: AttentionMode::Bidirectional,
            backbone,
            train,
            pairs,
            tuning: BackboneTuning::Lora,
            self_refine_prob: cfg.train.self_refine_prob,
            steps: cfg.train.finetune_steps,
            stage: Stage::ExtendDual,
        },
        log,
    )?;
    Ok(NonStreamParams { encoder_lora, task })
}

#[cfg(test)]
mod tests {
    use super::*;
    use streamconv_nn::Param;

    #[test]
    fn frozen_check_flags_changes_outside_allowed() {
        let mut p = Param::<f32>::zeros(2, 2);
        let before = param_digests(&p, "w");
        p.value.set(0, 0, 1.0);
        let after = param_digests(&p, "w");
        assert!(matches!(check_frozen(&before, &after, &[]), Err(Error::Invariant(_))));
        assert!(check_frozen(&before, &after, &["w".to_string()]).is_ok());
    }

    #[test]
    fn metrics_log_appends_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        for step in 0..2 {
            let mut log = MetricsLog::append_to(&path).unwrap();
            log.record(StepRecord {
                stage: Stage::Finetune,
                step,
                lr: 1e-3,
                grad_norm: 0.5,
                loss: LossReport::new(Some(1.0), Some(2.0), None, None),
            })
            .unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].step, 1);
        assert_eq!(lines[0].loss.total, 3.0);
    }
}
