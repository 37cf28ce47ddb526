//! Causal LM over interleaved semantic/acoustic positions.
//!
//! Layout per semantic frame `t`: `[SEM(t), AC(2t), AC(2t+1)]`, prompt frames
//! first, then source frames. Frame `j` is predicted from the hidden state
//! of the position just before `AC(j)`: `SEM(t)` for `AC(2t)`, `AC(2t)` for
//! `AC(2t+1)`. A one-block predictor then decodes the frame's `L` codes in
//! order, each conditioned on the codes before it.
//!
//! Training objectives, all averaged and summed without weights:
//! * `L_a_ce`: CE over every code of every source frame;
//! * `L_s_ce`: at `SEM(t)`, CE of the next source token `s[t+1]`;
//! * `L_TF`: at `SEM(t)`, MSE between a projection of the hidden state and
//!   the mean of teacher rows `t+1 ..= t+F` that exist.

use rand::Rng;
use serde::{Deserialize, Serialize};
use streamconv_nn::loss::{cross_entropy, softmax_row, squared_error};
use streamconv_nn::{
    impl_module, AttnMask, BlockCache, Embedding, KvCache, Linear, Mat, Module, Param, QkvLora, Real, RmsNorm,
    Segment, TransformerBlock,
};

use crate::config::ExperimentConfig;
use crate::corpus::AcousticTokens;
use crate::encoder::argmax;
use crate::error::{arg, Error, Result};
use crate::loss::LossReport;

pub const POSITIONS_PER_FRAME: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub quantizers: usize,
    pub codec_vocab: usize,
    pub semantic_vocab: usize,
    pub sem_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    /// Prompt + source semantic frames.
    pub max_frames: usize,
    pub foresight_horizon: usize,
    pub foresight_loss: bool,
}

impl BackboneDims {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            quantizers: cfg.corpus.num_quantizers,
            codec_vocab: cfg.corpus.codec_vocab,
            semantic_vocab: cfg.corpus.semantic_vocab,
            sem_dim: cfg.corpus.sem_dim,
            layers: cfg.backbone.layers,
            heads: cfg.backbone.heads,
            hidden: cfg.backbone.hidden,
            intermediate: cfg.backbone.intermediate,
            max_frames: cfg.backbone.max_frames,
            foresight_horizon: cfg.backbone.foresight_horizon,
            foresight_loss: cfg.backbone.foresight_loss,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AcousticPredictor<S> {
    pub cond: Linear<S>,
    pub slot: Embedding<S>,
    /// `prev[l-1]` embeds the code already chosen on quantizer `l-1`.
    pub prev: Vec<Embedding<S>>,
    pub block: TransformerBlock<S>,
    pub norm: RmsNorm<S>,
    pub heads: Vec<Linear<S>>,
}

impl_module!(AcousticPredictor, cond, slot, prev, block, norm, heads);

#[derive(Clone, Debug)]
pub struct Backbone<S> {
    pub sem_emb: Embedding<S>,
    pub mask_emb: Param<S>,
    pub code_emb: Vec<Embedding<S>>,
    pub pos: Embedding<S>,
    /// `(section, kind)` tags: prompt/source x SEM/AC-even/AC-odd.
    pub slot: Embedding<S>,
    pub blocks: Vec<TransformerBlock<S>>,
    pub norm: RmsNorm<S>,
    pub sem_head: Linear<S>,
    pub tf_head: Linear<S>,
    pub predictor: AcousticPredictor<S>,
    pub dims: BackboneDims,
}

impl_module!(Backbone, sem_emb, mask_emb, code_emb, pos, slot, blocks, norm, sem_head, tf_head, predictor);

/// One adapter set per backbone layer (query/key/value only).
pub type BackboneLora<S> = Vec<QkvLora<S>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemSlot {
    Token(u32),
    /// Row of the sequence's `sem_rows` (connector output).
    Row(usize),
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Sem(usize),
    Ac(usize),
}

/// Semantic input for one section: discrete tokens (pre-training) or
/// continuous connector rows (fine-tuning and inference).
#[derive(Clone, Copy, Debug)]
pub enum SemInput<'a, S> {
    Tokens(&'a [u32]),
    Embeddings(&'a Mat<S>),
}

impl<S: Real> SemInput<'_, S> {
    pub fn len(&self) -> usize {
        match self {
            SemInput::Tokens(t) => t.len(),
            SemInput::Embeddings(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedSequence<S> {
    pub prompt_frames: usize,
    pub sem: Vec<SemSlot>,
    pub sem_rows: Mat<S>,
    /// Known acoustic frames, `frames x L`, prompt first.
    pub codes: Vec<u32>,
    pub quantizers: usize,
}

impl<S: Real> InterleavedSequence<S> {
    pub fn semantic_frames(&self) -> usize {
        self.sem.len()
    }

    pub fn source_frames(&self) -> usize {
        self.sem.len() - self.prompt_frames
    }

    pub fn acoustic_frames(&self) -> usize {
        self.codes.len() / self.quantizers
    }

    /// Positions covered by the known inputs.
    pub fn len(&self) -> usize {
        POSITIONS_PER_FRAME * self.sem.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sem.is_empty()
    }

    pub fn kind(&self, p: usize) -> Kind {
        match p % POSITIONS_PER_FRAME {
            0 => Kind::Sem(p / POSITIONS_PER_FRAME),
            r => Kind::Ac(2 * (p / POSITIONS_PER_FRAME) + r - 1),
        }
    }

    pub fn is_prompt(&self, p: usize) -> bool {
        p / POSITIONS_PER_FRAME < self.prompt_frames
    }

    pub fn frame(&self, j: usize) -> &[u32] {
        &self.codes[j * self.quantizers..(j + 1) * self.quantizers]
    }
}

/// Position of acoustic frame `j`.
pub fn ac_position(j: usize) -> usize {
    POSITIONS_PER_FRAME * (j / 2) + 1 + j % 2
}

/// Lays out `{prompt, source}` as one interleaved sequence. `source_ac` may
/// be absent (generation), otherwise it must hold two frames per source
/// semantic frame.
pub fn build_sequence<S: Real>(
    prompt_sem: SemInput<'_, S>,
    prompt_ac: &AcousticTokens,
    source_sem: SemInput<'_, S>,
    source_ac: Option<&AcousticTokens>,
) -> Result<InterleavedSequence<S>> {
    if prompt_ac.frames() != 2 * prompt_sem.len() {
        return arg(format!(
            "prompt has {} semantic frames but {} acoustic frames",
            prompt_sem.len(),
            prompt_ac.frames()
        ));
    }
    let quantizers = prompt_ac.quantizers();
    let mut codes = prompt_ac.codes().to_vec();
    if let Some(src) = source_ac {
        if src.frames() != 2 * source_sem.len() {
            return arg(format!(
                "source has {} semantic frames but {} acoustic frames",
                source_sem.len(),
                src.frames()
            ));
        }
        if src.quantizers() != quantizers {
            return arg("prompt and source disagree on quantizer count");
        }
        codes.extend_from_slice(src.codes());
    }
    let width = match (prompt_sem, source_sem) {
        (SemInput::Embeddings(m), _) | (_, SemInput::Embeddings(m)) => m.cols(),
        _ => 0,
    };
    let mut sem_rows = Mat::zeros(0, width);
    let mut sem = Vec::with_capacity(prompt_sem.len() + source_sem.len());
    for input in [prompt_sem, source_sem] {
        match input {
            SemInput::Tokens(t) => sem.extend(t.iter().map(|&c| SemSlot::Token(c))),
            SemInput::Embeddings(m) => {
                if m.cols() != width {
                    return arg("prompt and source embeddings differ in width");
                }
                for r in 0..m.rows() {
                    sem.push(SemSlot::Row(sem_rows.rows()));
                    sem_rows.push_row(m.row(r));
                }
            }
        }
    }
    Ok(InterleavedSequence {
        prompt_frames: prompt_sem.len(),
        sem,
        sem_rows,
        codes,
        quantizers,
    })
}

/// With probability `prob`, masks `span` consecutive source semantic slots
/// (clipped to the source length) at a uniform start. Targets are untouched.
pub fn apply_semantic_mask<S: Real, R: Rng + ?Sized>(seq: &mut InterleavedSequence<S>, prob: f64, span: usize, rng: &mut R) {
    let src = seq.source_frames();
    if src == 0 || span == 0 || prob <= 0.0 || !rng.random_bool(prob.min(1.0)) {
        return;
    }
    let len = span.min(src);
    let start = seq.prompt_frames + rng.random_range(0..=src - len);
    for slot in &mut seq.sem[start..start + len] {
        *slot = SemSlot::Mask;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

impl Sampling {
    pub fn pick<S: Real, R: Rng + ?Sized>(&self, logits: &[S], rng: &mut R) -> u32 {
        match *self {
            Sampling::Greedy => argmax(logits) as u32,
            Sampling::TopK { k, temperature } => {
                let mut idx: Vec<usize> = (0..logits.len()).collect();
                idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
                idx.truncate(k.max(1));
                let t = temperature.max(1e-6);
                let scaled: Vec<f64> = idx.iter().map(|&i| logits[i].as_f64() / t).collect();
                let mut probs = vec![0.0; scaled.len()];
                softmax_row(&scaled, &mut probs);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (p, &i) in probs.iter().zip(&idx) {
                    acc += p;
                    if u < acc {
                        return i as u32;
                    }
                }
                *idx.last().expect("k >= 1") as u32
            }
        }
    }
}

/// Forward results over a batch of sequences.
#[derive(Clone, Debug)]
pub struct BackboneOutput<S> {
    /// Final-norm hidden state of every position, sequences packed.
    pub hidden: Mat<S>,
    pub segments: Vec<Segment>,
    /// One matrix per quantizer; row `i` belongs to `ac_frames[i]`.
    pub ac_logits: Vec<Mat<S>>,
    /// `(sequence, frame)` of each predicted acoustic frame (source only).
    pub ac_frames: Vec<(usize, usize)>,
    /// Teacher-forced codes of those frames, `frames x L`.
    pub ac_targets: Vec<u32>,
    pub sem_logits: Mat<S>,
    pub foresight: Mat<S>,
    /// `(sequence, source frame t)` of each semantic prediction row.
    pub sem_rows: Vec<(usize, usize)>,
}

pub struct BackboneCache<S> {
    blocks: Vec<BlockCache<S>>,
    pre_norm: Mat<S>,
    inv: Vec<S>,
    sem_pos: Vec<usize>,
    ac_cond: Vec<usize>,
    ac_codes: Vec<u32>,
    pred: PredictorCache<S>,
    /// Per position: which input fed it.
    inputs: Vec<InputRef>,
}

struct PredictorCache<S> {
    cond_in: Mat<S>,
    block: Option<BlockCache<S>>,
    pre_norm: Mat<S>,
    inv: Vec<S>,
    normed: Mat<S>,
    segments: Vec<Segment>,
}

#[derive(Clone, Copy)]
enum InputRef {
    Token(u32),
    Row(usize, usize),
    Mask,
    Frame(usize, usize),
}

/// Gradients arriving at forward outputs.
pub struct OutputGrads<S> {
    pub ac_logits: Vec<Mat<S>>,
    pub sem_logits: Mat<S>,
    pub foresight: Mat<S>,
}

/// Per-sequence targets for the source section.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a, S> {
    pub semantic: &'a [u32],
    pub teacher: Option<&'a Mat<S>>,
}

#[derive(Clone, Debug)]
pub struct DecodeState<S> {
    kv: Vec<KvCache<S>>,
    positions: usize,
    prompt_frames: usize,
}

impl<S> DecodeState<S> {
    pub fn positions(&self) -> usize {
        self.positions
    }
}

/// One decoded acoustic frame.
#[derive(Clone, Debug)]
pub struct FramePrediction<S> {
    pub codes: Vec<u32>,
    /// `L x codec_vocab`.
    pub logits: Mat<S>,
}

impl<S: Real> AcousticPredictor<S> {
    fn input_row(&self, cond: &[S], l: usize, prev: Option<u32>, out: &mut [S]) {
        let slot = self.slot.row(l);
        match prev {
            Some(c) => {
                let p = self.prev[l - 1].row(c as usize);
                for (((o, a), b), e) in out.iter_mut().zip(cond).zip(slot).zip(p) {
                    *o = *a + *b + *e;
                }
            }
            None => {
                for ((o, a), b) in out.iter_mut().zip(cond).zip(slot) {
                    *o = *a + *b;
                }
            }
        }
    }
}

impl<S: Real> Backbone<S> {
    pub fn new<R: Rng + ?Sized>(dims: BackboneDims, rng: &mut R) -> Self {
        let d = dims.hidden;
        let l = dims.quantizers;
        let predictor = AcousticPredictor {
            cond: Linear::init(d, d, true, rng),
            slot: Embedding::new(l, d, 0.5, rng),
            prev: (1..l).map(|_| Embedding::new(dims.codec_vocab, d, 1.0, rng)).collect(),
            block: TransformerBlock::new(d, dims.heads, dims.intermediate, 1, rng),
            norm: RmsNorm::new(d),
            heads: (0..l).map(|_| Linear::init(d, dims.codec_vocab, true, rng)).collect(),
        };
        Self {
            sem_emb: Embedding::new(dims.semantic_vocab, d, 1.0, rng),
            mask_emb: Param::normal(1, d, 1.0, rng),
            code_emb: (0..l).map(|_| Embedding::new(dims.codec_vocab, d, 1.0 / (l as f64).sqrt(), rng)).collect(),
            pos: Embedding::new(POSITIONS_PER_FRAME * dims.max_frames, d, 0.5, rng),
            slot: Embedding::new(6, d, 0.5, rng),
            blocks: (0..dims.layers)
                .map(|_| TransformerBlock::new(d, dims.heads, dims.intermediate, dims.layers, rng))
                .collect(),
            norm: RmsNorm::new(d),
            sem_head: Linear::init(d, dims.semantic_vocab, true, rng),
            tf_head: Linear::init(d, dims.sem_dim, true, rng),
            predictor,
            dims,
        }
    }

    pub fn new_lora<R: Rng + ?Sized>(&self, rank: usize, alpha: f64, rng: &mut R) -> BackboneLora<S> {
        (0..self.dims.layers)
            .map(|_| QkvLora::new(self.dims.hidden, rank, alpha, rng))
            .collect()
    }

    /// Copy with every adapter folded into its base projection.
    pub fn merged(&self, lora: &BackboneLora<S>) -> Self {
        let mut out = self.clone();
        for (b, l) in out.blocks.iter_mut().zip(lora) {
            b.attn.wq = l.q.merge_into(&b.attn.wq);
            b.attn.wk = l.k.merge_into(&b.attn.wk);
            b.attn.wv = l.v.merge_into(&b.attn.wv);
        }
        out
    }

    /// Trainable scalars in one adapter set: `3 * layers * 2 * hidden * rank`.
    pub fn lora_param_count(layers: usize, hidden: usize, rank: usize) -> usize {
        3 * layers * 2 * hidden * rank
    }

    fn slot_id(prompt: bool, kind: Kind) -> usize {
        let section = if prompt { 0 } else { 3 };
        section
            + match kind {
                Kind::Sem(_) => 0,
                Kind::Ac(j) => 1 + j % 2,
            }
    }

    fn finish_row(&self, content: &[S], p: usize, slot: usize, out: &mut [S]) {
        for (((o, c), q), s) in out.iter_mut().zip(content).zip(self.pos.row(p)).zip(self.slot.row(slot)) {
            *o = *c + *q + *s;
        }
    }

    fn frame_content(&self, codes: &[u32]) -> Vec<S> {
        let mut acc = vec![S::zero(); self.dims.hidden];
        for (l, table) in self.code_emb.iter().enumerate() {
            for (a, v) in acc.iter_mut().zip(table.row(codes[l] as usize)) {
                *a += *v;
            }
        }
        acc
    }

    fn check_seq(&self, seq: &InterleavedSequence<S>, full: bool) -> Result<()> {
        if seq.is_empty() {
            return arg("empty interleaved sequence");
        }
        if seq.sem.len() > self.dims.max_frames {
            return arg(format!(
                "{} semantic frames exceed the backbone's {}",
                seq.sem.len(),
                self.dims.max_frames
            ));
        }
        if seq.quantizers != self.dims.quantizers {
            return arg("sequence quantizer count does not match the backbone");
        }
        if full && seq.acoustic_frames() != 2 * seq.sem.len() {
            return arg("teacher-forced forward needs every acoustic frame");
        }
        if seq.codes.iter().any(|&c| c as usize >= self.dims.codec_vocab) {
            return arg("acoustic code outside the codec vocabulary");
        }
        for s in &seq.sem {
            match *s {
                SemSlot::Token(c) if c as usize >= self.dims.semantic_vocab => {
                    return arg("semantic token outside the vocabulary");
                }
                SemSlot::Row(r) if r >= seq.sem_rows.rows() || seq.sem_rows.cols() != self.dims.hidden => {
                    return arg("semantic embedding rows do not match the backbone width");
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Teacher-forced pass over complete sequences.
    pub fn forward(
        &self,
        seqs: &[&InterleavedSequence<S>],
        lora: Option<&BackboneLora<S>>,
    ) -> Result<(BackboneOutput<S>, BackboneCache<S>)> {
        let d = self.dims.hidden;
        let mut segments = Vec::with_capacity(seqs.len());
        let mut inputs = Vec::new();
        let mut sem_pos = Vec::new();
        let mut sem_rows = Vec::new();
        let mut ac_cond = Vec::new();
        let mut ac_codes = Vec::new();
        let mut ac_frames = Vec::new();
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        let mut x = Mat::zeros(total, d);
        let mut row = 0;
        for (si, seq) in seqs.iter().enumerate() {
            self.check_seq(seq, true)?;
            segments.push((row, seq.len()));
            for p in 0..seq.len() {
                let kind = seq.kind(p);
                let slot = Self::slot_id(seq.is_prompt(p), kind);
                match kind {
                    Kind::Sem(t) => {
                        let (content, r): (Vec<S>, InputRef) = match seq.sem[t] {
                            SemSlot::Token(c) => (self.sem_emb.row(c as usize).to_vec(), InputRef::Token(c)),
                            SemSlot::Row(i) => (seq.sem_rows.row(i).to_vec(), InputRef::Row(si, i)),
                            SemSlot::Mask => (self.mask_emb.value.row(0).to_vec(), InputRef::Mask),
                        };
                        self.finish_row(&content, p, slot, x.row_mut(row + p));
                        inputs.push(r);
                        let src = t.checked_sub(seq.prompt_frames);
                        if let Some(ts) = src {
                            if ts + 1 < seq.source_frames() {
                                sem_pos.push(row + p);
                                sem_rows.push((si, ts));
                            }
                        }
                    }
                    Kind::Ac(j) => {
                        let content = self.frame_content(seq.frame(j));
                        self.finish_row(&content, p, slot, x.row_mut(row + p));
                        inputs.push(InputRef::Frame(si, j));
                        if j >= 2 * seq.prompt_frames {
                            ac_cond.push(row + p - 1);
                            ac_codes.extend_from_slice(seq.frame(j));
                            ac_frames.push((si, j));
                        }
                    }
                }
            }
            row += seq.len();
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, c) = b.forward(&h, &segments, AttnMask::Causal, lora.map(|a| &a[i]));
            blocks.push(c);
            h = y;
        }
        let (hidden, inv) = self.norm.forward(&h);
        let sem_in = hidden.select_rows(&sem_pos);
        let sem_logits = self.sem_head.forward(&sem_in);
        let foresight = self.tf_head.forward(&sem_in);
        let (ac_logits, pred) = self.predict_batch(&hidden.select_rows(&ac_cond), &ac_codes);
        let out = BackboneOutput {
            hidden,
            segments,
            ac_logits,
            ac_frames,
            ac_targets: ac_codes.clone(),
            sem_logits,
            foresight,
            sem_rows,
        };
        let cache = BackboneCache {
            blocks,
            pre_norm: h,
            inv,
            sem_pos,
            ac_cond,
            ac_codes,
            pred,
            inputs,
        };
        Ok((out, cache))
    }

    fn predict_batch(&self, cond_in: &Mat<S>, codes: &[u32]) -> (Vec<Mat<S>>, PredictorCache<S>) {
        let pr = &self.predictor;
        let l = self.dims.quantizers;
        let d = self.dims.hidden;
        let n = cond_in.rows();
        let cond = pr.cond.forward(cond_in);
        let mut x = Mat::zeros(n * l, d);
        for f in 0..n {
            for q in 0..l {
                let prev = (q > 0).then(|| codes[f * l + q - 1]);
                pr.input_row(cond.row(f), q, prev, x.row_mut(f * l + q));
            }
        }
        let segments: Vec<Segment> = (0..n).map(|f| (f * l, l)).collect();
        let (y, block) = if n > 0 {
            let (y, c) = pr.block.forward(&x, &segments, AttnMask::Causal, None);
            (y, Some(c))
        } else {
            (x, None)
        };
        let (normed, inv) = pr.norm.forward(&y);
        let logits = (0..l)
            .map(|q| {
                let idx: Vec<usize> = (0..n).map(|f| f * l + q).collect();
                pr.heads[q].forward(&normed.select_rows(&idx))
            })
            .collect();
        (
            logits,
            PredictorCache {
                cond_in: cond_in.clone(),
                block,
                pre_norm: y,
                inv,
                normed,
                segments,
            },
        )
    }

    /// Losses against `targets` (one per sequence, same order as forward).
    pub fn loss(&self, out: &BackboneOutput<S>, targets: &[Targets<'_, S>]) -> Result<(LossReport, OutputGrads<S>)> {
        let l = self.dims.quantizers;
        let nf = out.ac_frames.len();
        let mut a_ce = S::zero();
        let mut dac = Vec::with_capacity(l);
        for q in 0..l {
            let tgt: Vec<usize> = (0..nf).map(|f| out.ac_targets[f * l + q] as usize).collect();
            let w = S::of(1.0 / (nf * l).max(1) as f64);
            let (v, g) = cross_entropy(&out.ac_logits[q], &tgt, w);
            a_ce += v;
            dac.push(g);
        }
        let ns = out.sem_rows.len();
        let mut sem_t = Vec::with_capacity(ns);
        let mut teacher = Mat::zeros(ns, self.dims.sem_dim);
        for (r, &(si, t)) in out.sem_rows.iter().enumerate() {
            let tg = targets
                .get(si)
                .ok_or_else(|| Error::Argument("missing targets for a sequence".into()))?;
            let next = *tg
                .semantic
                .get(t + 1)
                .ok_or_else(|| Error::Argument("semantic targets shorter than the source".into()))?;
            if next as usize >= self.dims.semantic_vocab {
                return arg("semantic target outside the vocabulary");
            }
            sem_t.push(next as usize);
            if self.dims.foresight_loss {
                let tm = tg
                    .teacher
                    .ok_or_else(|| Error::Argument("teacher features required for the foresight loss".into()))?;
                let src = tg.semantic.len();
                if tm.rows() != src || tm.cols() != self.dims.sem_dim {
                    return arg("teacher features misaligned with the source");
                }
                let last = (t + self.dims.foresight_horizon).min(src - 1);
                let k = S::of(1.0 / (last - t) as f64);
                let dst = teacher.row_mut(r);
                for u in t + 1..=last {
                    for (o, v) in dst.iter_mut().zip(tm.row(u)) {
                        *o += *v * k;
                    }
                }
            }
        }
        let (s_ce, dsem) = cross_entropy(&out.sem_logits, &sem_t, S::of(1.0 / ns.max(1) as f64));
        let (tf, dtf) = if self.dims.foresight_loss {
            let w = S::of(1.0 / (ns * self.dims.sem_dim).max(1) as f64);
            let (v, g) = squared_error(&out.foresight, &teacher, w);
            (Some(v.as_f64()), g)
        } else {
            (None, Mat::zeros(ns, self.dims.sem_dim))
        };
        let report = LossReport::new(Some(s_ce.as_f64()), Some(a_ce.as_f64()), tf, None);
        Ok((
            report,
            OutputGrads {
                ac_logits: dac,
                sem_logits: dsem,
                foresight: dtf,
            },
        ))
    }

    /// Accumulates parameter (and adapter) gradients. Returns, per sequence,
    /// the gradient with respect to its `sem_rows`.
    pub fn backward(
        &mut self,
        seqs: &[&InterleavedSequence<S>],
        out: &BackboneOutput<S>,
        cache: &BackboneCache<S>,
        grads: &OutputGrads<S>,
        mut lora: Option<&mut BackboneLora<S>>,
    ) -> Vec<Mat<S>> {
        let d = self.dims.hidden;
        let l = self.dims.quantizers;
        let mut dh = Mat::zeros(out.hidden.rows(), d);
        // semantic heads
        let sem_in = out.hidden.select_rows(&cache.sem_pos);
        let mut dsem = self.sem_head.backward(&sem_in, &grads.sem_logits, true).expect("dx");
        dsem.add_assign(&self.tf_head.backward(&sem_in, &grads.foresight, true).expect("dx"));
        dh.scatter_add_rows(&cache.sem_pos, &dsem);
        // predictor
        let nf = cache.ac_cond.len();
        if nf > 0 {
            let pc = &cache.pred;
            let pr = &mut self.predictor;
            let mut dnormed = Mat::zeros(nf * l, d);
            for q in 0..l {
                let idx: Vec<usize> = (0..nf).map(|f| f * l + q).collect();
                let rows = pc.normed.select_rows(&idx);
                let g = pr.heads[q].backward(&rows, &grads.ac_logits[q], true).expect("dx");
                dnormed.scatter_add_rows(&idx, &g);
            }
            let dy = pr.norm.backward(&pc.pre_norm, &pc.inv, &dnormed);
            let dx = pr
                .block
                .backward(pc.block.as_ref().expect("frames present"), &dy, &pc.segments, AttnMask::Causal, None);
            let mut dcond = Mat::zeros(nf, d);
            let mut slot_ids = Vec::with_capacity(nf * l);
            for f in 0..nf {
                for q in 0..l {
                    slot_ids.push(q);
                    let g = dx.row(f * l + q);
                    for (a, b) in dcond.row_mut(f).iter_mut().zip(g) {
                        *a += *b;
                    }
                }
            }
            pr.slot.backward(&slot_ids, &dx);
            for q in 1..l {
                let idx: Vec<usize> = (0..nf).map(|f| f * l + q).collect();
                let ids: Vec<usize> = (0..nf).map(|f| cache.ac_codes[f * l + q - 1] as usize).collect();
                pr.prev[q - 1].backward(&ids, &dx.select_rows(&idx));
            }
            let dcin = pr.cond.backward(&pc.cond_in, &dcond, true).expect("dx");
            dh.scatter_add_rows(&cache.ac_cond, &dcin);
        }
        let mut dx = self.norm.backward(&cache.pre_norm, &cache.inv, &dh);
        for i in (0..self.blocks.len()).rev() {
            let a = lora.as_deref_mut().map(|a| &mut a[i]);
            dx = self.blocks[i].backward(&cache.blocks[i], &dx, &out.segments, AttnMask::Causal, a);
        }
        // inputs
        let positions: Vec<usize> = out
            .segments
            .iter()
            .flat_map(|&(_, len)| 0..len)
            .collect();
        self.pos.backward(&positions, &dx);
        let mut slot_ids = Vec::with_capacity(dx.rows());
        for (si, seq) in seqs.iter().enumerate() {
            for p in 0..out.segments[si].1 {
                slot_ids.push(Self::slot_id(seq.is_prompt(p), seq.kind(p)));
            }
        }
        self.slot.backward(&slot_ids, &dx);
        let mut drows: Vec<Mat<S>> = seqs.iter().map(|s| Mat::zeros(s.sem_rows.rows(), d)).collect();
        let mut tok_ids = Vec::new();
        let mut tok_rows = Vec::new();
        let mut frame_rows: Vec<Vec<usize>> = vec![Vec::new(); l];
        let mut frame_ids: Vec<Vec<usize>> = vec![Vec::new(); l];
        for (r, inp) in cache.inputs.iter().enumerate() {
            match *inp {
                InputRef::Token(c) => {
                    tok_ids.push(c as usize);
                    tok_rows.push(r);
                }
                InputRef::Row(si, i) => {
                    for (a, b) in drows[si].row_mut(i).iter_mut().zip(dx.row(r)) {
                        *a += *b;
                    }
                }
                InputRef::Mask => {
                    if self.mask_emb.requires_grad {
                        for (a, b) in self.mask_emb.grad.row_mut(0).iter_mut().zip(dx.row(r)) {
                            *a += *b;
                        }
                    }
                }
                InputRef::Frame(si, j) => {
                    let codes = seqs[si].frame(j);
                    for q in 0..l {
                        frame_rows[q].push(r);
                        frame_ids[q].push(codes[q] as usize);
                    }
                }
            }
        }
        self.sem_emb.backward(&tok_ids, &dx.select_rows(&tok_rows));
        for q in 0..l {
            self.code_emb[q].backward(&frame_ids[q], &dx.select_rows(&frame_rows[q]));
        }
        drows
    }

    // ---- incremental decoding ----

    pub fn start(&self) -> DecodeState<S> {
        DecodeState {
            kv: (0..self.blocks.len()).map(|_| KvCache::new(self.dims.hidden)).collect(),
            positions: 0,
            prompt_frames: 0,
        }
    }

    fn push_rows(&self, st: &mut DecodeState<S>, x: Mat<S>, lora: Option<&BackboneLora<S>>) -> Result<Mat<S>> {
        if st.positions + x.rows() > POSITIONS_PER_FRAME * self.dims.max_frames {
            return arg("sequence exceeds the backbone's positions");
        }
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward_incremental(&h, &mut st.kv[i], lora.map(|a| &a[i]));
        }
        st.positions += h.rows();
        Ok(self.norm.forward(&h).0)
    }

    fn kind_at(&self, st: &DecodeState<S>) -> (bool, Kind) {
        let p = st.positions;
        let kind = match p % POSITIONS_PER_FRAME {
            0 => Kind::Sem(p / POSITIONS_PER_FRAME),
            r => Kind::Ac(2 * (p / POSITIONS_PER_FRAME) + r - 1),
        };
        (p / POSITIONS_PER_FRAME < st.prompt_frames, kind)
    }

    /// Feeds the whole prompt before any source input.
    pub fn ingest_prompt(
        &self,
        st: &mut DecodeState<S>,
        sem: SemInput<'_, S>,
        ac: &AcousticTokens,
        lora: Option<&BackboneLora<S>>,
    ) -> Result<()> {
        if st.positions != 0 {
            return Err(Error::State("prompt must be ingested first".into()));
        }
        let seq = build_sequence(sem, ac, SemInput::<S>::Tokens(&[]), None)?;
        if seq.is_empty() {
            return Ok(());
        }
        self.check_seq(&seq, true)?;
        st.prompt_frames = seq.prompt_frames;
        let mut x = Mat::zeros(seq.len(), self.dims.hidden);
        for p in 0..seq.len() {
            let kind = seq.kind(p);
            let slot = Self::slot_id(true, kind);
            let content = match kind {
                Kind::Sem(t) => match seq.sem[t] {
                    SemSlot::Token(c) => self.sem_emb.row(c as usize).to_vec(),
                    SemSlot::Row(i) => seq.sem_rows.row(i).to_vec(),
                    SemSlot::Mask => self.mask_emb.value.row(0).to_vec(),
                },
                Kind::Ac(j) => self.frame_content(seq.frame(j)),
            };
            self.finish_row(&content, p, slot, x.row_mut(p));
        }
        self.push_rows(st, x, lora)?;
        Ok(())
    }

    /// Feeds the next semantic slot; returns its hidden state (`1 x d`).
    pub fn push_semantic(&self, st: &mut DecodeState<S>, value: SemSlotValue<'_, S>, lora: Option<&BackboneLora<S>>) -> Result<Mat<S>> {
        let (prompt, kind) = self.kind_at(st);
        if !matches!(kind, Kind::Sem(_)) {
            return Err(Error::Contract("semantic input arrived mid frame group".into()));
        }
        let content: Vec<S> = match value {
            SemSlotValue::Token(c) => {
                if c as usize >= self.dims.semantic_vocab {
                    return arg("semantic token outside the vocabulary");
                }
                self.sem_emb.row(c as usize).to_vec()
            }
            SemSlotValue::Row(r) => {
                if r.len() != self.dims.hidden {
                    return arg("semantic embedding width does not match the backbone");
                }
                r.to_vec()
            }
            SemSlotValue::Mask => self.mask_emb.value.row(0).to_vec(),
        };
        let mut x = Mat::zeros(1, self.dims.hidden);
        self.finish_row(&content, st.positions, Self::slot_id(prompt, kind), x.row_mut(0));
        self.push_rows(st, x, lora)
    }

    /// Feeds an acoustic frame at the next AC slot.
    pub fn push_frame(&self, st: &mut DecodeState<S>, codes: &[u32], lora: Option<&BackboneLora<S>>) -> Result<Mat<S>> {
        let (prompt, kind) = self.kind_at(st);
        if !matches!(kind, Kind::Ac(_)) {
            return Err(Error::Contract("acoustic frame arrived at a semantic slot".into()));
        }
        if codes.len() != self.dims.quantizers || codes.iter().any(|&c| c as usize >= self.dims.codec_vocab) {
            return arg("malformed acoustic frame");
        }
        let content = self.frame_content(codes);
        let mut x = Mat::zeros(1, self.dims.hidden);
        self.finish_row(&content, st.positions, Self::slot_id(prompt, kind), x.row_mut(0));
        self.push_rows(st, x, lora)
    }

    /// Decodes one frame from the hidden state preceding its AC slot.
    pub fn predict_frame<R: Rng + ?Sized>(&self, hidden: &Mat<S>, sampling: Sampling, rng: &mut R) -> FramePrediction<S> {
        let pr = &self.predictor;
        let l = self.dims.quantizers;
        let cond = pr.cond.forward(hidden);
        let mut kv = KvCache::new(self.dims.hidden);
        let mut codes = Vec::with_capacity(l);
        let mut logits = Mat::zeros(l, self.dims.codec_vocab);
        for q in 0..l {
            let mut x = Mat::zeros(1, self.dims.hidden);
            pr.input_row(cond.row(0), q, (q > 0).then(|| codes[q - 1]), x.row_mut(0));
            let y = pr.block.forward_incremental(&x, &mut kv, None);
            let (n, _) = pr.norm.forward(&y);
            let lg = pr.heads[q].forward(&n);
            codes.push(sampling.pick(lg.row(0), rng));
            logits.row_mut(q).copy_from_slice(lg.row(0));
        }
        FramePrediction { codes, logits }
    }

    /// Converts a full semantic stream: SEM slots are teacher-forced from
    /// `source`, AC slots are generated.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        prompt_sem: SemInput<'_, S>,
        prompt_ac: &AcousticTokens,
        source: SemInput<'_, S>,
        lora: Option<&BackboneLora<S>>,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Generation<S>> {
        let mut st = self.start();
        self.ingest_prompt(&mut st, prompt_sem, prompt_ac, lora)?;
        let mut out = Generation {
            tokens: AcousticTokens::empty(self.dims.quantizers),
            logits: Vec::new(),
        };
        for t in 0..source.len() {
            let value = match source {
                SemInput::Tokens(tk) => SemSlotValue::Token(tk[t]),
                SemInput::Embeddings(m) => SemSlotValue::Row(m.row(t)),
            };
            let mut h = self.push_semantic(&mut st, value, lora)?;
            for _ in 0..2 {
                let f = self.predict_frame(&h, sampling, rng);
                h = self.push_frame(&mut st, &f.codes, lora)?;
                out.tokens.push_frame(&f.codes);
                out.logits.push(f.logits);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum SemSlotValue<'a, S> {
    Token(u32),
    Row(&'a [S]),
    Mask,
}

#[derive(Clone, Debug)]
pub struct Generation<S> {
    pub tokens: AcousticTokens,
    /// Per emitted frame, `L x codec_vocab` logits.
    pub logits: Vec<Mat<S>>,
}

/// Names of every adapter tensor, for structural checks.
pub fn lora_targets<S: Real>(lora: &BackboneLora<S>) -> Vec<String> {
    lora.param_names()
}
