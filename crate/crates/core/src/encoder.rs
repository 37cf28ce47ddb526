//! Semantic encoder: acoustic codes in, semantic states and token logits out,
//! with `k` frames of lookahead.
//!
//! Adjacent acoustic frames are mean-pooled 2:1 before the first block. The
//! delay is an input shift: pooled row `t` reads frames `2t+k` and `2t+1+k`
//! (clamped to the last frame), so under causal attention row `t` depends on
//! frames `<= 2t+1+k` and nothing later. For even `k` this is the same as
//! supervising step `t + k/2` with label `t`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use streamconv_nn::loss::{cross_entropy, squared_error};
use streamconv_nn::{
    impl_module, AttnMask, BlockCache, Embedding, KvCache, Linear, Mat, QkvLora, Real, RmsNorm, Segment,
    TransformerBlock,
};

use crate::config::{AttentionMode, ExperimentConfig};
use crate::corpus::{AcousticTokens, ContinuousSemantic, SemanticTokens};
use crate::error::{arg, Result};
use crate::loss::LossReport;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub quantizers: usize,
    pub codec_vocab: usize,
    pub semantic_vocab: usize,
    pub sem_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub max_frames: usize,
    pub delay: usize,
}

impl EncoderDims {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            quantizers: cfg.corpus.num_quantizers,
            codec_vocab: cfg.corpus.codec_vocab,
            semantic_vocab: cfg.corpus.semantic_vocab,
            sem_dim: cfg.corpus.sem_dim,
            layers: cfg.encoder.layers,
            heads: cfg.encoder.heads,
            hidden: cfg.encoder.hidden,
            intermediate: cfg.encoder.intermediate,
            max_frames: cfg.encoder.max_frames,
            delay: cfg.encoder.delay_steps,
        }
    }
}

impl From<AttentionMode> for AttnMask {
    fn from(m: AttentionMode) -> Self {
        match m {
            AttentionMode::Causal => AttnMask::Causal,
            AttentionMode::Bidirectional => AttnMask::Bidirectional,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SemanticEncoder<S> {
    /// One table per quantizer; a frame embeds as the sum of its codes.
    pub code_emb: Vec<Embedding<S>>,
    pub pos: Embedding<S>,
    pub blocks: Vec<TransformerBlock<S>>,
    pub norm: RmsNorm<S>,
    /// Supervision projections for every block but the last.
    pub taps: Vec<Linear<S>>,
    /// Final linear: states to semantic logits.
    pub head: Linear<S>,
    pub dims: EncoderDims,
}

impl_module!(SemanticEncoder, code_emb, pos, blocks, norm, taps, head);

/// Adapters on the encoder's attention projections (non-streaming mode).
pub type EncoderLora<S> = Vec<QkvLora<S>>;

/// `h^s`: one row per semantic frame.
#[derive(Clone, Debug)]
pub struct SemanticHidden<S> {
    pub states: Mat<S>,
    pub logits: Mat<S>,
    /// Projected outputs of the supervised blocks.
    pub intermediate: Vec<Mat<S>>,
    /// Row ranges of each input when encoding a batch.
    pub segments: Vec<Segment>,
}

impl<S: Real> SemanticHidden<S> {
    pub fn rows(&self) -> usize {
        self.states.rows()
    }

    pub fn argmax(&self) -> Vec<u32> {
        (0..self.logits.rows()).map(|r| argmax(self.logits.row(r)) as u32).collect()
    }

    pub fn segment(&self, i: usize) -> SemanticHidden<S> {
        let (start, len) = self.segments[i];
        SemanticHidden {
            states: self.states.slice_rows(start, start + len),
            logits: self.logits.slice_rows(start, start + len),
            intermediate: self.intermediate.iter().map(|m| m.slice_rows(start, start + len)).collect(),
            segments: vec![(0, len)],
        }
    }
}

pub(crate) fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub struct EncoderCache<S> {
    mask: AttnMask,
    segments: Vec<Segment>,
    /// Frame codes and position of every pooled row.
    rows: Vec<(Vec<u32>, usize)>,
    blocks: Vec<BlockCache<S>>,
    outs: Vec<Mat<S>>,
    inv: Vec<S>,
    states: Mat<S>,
}

/// Gradients arriving at the encoder outputs.
pub struct EncoderGrads<S> {
    pub logits: Option<Mat<S>>,
    pub intermediate: Vec<Option<Mat<S>>>,
    pub states: Option<Mat<S>>,
}

/// Semantic rows produced from `frames` acoustic frames.
pub fn semantic_rows(frames: usize) -> usize {
    frames.div_ceil(2)
}

/// Acoustic frames read by pooled row `t` under delay `k`.
pub fn pooled_frames(t: usize, k: usize, frames: usize) -> (usize, usize) {
    let last = frames - 1;
    ((2 * t + k).min(last), (2 * t + 1 + k).min(last))
}

impl<S: Real> SemanticEncoder<S> {
    pub fn new<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Self {
        let d = dims.hidden;
        Self {
            code_emb: (0..dims.quantizers)
                .map(|_| Embedding::new(dims.codec_vocab, d, 1.0, rng))
                .collect(),
            pos: Embedding::new(dims.max_frames, d, 0.5, rng),
            blocks: (0..dims.layers)
                .map(|_| TransformerBlock::new(d, dims.heads, dims.intermediate, dims.layers, rng))
                .collect(),
            norm: RmsNorm::new(d),
            taps: (0..dims.layers.saturating_sub(1))
                .map(|_| Linear::init(d, dims.sem_dim, true, rng))
                .collect(),
            head: Linear::init(d, dims.semantic_vocab, true, rng),
            dims,
        }
    }

    pub fn new_lora<R: Rng + ?Sized>(&self, rank: usize, alpha: f64, rng: &mut R) -> EncoderLora<S> {
        (0..self.dims.layers)
            .map(|_| QkvLora::new(self.dims.hidden, rank, alpha, rng))
            .collect()
    }

    pub fn delay(&self) -> usize {
        self.dims.delay
    }

    fn check(&self, a: &AcousticTokens) -> Result<()> {
        if a.quantizers() != self.dims.quantizers {
            return arg(format!(
                "encoder expects {} quantizers, got {}",
                self.dims.quantizers,
                a.quantizers()
            ));
        }
        if a.is_empty() {
            return arg("encoder needs at least one acoustic frame");
        }
        if semantic_rows(a.frames()) > self.dims.max_frames {
            return arg(format!(
                "{} semantic frames exceed the encoder's {} positions",
                semantic_rows(a.frames()),
                self.dims.max_frames
            ));
        }
        a.check_vocab(self.dims.codec_vocab)
    }

    /// Pooled input of row `t` given its two frames. Shared by the batch and
    /// incremental paths so both produce identical bits.
    pub fn pooled_row(&self, f0: &[u32], f1: &[u32], t: usize, out: &mut [S]) {
        let d = self.dims.hidden;
        let mut e0 = vec![S::zero(); d];
        let mut e1 = vec![S::zero(); d];
        for (l, table) in self.code_emb.iter().enumerate() {
            for ((a, b), (x, y)) in e0
                .iter_mut()
                .zip(e1.iter_mut())
                .zip(table.row(f0[l] as usize).iter().zip(table.row(f1[l] as usize)))
            {
                *a += *x;
                *b += *y;
            }
        }
        let half = S::of(0.5);
        for (((o, a), b), p) in out.iter_mut().zip(&e0).zip(&e1).zip(self.pos.row(t)) {
            *o = (*a + *b) * half + *p;
        }
    }

    fn finish(&self, h: &Mat<S>) -> (Mat<S>, Vec<S>, Mat<S>) {
        let (states, inv) = self.norm.forward(h);
        let logits = self.head.forward(&states);
        (states, inv, logits)
    }

    pub fn forward(
        &self,
        inputs: &[&AcousticTokens],
        mode: AttentionMode,
        lora: Option<&EncoderLora<S>>,
    ) -> Result<(SemanticHidden<S>, EncoderCache<S>)> {
        let k = self.dims.delay;
        let q = self.dims.quantizers;
        let mut rows = Vec::new();
        let mut segments = Vec::with_capacity(inputs.len());
        for a in inputs {
            self.check(a)?;
            let n = semantic_rows(a.frames());
            segments.push((rows.len(), n));
            for t in 0..n {
                let (j0, j1) = pooled_frames(t, k, a.frames());
                let mut codes = Vec::with_capacity(2 * q);
                codes.extend_from_slice(a.frame(j0));
                codes.extend_from_slice(a.frame(j1));
                rows.push((codes, t));
            }
        }
        let mut x = Mat::zeros(rows.len(), self.dims.hidden);
        for (r, (codes, t)) in rows.iter().enumerate() {
            self.pooled_row(&codes[..q], &codes[q..], *t, x.row_mut(r));
        }
        let mask = AttnMask::from(mode);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut intermediate = Vec::with_capacity(self.taps.len());
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, c) = block.forward(&h, &segments, mask, lora.map(|l| &l[i]));
            blocks.push(c);
            if let Some(tap) = self.taps.get(i) {
                intermediate.push(tap.forward(&y));
            }
            outs.push(y.clone());
            h = y;
        }
        let (states, inv, logits) = self.finish(&h);
        let hidden = SemanticHidden {
            states: states.clone(),
            logits,
            intermediate,
            segments,
        };
        let cache = EncoderCache {
            mask,
            segments: hidden.segments.clone(),
            rows,
            blocks,
            outs,
            inv,
            states,
        };
        Ok((hidden, cache))
    }

    /// Single-input convenience wrapper.
    pub fn encode(&self, a: &AcousticTokens, mode: AttentionMode, lora: Option<&EncoderLora<S>>) -> Result<SemanticHidden<S>> {
        Ok(self.forward(&[a], mode, lora)?.0)
    }

    fn body_needs_grad(&self, lora: &Option<&mut EncoderLora<S>>) -> bool {
        use streamconv_nn::Module;
        let mut any = false;
        let mut probe = |_: &str, p: &streamconv_nn::Param<S>| any |= p.requires_grad;
        if let Some(l) = lora {
            l.visit("", &mut probe);
        }
        self.code_emb.visit("", &mut probe);
        self.pos.visit("", &mut probe);
        self.blocks.visit("", &mut probe);
        self.norm.visit("", &mut probe);
        self.taps.visit("", &mut probe);
        any
    }

    /// Accumulates parameter gradients. Stops after the head when nothing
    /// below it is trainable.
    pub fn backward(&mut self, cache: &EncoderCache<S>, grads: &EncoderGrads<S>, mut lora: Option<&mut EncoderLora<S>>) {
        let n = cache.states.rows();
        let d = self.dims.hidden;
        let mut dstates = match &grads.logits {
            Some(dl) => self.head.backward(&cache.states, dl, true).expect("dx"),
            None => Mat::zeros(n, d),
        };
        if let Some(ds) = &grads.states {
            dstates.add_assign(ds);
        }
        if !self.body_needs_grad(&lora) {
            return;
        }
        let top = cache.outs.last().expect("at least one block");
        let mut dh = self.norm.backward(top, &cache.inv, &dstates);
        for i in (0..self.blocks.len()).rev() {
            if let (Some(tap), Some(Some(g))) = (self.taps.get_mut(i), grads.intermediate.get(i)) {
                dh.add_assign(&tap.backward(&cache.outs[i], g, true).expect("dx"));
            }
            let l = lora.as_deref_mut().map(|l| &mut l[i]);
            dh = self.blocks[i].backward(&cache.blocks[i], &dh, &cache.segments, cache.mask, l);
        }
        let q = self.dims.quantizers;
        let mut half = dh.clone();
        half.scale(S::of(0.5));
        let pos_ids: Vec<usize> = cache.rows.iter().map(|(_, t)| *t).collect();
        self.pos.backward(&pos_ids, &dh);
        for l in 0..q {
            for f in 0..2 {
                let ids: Vec<usize> = cache.rows.iter().map(|(c, _)| c[f * q + l] as usize).collect();
                self.code_emb[l].backward(&ids, &half);
            }
        }
    }

    pub fn start_stream(&self) -> EncoderStream<S> {
        EncoderStream {
            kv: (0..self.blocks.len()).map(|_| KvCache::new(self.dims.hidden)).collect(),
            rows: 0,
        }
    }

    /// Encodes the next semantic row from its two (already delay-shifted)
    /// frames. Causal attention only.
    pub fn stream_row(&self, st: &mut EncoderStream<S>, f0: &[u32], f1: &[u32], lora: Option<&EncoderLora<S>>) -> Result<(Mat<S>, Mat<S>)> {
        if st.rows >= self.dims.max_frames {
            return arg("stream exceeds the encoder's positions");
        }
        for f in [f0, f1] {
            if f.len() != self.dims.quantizers || f.iter().any(|&c| c as usize >= self.dims.codec_vocab) {
                return arg("malformed acoustic frame");
            }
        }
        let mut h = Mat::zeros(1, self.dims.hidden);
        self.pooled_row(f0, f1, st.rows, h.row_mut(0));
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward_incremental(&h, &mut st.kv[i], lora.map(|l| &l[i]));
        }
        st.rows += 1;
        let (states, _, logits) = self.finish(&h);
        Ok((states, logits))
    }
}

/// Incremental encoder state: one key/value cache per block.
#[derive(Clone, Debug)]
pub struct EncoderStream<S> {
    kv: Vec<KvCache<S>>,
    rows: usize,
}

impl<S> EncoderStream<S> {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// `L_Encoder = L^s_ce + L^s_mse`. CE is averaged over rows; the MSE is
/// averaged over entries and over supervised layers.
pub fn encoder_loss<S: Real>(
    h: &SemanticHidden<S>,
    tokens: &[u32],
    teacher: &Mat<S>,
) -> Result<(LossReport, EncoderGrads<S>)> {
    let n = h.rows();
    if tokens.len() != n || teacher.rows() != n {
        return arg(format!(
            "encoder loss needs aligned rows: {} states, {} tokens, {} teacher rows",
            n,
            tokens.len(),
            teacher.rows()
        ));
    }
    if h.logits.cols() <= tokens.iter().copied().max().unwrap_or(0) as usize {
        return arg("semantic token outside logit vocabulary");
    }
    let targets: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let (ce, dlogits) = cross_entropy(&h.logits, &targets, S::of(1.0 / n.max(1) as f64));
    let taps = h.intermediate.len();
    let mut mse = S::zero();
    let mut dinter = Vec::with_capacity(taps);
    for m in &h.intermediate {
        if m.shape() != teacher.shape() {
            return arg("teacher feature width does not match the supervision projection");
        }
        let w = S::of(1.0 / (m.len().max(1) * taps) as f64);
        let (l, g) = squared_error(m, teacher, w);
        mse += l;
        dinter.push(Some(g));
    }
    let report = LossReport::new(
        Some(ce.as_f64()),
        None,
        None,
        (taps > 0).then_some(mse.as_f64()),
    );
    Ok((
        report,
        EncoderGrads {
            logits: Some(dlogits),
            intermediate: dinter,
            states: None,
        },
    ))
}

/// Stacks the targets of several utterances in batch order.
pub fn stack_targets<S: Real>(items: &[(&SemanticTokens, &ContinuousSemantic)]) -> (Vec<u32>, Mat<S>) {
    let mut tokens = Vec::new();
    let cols = items.first().map(|(_, c)| c.features.cols()).unwrap_or(0);
    let mut teacher = Mat::zeros(0, cols);
    for (s, c) in items {
        tokens.extend_from_slice(&s.codes);
        teacher.append_rows(&c.features.cast());
    }
    (tokens, teacher)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(delay: usize) -> EncoderDims {
        EncoderDims {
            quantizers: 2,
            codec_vocab: 8,
            semantic_vocab: 5,
            sem_dim: 3,
            layers: 2,
            heads: 2,
            hidden: 8,
            intermediate: 12,
            max_frames: 16,
            delay,
        }
    }

    fn tokens(frames: usize, seed: u64) -> AcousticTokens {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AcousticTokens::new((0..frames * 2).map(|_| rng.random_range(0..8)).collect(), 2).unwrap()
    }

    #[test]
    fn row_count_halves_frames() {
        let enc = SemanticEncoder::<f32>::new(dims(4), &mut ChaCha8Rng::seed_from_u64(1));
        let h = enc.encode(&tokens(10, 2), AttentionMode::Causal, None).unwrap();
        assert_eq!(h.rows(), 5);
        assert_eq!(h.logits.cols(), 5);
        assert_eq!(h.intermediate.len(), 1);
        assert!(h.logits.all_finite());
    }

    #[test]
    fn rejects_empty_and_out_of_vocab_inputs() {
        let enc = SemanticEncoder::<f32>::new(dims(0), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(enc.encode(&AcousticTokens::empty(2), AttentionMode::Causal, None).is_err());
        let one = AcousticTokens::new(vec![0, 0], 2).unwrap();
        assert_eq!(enc.encode(&one, AttentionMode::Causal, None).unwrap().rows(), 1);
        let bad = AcousticTokens::new(vec![0, 9, 1, 1], 2).unwrap();
        assert!(enc.encode(&bad, AttentionMode::Causal, None).is_err());
    }

    #[test]
    fn perturbing_beyond_the_window_leaves_row_unchanged() {
        for k in [0, 1, 4] {
            let enc = SemanticEncoder::<f32>::new(dims(k), &mut ChaCha8Rng::seed_from_u64(3));
            let a = tokens(16, 5);
            let base = enc.encode(&a, AttentionMode::Causal, None).unwrap();
            for t in 0..8 {
                let cut = 2 * t + 1 + k;
                if cut + 1 >= a.frames() {
                    continue;
                }
                let mut codes = a.codes().to_vec();
                for c in codes[(cut + 1) * 2..].iter_mut() {
                    *c = (*c + 3) % 8;
                }
                let p = enc
                    .encode(&AcousticTokens::new(codes, 2).unwrap(), AttentionMode::Causal, None)
                    .unwrap();
                assert_eq!(base.states.row(t), p.states.row(t));
                assert_eq!(base.logits.row(t), p.logits.row(t));
            }
        }
    }

    #[test]
    fn bidirectional_mode_sees_the_future() {
        let enc = SemanticEncoder::<f32>::new(dims(0), &mut ChaCha8Rng::seed_from_u64(3));
        let a = tokens(12, 9);
        let base = enc.encode(&a, AttentionMode::Bidirectional, None).unwrap();
        let mut codes = a.codes().to_vec();
        let n = codes.len();
        codes[n - 1] = (codes[n - 1] + 1) % 8;
        let p = enc
            .encode(&AcousticTokens::new(codes, 2).unwrap(), AttentionMode::Bidirectional, None)
            .unwrap();
        assert_ne!(base.states.row(0), p.states.row(0));
    }

    #[test]
    fn stream_rows_equal_batch_rows() {
        let enc = SemanticEncoder::<f32>::new(dims(3), &mut ChaCha8Rng::seed_from_u64(4));
        let a = tokens(14, 6);
        let batch = enc.encode(&a, AttentionMode::Causal, None).unwrap();
        let mut st = enc.start_stream();
        for t in 0..semantic_rows(a.frames()) {
            let (j0, j1) = pooled_frames(t, 3, a.frames());
            let (s, l) = enc.stream_row(&mut st, a.frame(j0), a.frame(j1), None).unwrap();
            assert_eq!(s.row(0), batch.states.row(t));
            assert_eq!(l.row(0), batch.logits.row(t));
        }
    }

    #[test]
    fn loss_of_uniform_logits_is_log_vocab() {
        let h = SemanticHidden::<f64> {
            states: Mat::zeros(3, 4),
            logits: Mat::zeros(3, 5),
            intermediate: vec![Mat::zeros(3, 2)],
            segments: vec![(0, 3)],
        };
        let (r, _) = encoder_loss(&h, &[0, 1, 4], &Mat::zeros(3, 2)).unwrap();
        assert!((r.s_ce.unwrap() - 5f64.ln()).abs() < 1e-12);
        assert_eq!(r.s_mse, Some(0.0));
    }

    #[test]
    fn loss_of_confident_correct_logits_vanishes() {
        let teacher = Mat::from_fn(2, 2, |r, c| (r + c) as f64 * 0.3);
        let h = SemanticHidden::<f64> {
            states: Mat::zeros(2, 4),
            logits: Mat::from_fn(2, 5, |r, c| if c == r + 1 { 200.0 } else { 0.0 }),
            intermediate: vec![teacher.clone()],
            segments: vec![(0, 2)],
        };
        let (r, _) = encoder_loss(&h, &[1, 2], &teacher).unwrap();
        assert!(r.s_ce.unwrap() < 1e-12);
        assert_eq!(r.s_mse, Some(0.0));
        assert!(encoder_loss(&h, &[1], &teacher).is_err());
    }
}
