//! Incremental decoding against batched computation, and adapter contracts.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamconv::backbone::{build_sequence, Backbone, BackboneDims, Sampling, SemInput};
use streamconv::config::AttentionMode;
use streamconv::encoder::{EncoderDims, SemanticEncoder};
use streamconv::model::ConversionMode;
use streamconv::stream::StreamSession;
use streamconv_nn::{Mat, Module, Param};

use crate::toy::{codes, jitter, shared, tiny_config};
use crate::Tally;

pub const LOGIT_TOL: f64 = 1e-4;
pub const MERGE_TOL: f64 = 1e-5;

fn max_abs(a: &Mat<f32>, b: &Mat<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// Streaming sessions fed in random chunks against (a) offline conversion
/// and (b) one teacher-forced forward pass over the generated frames.
/// Returns the tally and the largest logit difference seen.
pub fn incremental_vs_batch(inputs: usize, seed: u64) -> (Tally, f64) {
    let models: Vec<_> = (0..6).map(|k| shared(k, seed + 31 * k as u64)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    let mut worst = 0.0f64;
    for case in 0..inputs {
        let k = rng.random_range(0..models.len());
        let m = &models[k];
        let prompt = codes(2 * rng.random_range(1..4), &mut rng);
        let src = codes(rng.random_range(1..24), &mut rng);
        let mut cuts: Vec<usize> = (0..rng.random_range(0..6)).map(|_| rng.random_range(0..=src.frames())).collect();
        cuts.sort_unstable();

        let mut s = StreamSession::open(m.clone(), &prompt, ConversionMode::Stream, Sampling::Greedy, 0).expect("open");
        let mut at = 0;
        for &c in cuts.iter().chain(std::iter::once(&src.frames())) {
            s.feed_chunk(&src.slice(at, c)).expect("feed");
            at = c;
        }
        s.close().expect("close");

        let mut r = ChaCha8Rng::seed_from_u64(0);
        let off = m.convert(&prompt, &src, ConversionMode::Stream, Sampling::Greedy, &mut r).expect("convert");
        let d_off = s.logits().iter().zip(&off.logits).map(|(a, b)| max_abs(a, b)).fold(0.0, f64::max);

        // untruncated generation, then the same frames teacher-forced
        let path = m.path(ConversionMode::Stream).expect("path");
        let pe = path.semantic_embeddings(&prompt).expect("prompt");
        let se = path.semantic_embeddings(&src).expect("source");
        let g = path
            .backbone
            .generate(SemInput::Embeddings(&pe), &prompt, SemInput::Embeddings(&se), path.lora, Sampling::Greedy, &mut r)
            .expect("generate");
        let seq = build_sequence(SemInput::Embeddings(&pe), &prompt, SemInput::Embeddings(&se), Some(&g.tokens)).expect("layout");
        let (fwd, _) = path.backbone.forward(&[&seq], path.lora).expect("forward");
        let mut d_fwd = 0.0f64;
        for (i, step) in g.logits.iter().enumerate() {
            for q in 0..step.rows() {
                let row = fwd.ac_logits[q].row(i);
                d_fwd = d_fwd.max(row.iter().zip(step.row(q)).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max));
            }
        }
        worst = worst.max(d_off).max(d_fwd);
        let tokens_ok = s.emitted() == &off.tokens && g.tokens.slice(0, src.frames()) == off.tokens;
        tally.check(tokens_ok && d_off < LOGIT_TOL && d_fwd < LOGIT_TOL && fwd.ac_frames.len() == g.logits.len(), || {
            format!("input {case} (k={k}, {} frames, cuts {cuts:?}): tokens equal {tokens_ok}, logit gaps {d_off:.2e} / {d_fwd:.2e}", src.frames())
        });
    }
    (tally, worst)
}

fn dims() -> BackboneDims {
    let mut d = BackboneDims::from_config(&tiny_config(2));
    d.max_frames = 16;
    d
}

fn random_adapters<R: Rng>(m: &Backbone<f64>, rank: usize, rng: &mut R) -> streamconv::backbone::BackboneLora<f64> {
    let mut lora = m.new_lora(rank, 2.0, rng);
    lora.visit_mut("", &mut |_, p: &mut Param<f64>| {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    });
    lora
}

fn sequence<R: Rng>(d: &BackboneDims, rng: &mut R) -> streamconv::backbone::InterleavedSequence<f64> {
    let sem = |n: usize, rng: &mut R| (0..n).map(|_| rng.random_range(0..d.semantic_vocab as u32)).collect::<Vec<_>>();
    let (pt, st) = (rng.random_range(0..4), rng.random_range(1..6));
    let (ps, ss) = (sem(pt, rng), sem(st, rng));
    build_sequence(SemInput::Tokens(&ps), &codes(2 * pt, rng), SemInput::Tokens(&ss), Some(&codes(2 * st, rng))).expect("layout")
}

/// Fresh adapters change nothing, bit for bit, in the backbone and in the
/// encoder (both attention modes).
pub fn lora_zero_init(trials: usize, seed: u64) -> Tally {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for trial in 0..trials {
        let bb = Backbone::<f64>::new(dims(), &mut rng);
        let lora = bb.new_lora(rng.random_range(1..6), 1.0 + trial as f64, &mut rng);
        let seq = sequence(&bb.dims, &mut rng);
        let (a, _) = bb.forward(&[&seq], None).expect("forward");
        let (b, _) = bb.forward(&[&seq], Some(&lora)).expect("forward");
        let same = a.hidden == b.hidden && a.ac_logits == b.ac_logits && a.sem_logits == b.sem_logits;
        tally.check(same, || format!("backbone trial {trial}"));

        let mut ed = EncoderDims::from_config(&tiny_config(trial % 5));
        ed.max_frames = 16;
        let enc = SemanticEncoder::<f64>::new(ed, &mut rng);
        let el = enc.new_lora(rng.random_range(1..6), 2.0, &mut rng);
        let x = codes(rng.random_range(1..20), &mut rng);
        for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
            let a = enc.encode(&x, mode, None).expect("encode");
            let b = enc.encode(&x, mode, Some(&el)).expect("encode");
            tally.check(a.states == b.states && a.logits == b.logits, || format!("encoder trial {trial} {mode:?}"));
        }
    }
    tally
}

/// Folding trained adapters into the base weights reproduces the adapter
/// forward pass. Returns the tally and the largest difference.
pub fn lora_merge(trials: usize, seed: u64) -> (Tally, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut bb = Backbone::<f64>::new(dims(), &mut rng);
        jitter(&mut bb, 0.1, &mut rng);
        let lora = random_adapters(&bb, rng.random_range(1..6), &mut rng);
        let seq = sequence(&bb.dims, &mut rng);
        let (a, _) = bb.forward(&[&seq], Some(&lora)).expect("forward");
        let (b, _) = bb.merged(&lora).forward(&[&seq], None).expect("forward");
        let mut d = a.hidden.max_abs_diff(&b.hidden);
        for q in 0..a.ac_logits.len() {
            d = d.max(a.ac_logits[q].max_abs_diff(&b.ac_logits[q]));
        }
        worst = worst.max(d);
        tally.check(d < MERGE_TOL, || format!("trial {trial}: {d:.2e}"));
    }
    (tally, worst)
}

/// Adapter tensors sit on the query, key and value projections of every
/// layer and nowhere else, and the trainable count under a frozen backbone
/// equals `layers * 3 * (d*r + r*d)`.
pub fn lora_structure() -> Tally {
    let mut tally = Tally::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (layers, hidden, rank) in [(1usize, 8usize, 1usize), (2, 16, 4), (3, 64, 8), (4, 32, 16)] {
        let mut d = dims();
        d.layers = layers;
        d.hidden = hidden;
        d.heads = 2;
        let mut bb = Backbone::<f64>::new(d, &mut rng);
        let lora = bb.new_lora(rank, 8.0, &mut rng);
        let mut found = BTreeSet::new();
        let mut shapes_ok = true;
        lora.visit("", &mut |name, p| {
            let parts: Vec<&str> = name.split('.').collect();
            shapes_ok &= p.numel() == hidden * rank;
            found.insert(parts.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        });
        let mut want = BTreeSet::new();
        for l in 0..layers {
            for proj in ["q", "k", "v"] {
                for m in ["a", "b"] {
                    want.insert(vec![l.to_string(), proj.to_string(), m.to_string()]);
                }
            }
        }
        tally.check(found == want && shapes_ok, || format!("adapter tensors {found:?}"));

        bb.set_requires_grad(false);
        let mut trainable = 0;
        bb.visit("", &mut |_, p| trainable += if p.requires_grad { p.numel() } else { 0 });
        lora.visit("", &mut |_, p| trainable += if p.requires_grad { p.numel() } else { 0 });
        let closed = layers * 3 * (hidden * rank + rank * hidden);
        tally.check(trainable == closed && Backbone::<f64>::lora_param_count(layers, hidden, rank) == closed, || {
            format!("{layers} layers, d={hidden}, r={rank}: {trainable} trainable, closed form {closed}")
        });
    }
    tally
}
