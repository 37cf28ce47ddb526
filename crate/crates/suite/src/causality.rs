//! Causality under random perturbations, compared bit for bit.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamconv::backbone::{ac_position, build_sequence, Kind, Sampling, SemInput, SemSlot};
use streamconv::corpus::AcousticTokens;
use streamconv::encoder::{pooled_frames, semantic_rows};
use streamconv::model::{ConversionMode, ConversionModel};
use streamconv::stream::StreamSession;
use streamconv_nn::Mat;

use crate::toy::{codes, model, shared};
use crate::Tally;

const MAX_DELAY: usize = 6;

fn rows_equal(a: &Mat<f32>, b: &Mat<f32>, upto: usize) -> bool {
    (0..upto).all(|r| a.row(r) == b.row(r))
}

/// Row `t` of the streaming encoder may read frames up to `2t+1+k` only:
/// rewriting any later frame, or appending frames, leaves rows `0..=t`
/// bit-identical (states, logits and supervised intermediates).
pub fn encoder_delay(cases: usize, seed: u64) -> Tally {
    let views: Vec<_> = (0..MAX_DELAY)
        .map(|k| model(k, seed + k as u64).path(ConversionMode::Stream).expect("stream path").view)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    while tally.cases < cases {
        let k = rng.random_range(0..MAX_DELAY);
        let n = rng.random_range(1..=24);
        // last row whose whole window lies inside the input
        let Some(t) = (0..semantic_rows(n)).filter(|&t| 2 * t + 1 + k < n).last() else {
            continue;
        };
        let t = rng.random_range(0..=t);
        let (_, last_read) = pooled_frames(t, k, n);
        let base = codes(n, &mut rng);
        let mut alt = base.clone();
        let from = 2 * t + 2 + k;
        let append = from >= n || rng.random_bool(0.3);
        if append {
            alt.extend(&codes(rng.random_range(1..4), &mut rng));
        }
        let touched = (from..alt.frames()).filter(|_| rng.random_bool(0.6)).collect::<Vec<_>>();
        for &j in &touched {
            let fresh = codes(1, &mut rng);
            alt = replace_frame(&alt, j, &fresh);
        }
        let view = &views[k];
        let a = view.encode(&base).expect("encode");
        let b = view.encode(&alt).expect("encode");
        let same = rows_equal(&a.states, &b.states, t + 1)
            && rows_equal(&a.logits, &b.logits, t + 1)
            && a.intermediate.iter().zip(&b.intermediate).all(|(x, y)| rows_equal(x, y, t + 1));
        tally.check(same, || {
            format!("k={k} n={n} t={t} (reads up to frame {last_read}) moved when frames {touched:?} changed, append={append}")
        });
    }
    tally
}

fn replace_frame(a: &AcousticTokens, j: usize, f: &AcousticTokens) -> AcousticTokens {
    let mut out = a.slice(0, j);
    out.extend(f);
    out.extend(&a.slice(j + 1, a.frames()));
    out
}

/// Changing the input at any position leaves hidden states of every earlier
/// position, and acoustic logits of frames whose slot comes earlier, bit
/// identical. Within the perturbed frame, quantizers up to the changed one
/// keep their logits too.
pub fn lm_positions(sequences: usize, seed: u64) -> Tally {
    let m = model(2, seed);
    let bb = &m.backbone;
    let lora = m.stream.lora.as_ref();
    let (l, vocab, sem_vocab) = (bb.dims.quantizers, bb.dims.codec_vocab as u32, bb.dims.semantic_vocab as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for _ in 0..sequences {
        let (pt, st) = (rng.random_range(0..4), rng.random_range(1..6));
        let prompt_sem: Vec<u32> = (0..pt).map(|_| rng.random_range(0..sem_vocab)).collect();
        let src = Mat::from_fn(st, bb.dims.hidden, |_, _| rng.random_range(-1.0f32..1.0));
        let seq = build_sequence(
            SemInput::Tokens(&prompt_sem),
            &codes(2 * pt, &mut rng),
            SemInput::Embeddings(&src),
            Some(&codes(2 * st, &mut rng)),
        )
        .expect("layout");
        let (base, _) = bb.forward(&[&seq], lora).expect("forward");
        for p in 0..seq.len() {
            let mut alt = seq.clone();
            let mut own = None;
            match alt.kind(p) {
                Kind::Sem(t) => match seq.sem[t] {
                    SemSlot::Token(c) => alt.sem[t] = SemSlot::Token((c + 1 + rng.random_range(0..sem_vocab - 1)) % sem_vocab),
                    SemSlot::Row(i) => alt.sem_rows.row_mut(i).iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5)),
                    SemSlot::Mask => alt.sem[t] = SemSlot::Token(0),
                },
                Kind::Ac(j) => {
                    let q = rng.random_range(0..l);
                    let c = &mut alt.codes[j * l + q];
                    *c = (*c + 1 + rng.random_range(0..vocab - 1)) % vocab;
                    own = Some((j, q));
                }
            }
            let (o, _) = bb.forward(&[&alt], lora).expect("forward");
            let mut ok = rows_equal(&base.hidden, &o.hidden, p);
            for (i, &(_, j)) in base.ac_frames.iter().enumerate() {
                let keep = if ac_position(j) < p {
                    l
                } else {
                    match own {
                        Some((f, q)) if f == j => q + 1,
                        _ => 0,
                    }
                };
                ok &= (0..keep).all(|q| base.ac_logits[q].row(i) == o.ac_logits[q].row(i));
            }
            tally.check(ok, || format!("position {p} of {} leaked backwards", seq.len()));
        }
    }
    tally
}

fn run_chunks(m: &Arc<ConversionModel<f32>>, prompt: &AcousticTokens, src: &AcousticTokens, cuts: &[usize]) -> AcousticTokens {
    let mut s = StreamSession::open(m.clone(), prompt, ConversionMode::Stream, Sampling::Greedy, 0).expect("open");
    let mut at = 0;
    for &c in cuts.iter().chain(std::iter::once(&src.frames())) {
        s.feed_chunk(&src.slice(at, c)).expect("feed");
        at = c;
    }
    s.close().expect("close");
    s.emitted().clone()
}

/// Greedy streaming output does not depend on how the source is chunked.
pub fn chunk_invariance(cases: usize, seed: u64) -> Tally {
    let models: Vec<_> = (0..MAX_DELAY).map(|k| shared(k, seed ^ k as u64)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally::default();
    for _ in 0..cases {
        let k = rng.random_range(0..MAX_DELAY);
        let prompt = codes(2 * rng.random_range(0..4), &mut rng);
        let src = codes(rng.random_range(0..24), &mut rng);
        let whole = run_chunks(&models[k], &prompt, &src, &[]);
        let mut cuts: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..=src.frames())).collect();
        cuts.sort_unstable();
        let split = run_chunks(&models[k], &prompt, &src, &cuts);
        tally.check(whole == split && whole.frames() == src.frames(), || {
            format!("k={k}, {} frames cut at {cuts:?}", src.frames())
        });
    }
    tally
}
