//! Streaming sessions against offline conversion on small random models.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamconv::backbone::Sampling;
use streamconv::config::ExperimentConfig;
use streamconv::corpus::AcousticTokens;
use streamconv::model::{ConversionMode, ConversionModel};
use streamconv::stream::{read_all_chunks, write_chunk, StreamSession};
use streamconv::Error;
use streamconv_nn::{Module, Param};

fn tiny_config(delay: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.encoder.layers = 2;
    cfg.encoder.hidden = 16;
    cfg.encoder.heads = 2;
    cfg.encoder.intermediate = 32;
    cfg.encoder.delay_steps = delay;
    cfg.backbone.layers = 2;
    cfg.backbone.hidden = 16;
    cfg.backbone.heads = 2;
    cfg.backbone.intermediate = 32;
    cfg.lora.rank = 4;
    cfg.connector.residual_dim = 4;
    cfg
}

fn jitter(m: &mut dyn Module<f32>, rng: &mut ChaCha8Rng) {
    m.visit_mut("", &mut |_, p: &mut Param<f32>| {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    });
}

/// Random weights everywhere, including adapters that start at zero.
fn model(delay: usize, seed: u64) -> Arc<ConversionModel<f32>> {
    let cfg = tiny_config(delay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ConversionModel::init(&cfg, true, &mut rng);
    jitter(&mut m.encoder, &mut rng);
    jitter(&mut m.backbone, &mut rng);
    let ns = m.nonstream.as_mut().unwrap();
    jitter(&mut ns.encoder_lora, &mut rng);
    for t in [&mut m.stream, &mut ns.task] {
        jitter(&mut t.linear, &mut rng);
        jitter(&mut t.connector, &mut rng);
        jitter(t.lora.as_mut().unwrap(), &mut rng);
    }
    Arc::new(m)
}

fn codes(frames: usize, rng: &mut impl Rng) -> AcousticTokens {
    AcousticTokens::new((0..frames * 4).map(|_| rng.random_range(0..64)).collect(), 4).unwrap()
}

fn offline(m: &ConversionModel<f32>, prompt: &AcousticTokens, src: &AcousticTokens, sampling: Sampling, seed: u64) -> AcousticTokens {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.convert(prompt, src, ConversionMode::Stream, sampling, &mut rng).unwrap().tokens
}

fn streamed(
    m: &Arc<ConversionModel<f32>>,
    prompt: &AcousticTokens,
    src: &AcousticTokens,
    cuts: &[usize],
    sampling: Sampling,
    seed: u64,
) -> AcousticTokens {
    let mut s = StreamSession::open(m.clone(), prompt, ConversionMode::Stream, sampling, seed).unwrap();
    let mut out = AcousticTokens::empty(4);
    let mut at = 0;
    for &c in cuts.iter().chain(std::iter::once(&src.frames())) {
        let c = c.clamp(at, src.frames());
        out.extend(&s.feed_chunk(&src.slice(at, c)).unwrap());
        at = c;
    }
    out.extend(&s.close().unwrap());
    assert_eq!(&out, s.emitted());
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_chunking_matches_offline(
        delay in 0usize..6,
        frames in 0usize..24,
        mut cuts in proptest::collection::vec(0usize..24, 0..6),
        seed in any::<u64>(),
        sample in any::<bool>(),
    ) {
        let m = model(delay, seed % 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt = codes(6, &mut rng);
        let src = codes(frames, &mut rng);
        cuts.sort_unstable();
        let sampling = if sample { Sampling::TopK { k: 5, temperature: 1.0 } } else { Sampling::Greedy };
        let want = offline(&m, &prompt, &src, sampling, seed);
        prop_assert_eq!(want.frames(), frames);
        prop_assert_eq!(streamed(&m, &prompt, &src, &cuts, sampling, seed), want);
    }

    #[test]
    fn framing_round_trips(chunks in proptest::collection::vec(proptest::collection::vec(0u32..1024, 0..5).prop_map(|f| f.repeat(4)), 0..5)) {
        let chunks: Vec<AcousticTokens> = chunks.into_iter().map(|c| AcousticTokens::new(c, 4).unwrap()).collect();
        let mut buf = Vec::new();
        for c in &chunks {
            write_chunk(&mut buf, c).unwrap();
        }
        prop_assert_eq!(read_all_chunks(&mut buf.as_slice(), 4).unwrap(), chunks);
        if !buf.is_empty() {
            prop_assert!(matches!(read_all_chunks(&mut &buf[..buf.len() - 1], 4), Err(Error::Argument(_))));
        }
    }
}

#[test]
fn emission_waits_for_the_lookahead() {
    for k in 0..6 {
        let m = model(k, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let prompt = codes(6, &mut rng);
        let src = codes(20, &mut rng);
        let mut s = StreamSession::open(m, &prompt, ConversionMode::Stream, Sampling::Greedy, 0).unwrap();
        for n in 1..=20 {
            let out = s.feed_chunk(&src.slice(n - 1, n)).unwrap();
            let expect_total = 2 * (n.saturating_sub(k) / 2);
            assert_eq!(s.emitted().frames(), expect_total, "k={k} after {n} frames");
            assert!(out.frames() == 0 || n >= k + 2);
        }
        assert_eq!(s.delay(), k);
    }
}

#[test]
fn sessions_are_isolated() {
    let m = model(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (p1, p2) = (codes(6, &mut rng), codes(4, &mut rng));
    let (s1, s2) = (codes(13, &mut rng), codes(9, &mut rng));
    let alone1 = streamed(&m, &p1, &s1, &[4, 8], Sampling::Greedy, 0);
    let alone2 = streamed(&m, &p2, &s2, &[1, 2, 3], Sampling::Greedy, 0);
    let mut a = StreamSession::open(m.clone(), &p1, ConversionMode::Stream, Sampling::Greedy, 0).unwrap();
    let mut b = StreamSession::open(m.clone(), &p2, ConversionMode::Stream, Sampling::Greedy, 0).unwrap();
    for j in 0..13 {
        a.feed_chunk(&s1.slice(j, j + 1)).unwrap();
        if j < 9 {
            b.feed_chunk(&s2.slice(j, j + 1)).unwrap();
        }
    }
    a.close().unwrap();
    b.close().unwrap();
    assert_eq!(a.emitted(), &alone1);
    assert_eq!(b.emitted(), &alone2);
}

#[test]
fn lifecycle_errors() {
    let m = model(2, 3);
    let prompt = codes(4, &mut ChaCha8Rng::seed_from_u64(0));
    let one = codes(1, &mut ChaCha8Rng::seed_from_u64(1));

    let mut off = StreamSession::open(m.clone(), &prompt, ConversionMode::NonStream, Sampling::Greedy, 0).unwrap();
    assert!(matches!(off.feed_chunk(&one), Err(Error::Mode(_))));

    let mut s = StreamSession::open(m.clone(), &prompt, ConversionMode::Stream, Sampling::Greedy, 0).unwrap();
    assert_eq!(s.close().unwrap().frames(), 0);
    assert!(s.is_closed());
    assert!(matches!(s.feed_chunk(&one), Err(Error::State(_))));
    assert!(matches!(s.close(), Err(Error::State(_))));

    let odd = codes(3, &mut ChaCha8Rng::seed_from_u64(2));
    assert!(matches!(
        StreamSession::open(m.clone(), &odd, ConversionMode::Stream, Sampling::Greedy, 0),
        Err(Error::Argument(_))
    ));
    let mut s = StreamSession::open(m, &prompt, ConversionMode::Stream, Sampling::Greedy, 0).unwrap();
    let bad = AcousticTokens::new(vec![64, 0, 0, 0], 4).unwrap();
    assert!(matches!(s.feed_chunk(&bad), Err(Error::Argument(_))));
}

#[test]
fn close_flushes_the_tail_once() {
    let m = model(4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prompt = codes(6, &mut rng);
    let src = codes(11, &mut rng);
    let mut s = StreamSession::open(m, &prompt, ConversionMode::Stream, Sampling::Greedy, 0).unwrap();
    assert_eq!(s.feed_chunk(&src).unwrap().frames(), 6);
    assert_eq!(s.close().unwrap().frames(), 5);
    assert_eq!(s.logits().len(), 11);
    let r = s.latency_report().unwrap();
    assert_eq!(r.delay_ms, 80.0);
    assert!(r.total_ms >= r.delay_ms + r.token_ms);
    assert_eq!(s.ledger().iter().map(|c| c.frames_out).sum::<usize>(), 11);
}

#[test]
fn offline_mode_uses_its_own_parameters() {
    let m = model(2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prompt = codes(6, &mut rng);
    let src = codes(14, &mut rng);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let a = m.convert(&prompt, &src, ConversionMode::NonStream, Sampling::Greedy, &mut r).unwrap();
    let b = m.convert(&prompt, &src, ConversionMode::Stream, Sampling::Greedy, &mut r).unwrap();
    assert_eq!(a.tokens.frames(), 14);
    assert_ne!(a.logits[0], b.logits[0]);
    let mut bare = (*m).clone();
    bare.nonstream = None;
    assert!(matches!(
        bare.convert(&prompt, &src, ConversionMode::NonStream, Sampling::Greedy, &mut r),
        Err(Error::Mode(_))
    ));
}
