//! Small randomly initialised models with every tensor perturbed, so that
//! zero-initialised adapters and branches are exercised too.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamconv::config::ExperimentConfig;
use streamconv::corpus::AcousticTokens;
use streamconv::model::ConversionModel;
use streamconv_nn::{Module, Param, Real};

pub fn tiny_config(delay: usize) -> ExperimentConfig {
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

pub fn jitter<S: Real>(m: &mut dyn Module<S>, scale: f64, rng: &mut ChaCha8Rng) {
    m.visit_mut("", &mut |_, p: &mut Param<S>| {
        for v in p.value.data_mut() {
            *v += S::of(rng.random_range(-scale..scale));
        }
    });
}

pub fn model(delay: usize, seed: u64) -> ConversionModel<f32> {
    let cfg = tiny_config(delay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ConversionModel::init(&cfg, true, &mut rng);
    jitter(&mut m.encoder, 0.2, &mut rng);
    jitter(&mut m.backbone, 0.2, &mut rng);
    let ns = m.nonstream.as_mut().expect("dual model");
    jitter(&mut ns.encoder_lora, 0.2, &mut rng);
    for t in [&mut m.stream, &mut ns.task] {
        jitter(&mut t.linear, 0.2, &mut rng);
        jitter(&mut t.connector, 0.2, &mut rng);
        jitter(t.lora.as_mut().expect("adapters"), 0.2, &mut rng);
    }
    m
}

pub fn shared(delay: usize, seed: u64) -> Arc<ConversionModel<f32>> {
    Arc::new(model(delay, seed))
}

/// Uniform random codes shaped like the default codec.
pub fn codes(frames: usize, rng: &mut impl Rng) -> AcousticTokens {
    let cfg = ExperimentConfig::default();
    let (l, v) = (cfg.corpus.num_quantizers, cfg.corpus.codec_vocab as u32);
    AcousticTokens::new((0..frames * l).map(|_| rng.random_range(0..v)).collect(), l).expect("well-formed")
}
