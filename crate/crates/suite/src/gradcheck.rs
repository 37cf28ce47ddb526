//! Central finite differences against analytic gradients on width-8 models
//! in f64. Every loss term is checked on its own.
//!
//! Error per entry is |a - n| / max(|a|, |n|, 1e-6): relative for ordinary
//! gradients, absolute below 1e-6 where differencing noise dominates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamconv::backbone::{build_sequence, Backbone, BackboneDims, InterleavedSequence, SemInput, SemSlot, Targets};
use streamconv::config::AttentionMode;
use streamconv::connector::Connector;
use streamconv::corpus::AcousticTokens;
use streamconv::encoder::{encoder_loss, EncoderDims, EncoderGrads, SemanticEncoder};
use streamconv::loss::LossReport;
use streamconv::trainer::{Example, FinetuneModel};
use streamconv_nn::{Mat, Module, Param};

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

type Visit<T> = fn(&mut T, &mut dyn FnMut(&str, &mut Param<f64>));

#[derive(Clone, Debug)]
pub struct Outcome {
    pub worst: f64,
    pub at: String,
    pub checked: usize,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst < TOL
    }
}

/// Compares stored gradients of every trainable tensor with central
/// differences of `loss`.
fn fd_check<T>(model: &mut T, visit: Visit<T>, loss: &dyn Fn(&T) -> f64) -> Outcome {
    let mut grads = Vec::new();
    visit(model, &mut |n, p| {
        if p.requires_grad {
            grads.push((n.to_string(), p.grad.data().to_vec()));
        }
    });
    let mut out = Outcome {
        worst: 0.0,
        at: String::new(),
        checked: 0,
    };
    for (name, g) in grads {
        for (i, &a) in g.iter().enumerate() {
            let mut orig = 0.0;
            visit(model, &mut |n, p| {
                if n == name {
                    orig = p.value.data()[i];
                    p.value.data_mut()[i] = orig + H;
                }
            });
            let lp = loss(model);
            visit(model, &mut |n, p| {
                if n == name {
                    p.value.data_mut()[i] = orig - H;
                }
            });
            let lm = loss(model);
            visit(model, &mut |n, p| {
                if n == name {
                    p.value.data_mut()[i] = orig;
                }
            });
            let e = rel_err(a, (lp - lm) / (2.0 * H));
            out.checked += 1;
            if e > out.worst {
                out.worst = e;
                out.at = format!("{name}[{i}] analytic {a:e}");
            }
        }
    }
    out
}

fn randomize<M: Module<f64>>(m: &mut M, std: f64, rng: &mut ChaCha8Rng) {
    m.visit_mut("", &mut |_, p| {
        for v in p.value.data_mut() {
            *v = rng.random_range(-std..std);
        }
    });
}

fn tokens(frames: usize, quantizers: usize, vocab: u32, rng: &mut ChaCha8Rng) -> AcousticTokens {
    AcousticTokens::new((0..frames * quantizers).map(|_| rng.random_range(0..vocab)).collect(), quantizers).unwrap()
}

fn enc_dims() -> EncoderDims {
    EncoderDims {
        quantizers: 2,
        codec_vocab: 8,
        semantic_vocab: 6,
        sem_dim: 4,
        layers: 2,
        heads: 2,
        hidden: 8,
        intermediate: 16,
        max_frames: 16,
        delay: 1,
    }
}

fn bb_dims() -> BackboneDims {
    BackboneDims {
        quantizers: 2,
        codec_vocab: 8,
        semantic_vocab: 6,
        sem_dim: 4,
        layers: 2,
        heads: 2,
        hidden: 8,
        intermediate: 16,
        max_frames: 16,
        foresight_horizon: 2,
        foresight_loss: true,
    }
}

struct EncCase {
    enc: SemanticEncoder<f64>,
    lora: Vec<streamconv_nn::QkvLora<f64>>,
    inputs: Vec<AcousticTokens>,
    tokens: Vec<u32>,
    teacher: Mat<f64>,
    mode: AttentionMode,
}

fn enc_visit(c: &mut EncCase, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
    c.enc.visit_mut("encoder", f);
    c.lora.visit_mut("lora", f);
}

fn enc_case(mode: AttentionMode, seed: u64) -> EncCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = SemanticEncoder::<f64>::new(enc_dims(), &mut rng);
    let mut lora = enc.new_lora(2, 1.0, &mut rng);
    randomize(&mut lora, 0.3, &mut rng);
    let inputs = vec![tokens(6, 2, 8, &mut rng), tokens(5, 2, 8, &mut rng)];
    let rows = 3 + 3;
    let tokens: Vec<u32> = (0..rows).map(|_| rng.random_range(0..6)).collect();
    let teacher = Mat::from_fn(rows, 4, |_, _| rng.random_range(-1.0..1.0));
    EncCase {
        enc,
        lora,
        inputs,
        tokens,
        teacher,
        mode,
    }
}

fn enc_report(c: &EncCase) -> LossReport {
    let refs: Vec<&AcousticTokens> = c.inputs.iter().collect();
    let (h, _) = c.enc.forward(&refs, c.mode, Some(&c.lora)).unwrap();
    encoder_loss(&h, &c.tokens, &c.teacher).unwrap().0
}

fn enc_backprop(c: &mut EncCase, keep_ce: bool) {
    c.enc.zero_grad();
    c.lora.zero_grad();
    let refs: Vec<&AcousticTokens> = c.inputs.iter().collect();
    let (h, cache) = c.enc.forward(&refs, c.mode, Some(&c.lora)).unwrap();
    let (_, g) = encoder_loss(&h, &c.tokens, &c.teacher).unwrap();
    let g = if keep_ce {
        EncoderGrads {
            logits: g.logits,
            intermediate: vec![None; g.intermediate.len()],
            states: None,
        }
    } else {
        EncoderGrads {
            logits: None,
            intermediate: g.intermediate,
            states: None,
        }
    };
    c.enc.backward(&cache, &g, Some(&mut c.lora));
}

pub type Checked = Vec<(String, Outcome)>;

/// Encoder semantic cross-entropy, both attention modes, with adapters.
pub fn encoder_semantic_ce() -> Checked {
    [AttentionMode::Causal, AttentionMode::Bidirectional]
        .into_iter()
        .map(|mode| {
            let mut c = enc_case(mode, 11);
            enc_backprop(&mut c, true);
            let o = fd_check(&mut c, enc_visit, &|c| enc_report(c).s_ce.unwrap());
            (format!("encoder s_ce ({mode:?})"), o)
        })
        .collect()
}

/// Intermediate-layer regression onto continuous features.
pub fn encoder_intermediate_mse() -> Checked {
    [AttentionMode::Causal, AttentionMode::Bidirectional]
        .into_iter()
        .map(|mode| {
            let mut c = enc_case(mode, 12);
            enc_backprop(&mut c, false);
            let o = fd_check(&mut c, enc_visit, &|c| enc_report(c).s_mse.unwrap());
            (format!("encoder s_mse ({mode:?})"), o)
        })
        .collect()
}

struct BbCase {
    bb: Backbone<f64>,
    lora: Vec<streamconv_nn::QkvLora<f64>>,
    seqs: Vec<InterleavedSequence<f64>>,
    semantic: Vec<Vec<u32>>,
    teacher: Vec<Mat<f64>>,
    row_grads: Vec<Mat<f64>>,
}

fn bb_visit(c: &mut BbCase, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
    c.bb.visit_mut("backbone", f);
    c.lora.visit_mut("lora", f);
}

/// Wraps each sequence's `sem_rows` as a parameter so the same checker
/// covers the gradient handed back to the connector.
fn rows_visit(c: &mut BbCase, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
    for (i, s) in c.seqs.iter_mut().enumerate() {
        let mut p = Param::new(s.sem_rows.clone());
        p.grad = c.row_grads[i].clone();
        f(&format!("rows.{i}"), &mut p);
        s.sem_rows = p.value;
    }
}

fn bb_case(seed: u64) -> BbCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::<f64>::new(bb_dims(), &mut rng);
    let mut lora = bb.new_lora(2, 1.0, &mut rng);
    randomize(&mut lora, 0.3, &mut rng);
    let mut seqs = Vec::new();
    let mut semantic = Vec::new();
    let mut teacher = Vec::new();
    for (p, s) in [(2usize, 4usize), (1, 3)] {
        let ptok: Vec<u32> = (0..p).map(|_| rng.random_range(0..6)).collect();
        let stok: Vec<u32> = (0..s).map(|_| rng.random_range(0..6)).collect();
        let rows = Mat::from_fn(s, 8, |_, _| rng.random_range(-1.0..1.0));
        let pa = tokens(2 * p, 2, 8, &mut rng);
        let sa = tokens(2 * s, 2, 8, &mut rng);
        let mut seq = build_sequence(SemInput::Tokens(&ptok), &pa, SemInput::Embeddings(&rows), Some(&sa)).unwrap();
        if s > 3 {
            seq.sem[p + 1] = SemSlot::Mask;
        }
        seqs.push(seq);
        semantic.push(stok);
        teacher.push(Mat::from_fn(s, 4, |_, _| rng.random_range(-1.0..1.0)));
    }
    BbCase {
        bb,
        lora,
        seqs,
        semantic,
        teacher,
        row_grads: Vec::new(),
    }
}

fn bb_report(c: &BbCase) -> LossReport {
    let refs: Vec<&InterleavedSequence<f64>> = c.seqs.iter().collect();
    let (out, _) = c.bb.forward(&refs, Some(&c.lora)).unwrap();
    let targets: Vec<Targets<'_, f64>> = (0..c.seqs.len())
        .map(|i| Targets {
            semantic: &c.semantic[i],
            teacher: Some(&c.teacher[i]),
        })
        .collect();
    c.bb.loss(&out, &targets).unwrap().0
}

#[derive(Clone, Copy, Debug)]
pub enum Term {
    Acoustic,
    Semantic,
    Foresight,
}

/// Backpropagates one term; returns the gradients w.r.t. `sem_rows`.
fn bb_backprop(c: &mut BbCase, term: Term) -> Vec<Mat<f64>> {
    c.bb.zero_grad();
    c.lora.zero_grad();
    let refs: Vec<&InterleavedSequence<f64>> = c.seqs.iter().collect();
    let (out, cache) = c.bb.forward(&refs, Some(&c.lora)).unwrap();
    let targets: Vec<Targets<'_, f64>> = (0..c.seqs.len())
        .map(|i| Targets {
            semantic: &c.semantic[i],
            teacher: Some(&c.teacher[i]),
        })
        .collect();
    let (_, mut g) = c.bb.loss(&out, &targets).unwrap();
    let zero = |m: &mut Mat<f64>| m.fill(0.0);
    match term {
        Term::Acoustic => {
            zero(&mut g.sem_logits);
            zero(&mut g.foresight);
        }
        Term::Semantic => {
            g.ac_logits.iter_mut().for_each(zero);
            zero(&mut g.foresight);
        }
        Term::Foresight => {
            g.ac_logits.iter_mut().for_each(zero);
            zero(&mut g.sem_logits);
        }
    }
    c.bb.backward(&refs, &out, &cache, &g, Some(&mut c.lora))
}

fn term_value(r: &LossReport, term: Term) -> f64 {
    match term {
        Term::Acoustic => r.a_ce.unwrap(),
        Term::Semantic => r.s_ce.unwrap(),
        Term::Foresight => r.tf.unwrap(),
    }
}

/// One backbone loss term, on parameters and on the semantic input rows
/// (the gradient handed back to the connector).
pub fn backbone_term(term: Term) -> Checked {
    let mut c = bb_case(21);
    let drows = bb_backprop(&mut c, term);
    let params = fd_check(&mut c, bb_visit, &|c| term_value(&bb_report(c), term));

    let mut c2 = bb_case(21);
    c2.row_grads = drows;
    let rows = fd_check(&mut c2, rows_visit, &|c| term_value(&bb_report(c), term));
    vec![
        (format!("backbone {term:?} parameters"), params),
        (format!("backbone {term:?} input rows"), rows),
    ]
}

struct FtCase {
    model: FinetuneModel<f64>,
    prompts: Vec<AcousticTokens>,
    inputs: Vec<AcousticTokens>,
    targets: Vec<AcousticTokens>,
    semantic: Vec<Vec<u32>>,
    teacher: Vec<Mat<f64>>,
}

fn ft_visit(c: &mut FtCase, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
    c.model.encoder.visit_mut("encoder", f);
    c.model.connector.visit_mut("connector", f);
    c.model.backbone.visit_mut("backbone", f);
    c.model.lora.visit_mut("lora", f);
}

fn ft_step(c: &mut FtCase) -> LossReport {
    let batch: Vec<Example<'_, f64>> = (0..c.inputs.len())
        .map(|i| Example {
            prompt: &c.prompts[i],
            input: &c.inputs[i],
            target: &c.targets[i],
            semantic: &c.semantic[i],
            teacher: &c.teacher[i],
        })
        .collect();
    c.model.step(&batch).unwrap()
}

fn ft_case(seed: u64, own_table: bool) -> FtCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = SemanticEncoder::<f64>::new(enc_dims(), &mut rng);
    let backbone = Backbone::<f64>::new(bb_dims(), &mut rng);
    let mut lora = backbone.new_lora(2, 1.0, &mut rng);
    randomize(&mut lora, 0.3, &mut rng);
    let mut connector = Connector::new(8, 8, 6, 4, own_table, &mut rng);
    // the residual up-projection starts at zero; move off that point
    randomize(&mut connector, 0.5, &mut rng);
    let mut prompts = Vec::new();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut semantic = Vec::new();
    let mut teacher = Vec::new();
    for s in [3usize, 2] {
        prompts.push(tokens(4, 2, 8, &mut rng));
        inputs.push(tokens(2 * s, 2, 8, &mut rng));
        targets.push(tokens(2 * s, 2, 8, &mut rng));
        semantic.push((0..s).map(|_| rng.random_range(0..6)).collect());
        teacher.push(Mat::from_fn(s, 4, |_, _| rng.random_range(-1.0..1.0)));
    }
    FtCase {
        model: FinetuneModel {
            encoder,
            encoder_lora: None,
            mode: AttentionMode::Causal,
            connector,
            backbone,
            lora: Some(lora),
        },
        prompts,
        inputs,
        targets,
        semantic,
        teacher,
    }
}

/// Full fine-tuning objective through backbone, connector and encoder.
pub fn end_to_end() -> Checked {
    let mut out = Vec::new();
    for own_table in [false, true] {
        let mut c = ft_case(31, own_table);
        ft_step(&mut c);
        let o = fd_check(&mut c, ft_visit, &|c| {
            // forward-only evaluation on a scratch copy
            let mut s = FtCase {
                model: FinetuneModel {
                    encoder: c.model.encoder.clone(),
                    encoder_lora: None,
                    mode: c.model.mode,
                    connector: c.model.connector.clone(),
                    backbone: c.model.backbone.clone(),
                    lora: c.model.lora.clone(),
                },
                prompts: c.prompts.clone(),
                inputs: c.inputs.clone(),
                targets: c.targets.clone(),
                semantic: c.semantic.clone(),
                teacher: c.teacher.clone(),
            };
            ft_step(&mut s).total
        });
        out.push((format!("end to end (own table: {own_table})"), o));
    }
    out
}

/// Every check above.
pub fn all() -> Checked {
    let mut out = encoder_semantic_ce();
    out.extend(encoder_intermediate_mse());
    for t in [Term::Acoustic, Term::Semantic, Term::Foresight] {
        out.extend(backbone_term(t));
    }
    out.extend(end_to_end());
    out
}
