//! Acceptance report: one PASS/FAIL line per criterion, non-zero exit when
//! any criterion fails. The trained pipeline is shared by criteria 6-9.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamconv::backbone::Sampling;
use streamconv::checkpoint::{load_model, save_model, Checkpoint};
use streamconv::config::{ExperimentConfig, FinalLinear};
use streamconv::corpus::{generate_corpus, load_corpus, load_corpus_for, save_corpus, Corpus, CorpusSpec, World};
use streamconv::eval::{check_protocol, evaluate, run_arm, zero_shot_pairs, AblationAxis, EvalPair, Metrics};
use streamconv::model::{ConversionMode, ConversionModel};
use streamconv::pipeline::{Lab, TrainSet};
use streamconv::stream::LatencyReport;
use streamconv::trainer::{extend_dual_mode, param_digests, BackboneTuning, MetricsLog};
use streamconv::{Error, Result};
use streamconv_suite::{causality, contracts, gradcheck, Tally};

struct Report {
    lines: Vec<(String, bool)>,
}

impl Report {
    fn record(&mut self, id: &str, title: &str, pass: bool, detail: String, started: Instant) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let line = format!("[{verdict}] {id} {title}: {detail} ({:.1} s)", started.elapsed().as_secs_f64());
        println!("{line}");
        self.lines.push((line, pass));
    }
}

fn tally_note(name: &str, t: &Tally) -> String {
    format!("{name} {}", t.summary())
}

fn latency(r: &mut Report) {
    let t = Instant::now();
    let expected = 111.6;
    match LatencyReport::new(80.0, 20.0, 0.58, 0.004) {
        Ok(l) => {
            let gap = (l.total_ms - expected).abs();
            r.record(
                "1",
                "latency arithmetic",
                gap <= 1e-9,
                format!("total {:.6} ms vs expected {expected} ms (|diff| {gap:.2e}, tolerance 1e-9)", l.total_ms),
                t,
            );
        }
        Err(e) => r.record("1", "latency arithmetic", false, e.to_string(), t),
    }
}

fn causality_suite(r: &mut Report) {
    let t = Instant::now();
    let enc = causality::encoder_delay(256, 11);
    let lm = causality::lm_positions(24, 12);
    let chunks = causality::chunk_invariance(64, 13);
    let pass = enc.passed() && enc.cases >= 200 && lm.passed() && chunks.passed();
    let detail = [
        tally_note("encoder delay:", &enc),
        tally_note("backbone positions:", &lm),
        tally_note("stream chunking:", &chunks),
    ]
    .join("; ");
    r.record("2", "causality", pass, detail, t);
}

fn incremental(r: &mut Report) {
    let t = Instant::now();
    let (tally, worst) = contracts::incremental_vs_batch(50, 21);
    r.record(
        "3",
        "incremental vs batch",
        tally.passed() && tally.cases == 50,
        format!("{}; max logit gap {worst:.2e} (tolerance {:.0e})", tally.summary(), contracts::LOGIT_TOL),
        t,
    );
}

fn lora(r: &mut Report) {
    let t = Instant::now();
    let zero = contracts::lora_zero_init(16, 31);
    let (merge, worst) = contracts::lora_merge(16, 32);
    let structure = contracts::lora_structure();
    r.record(
        "4",
        "LoRA contracts",
        zero.passed() && merge.passed() && structure.passed(),
        format!(
            "{}; {}, max gap {worst:.2e}; {}",
            tally_note("zero-init identity:", &zero),
            tally_note("merge:", &merge),
            tally_note("q/k/v placement and count:", &structure)
        ),
        t,
    );
}

fn gradients(r: &mut Report) {
    let t = Instant::now();
    let checked = gradcheck::all();
    let failed: Vec<String> = checked
        .iter()
        .filter(|(_, o)| !o.passed())
        .map(|(what, o)| format!("{what} {:.2e} at {}", o.worst, o.at))
        .collect();
    let worst = checked.iter().map(|(_, o)| o.worst).fold(0.0, f64::max);
    let entries: usize = checked.iter().map(|(_, o)| o.checked).sum();
    let detail = if failed.is_empty() {
        format!("{} checks over {entries} entries, worst relative error {worst:.2e}", checked.len())
    } else {
        failed.join("; ")
    };
    r.record("5", "gradient checks", failed.is_empty(), detail, t);
}

struct Pipeline {
    cfg: ExperimentConfig,
    world: World,
    corpus: Corpus,
    train: Corpus,
    test: Corpus,
    pairs: Vec<EvalPair>,
    lab: Lab,
    model: ConversionModel<f32>,
    metrics: Metrics,
}

fn pipeline() -> Result<Pipeline> {
    let cfg = ExperimentConfig::default();
    cfg.validate()?;
    let world = World::new(&cfg.corpus)?;
    let corpus = generate_corpus(&world, CorpusSpec::from_config(&cfg.corpus))?;
    let (train, test) = corpus.split_holdout(cfg.corpus.holdout_speakers)?;
    let seen: Vec<u32> = train.speakers().iter().map(|s| s.speaker_id).collect();
    check_protocol(&seen, &test)?;
    let pairs = zero_shot_pairs(&test, cfg.eval.test_pairs, cfg.eval.seed)?;
    let mut lab = Lab::new(MetricsLog::memory());
    let model = lab.train(&cfg, TrainSet { tag: "full", corpus: &train }, BackboneTuning::Lora, false)?;
    let metrics = evaluate(&model, &world, &test, &pairs, ConversionMode::Stream)?;
    Ok(Pipeline {
        cfg,
        world,
        corpus,
        train,
        test,
        pairs,
        lab,
        model,
        metrics,
    })
}

fn end_to_end(r: &mut Report, p: &Pipeline, t: Instant) {
    let m = &p.metrics;
    let pass = m.encoder_accuracy >= 0.90 && m.content_accuracy >= 0.85 && m.speaker_transfer_accuracy >= 0.80;
    r.record(
        "7",
        "toy pipeline",
        pass,
        format!(
            "encoder {:.3} (>= 0.90), content {:.3} (>= 0.85), speaker transfer {:.3} (>= 0.80) on {} pairs; {} pretrain + {} finetune steps",
            m.encoder_accuracy,
            m.content_accuracy,
            m.speaker_transfer_accuracy,
            p.pairs.len(),
            p.cfg.train.pretrain_steps,
            p.cfg.train.finetune_steps
        ),
        t,
    );
}

type Digests = BTreeMap<String, String>;

fn stream_digests(m: &ConversionModel<f32>) -> Digests {
    let mut d = param_digests(&m.encoder, "encoder");
    d.extend(param_digests(&m.backbone, "backbone"));
    d.extend(param_digests(&m.stream.linear, "linear"));
    d.extend(param_digests(&m.stream.connector, "connector"));
    if let Some(l) = &m.stream.lora {
        d.extend(param_digests(l, "lora"));
    }
    if let Some(b) = &m.stream.backbone {
        d.extend(param_digests(b, "tuned"));
    }
    d
}

/// Greedy streaming conversions of every pair: tokens and raw logits.
fn stream_outputs(m: &ConversionModel<f32>, p: &Pipeline) -> Result<Vec<(Vec<u32>, Vec<f32>)>> {
    let path = m.path(ConversionMode::Stream)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    p.pairs
        .iter()
        .map(|pair| {
            let prompt = p.test.utterances[pair.prompt].crop(p.cfg.corpus.prompt_frames);
            let g = path.convert(&prompt.acoustic_tokens, &p.test.utterances[pair.source].acoustic_tokens, Sampling::Greedy, &mut rng)?;
            Ok((g.tokens.codes().to_vec(), g.logits.iter().flat_map(|l| l.data().to_vec()).collect()))
        })
        .collect()
}

/// Returns the dual-mode model for the serialization check.
fn freeze(r: &mut Report, p: &mut Pipeline, t: Instant) -> Result<ConversionModel<f32>> {
    let data = TrainSet { tag: "full", corpus: &p.train };
    let pre = p.lab.backbone(&p.cfg, data)?;
    let enc = p.lab.encoder(&p.cfg, data)?;
    let mut notes = Vec::new();

    // fine-tuning: backbone untouched, encoder untouched except its final linear
    let path = p.model.path(ConversionMode::Stream)?;
    let bb_same = param_digests(path.backbone, "backbone") == param_digests(&pre.backbone, "backbone")
        && p.model.stream.backbone.is_none();
    let linear = match p.cfg.encoder.final_linear {
        FinalLinear::Logits => "encoder.head.".to_string(),
        FinalLinear::LastBlockOutput => format!("encoder.blocks.{}.attn.wo.", p.cfg.encoder.layers - 1),
    };
    let before = param_digests(&*enc, "encoder");
    let after = param_digests(&path.view.encoder, "encoder");
    let moved: Vec<&String> = before.keys().filter(|k| before.get(*k) != after.get(*k)).collect();
    let enc_same = before.len() == after.len() && !moved.is_empty() && moved.iter().all(|k| k.starts_with(&linear));
    let tables = before.keys().filter(|k| k.contains("emb")).count()
        + param_digests(&pre.backbone, "backbone").keys().filter(|k| k.contains("emb")).count();
    notes.push(format!(
        "fine-tune: backbone unchanged {bb_same}, encoder changed only in {linear}* ({} tensors moved) {enc_same}, {tables} embedding tables hashed",
        moved.len()
    ));

    // dual-mode extension leaves the whole streaming path bit-identical
    let digests_before = stream_digests(&p.model);
    let outputs_before = stream_outputs(&p.model, p)?;
    let ns = extend_dual_mode(&p.cfg, &enc, &pre.backbone, &p.train, &pre.pairs, &mut p.lab.log)?;
    let mut dual = p.model.clone();
    dual.nonstream = Some(ns);
    let params_same = stream_digests(&dual) == digests_before;
    let outputs_same = stream_outputs(&dual, p)? == outputs_before;
    let offline = evaluate(&dual, &p.world, &p.test, &p.pairs, ConversionMode::NonStream)?;
    notes.push(format!(
        "dual extension: {} streaming tensors unchanged {params_same}, {} streaming conversions bit-identical {outputs_same} (offline content {:.3})",
        digests_before.len(),
        outputs_before.len(),
        offline.content_accuracy
    ));
    r.record("6", "freeze discipline", bb_same && enc_same && params_same && outputs_same, notes.join("; "), t);
    Ok(dual)
}

fn serialization(r: &mut Report, p: &Pipeline, dual: &ConversionModel<f32>, t: Instant) -> Result<()> {
    let dir = tempfile::tempdir()?;
    let ck = save_model(&p.cfg, dual)?;
    let bytes = ck.to_bytes();
    let file = dir.path().join("model.ckpt");
    ck.save(&file)?;
    let reread = Checkpoint::load(&file)?;
    let ck_exact = reread.to_bytes() == bytes && std::fs::read(&file)? == bytes;
    let loaded = load_model(&reread, &p.cfg)?;
    let all = |m: &ConversionModel<f32>| {
        let mut d = stream_digests(m);
        if let Some(ns) = &m.nonstream {
            d.extend(param_digests(&ns.encoder_lora, "ns.encoder-lora"));
            d.extend(param_digests(&ns.task.linear, "ns.linear"));
            d.extend(param_digests(&ns.task.connector, "ns.connector"));
            if let Some(l) = &ns.task.lora {
                d.extend(param_digests(l, "ns.lora"));
            }
        }
        d
    };
    let params_exact = all(&loaded) == all(dual) && stream_outputs(&loaded, p)? == stream_outputs(dual, p)?;

    let cdir = dir.path().join("corpus");
    save_corpus(&cdir, &p.cfg.corpus, &p.corpus)?;
    let (world_cfg, back) = load_corpus(&cdir)?;
    let cdir2 = dir.path().join("corpus2");
    save_corpus(&cdir2, &world_cfg, &back)?;
    let same_files = ["manifest.json", "corpus.bin"]
        .iter()
        .all(|f| std::fs::read(cdir.join(f)).ok() == std::fs::read(cdir2.join(f)).ok());
    let corpus_exact = back == p.corpus && world_cfg == p.cfg.corpus && same_files;

    let mut rejections = Vec::new();
    let mut other = p.cfg.clone();
    other.backbone.hidden *= 2;
    rejections.push(("backbone shape", load_model(&reread, &other).err()));
    let mut other = p.cfg.clone();
    other.lora.rank += 1;
    rejections.push(("adapter rank", load_model(&reread, &other).err()));
    let mut tampered = Checkpoint::from_bytes(&bytes)?;
    if let Some(fp) = tampered.manifest.groups.values_mut().next() {
        fp.push('0');
    }
    rejections.push(("edited fingerprint", load_model(&tampered, &p.cfg).err()));
    let mut corrupt = bytes.clone();
    corrupt[0] ^= 0xff;
    rejections.push(("bad magic", Checkpoint::from_bytes(&corrupt).err()));
    let mut wcfg = p.cfg.corpus.clone();
    wcfg.world_seed ^= 1;
    rejections.push(("corpus from another world", load_corpus_for(&cdir, &World::new(&wcfg)?).err()));
    let rejected = rejections.iter().all(|(_, e)| matches!(e, Some(Error::Version(_))));
    let detail = format!(
        "checkpoint ({} bytes, {} groups) round-trip {ck_exact}, reloaded model identical {params_exact}, corpus ({} utterances) round-trip {corpus_exact}, rejected: {}",
        bytes.len(),
        ck.manifest.groups.len(),
        p.corpus.utterances.len(),
        rejections
            .iter()
            .map(|(w, e)| format!("{w} {}", e.as_ref().map_or("ACCEPTED", kind)))
            .collect::<Vec<_>>()
            .join(", ")
    );
    r.record("9", "serialization", ck_exact && params_exact && corpus_exact && rejected, detail, t);
    Ok(())
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Argument(_) => "argument error",
        Error::Contract(_) => "contract error",
        Error::Mode(_) => "mode error",
        Error::State(_) => "state error",
        Error::Version(_) => "version error",
        Error::Protocol(_) => "protocol error",
        Error::Config(_) => "config error",
        Error::Invariant(_) => "invariant error",
        Error::Io(_) => "io error",
        Error::Json(_) => "json error",
    }
}

struct Direction {
    id: &'static str,
    title: &'static str,
    axis: AblationAxis,
    worse: &'static str,
    better: &'static str,
    metric: fn(&Metrics) -> f64,
    metric_name: &'static str,
}

fn ablations(r: &mut Report, p: &mut Pipeline) -> Result<()> {
    let content: fn(&Metrics) -> f64 = |m| m.content_accuracy;
    let directions = [
        Direction { id: "8a", title: "residual dim 0 vs 16", axis: AblationAxis::Residual, worse: "0", better: "16", metric: content, metric_name: "content" },
        Direction { id: "8b", title: "delay k=0 vs k=4", axis: AblationAxis::Delay, worse: "0", better: "4", metric: content, metric_name: "content" },
        Direction {
            id: "8c",
            title: "without vs with self-refinement",
            axis: AblationAxis::SelfRefine,
            worse: "0",
            better: "0.5",
            metric: |m| m.speaker_similarity,
            metric_name: "speaker similarity",
        },
        Direction { id: "8d", title: "frozen backbone vs LoRA", axis: AblationAxis::Lora, worse: "frozen", better: "lora", metric: content, metric_name: "content" },
        Direction { id: "8e", title: "small vs full corpus", axis: AblationAxis::DataSize, worse: "small", better: "full", metric: content, metric_name: "content" },
    ];
    for d in directions {
        let t = Instant::now();
        let mut scores = Vec::new();
        for label in [d.worse, d.better] {
            let arm = d
                .axis
                .arms(&p.cfg)
                .into_iter()
                .find(|a| a.label == label)
                .ok_or_else(|| Error::Argument(format!("no arm {label} on {}", d.axis.name())))?;
            // the base configuration was already trained and scored
            let m = if arm.cfg == p.cfg && arm.tuning == BackboneTuning::Lora && arm.data_fraction == 1.0 {
                p.metrics
            } else {
                run_arm(&mut p.lab, d.axis, arm, &p.world, &p.train, &p.test, &p.pairs)?.metrics
            };
            scores.push(m);
        }
        let (w, b) = ((d.metric)(&scores[0]), (d.metric)(&scores[1]));
        let others = format!(
            "content {:.3} / {:.3}, speaker transfer {:.3} / {:.3}, similarity {:.4} / {:.4}",
            scores[0].content_accuracy,
            scores[1].content_accuracy,
            scores[0].speaker_transfer_accuracy,
            scores[1].speaker_transfer_accuracy,
            scores[0].speaker_similarity,
            scores[1].speaker_similarity
        );
        r.record(
            d.id,
            d.title,
            w < b,
            format!("{} {w:.4} ({}) vs {b:.4} ({}); {others}", d.metric_name, d.worse, d.better),
            t,
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let mut r = Report { lines: Vec::new() };
    latency(&mut r);
    causality_suite(&mut r);
    incremental(&mut r);
    lora(&mut r);
    gradients(&mut r);

    let t = Instant::now();
    let trained = pipeline().and_then(|mut p| {
        end_to_end(&mut r, &p, t);
        let dual = freeze(&mut r, &mut p, Instant::now())?;
        serialization(&mut r, &p, &dual, Instant::now())?;
        ablations(&mut r, &mut p)
    });
    if let Err(e) = trained {
        r.record("6-9", "trained pipeline", false, format!("aborted: {e}"), t);
    }

    let failed: Vec<&String> = r.lines.iter().filter(|(_, ok)| !ok).map(|(l, _)| l).collect();
    println!("acceptance: {} of {} checks passed", r.lines.len() - failed.len(), r.lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for l in failed {
            println!("  failed: {l}");
        }
        ExitCode::FAILURE
    }
}
