mod run;

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use streamconv::backbone::Sampling;
use streamconv::checkpoint::{self, Checkpoint};
use streamconv::config::{AttentionMode, ExperimentConfig};
use streamconv::corpus::{generate_corpus, load_corpus_for, save_corpus, AcousticTokens, Corpus, CorpusSpec, World};
use streamconv::eval::{
    check_protocol, evaluate, flag_identity, model_fingerprints, run_ablation, zero_shot_pairs, AblationAxis,
    EvalPair, EvalReport,
};
use streamconv::model::{ConversionMode, ConversionModel};
use streamconv::pipeline::{Lab, PretrainedBackbone};
use streamconv::stream::{read_all_chunks, write_chunk, LatencyReport, StreamSession};
use streamconv::trainer::{
    build_refinement_pairs, extend_dual_mode, finetune, pretrain_backbone, pretrain_encoder, BackboneTuning,
    FinetuneSetup, MetricsLog, Stage,
};
use streamconv::{Error, Result};

use crate::run::*;

#[derive(Parser)]
#[command(name = "streamconv", version, about = "Streaming zero-shot voice conversion over codec tokens")]
struct Cli {
    /// TOML configuration; defaults apply to every key it leaves out.
    #[arg(long, global = true, env = "STREAMCONV_CONFIG")]
    config: Option<PathBuf>,
    /// Directory holding all artifacts of one run.
    #[arg(long, global = true, env = "STREAMCONV_RUN_DIR", default_value = "run")]
    run_dir: PathBuf,
    /// Redo a stage even when its recorded inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and split off held-out speakers.
    GenData,
    /// Pre-train the backbone and the causal semantic encoder.
    Pretrain,
    /// Synthesise conversion pairs with the pre-trained backbone.
    RefinePairs,
    /// Fine-tune the streaming path (linear, connector, backbone adapters).
    Finetune {
        /// lora | frozen | trainable
        #[arg(long, default_value = "lora")]
        tuning: BackboneTuning,
    },
    /// Add offline-mode parameters without touching the streaming path.
    ExtendDual,
    /// Convert a framed token stream towards the voice of a prompt.
    Convert(ConvertArgs),
    /// Measure the latency ledger, or evaluate the formula directly.
    BenchLatency(BenchArgs),
    /// Score the trained model on zero-shot test pairs.
    Evaluate {
        #[arg(long, default_value = "stream")]
        mode: ConversionMode,
    },
    /// Retrain along one ablation axis and report every arm.
    Ablate {
        /// delay | layers | residual | self-refine | lora | data-size
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long, default_value = "stream")]
    mode: ConversionMode,
    /// Framed prompt tokens of the target speaker.
    #[arg(long)]
    prompt: PathBuf,
    /// Framed source tokens; `-` reads standard input.
    #[arg(long, default_value = "-")]
    source: PathBuf,
    /// Framed output tokens; `-` writes standard output.
    #[arg(long, default_value = "-")]
    output: PathBuf,
    /// Top-k sampling; 0 decodes greedily.
    #[arg(long, default_value_t = 0)]
    top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Evaluate the formula for these inputs instead of running sessions.
    #[arg(long, requires_all = ["token_ms", "rtf_model", "rtf_codec"])]
    delay_ms: Option<f64>,
    #[arg(long, requires = "delay_ms")]
    token_ms: Option<f64>,
    #[arg(long, requires = "delay_ms")]
    rtf_model: Option<f64>,
    #[arg(long, requires = "delay_ms")]
    rtf_codec: Option<f64>,
    /// Test pairs to stream.
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    /// Acoustic frames per fed chunk.
    #[arg(long, default_value_t = 1)]
    chunk_frames: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) => 2,
        Error::State(_) | Error::Mode(_) => 3,
        Error::Version(_) => 4,
        Error::Protocol(_) => 5,
        Error::Io(_) | Error::Json(_) => 6,
        Error::Contract(_) | Error::Invariant(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    text: String,
    run: RunDir,
    force: bool,
}

impl Ctx {
    fn log(&self) -> Result<MetricsLog> {
        MetricsLog::append_to(&self.run.path(METRICS))
    }

    /// Runs `body` unless the stage record says its outputs are current.
    fn stage(&mut self, name: &str, upstream: &[&str], outputs: &[&str], body: impl FnOnce(&mut Self) -> Result<()>) -> Result<()> {
        let key = self.run.inputs_key(name, &self.text, upstream)?;
        if !self.force && self.run.up_to_date(name, &key) {
            eprintln!("{name}: up to date");
            return Ok(());
        }
        let t = Instant::now();
        body(self)?;
        self.run.manifest.config_fingerprints = model_fingerprints(&self.cfg);
        self.run.record(name, key, outputs)?;
        eprintln!("{name}: done in {:.1}s", t.elapsed().as_secs_f64());
        Ok(())
    }

    fn train_data(&self) -> Result<Corpus> {
        self.data(TRAIN_DATA)
    }

    fn data(&self, rel: &str) -> Result<Corpus> {
        let dir = self.run.require(rel, "gen-data")?;
        load_corpus_for(&dir, &World::new(&self.cfg.corpus)?).map_err(|e| match e {
            Error::Version(m) => Error::Version(format!("{m} (rerun `streamconv gen-data`)")),
            e => e,
        })
    }

    fn model(&self) -> Result<(Checkpoint, ConversionModel<f32>)> {
        let ck = Checkpoint::load(&self.run.require(MODEL, "finetune")?)?;
        let model = checkpoint::load_model(&ck, &self.cfg)?;
        Ok((ck, model))
    }

    fn eval_pairs(&self, test: &Corpus) -> Result<Vec<EvalPair>> {
        let mut pairs = zero_shot_pairs(test, self.cfg.eval.test_pairs, self.cfg.eval.seed)?;
        flag_identity(test, &mut pairs);
        Ok(pairs)
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let (cfg, text) = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            (ExperimentConfig::from_toml(&text)?, text)
        }
        None => {
            let cfg = ExperimentConfig::default();
            let text = cfg.to_toml();
            (cfg, text)
        }
    };
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    if let Command::BenchLatency(BenchArgs {
        delay_ms: Some(d),
        token_ms: Some(t),
        rtf_model: Some(m),
        rtf_codec: Some(c),
        ..
    }) = cli.command
    {
        println!("{}", LatencyReport::new(d, t, m, c)?.to_json_line());
        return Ok(());
    }
    let mut ctx = Ctx {
        cfg,
        text,
        run: RunDir::open(&cli.run_dir)?,
        force: cli.force,
    };
    match cli.command {
        Command::GenData => gen_data(&mut ctx),
        Command::Pretrain => pretrain(&mut ctx),
        Command::RefinePairs => refine_pairs(&mut ctx),
        Command::Finetune { tuning } => finetune_cmd(&mut ctx, tuning),
        Command::ExtendDual => extend_dual(&mut ctx),
        Command::Convert(a) => convert(&ctx, &a),
        Command::BenchLatency(a) => bench(&ctx, &a),
        Command::Evaluate { mode } => evaluate_cmd(&ctx, mode),
        Command::Ablate { axis } => ablate(&ctx, axis),
        Command::ShowConfig => unreachable!(),
    }
}

fn gen_data(ctx: &mut Ctx) -> Result<()> {
    ctx.stage("gen-data", &[], &[CONFIG, TRAIN_DATA, TEST_DATA], |ctx| {
        let world = World::new(&ctx.cfg.corpus)?;
        let corpus = generate_corpus(&world, CorpusSpec::from_config(&ctx.cfg.corpus))?;
        let (train, test) = corpus.split_holdout(ctx.cfg.corpus.holdout_speakers)?;
        save_corpus(&ctx.run.path(TRAIN_DATA), &ctx.cfg.corpus, &train)?;
        save_corpus(&ctx.run.path(TEST_DATA), &ctx.cfg.corpus, &test)?;
        std::fs::write(ctx.run.path(CONFIG), ctx.cfg.to_toml())?;
        eprintln!(
            "gen-data: {} train utterances, {} test utterances",
            train.utterances.len(),
            test.utterances.len()
        );
        Ok(())
    })
}

fn pretrain(ctx: &mut Ctx) -> Result<()> {
    ctx.run.require(TRAIN_DATA, "gen-data")?;
    ctx.stage("pretrain", &[TRAIN_DATA], &[PRETRAINED], |ctx| {
        let train = ctx.train_data()?;
        let mut log = ctx.log()?;
        eprintln!("pretrain: backbone, {} steps", ctx.cfg.train.pretrain_steps);
        let bb = pretrain_backbone(&ctx.cfg, &train, &mut log)?;
        eprintln!("pretrain: encoder, {} steps", ctx.cfg.train.encoder_steps);
        let enc = pretrain_encoder(&ctx.cfg, &train, &mut log)?;
        let mut ck = Checkpoint::new();
        checkpoint::save_pretrained(&mut ck, &ctx.cfg, &enc, &bb)?;
        ck.set_meta("train_speakers", &speaker_ids(&train))?;
        ck.save(&ctx.run.path(PRETRAINED))
    })
}

fn speaker_ids(c: &Corpus) -> Vec<u32> {
    c.speakers().iter().map(|s| s.speaker_id).collect()
}

fn refine_pairs(ctx: &mut Ctx) -> Result<()> {
    ctx.run.require(TRAIN_DATA, "gen-data")?;
    ctx.run.require(PRETRAINED, "pretrain")?;
    ctx.stage("refine-pairs", &[TRAIN_DATA, PRETRAINED], &[PAIRS], |ctx| {
        let train = ctx.train_data()?;
        let (_, bb) = checkpoint::load_pretrained(&Checkpoint::load(&ctx.run.path(PRETRAINED))?, &ctx.cfg)?;
        let pairs = build_refinement_pairs(&ctx.cfg, &bb, &train, ctx.cfg.train.refine_pairs, ctx.cfg.train.seed ^ 0x9a1)?;
        save_pairs(&ctx.run.path(PAIRS), &pairs)
    })
}

fn finetune_cmd(ctx: &mut Ctx, tuning: BackboneTuning) -> Result<()> {
    for (rel, producer) in [(TRAIN_DATA, "gen-data"), (PRETRAINED, "pretrain"), (PAIRS, "refine-pairs")] {
        ctx.run.require(rel, producer)?;
    }
    let stage = format!("finetune-{}", tuning_name(tuning));
    ctx.stage(&stage, &[TRAIN_DATA, PRETRAINED, PAIRS], &[MODEL], |ctx| {
        let train = ctx.train_data()?;
        let pre = Checkpoint::load(&ctx.run.path(PRETRAINED))?;
        let (enc, bb) = checkpoint::load_pretrained(&pre, &ctx.cfg)?;
        let pairs = load_pairs(&ctx.run.path(PAIRS))?;
        let mut log = ctx.log()?;
        let task = finetune(
            &ctx.cfg,
            &FinetuneSetup {
                encoder: &enc,
                encoder_lora: None,
                mode: AttentionMode::Causal,
                backbone: &bb,
                train: &train,
                pairs: &pairs,
                tuning,
                self_refine_prob: ctx.cfg.train.self_refine_prob,
                steps: ctx.cfg.train.finetune_steps,
                stage: Stage::Finetune,
            },
            &mut log,
        )?;
        let mut ck = Checkpoint::new();
        checkpoint::save_pretrained(&mut ck, &ctx.cfg, &enc, &bb)?;
        checkpoint::save_stream_task(&mut ck, &ctx.cfg, &task)?;
        ck.set_meta("train_speakers", &speaker_ids(&train))?;
        ck.set_meta("tuning", &tuning_name(tuning))?;
        ck.save(&ctx.run.path(MODEL))
    })
}

fn tuning_name(t: BackboneTuning) -> &'static str {
    match t {
        BackboneTuning::Lora => "lora",
        BackboneTuning::Frozen => "frozen",
        BackboneTuning::Full => "trainable",
    }
}

fn extend_dual(ctx: &mut Ctx) -> Result<()> {
    for (rel, producer) in [(TRAIN_DATA, "gen-data"), (PAIRS, "refine-pairs"), (MODEL, "finetune")] {
        ctx.run.require(rel, producer)?;
    }
    let ck = Checkpoint::load(&ctx.run.path(MODEL))?;
    if ck.has_group(checkpoint::GROUP_ENCODER_LORA) && !ctx.force {
        eprintln!("extend-dual: up to date");
        return Ok(());
    }
    ctx.stage("extend-dual", &[TRAIN_DATA, PAIRS, MODEL], &[MODEL], move |ctx| {
        let train = ctx.train_data()?;
        let model = checkpoint::load_model(&ck, &ctx.cfg)?;
        let pairs = load_pairs(&ctx.run.path(PAIRS))?;
        let mut log = ctx.log()?;
        let ns = extend_dual_mode(&ctx.cfg, &model.encoder, &model.backbone, &train, &pairs, &mut log)?;
        let mut out = ck.clone();
        if out.has_group(checkpoint::GROUP_ENCODER_LORA) {
            // --force: rebuild from the streaming groups only
            let mut m = model.clone();
            m.nonstream = None;
            let meta = out.manifest.metadata.clone();
            out = checkpoint::save_model(&ctx.cfg, &m)?;
            out.manifest.metadata = meta;
        }
        checkpoint::save_dual(&mut out, &ctx.cfg, &ns)?;
        out.save(&ctx.run.path(MODEL))
    })
}

fn read_framed(path: &Path, quantizers: usize) -> Result<Vec<AcousticTokens>> {
    if path == Path::new("-") {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        read_all_chunks(&mut buf.as_slice(), quantizers)
    } else {
        read_all_chunks(&mut std::fs::File::open(path)?, quantizers)
    }
}

fn concat(chunks: &[AcousticTokens], quantizers: usize) -> AcousticTokens {
    let mut all = AcousticTokens::empty(quantizers);
    for c in chunks {
        all.extend(c);
    }
    all
}

fn convert(ctx: &Ctx, a: &ConvertArgs) -> Result<()> {
    let (_, model) = ctx.model()?;
    model.path_shared(a.mode)?;
    let q = ctx.cfg.corpus.num_quantizers;
    let prompt = concat(&read_framed(&a.prompt, q)?, q);
    let source = read_framed(&a.source, q)?;
    let sampling = if a.top_k == 0 {
        Sampling::Greedy
    } else {
        Sampling::TopK {
            k: a.top_k,
            temperature: a.temperature,
        }
    };
    let mut out: Box<dyn Write> = if a.output == Path::new("-") {
        Box::new(BufWriter::new(std::io::stdout().lock()))
    } else {
        Box::new(BufWriter::new(std::fs::File::create(&a.output)?))
    };
    let mut emit = |chunk: &AcousticTokens| -> Result<()> {
        if !chunk.is_empty() {
            write_chunk(&mut out, chunk)?;
        }
        Ok(())
    };
    match a.mode {
        ConversionMode::Stream => {
            let mut s = StreamSession::open(Arc::new(model), &prompt, a.mode, sampling, a.seed)?;
            for c in &source {
                emit(&s.feed_chunk(c)?)?;
            }
            emit(&s.close()?)?;
            eprintln!("{}", s.latency_report()?.to_json_line());
        }
        ConversionMode::NonStream => {
            let all = concat(&source, q);
            if !all.is_empty() {
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                emit(&model.convert(&prompt, &all, a.mode, sampling, &mut rng)?.tokens)?;
            }
        }
    }
    drop(emit);
    out.flush()?;
    Ok(())
}

fn bench(ctx: &Ctx, a: &BenchArgs) -> Result<()> {
    if a.chunk_frames == 0 {
        return Err(Error::Argument("--chunk-frames must be positive".into()));
    }
    let (_, model) = ctx.model()?;
    let model = Arc::new(model);
    let test = ctx.data(TEST_DATA)?;
    let mut pairs = ctx.eval_pairs(&test)?;
    pairs.truncate(a.pairs);
    let (mut rtf, mut total) = (0.0, 0.0);
    for (i, p) in pairs.iter().enumerate() {
        let prompt = test.utterances[p.prompt].crop(ctx.cfg.corpus.prompt_frames);
        let src = &test.utterances[p.source].acoustic_tokens;
        let mut s = StreamSession::open(model.clone(), &prompt.acoustic_tokens, ConversionMode::Stream, Sampling::Greedy, 0)?;
        for start in (0..src.frames()).step_by(a.chunk_frames) {
            s.feed_chunk(&src.slice(start, (start + a.chunk_frames).min(src.frames())))?;
        }
        s.close()?;
        let r = s.latency_report()?;
        rtf += r.rtf_model;
        total += r.total_ms;
        let mut line = serde_json::to_value(r)?;
        line["pair"] = json!(i);
        line["frames"] = json!(src.frames());
        println!("{line}");
    }
    let n = pairs.len().max(1) as f64;
    println!(
        "{}",
        json!({"summary": true, "sessions": pairs.len(), "mean_rtf_model": rtf / n, "mean_total_ms": total / n})
    );
    Ok(())
}

fn protocol_checked_test(ctx: &Ctx, ck: &Checkpoint) -> Result<Corpus> {
    let test = ctx.data(TEST_DATA)?;
    let train_speakers: Vec<u32> = ck
        .meta("train_speakers")?
        .ok_or_else(|| Error::Version("checkpoint lacks train speaker metadata".into()))?;
    check_protocol(&train_speakers, &test)?;
    Ok(test)
}

fn evaluate_cmd(ctx: &Ctx, mode: ConversionMode) -> Result<()> {
    let (ck, model) = ctx.model()?;
    let test = protocol_checked_test(ctx, &ck)?;
    let world = World::new(&ctx.cfg.corpus)?;
    let pairs = ctx.eval_pairs(&test)?;
    let m = evaluate(&model, &world, &test, &pairs, mode)?;
    let report = EvalReport::new(mode, &pairs, m, model_fingerprints(&ctx.cfg));
    let text = serde_json::to_string_pretty(&report)?;
    let name = match mode {
        ConversionMode::Stream => "report-stream.json",
        ConversionMode::NonStream => "report-nonstream.json",
    };
    std::fs::write(ctx.run.path(name), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn ablate(ctx: &Ctx, axis: AblationAxis) -> Result<()> {
    let train = ctx.train_data()?;
    let test = ctx.data(TEST_DATA)?;
    check_protocol(&speaker_ids(&train), &test)?;
    let world = World::new(&ctx.cfg.corpus)?;
    let pairs = ctx.eval_pairs(&test)?;
    let mut lab = Lab::new(ctx.log()?);
    // reuse stage artifacts of the base configuration when present
    if let Ok(ck) = Checkpoint::load(&ctx.run.path(PRETRAINED)) {
        if let Ok((enc, bb)) = checkpoint::load_pretrained(&ck, &ctx.cfg) {
            let pairs = load_pairs(&ctx.run.path(PAIRS)).ok();
            let backbone = pairs.map(|pairs| PretrainedBackbone { backbone: bb, pairs });
            lab.seed(&ctx.cfg, "full", backbone, Some(enc));
        }
    }
    let base = match ctx.model() {
        Ok((_, m)) => m,
        Err(_) => lab.train(
            &ctx.cfg,
            streamconv::pipeline::TrainSet {
                tag: "full",
                corpus: &train,
            },
            BackboneTuning::Lora,
            false,
        )?,
    };
    let m = evaluate(&base, &world, &test, &pairs, ConversionMode::Stream)?;
    let mut report = EvalReport::new(ConversionMode::Stream, &pairs, m, model_fingerprints(&ctx.cfg));
    report.ablations = run_ablation(&mut lab, axis, &ctx.cfg, &world, &train, &test, &pairs)?;
    for r in &report.ablations {
        eprintln!(
            "{:<12} {:<10} content {:.3}  speaker {:.3}  similarity {:.3}  ({})",
            axis.name(),
            r.arm,
            r.metrics.content_accuracy,
            r.metrics.speaker_transfer_accuracy,
            r.metrics.speaker_similarity,
            r.delta
        );
    }
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(ctx.run.path(&format!("ablate-{}.json", axis.name())), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}
