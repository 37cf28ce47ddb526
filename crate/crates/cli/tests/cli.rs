//! End-to-end runs of the binary on a configuration small enough to train
//! every stage in seconds.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use streamconv::checkpoint::{Checkpoint, DUAL_GROUPS};
use streamconv::corpus::{load_corpus, AcousticTokens};
use streamconv::stream::{read_all_chunks, write_chunk};

const TINY: &str = r#"
[corpus]
num_speakers = 8
holdout_speakers = 3
utterances_per_speaker = 6
min_frames = 4
max_frames = 8
prompt_frames = 3

[encoder]
layers = 1
heads = 2
hidden = 16
intermediate = 32
delay_steps = 2

[backbone]
layers = 1
hidden = 16
heads = 2
intermediate = 32

[lora]
rank = 2

[connector]
residual_dim = 4

[train]
batch_size = 4
pretrain_steps = 6
encoder_steps = 6
finetune_steps = 4
dual_steps = 4
refine_pairs = 6

[eval]
test_pairs = 5
"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let config = dir.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        Self { _dir: dir, root, config }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_streamconv"))
            .args(["--config", self.config.to_str().unwrap(), "--run-dir", self.root.to_str().unwrap()])
            .args(args)
            .env_remove("STREAMCONV_CONFIG")
            .env_remove("STREAMCONV_RUN_DIR")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn trained(self) -> Self {
        for stage in ["gen-data", "pretrain", "refine-pairs", "finetune"] {
            self.ok(&[stage]);
        }
        self
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_framed(path: &Path, chunks: &[AcousticTokens]) {
    let mut buf = Vec::new();
    for c in chunks {
        write_chunk(&mut buf, c).unwrap();
    }
    std::fs::write(path, buf).unwrap();
}

#[test]
fn full_pipeline_convert_and_evaluate() {
    let run = Run::new().trained();

    // stages are idempotent
    let again = run.ok(&["pretrain"]);
    assert!(stderr(&again).contains("up to date"));

    let (_, test) = load_corpus(&run.path("data/test")).unwrap();
    let prompt = test.utterances[0].crop(3).acoustic_tokens;
    let src = test.utterances[test.utterances.len() - 1].acoustic_tokens.clone();
    let p = run.path("prompt.bin");
    let s = run.path("source.bin");
    write_framed(&p, &[prompt]);
    let cuts = [0, 3, 4, src.frames()];
    let chunks: Vec<_> = cuts.windows(2).map(|w| src.slice(w[0], w[1])).collect();
    write_framed(&s, &chunks);

    let o = run.path("out.bin");
    let out = run.ok(&["convert", "--prompt", p.to_str().unwrap(), "--source", s.to_str().unwrap(), "--output", o.to_str().unwrap()]);
    let latency: serde_json::Value = serde_json::from_str(stderr(&out).lines().last().unwrap()).unwrap();
    assert_eq!(latency["delay_ms"], 40.0);
    let got = read_all_chunks(&mut std::fs::File::open(&o).unwrap(), 4).unwrap();
    let total: usize = got.iter().map(|c| c.frames()).sum();
    assert_eq!(total, src.frames());

    // same input in one chunk gives the same tokens
    write_framed(&s, &[src.clone()]);
    let o2 = run.path("out2.bin");
    run.ok(&["convert", "--prompt", p.to_str().unwrap(), "--source", s.to_str().unwrap(), "--output", o2.to_str().unwrap()]);
    let one: Vec<u32> = read_all_chunks(&mut std::fs::File::open(&o2).unwrap(), 4).unwrap().iter().flat_map(|c| c.codes().to_vec()).collect();
    let many: Vec<u32> = got.iter().flat_map(|c| c.codes().to_vec()).collect();
    assert_eq!(one, many);

    // empty source: empty output, success
    std::fs::write(&s, b"").unwrap();
    let empty = run.path("empty.bin");
    run.ok(&["convert", "--prompt", p.to_str().unwrap(), "--source", s.to_str().unwrap(), "--output", empty.to_str().unwrap()]);
    assert_eq!(std::fs::read(&empty).unwrap().len(), 0);

    // offline mode needs extend-dual
    let no_dual = run.cmd(&["convert", "--mode", "nonstream", "--prompt", p.to_str().unwrap(), "--source", s.to_str().unwrap(), "--output", empty.to_str().unwrap()]);
    assert_eq!(no_dual.status.code(), Some(3), "{}", stderr(&no_dual));

    let report = run.ok(&["evaluate"]);
    let report: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert_eq!(report["pairs"], 5);
    assert_eq!(report["style_correlation"], "n/a");
    for k in ["content_accuracy", "speaker_transfer_accuracy", "encoder_accuracy"] {
        let v = report[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
    assert_eq!(report["checkpoints"].as_object().unwrap().len(), 3);
    assert!(run.path("report-stream.json").exists());

    let bench = run.ok(&["bench-latency", "--pairs", "2"]);
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&bench.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["summary"], true);
}

#[test]
fn extend_dual_adds_exactly_the_offline_groups() {
    let run = Run::new().trained();
    let before = Checkpoint::load(&run.path("model.ckpt")).unwrap();
    run.ok(&["extend-dual"]);
    let after = Checkpoint::load(&run.path("model.ckpt")).unwrap();
    let old: Vec<&String> = before.manifest.groups.keys().collect();
    let mut added: Vec<&str> = after
        .manifest
        .groups
        .keys()
        .filter(|g| !old.contains(g))
        .map(String::as_str)
        .collect();
    added.sort_unstable();
    let mut want = DUAL_GROUPS.to_vec();
    want.sort_unstable();
    assert_eq!(added, want);
    // the streaming container is a byte prefix of the extended payload
    let b = before.to_bytes();
    let a = after.to_bytes();
    let payload = |bytes: &[u8]| {
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        bytes[16 + n..].to_vec()
    };
    assert!(payload(&a).starts_with(&payload(&b)));
    for t in &before.manifest.tensors {
        assert!(after.manifest.tensors.contains(t));
    }
    assert!(stderr(&run.ok(&["extend-dual"])).contains("up to date"));

    let (_, test) = load_corpus(&run.path("data/test")).unwrap();
    let p = run.path("prompt.bin");
    let s = run.path("source.bin");
    write_framed(&p, &[test.utterances[0].crop(3).acoustic_tokens]);
    write_framed(&s, &[test.utterances[1].acoustic_tokens.clone()]);
    let o = run.path("out.bin");
    run.ok(&["convert", "--mode", "nonstream", "--prompt", p.to_str().unwrap(), "--source", s.to_str().unwrap(), "--output", o.to_str().unwrap()]);
    let got = read_all_chunks(&mut std::fs::File::open(&o).unwrap(), 4).unwrap();
    assert_eq!(got[0].frames(), test.utterances[1].acoustic_tokens.frames());
    run.ok(&["evaluate", "--mode", "nonstream"]);
}

#[test]
fn errors_map_to_exit_codes() {
    let run = Run::new();
    let missing = run.cmd(&["pretrain"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(stderr(&missing).contains("gen-data"), "{}", stderr(&missing));

    let bad = run.path("../bad.toml");
    std::fs::write(&bad, "[corpus]\nseed = 1\nbogus = 2\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_streamconv"))
        .args(["--run-dir", run.root.to_str().unwrap(), "show-config"])
        .env("STREAMCONV_CONFIG", &bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("bogus") && msg.contains("line 3"), "{msg}");

    let neg = run.cmd(&["bench-latency", "--delay-ms", "-1", "--token-ms", "20", "--rtf-model", "0.5", "--rtf-codec", "0"]);
    assert_eq!(neg.status.code(), Some(2));
}

#[test]
fn latency_formula_and_config_from_environment() {
    let run = Run::new();
    let out = run.ok(&["bench-latency", "--delay-ms", "80", "--token-ms", "20", "--rtf-model", "0.58", "--rtf-codec", "0.004"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["total_ms"].as_f64().unwrap() - 111.68).abs() < 1e-9);

    let out = Command::new(env!("CARGO_BIN_EXE_streamconv"))
        .arg("show-config")
        .env("STREAMCONV_CONFIG", &run.config)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("utterances_per_speaker = 6"));
}

#[test]
fn ablate_reports_every_arm_with_its_delta() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let out = run.ok(&["ablate", "--axis", "residual"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = v["ablations"].as_array().unwrap();
    let arms: Vec<&str> = rows.iter().map(|r| r["arm"].as_str().unwrap()).collect();
    assert_eq!(arms, ["0", "16", "64"]);
    assert!(rows.iter().all(|r| r["delta"].as_str().unwrap().contains("residual_dim")));
    assert!(run.path("ablate-residual.json").exists());
}
