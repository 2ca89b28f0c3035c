use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metaprompt::evalkit::{self, Split};
use metaprompt::training::Checkpoint;
use metaprompt::RunConfig;

const SMALL: &str = "\
# tiny synthetic setup
data.train_episodes = 12
data.eval_episodes = 4
data.finetune_pairs = 2
data.max_shots = 2
train.epochs = 1
finetune.epochs = 1
seed = 3
";

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("small.cfg");
        let root = format!("data.root={}", self.path("data").display());
        Command::new(env!("CARGO_BIN_EXE_metaprompt"))
            .args(args)
            .args(["--config", cfg.to_str().unwrap(), "--set", &root])
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn with_data() -> Self {
        let s = Self::new();
        s.ok(&["gen-data"]);
        s
    }

    /// The effective config the binary sees, for library-side oracles.
    fn config(&self) -> RunConfig {
        let mut c = RunConfig::parse(SMALL).unwrap();
        c.data_root = self.path("data");
        c
    }
}

fn miou_record(stdout: &str, split: &str, shots: usize) -> f64 {
    let prefix = format!("kind=cell dataset={split} shots={shots} miou=");
    let line = stdout.lines().find(|l| l.starts_with(&prefix)).unwrap_or_else(|| panic!("no `{prefix}` in:\n{stdout}"));
    line[prefix.len()..].parse().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn unknown_config_key_exits_1_and_names_it() {
    let s = Sandbox::new();
    let out = s.run(&["train-source", "--set", "fai.bogus_knob=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fai.bogus_knob"));

    fs::write(s.path("bad.cfg"), "seed = 1\nwarp_speed = 9\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_metaprompt"))
        .args(["gen-data", "--config", s.path("bad.cfg").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_speed"));
}

#[test]
fn validation_errors_exit_1() {
    let s = Sandbox::new();
    assert_eq!(s.run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(s.run(&["evaluate"]).status.code(), Some(1), "missing --checkpoint/--predictions");
    let out = s.run(&["gen-data", "--set", "data.target_categories=red disk"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.target_categories"));
    let out = s.run(&["train-source", "--set", "loss.lambda=2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss.lambda"));
}

#[test]
fn runtime_errors_exit_2() {
    let s = Sandbox::new();
    let out = s.run(&["train-source", "--out", s.path("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"), "missing data should hint at gen-data");
    fs::write(s.path("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = s.run(&["evaluate", "--checkpoint", s.path("junk.ckpt").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_predictions_equal_to_ground_truth_scores_one() {
    let s = Sandbox::with_data();
    let episodes = evalkit::load_episodes(&s.path("data"), Split::TargetTest).unwrap();
    let preds = s.path("preds");
    for ep in &episodes {
        evalkit::save_mask(&evalkit::prediction_path(&preds, ep), ep.query_mask.as_ref().unwrap()).unwrap();
    }
    let stdout = s.ok(&["evaluate", "--predictions", preds.to_str().unwrap()]);
    assert_eq!(miou_record(&stdout, "target-test", 1), 1.0);
}

#[test]
fn zero_epoch_training_evaluates_like_the_initialized_model() {
    let s = Sandbox::with_data();
    let run = s.path("run0");
    s.ok(&["train-source", "--epochs", "0", "--out", run.to_str().unwrap()]);
    let ck = run.join("checkpoint.ckpt");
    let stdout = s.ok(&["evaluate", "--checkpoint", ck.to_str().unwrap(), "--split", "source-heldout,target-test", "--shots", "1,2"]);

    let model = s.config().build_model().unwrap();
    assert_eq!(Checkpoint::load(&ck).unwrap().params, model.params);
    for split in [Split::SourceHeldout, Split::TargetTest] {
        let eps = evalkit::load_episodes(&s.path("data"), split).unwrap();
        for k in [1, 2] {
            let want = evalkit::evaluate(&model, &eps, k).unwrap().miou;
            assert_eq!(format!("{:.6}", miou_record(&stdout, split.dir_name(), k)), format!("{want:.6}"));
        }
    }
}

#[test]
fn every_stage_is_deterministic_and_the_snapshot_replays() {
    let s = Sandbox::with_data();
    let stage = |tag: &str| {
        let out = s.path(tag);
        let o = |p: &str| out.join(p).to_str().unwrap().to_string();
        s.ok(&["train-source", "--out", &o("src")]);
        s.ok(&["finetune-target", "--checkpoint", &o("src/checkpoint.ckpt"), "--out", &o("ft")]);
        s.ok(&["predict", "--checkpoint", &o("ft/checkpoint.ckpt"), "--out", &o("pred")]);
        let eval = s.ok(&["evaluate", "--checkpoint", &o("ft/checkpoint.ckpt"), "--out", &o("eval")]);
        s.ok(&["ablate", "--set", "ablate.switches=fai.sqfe", "--out", &o("abl")]);
        (out, eval)
    };
    let (a, eval_a) = stage("a");
    let (b, eval_b) = stage("b");
    assert_eq!(eval_a, eval_b);
    for f in
        ["src/metrics.log", "src/checkpoint.ckpt", "ft/metrics.log", "ft/checkpoint.ckpt", "abl/report.records", "abl/metrics.full.log"]
    {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs between runs");
    }
    let ck_a = Checkpoint::load(&a.join("ft/checkpoint.ckpt")).unwrap();
    assert_eq!(ck_a.digest(), Checkpoint::load(&b.join("ft/checkpoint.ckpt")).unwrap().digest());
    assert_eq!(ck_a.meta["stage"], "finetune");
    let episodes = evalkit::load_episodes(&s.path("data"), Split::TargetTest).unwrap();
    assert_eq!(
        evalkit::load_predictions(&a.join("pred"), &episodes).unwrap(),
        evalkit::load_predictions(&b.join("pred"), &episodes).unwrap()
    );

    // replaying the embedded snapshot reproduces the source run
    let snapshot = Checkpoint::load(&a.join("src/checkpoint.ckpt")).unwrap().config;
    fs::write(s.path("snapshot.cfg"), &snapshot).unwrap();
    let replay = s.path("replay");
    let out = Command::new(env!("CARGO_BIN_EXE_metaprompt"))
        .args(["train-source", "--config", s.path("snapshot.cfg").to_str().unwrap(), "--out", replay.to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(&replay.join("metrics.log")), read(&a.join("src/metrics.log")));
    assert_eq!(read(&replay.join("checkpoint.ckpt")), read(&a.join("src/checkpoint.ckpt")));
}

#[test]
fn gen_data_refuses_to_overwrite() {
    let s = Sandbox::with_data();
    assert_eq!(s.run(&["gen-data"]).status.code(), Some(2));
    assert!(s.path("data/lexicon.txt").exists());
    assert!(s.path("data/target-finetune").read_dir().unwrap().next().is_some());
}

#[test]
fn metrics_log_lines_are_well_formed() {
    let s = Sandbox::with_data();
    let run = s.path("run");
    s.ok(&["train-source", "--set", "train.epochs=2", "--out", run.to_str().unwrap()]);
    let log = fs::read_to_string(run.join("metrics.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        let fields: Vec<&str> = l.split(' ').collect();
        assert_eq!(fields[0], format!("epoch={}", i + 1));
        assert!(fields[1].starts_with("step=") && fields[2].starts_with("loss=") && fields[3].starts_with("miou="));
    }
}
