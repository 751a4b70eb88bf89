use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anticipation::{checkpoint, cli, scorefile, store};

const SMALL: &str = "\
gen.train = 24
gen.val = 12
gen.test = 12
gen.frame_size = 8
gen.k_obj = 4
model.encoder = 4,8
model.dim = 8
warmup.epochs = 1
ordinary.epochs = 1
finetune.epochs = 1
finetune_joint_val.epochs = 1
train.batch_size = 8
";

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("small.cfg");
        Command::new(env!("CARGO_BIN_EXE_anticipation"))
            .arg("--config")
            .arg(&cfg)
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("ANTICIPATION_OUT_DIR")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn generate_is_deterministic_and_guards_output() {
    let env = Env::new();
    let summary = env.ok(&["generate", "--out", "a"]);
    assert!(summary.contains("train=24 val=12 test=12"), "{summary}");
    env.ok(&["generate", "--out", "b"]);
    assert_eq!(read(&env.path("a/manifest.json")), read(&env.path("b/manifest.json")));
    assert_eq!(env.code(&["generate", "--out", "a"]), 2);
    env.ok(&["generate", "--out", "a", "--force", "-s", "gen.seed=7"]);
    assert_ne!(read(&env.path("a/manifest.json")), read(&env.path("b/manifest.json")));
    assert_eq!(env.code(&["generate", "--out", "c", "-s", "gen.actions=100"]), 2);
    assert_eq!(env.code(&["generate", "--out", "c", "-s", "gen.colour=red"]), 2);
    assert!(!env.path("c").exists());
}

#[test]
fn out_dir_comes_from_the_environment_when_no_flag() {
    let env = Env::new();
    let out = Command::new(env!("CARGO_BIN_EXE_anticipation"))
        .args(["--config", "small.cfg", "generate"])
        .current_dir(env.dir.path())
        .env("ANTICIPATION_OUT_DIR", "from-env")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env.path("from-env/manifest.json").is_file());
}

#[test]
fn train_eval_ensemble_report_round() {
    let env = Env::new();
    env.ok(&["generate", "--out", "data"]);
    assert_eq!(env.code(&["train", "--data", "missing", "--out", "run"]), 2);

    env.ok(&["train", "--data", "data", "--out", "run", "--phases", "warmup"]);
    assert!(env.path("run/checkpoint-warmup/manifest.json").is_file());
    assert!(!env.path("run/checkpoint-ordinary").exists());
    let warm = checkpoint::read_manifest(&env.path("run/checkpoint-warmup")).unwrap();
    assert_eq!(warm.phase.as_deref(), Some("warmup"));

    // The rest of the pipeline resumes from the warmup checkpoint.
    env.ok(&["train", "--data", "data", "--out", "run", "--phases", "ordinary,finetune,finetune_joint_val"]);
    let log = std::fs::read_to_string(env.path("run/metrics.csv")).unwrap();
    let phases: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(phases, ["warmup", "ordinary", "finetune", "finetune_joint_val"]);
    for p in ["warmup", "ordinary", "finetune", "finetune_joint_val"] {
        assert!(env.path(&format!("run/checkpoint-{p}/manifest.json")).is_file());
    }

    // Same seeds in one go give the same final metrics line.
    env.ok(&["train", "--data", "data", "--out", "run2"]);
    let log2 = std::fs::read_to_string(env.path("run2/metrics.csv")).unwrap();
    assert_eq!(log.lines().last(), log2.lines().last());
    assert_eq!(env.code(&["train", "--data", "data", "--out", "run2"]), 2);
    assert_eq!(env.code(&["train", "--data", "data", "--out", "fresh", "--phases", "finetune"]), 2);
    assert_eq!(env.code(&["train", "--data", "data", "--out", "x", "--phases", "warmup,finetune"]), 2);

    let ckpt = "run/checkpoint-finetune_joint_val";
    let printed = env.ok(&["eval", "--data", "data", "--checkpoint", ckpt, "--out", "scores"]);
    let set = scorefile::read(&env.path("scores/horst-rgb.val.scores")).unwrap();
    let labels = store::labels(&env.path("data"), anticipation_core::datagen::Split::Val).unwrap();
    let r = set.recall(&labels).unwrap();
    assert!(printed.contains(&format!("horst-rgb,val,{},{},{}", r.verb, r.noun, r.action)), "{printed}");
    let bytes = read(&env.path("scores/horst-rgb.val.scores"));
    scorefile::write(&env.path("copy.scores"), &set).unwrap();
    assert_eq!(read(&env.path("copy.scores")), bytes);

    env.ok(&[
        "eval", "--data", "data", "--checkpoint", "run/checkpoint-warmup", "--model-id", "early", "--out", "scores",
    ]);
    let single = env.ok(&["ensemble", "--data", "data", "--out", "ens1", "scores/horst-rgb.val.scores"]);
    let action = format!("{:.4}", r.action);
    assert_eq!(single.lines().filter(|l| l.contains(&action)).count(), 2, "{single}");
    let dup = env.ok(&[
        "ensemble",
        "--data",
        "data",
        "--out",
        "ens2",
        "scores/horst-rgb.val.scores",
        "scores/horst-rgb.val.scores",
    ]);
    assert!(dup.lines().any(|l| l.starts_with("ensemble-uniform") && l.contains(&action)), "{dup}");
    let weighted = env.ok(&[
        "ensemble",
        "--data",
        "data",
        "--out",
        "ens3",
        "--rgb-weight",
        "1.2",
        "scores/horst-rgb.val.scores",
        "scores/early.val.scores",
    ]);
    assert!(weighted.contains("ensemble-rgb1.2"), "{weighted}");
    let csv = std::fs::read_to_string(env.path("ens3/ensemble.csv")).unwrap();
    assert!(csv.contains("horst-rgb*1.2 early*1.2"), "{csv}");
    assert!(env.path("ens3/ensemble.scores").is_file());

    // Test-split scores cannot be fused with validation scores.
    env.ok(&["eval", "--data", "data", "--checkpoint", ckpt, "--split", "test", "--out", "scores"]);
    assert_eq!(
        env.code(&["ensemble", "--data", "data", "scores/horst-rgb.val.scores", "scores/horst-rgb.test.scores"]),
        2
    );

    let rep = env.ok(&[
        "report",
        "--data",
        "data",
        "--out",
        "rep",
        "--metrics",
        "run/metrics.csv",
        "scores/horst-rgb.val.scores",
    ]);
    assert!(rep.contains("horst-rgb") && rep.contains("4 epochs"), "{rep}");
    let curves = std::fs::read_to_string(env.path("rep/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 5);
    assert!(curves.lines().nth(4).unwrap().starts_with("0,3,finetune_joint_val,0,"));
}

#[test]
fn eval_rejects_a_checkpoint_for_other_frames() {
    let env = Env::new();
    env.ok(&["generate", "--out", "data"]);
    env.ok(&["generate", "--out", "big", "-s", "gen.frame_size=12"]);
    env.ok(&["train", "--data", "data", "--out", "run", "--phases", "warmup"]);
    assert_eq!(env.code(&["eval", "--data", "big", "--checkpoint", "run/checkpoint-warmup"]), 2);
    assert_eq!(env.code(&["train", "--data", "big", "--out", "run", "--phases", "ordinary"]), 2);
}

#[test]
fn divergence_exits_with_numeric_failure() {
    let env = Env::new();
    env.ok(&["generate", "--out", "data"]);
    let out = env.run(&[
        "train",
        "--data",
        "data",
        "--out",
        "run",
        "--phases",
        "warmup",
        "-s",
        "train.lr_scale=1e30",
        "-s",
        "train.grad_clip=0",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn phase_parsing_is_shared_with_the_library() {
    let names = vec!["ordinary".to_string()];
    assert_eq!(cli::parse_phases(Some(&names)).unwrap().len(), 1);
}
