use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use evcap::config::RunConfig;
use evcap::report::{read_json_lines, PretrainLogLine};

const TOY: &str = "\
model.d_f = 4
model.d_h = 8
pretrain.epochs = 2
pretrain.batch_size = 2
finetune.epochs = 4
fleet.n_vehicles = 20
fleet.snippets_per_vehicle = 4
second.enabled = false
seeds = 1
";

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("toy.cfg"), TOY).unwrap();
        Self { _dir: dir, root }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn run(&self, args: &[&str]) -> i32 {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> i32 {
        let cfg = self.root.join("toy.cfg");
        let out = self.out();
        let mut argv: Vec<String> = vec!["evcap".into(), "--config".into(), cfg.display().to_string()];
        argv.extend(["--out".to_string(), out.display().to_string()]);
        argv.extend(args.iter().map(|s| s.to_string()));
        evcap::cli::run(argv, env.iter().map(|(k, v)| (k.to_string(), v.to_string())))
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_workflow_on_toy_corpus() {
    let ws = Workspace::new();
    let start = Instant::now();
    for cmd in ["gen", "split", "pretrain", "finetune", "eval", "dump-sim"] {
        assert_eq!(ws.run(&[cmd]), 0, "{cmd} failed");
    }
    assert!(start.elapsed().as_secs() < 600);
    let out = ws.out();
    for f in ["dataset.csv", "novel.csv", "splits.csv", "pretrain-full-s1.ckpt", "finetune-full-D1-s1.ckpt", "eval-full-D1-s1.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join("dataset_second.csv").exists());

    // Every artifact carries the provenance triple.
    let log: Vec<PretrainLogLine> = read_json_lines(&out.join("pretrain-full-s1.jsonl")).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|l| l.provenance.config_hash.len() == 16 && l.provenance.seed == "1"));
    for f in ["dataset.csv", "splits.csv", "eval-full-D1-s1.csv", "similarity-pretrain-full-s1.csv", "pretrain.cfg"] {
        let text = String::from_utf8(read(&out.join(f))).unwrap();
        assert!(text.starts_with("# config_hash="), "{f} lacks provenance");
    }
    assert!(String::from_utf8(read(&out.join("eval-full-D1-s1.svg"))).unwrap().contains("config_hash="));
    let ckpt = String::from_utf8_lossy(&read(&out.join("pretrain-full-s1.ckpt"))).into_owned();
    assert!(ckpt.contains("config_hash=") && ckpt.contains("code_version="));
}

#[test]
fn protocol_reports_and_random_init() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["gen"]), 0);
    assert_eq!(ws.run(&["split"]), 0);
    assert_eq!(ws.run(&["--set", "finetune.init=random", "finetune"]), 0);
    assert!(ws.out().join("finetune-random-D1-s1.ckpt").exists());
    assert_eq!(ws.run(&["eval", "--protocol", "pretrain_utility"]), 0);
    let csv = String::from_utf8(read(&ws.out().join("report-pretrain_utility.csv"))).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 6, "{csv}");
    assert_eq!(rows.iter().filter(|r| r.contains(",none,")).count(), 3, "{csv}");
}

#[test]
fn pretrain_rerun_is_bitwise_identical() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["gen"]), 0);
    assert_eq!(ws.run(&["split"]), 0);
    let data = read(&ws.out().join("dataset.csv"));
    assert_eq!(ws.run(&["gen"]), 0);
    assert_eq!(read(&ws.out().join("dataset.csv")), data);

    let ckpt = ws.out().join("pretrain-full-s1.ckpt");
    assert_eq!(ws.run(&["pretrain"]), 0);
    let first = read(&ckpt);
    assert_eq!(ws.run(&["pretrain"]), 0);
    assert_eq!(read(&ckpt), first);

    assert_eq!(ws.run(&["--seed", "2", "pretrain"]), 0);
    assert_ne!(read(&ws.out().join("pretrain-full-s2.ckpt")), first);
}

#[test]
fn missing_artifacts_have_their_own_exit_code() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["split"]), 3);
    assert_eq!(ws.run(&["gen"]), 0);
    assert_eq!(ws.run(&["split"]), 0);
    assert_eq!(ws.run(&["eval"]), 3);
    assert_eq!(ws.run(&["dump-sim"]), 3);
    assert_eq!(ws.run(&["--set", "finetune.init=pretrained", "finetune"]), 3);
}

#[test]
fn binary_reports_exit_codes() {
    let ws = Workspace::new();
    let status = Command::new(env!("CARGO_BIN_EXE_evcap"))
        .args(["--config", ws.root.join("toy.cfg").to_str().unwrap(), "--out", ws.out().to_str().unwrap(), "eval"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    let status = Command::new(env!("CARGO_BIN_EXE_evcap")).args(["--set", "model.d_h", "gen"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn config_precedence() {
    let ws = Workspace::new();
    let cfg_path = ws.root.join("toy.cfg");
    let parse = |args: &[&str], env: &[(&str, &str)]| {
        use clap::Parser;
        let mut argv = vec!["evcap", "--config", cfg_path.to_str().unwrap()];
        argv.extend_from_slice(args);
        argv.push("gen");
        let cli = evcap::cli::Cli::parse_from(argv);
        evcap::cli::resolve_config(&cli, env.iter().map(|(k, v)| (k.to_string(), v.to_string()))).unwrap()
    };
    let defaults = RunConfig::default();
    let file = parse(&[], &[]);
    assert_eq!(file.model.d_h, 8);
    assert_ne!(defaults.model.d_h, 8);
    let env = parse(&[], &[("EVCAP_MODEL__D_H", "12"), ("OTHER", "x")]);
    assert_eq!(env.model.d_h, 12);
    let flag = parse(&["--set", "model.d_h=6", "--seed", "9"], &[("EVCAP_MODEL__D_H", "12"), ("EVCAP_SEED", "4")]);
    assert_eq!(flag.model.d_h, 6);
    assert_eq!(flag.seed, 9);
    assert_ne!(flag.hash(), file.hash());
}

#[test]
fn bad_config_line_is_a_parse_error() {
    let ws = Workspace::new();
    std::fs::write(ws.root.join("toy.cfg"), "model.d_h = eight\n").unwrap();
    assert_eq!(ws.run(&["gen"]), 4);
}

#[test]
fn checkpoint_for_other_shape_is_rejected() {
    let ws = Workspace::new();
    for cmd in ["gen", "split", "pretrain"] {
        assert_eq!(ws.run(&[cmd]), 0);
    }
    assert_eq!(ws.run_env(&["finetune"], &[("EVCAP_MODEL__D_H", "10")]), 5);
}
