use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metaprep::finetune::Sizes;
use metaprep::model::ModelConfig;
use metaprep::optim::Optimizer;
use metaprep_cli::commands::{FINETUNE_LOG, FINETUNE_TSV, PRETRAIN_LOG};
use metaprep_cli::records::{read_log, Phase};
use metaprep_cli::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metaprep"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn tiny(steps: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::toy();
    c.model = ModelConfig {
        vocab_size: 12,
        max_len: 9,
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        d_ff: 8,
        n_segments: 2,
        dropout_rate: 0.0,
    };
    c.data.sentence_len = (1, 3);
    c.data.n_docs = 20;
    c.data.batch_size = 2;
    c.meta.k = 2;
    c.meta.total_meta_test_steps = steps;
    c.checkpoint_every = 3;
    c.downstream.sizes = Sizes {
        train: 32,
        dev: 32,
        test: 32,
        batch_size: 16,
    };
    c.downstream.epochs = 2;
    c.downstream.tasks.truncate(2);
    c.downstream.seeds = vec![0, 1];
    c.validate().unwrap();
    c
}

fn write_config(dir: &Path, name: &str, config: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, config.serialize()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--config", s(config), "--out", s(out)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn shipped_toy_config_matches_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.txt");
    let text = fs::read_to_string(path).unwrap();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), ExperimentConfig::toy());
}

#[test]
fn missing_depth_exits_1_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text_cfg: String = tiny(3)
        .serialize()
        .lines()
        .filter(|l| !l.starts_with("meta.k"))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("c.txt");
    fs::write(&path, text_cfg).unwrap();
    let out = pretrain(&path, &dir.path().join("run"), &[]);
    assert_eq!(code(&out), 1, "{}", text(&out));
    assert!(text(&out).contains("meta.k"), "{}", text(&out));
}

#[test]
fn bad_value_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(3).serialize().replace("meta.alpha = ", "meta.alpha = x");
    let line = cfg.lines().position(|l| l.starts_with("meta.alpha")).unwrap() + 1;
    let path = dir.path().join("c.txt");
    fs::write(&path, cfg).unwrap();
    let out = pretrain(&path, &dir.path().join("run"), &[]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains(&format!("line {line}")), "{}", text(&out));
}

#[test]
fn ten_step_run_logs_ten_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", &tiny(10));
    let out_dir = dir.path().join("run");
    let out = pretrain(&cfg, &out_dir, &[]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let records = read_log(&out_dir.join(PRETRAIN_LOG)).unwrap();
    assert_eq!(records.len(), 10);
    assert!(records.iter().all(|r| r.phase == Phase::Pretrain));
    let steps: Vec<u64> = records.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=10).collect::<Vec<_>>());
    assert_eq!(records[9].metrics["grad_evaluations"], 30.0);
    assert!(out_dir.join("ckpt-000010").join("params.ckpt").exists());
}

#[test]
fn interrupted_run_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", &tiny(10));
    let whole = dir.path().join("whole");
    let split = dir.path().join("split");
    assert_eq!(code(&pretrain(&cfg, &whole, &[])), 0);
    assert_eq!(code(&pretrain(&cfg, &split, &["--stop-after", "5"])), 0);
    assert_eq!(read_log(&split.join(PRETRAIN_LOG)).unwrap().len(), 5);
    let out = pretrain(&cfg, &split, &[]);
    assert_eq!(code(&out), 0);
    assert!(text(&out).contains("step 5"), "{}", text(&out));

    let a = read_log(&whole.join(PRETRAIN_LOG)).unwrap();
    let b = read_log(&split.join(PRETRAIN_LOG)).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.same_content(y), "step {}: {x:?} vs {y:?}", x.step);
    }
    let params = |d: &Path| fs::read(d.join("ckpt-000010").join("params.ckpt")).unwrap();
    assert_eq!(params(&whole), params(&split));
}

#[test]
fn resume_refuses_a_different_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let a = write_config(dir.path(), "a.txt", &tiny(2));
    assert_eq!(code(&pretrain(&a, &run_dir, &[])), 0);
    let mut other = tiny(2);
    other.meta.alpha *= 2.0;
    let b = write_config(dir.path(), "b.txt", &other);
    assert_eq!(code(&pretrain(&b, &run_dir, &[])), 1);
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(20);
    c.meta.outer_optimizer = Optimizer::Sgd;
    c.meta.beta = 1e200;
    let cfg = write_config(dir.path(), "c.txt", &c);
    let out = pretrain(&cfg, &dir.path().join("run"), &[]);
    assert_eq!(code(&out), 2, "{}", text(&out));
}

#[test]
fn finetune_writes_summary_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(3);
    let cfg = write_config(dir.path(), "c.txt", &c);
    let run_dir = dir.path().join("run");
    assert_eq!(code(&pretrain(&cfg, &run_dir, &[])), 0);
    let ft = dir.path().join("ft");
    let ckpt = run_dir.join("ckpt-000003");
    let out = run(&[
        "finetune",
        "--config",
        s(&cfg),
        "--checkpoint",
        "random",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&ft),
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let tsv = fs::read_to_string(ft.join(FINETUNE_TSV)).unwrap();
    // header + 2 labels x 2 tasks x 2 seeds x (epochs + 1)
    assert_eq!(tsv.lines().count(), 1 + 2 * 2 * 2 * 3);
    let records = read_log(&ft.join(FINETUNE_LOG)).unwrap();
    assert_eq!(records.len(), 2 * 2 * 2 * 3);
    assert!(records.iter().all(|r| r.phase == Phase::Finetune));
    assert!(records.iter().any(|r| r.run_id.starts_with("finetune/k2/")));
}

#[test]
fn finetune_rejects_incompatible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let small = tiny(1);
    let small_cfg = write_config(dir.path(), "small.txt", &small);
    let run_dir = dir.path().join("run");
    assert_eq!(code(&pretrain(&small_cfg, &run_dir, &[])), 0);
    let mut wide = tiny(1);
    wide.model.d_model = 6;
    wide.model.n_heads = 3;
    let wide_cfg = write_config(dir.path(), "wide.txt", &wide);
    let ckpt = run_dir.join("ckpt-000001");
    let out = run(&["finetune", "--config", s(&wide_cfg), "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&out), 1, "{}", text(&out));
    // Same for a warm start.
    let params = ckpt.join("params.ckpt");
    let out = pretrain(&wide_cfg, &dir.path().join("warm"), &["--checkpoint", s(&params)]);
    assert_eq!(code(&out), 1, "{}", text(&out));
}

#[test]
fn gradcheck_passes_and_lists_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--out", s(dir.path())]);
    let t = text(&out);
    assert_eq!(code(&out), 0, "{t}");
    for name in [
        "loss-gradient/mlm",
        "loss-gradient/nsp",
        "loss-gradient/qa_match",
        "loss-gradient/qq_match",
        "meta-gradient/full-k1",
        "meta-gradient/full-k2",
        "meta-gradient/full-k3",
        "quadratic-oracle",
        "first-order-ratio",
        "depth-zero-degeneracy",
        "first-order-limit",
        "budget-accounting",
        "depth-zero-multitask",
        "determinism",
    ] {
        assert!(
            t.lines().any(|l| l.starts_with("PASS") && l.contains(name)),
            "{name} missing:\n{t}"
        );
    }
    let records = read_log(&dir.path().join("gradcheck.jsonl")).unwrap();
    let oracle = records
        .iter()
        .find(|r| r.run_id == "gradcheck/quadratic-oracle")
        .unwrap();
    assert_eq!(oracle.phase, Phase::Check);
    let measured = oracle.metrics["measured"];
    assert!(measured <= 1e-10, "{measured}");
}

#[test]
fn corrupted_gradient_exits_3() {
    let out = run(&["gradcheck", "--corrupt-gradient"]);
    let t = text(&out);
    assert_eq!(code(&out), 3, "{t}");
    assert!(t.contains("error:") && t.contains("loss-gradient/mlm"), "{t}");
}

#[test]
fn report_on_empty_dir_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["report", s(dir.path())])), 1);
}

#[test]
fn report_series_and_self_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(2);
    let cfg = write_config(dir.path(), "c.txt", &c);
    let run_dir = dir.path().join("run");
    assert_eq!(code(&pretrain(&cfg, &run_dir, &[])), 0);
    let ft = dir.path().join("ft");
    let ckpt = run_dir.join("ckpt-000002");
    let out = run(&[
        "finetune",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&ft),
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let report = dir.path().join("report");
    let out = run(&["report", s(&ft), "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", text(&out));

    let task = format!("{}-{}", c.downstream.tasks[0].name(), c.downstream.task_seed);
    let series = fs::read_to_string(report.join(format!("series-k2-{task}.tsv"))).unwrap();
    assert_eq!(
        series.lines().count() - 1,
        c.downstream.epochs * c.downstream.seeds.len()
    );

    let summary = fs::read_to_string(report.join("summary.tsv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let delta: f64 = row.split('\t').next_back().unwrap().parse().unwrap();
        assert_eq!(delta, 0.0, "{row}");
    }
}
