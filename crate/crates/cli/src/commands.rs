//! The subcommands. Each returns an error carrying its exit code.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use metaprep::autodiff::ParamSet;
use metaprep::finetune::{init_quality_study, mean_stderr, write_summary_tsv, FinetuneError, StudyCheckpoint};
use metaprep::metatrain::{MetaError, MetaStepReport, MetaTrainer, PretrainObjective};
use metaprep::model::{init_params, load_checkpoint};

use crate::config::ExperimentConfig;
use crate::experiment::{self, ExperimentError};
use crate::gradcheck::{self, CheckResult, Options};
use crate::records::{read_log, rewrite_log, LogWriter, Phase, RunRecord};
use crate::state;

/// (seed, epoch) -> (dev, test) accuracy.
type SeedEpochAcc = BTreeMap<(u64, u64), (f64, f64)>;
type Metrics = BTreeMap<String, f64>;

pub const THREADS_ENV: &str = "METAPREP_THREADS";
pub const PRETRAIN_LOG: &str = "pretrain.jsonl";
pub const FINETUNE_LOG: &str = "finetune.jsonl";
pub const CHECK_LOG: &str = "gradcheck.jsonl";
pub const FINETUNE_TSV: &str = "finetune.tsv";
pub const CONFIG_COPY: &str = "config.txt";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments, checkpoints or logs.
    #[error("{0}")]
    Invalid(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("gradient check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Divergence(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Meta(m) => m.into(),
            other => invalid(other),
        }
    }
}

impl From<MetaError> for CliError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::NonFinite { .. } => CliError::Divergence(e.to_string()),
            other => invalid(other),
        }
    }
}

impl From<FinetuneError> for CliError {
    fn from(e: FinetuneError) -> Self {
        match e {
            FinetuneError::NonFinite(_) => CliError::Divergence(e.to_string()),
            other => invalid(other),
        }
    }
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let config = ExperimentConfig::parse(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(match seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

/// Worker count: `METAPREP_THREADS` if set, else the available cores.
pub fn thread_count() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Warm start: initial parameters instead of a random initialization.
    pub init: Option<PathBuf>,
    /// Stop once this many outer steps are done, leaving a resumable checkpoint.
    pub stop_after: Option<usize>,
}

pub fn pretrain_run_id(config: &ExperimentConfig) -> String {
    format!("pretrain-k{}-s{}", config.meta.k, config.seed)
}

fn step_record(run_id: &str, report: &MetaStepReport, evaluations: u64) -> RunRecord {
    let mut metrics = BTreeMap::from([
        ("test_loss".to_string(), report.test_loss),
        ("meta_grad_norm".to_string(), report.meta_grad_norm),
        ("grad_evaluations".to_string(), evaluations as f64),
    ]);
    for (j, l) in report.inner_losses.iter().enumerate() {
        metrics.insert(format!("inner_loss.{}", j + 1), *l);
    }
    RunRecord::new(run_id, report.step as u64, Phase::Pretrain, metrics)
}

fn load_init(path: &Path, config: &ExperimentConfig) -> Result<ParamSet, CliError> {
    let params = load_checkpoint(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let reference = init_params(&config.model, 0).map_err(invalid)?;
    if !params.is_compatible(&reference) {
        return Err(invalid(format!(
            "{}: parameters do not match the configured model",
            path.display()
        )));
    }
    Ok(params)
}

/// Meta-train, resuming from the newest checkpoint in the output directory.
/// Returns the directory of the last checkpoint written.
pub fn cmd_pretrain(args: &PretrainArgs) -> Result<PathBuf, CliError> {
    let config = load_config(&args.config, args.seed)?;
    let out = args.out.clone().unwrap_or_else(|| config.out_dir.clone());
    fs::create_dir_all(&out).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
    let resolved = config.serialize();
    let copy = out.join(CONFIG_COPY);
    let latest = state::latest(&out).map_err(invalid)?;
    if latest.is_some() {
        let previous = fs::read_to_string(&copy).unwrap_or_default();
        if previous != resolved {
            return Err(invalid(format!(
                "{} holds checkpoints of a different experiment (see {})",
                out.display(),
                copy.display()
            )));
        }
    }
    fs::write(&copy, &resolved).map_err(|e| invalid(format!("{}: {e}", copy.display())))?;

    let grammar = experiment::grammar(&config)?;
    let sampler = experiment::pretrain_sampler(&config, &grammar)?;
    let objective = PretrainObjective::new(config.model.clone());
    let run_id = pretrain_run_id(&config);
    let log_path = out.join(PRETRAIN_LOG);
    let mut trainer = match &latest {
        Some(dir) => {
            let (file, saved) = state::load(dir).map_err(invalid)?;
            if file.run_id != run_id {
                return Err(invalid(format!(
                    "{}: run {} does not match {run_id}",
                    dir.display(),
                    file.run_id
                )));
            }
            // Drop records written after the checkpoint; they are replayed.
            let kept: Vec<RunRecord> = if log_path.exists() {
                read_log(&log_path)
                    .map_err(invalid)?
                    .into_iter()
                    .filter(|r| r.phase != Phase::Pretrain || r.step <= saved.step as u64)
                    .collect()
            } else {
                Vec::new()
            };
            rewrite_log(&log_path, &kept).map_err(invalid)?;
            println!("resuming {run_id} from {} (step {})", dir.display(), saved.step);
            MetaTrainer::resume(config.meta.clone(), objective, saved)?
        }
        None => {
            let init = match &args.init {
                Some(path) => load_init(path, &config)?,
                None => init_params(&config.model, config.seed).map_err(invalid)?,
            };
            rewrite_log(&log_path, &[]).map_err(invalid)?;
            MetaTrainer::new(config.meta.clone(), objective, init)?
        }
    };
    let mut log = LogWriter::append(&log_path).map_err(invalid)?;
    let total = config.meta.total_meta_test_steps;
    let stop = args.stop_after.unwrap_or(total).min(total);
    let mut last_dir = latest;
    let mut last_loss = f64::NAN;
    let save = |trainer: &MetaTrainer<PretrainObjective>| {
        state::save(&out, &run_id, config.meta.k, total, &trainer.state()).map_err(invalid)
    };
    if last_dir.is_none() {
        last_dir = Some(save(&trainer)?);
    }
    while trainer.steps_done() < stop {
        let report = trainer.step(|n, rng| Ok(sampler.sample_pretrain_batches(&config.mix, n, rng)?))?;
        log.write(&[step_record(&run_id, &report, trainer.evaluations())])
            .map_err(|e| invalid(format!("{}: {e}", log_path.display())))?;
        last_loss = report.test_loss;
        let step = trainer.steps_done();
        if step % config.checkpoint_every == 0 || step == stop {
            last_dir = Some(save(&trainer)?);
        }
    }
    let dir = last_dir.expect("a checkpoint exists");
    println!(
        "{run_id}: {} of {total} meta-test steps, {} gradient evaluations, last test loss {last_loss:.4}",
        trainer.steps_done(),
        trainer.evaluations()
    );
    println!("checkpoint: {}", dir.display());
    Ok(dir)
}

#[derive(Clone, Debug, Default)]
pub struct FinetuneArgs {
    pub config: PathBuf,
    /// Checkpoint directories, parameter files, or `random`.
    pub checkpoints: Vec<String>,
    pub out: Option<PathBuf>,
    /// Replaces the configured fine-tuning seeds with this single seed.
    pub seed: Option<u64>,
}

fn study_checkpoint(arg: &str, config: &ExperimentConfig) -> Result<StudyCheckpoint, CliError> {
    if arg == "random" {
        return Ok(StudyCheckpoint {
            label: "random".into(),
            meta_test_steps: None,
            params: init_params(&config.model, config.seed).map_err(invalid)?,
        });
    }
    let path = Path::new(arg);
    let (params_path, state_dir) = if path.is_dir() {
        (path.join(state::PARAMS_FILE), Some(path.to_path_buf()))
    } else {
        let parent = path.parent().map(Path::to_path_buf);
        let sibling = parent.filter(|p| p.join(state::STATE_FILE).exists());
        (path.to_path_buf(), sibling)
    };
    let params = load_checkpoint(&params_path).map_err(|e| invalid(format!("{}: {e}", params_path.display())))?;
    let (label, meta_test_steps) = match state_dir {
        Some(dir) => {
            let file = state::read_state_file(&dir).map_err(invalid)?;
            (experiment::depth_label(file.k), Some(file.step as u64))
        }
        None => (
            path.file_stem()
                .map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned()),
            None,
        ),
    };
    Ok(StudyCheckpoint {
        label,
        meta_test_steps,
        params,
    })
}

pub fn finetune_run_id(label: &str, task: &str, seed: u64) -> String {
    format!("finetune/{label}/{task}/{seed}")
}

fn parse_finetune_run_id(id: &str) -> Option<(String, String, u64)> {
    let mut parts = id.split('/');
    let (tag, label, task, seed) = (parts.next()?, parts.next()?, parts.next()?, parts.next()?);
    if tag != "finetune" || parts.next().is_some() {
        return None;
    }
    Some((label.into(), task.into(), seed.parse().ok()?))
}

/// Fine-tune every checkpoint on every configured task and seed.
pub fn cmd_finetune(args: &FinetuneArgs) -> Result<PathBuf, CliError> {
    if args.checkpoints.is_empty() {
        return Err(invalid("at least one --checkpoint is required"));
    }
    let config = load_config(&args.config, None)?;
    let out = args.out.clone().unwrap_or_else(|| config.out_dir.clone());
    fs::create_dir_all(&out).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
    let mut checkpoints = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, arg) in args.checkpoints.iter().enumerate() {
        let mut c = study_checkpoint(arg, &config)?;
        if !seen.insert(c.label.clone()) {
            c.label = format!("{}@{i}", c.label);
            seen.insert(c.label.clone());
        }
        checkpoints.push(c);
    }
    let grammar = experiment::grammar(&config)?;
    let tasks = experiment::downstream_tasks(&config, &grammar)?;
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => config.downstream.seeds.clone(),
    };
    let ft = config.downstream.finetune_config(0);
    let table = init_quality_study(&config.model, &checkpoints, &tasks, &seeds, &ft, thread_count()?)?;

    let tsv_path = out.join(FINETUNE_TSV);
    let tsv = fs::File::create(&tsv_path).map_err(|e| invalid(format!("{}: {e}", tsv_path.display())))?;
    write_summary_tsv(&table, std::io::BufWriter::new(tsv))
        .map_err(|e| invalid(format!("{}: {e}", tsv_path.display())))?;
    let records: Vec<RunRecord> = table
        .rows
        .iter()
        .flat_map(|row| {
            row.records.iter().map(|e| {
                let metrics = BTreeMap::from([
                    ("train_loss".to_string(), e.train_loss),
                    ("dev_acc".to_string(), e.dev_accuracy),
                    ("test_acc".to_string(), e.test_accuracy),
                ]);
                RunRecord::new(
                    finetune_run_id(&row.label, &row.task, row.seed),
                    e.epoch as u64,
                    Phase::Finetune,
                    metrics,
                )
            })
        })
        .collect();
    rewrite_log(&out.join(FINETUNE_LOG), &records).map_err(invalid)?;

    println!(
        "{:<10} {:<24} {:>3}  {:>15}  {:>15}",
        "k", "task", "n", "epoch-1 test", "final test"
    );
    let fmt = |m: f64, e: Option<f64>| match e {
        Some(e) => format!("{m:.4} ± {e:.4}"),
        None => format!("{m:.4}"),
    };
    for s in &table.summary {
        println!(
            "{:<10} {:<24} {:>3}  {:>15}  {:>15}",
            s.label,
            s.task,
            s.n,
            fmt(s.epoch1_mean, s.epoch1_stderr),
            fmt(s.final_mean, s.final_stderr)
        );
    }
    println!("summary: {}", tsv_path.display());
    Ok(tsv_path)
}

/// Run the verification suite, print the table, and optionally log CHECK records.
pub fn cmd_gradcheck(options: Options, out: Option<&Path>) -> Result<Vec<CheckResult>, CliError> {
    let results = gradcheck::run_suite(options);
    println!(
        "{:<4}  {:<28} {:>11}  {:<12} note",
        "", "check", "measured", "tolerance"
    );
    for r in &results {
        println!("{r}");
    }
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| invalid(format!("{}: {e}", out.display())))?;
        let records: Vec<RunRecord> = results
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let metrics = BTreeMap::from([
                    ("measured".to_string(), r.measured),
                    ("tolerance".to_string(), r.tolerance),
                    ("passed".to_string(), if r.passed { 1.0 } else { 0.0 }),
                ]);
                RunRecord::new(format!("gradcheck/{}", r.name), i as u64, Phase::Check, metrics)
            })
            .collect();
        rewrite_log(&out.join(CHECK_LOG), &records).map_err(invalid)?;
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed", results.len());
    match results.iter().find(|r| !r.passed) {
        Some(first) => Err(CliError::CheckFailed(first.name.clone())),
        None => Ok(results),
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>, CliError> {
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Turn the logs in `log_dir` into plot-ready tables. Returns the files written.
///
/// Per (k, task): `series-<k>-<task>.tsv` with one row per seed and epoch
/// (epochs from 1). Across all: `summary.tsv` with the mean test accuracy
/// per epoch and its difference to the baseline (`random` when present,
/// else the first label). Per pre-training run: `pretrain-<run>.tsv`.
pub fn cmd_report(log_dir: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let mut logs: Vec<PathBuf> = fs::read_dir(log_dir)
        .map_err(|e| invalid(format!("{}: {e}", log_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    logs.sort();
    let mut records = Vec::new();
    for path in &logs {
        records.extend(read_log(path).map_err(invalid)?);
    }
    let out = out.map_or_else(|| log_dir.join("report"), Path::to_path_buf);
    fs::create_dir_all(&out).map_err(|e| invalid(format!("{}: {e}", out.display())))?;

    // (label, task) -> seed -> epoch -> (dev, test)
    let mut series: BTreeMap<(String, String), SeedEpochAcc> = BTreeMap::new();
    let mut labels: Vec<String> = Vec::new();
    let mut curves: BTreeMap<String, Vec<(u64, Metrics)>> = BTreeMap::new();
    for r in &records {
        match r.phase {
            Phase::Finetune => {
                let (label, task, seed) = parse_finetune_run_id(&r.run_id)
                    .ok_or_else(|| invalid(format!("unrecognized fine-tuning run id {:?}", r.run_id)))?;
                if r.step == 0 {
                    continue;
                }
                let get = |m: &str| {
                    r.metrics
                        .get(m)
                        .copied()
                        .ok_or_else(|| invalid(format!("{}: record lacks {m}", r.run_id)))
                };
                if !labels.contains(&label) {
                    labels.push(label.clone());
                }
                series
                    .entry((label, task))
                    .or_default()
                    .insert((seed, r.step), (get("dev_acc")?, get("test_acc")?));
            }
            Phase::Pretrain => curves
                .entry(r.run_id.clone())
                .or_default()
                .push((r.step, r.metrics.clone())),
            Phase::Check => {}
        }
    }
    if series.is_empty() && curves.is_empty() {
        return Err(invalid(format!("{}: no metrics to report", log_dir.display())));
    }

    let mut written = Vec::new();
    for ((label, task), rows) in &series {
        let path = out.join(format!("series-{}-{}.tsv", sanitize(label), sanitize(task)));
        let mut w = create(&path)?;
        let io = |e: std::io::Error| invalid(format!("{}: {e}", path.display()));
        writeln!(w, "seed\tepoch\tdev_acc\ttest_acc").map_err(io)?;
        for ((seed, epoch), (dev, test)) in rows {
            writeln!(w, "{seed}\t{epoch}\t{dev}\t{test}").map_err(io)?;
        }
        w.flush().map_err(io)?;
        written.push(path);
    }

    if !series.is_empty() {
        let baseline = if labels.iter().any(|l| l == "random") {
            "random".to_string()
        } else {
            labels[0].clone()
        };
        let per_epoch = |label: &str, task: &str| -> BTreeMap<u64, Vec<f64>> {
            let mut m: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            if let Some(rows) = series.get(&(label.to_string(), task.to_string())) {
                for (&(_, epoch), &(_, test)) in rows {
                    m.entry(epoch).or_default().push(test);
                }
            }
            m
        };
        let path = out.join("summary.tsv");
        let mut w = create(&path)?;
        let io = |e: std::io::Error| invalid(format!("{}: {e}", path.display()));
        writeln!(w, "k\ttask\tepoch\tn\tmean_test_acc\tstderr\tdelta_vs_{baseline}").map_err(io)?;
        for (label, task) in series.keys() {
            let base = per_epoch(&baseline, task);
            for (epoch, accs) in per_epoch(label, task) {
                let (mean, se) = mean_stderr(&accs);
                let delta = base.get(&epoch).map_or(f64::NAN, |b| mean - mean_stderr(b).0);
                let se = se.map_or_else(|| "NA".to_string(), |s| s.to_string());
                writeln!(w, "{label}\t{task}\t{epoch}\t{}\t{mean}\t{se}\t{delta}", accs.len()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        written.push(path);
    }

    for (run_id, mut rows) in curves {
        rows.sort_by_key(|(step, _)| *step);
        let path = out.join(format!("pretrain-{}.tsv", sanitize(&run_id)));
        let mut w = create(&path)?;
        let io = |e: std::io::Error| invalid(format!("{}: {e}", path.display()));
        writeln!(w, "step\ttest_loss\tmeta_grad_norm").map_err(io)?;
        for (step, m) in rows {
            let get = |k: &str| m.get(k).copied().unwrap_or(f64::NAN);
            writeln!(w, "{step}\t{}\t{}", get("test_loss"), get("meta_grad_norm")).map_err(io)?;
        }
        w.flush().map_err(io)?;
        written.push(path);
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}
