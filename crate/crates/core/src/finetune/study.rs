use std::io::Write;

use super::{finetune, DownstreamTask, EpochRecord, FinetuneConfig, FinetuneError, Result};
use crate::autodiff::ParamSet;
use crate::model::ModelConfig;

/// A checkpoint entered into a comparison.
#[derive(Clone, Debug)]
pub struct StudyCheckpoint {
    /// Row label, usually the depth `k`.
    pub label: String,
    /// Meta-test steps spent pre-training; `None` for an untrained initialization.
    pub meta_test_steps: Option<u64>,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub label: String,
    pub task: String,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudySummary {
    pub label: String,
    pub task: String,
    pub n: usize,
    pub epoch1_mean: f64,
    /// Absent with a single run.
    pub epoch1_stderr: Option<f64>,
    pub final_mean: f64,
    pub final_stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    pub summary: Vec<StudySummary>,
}

/// Mean and standard error of the mean; the error needs at least two values.
pub fn mean_stderr(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

fn test_acc_at(records: &[EpochRecord], epoch: usize) -> f64 {
    records
        .iter()
        .find(|r| r.epoch == epoch)
        .or(records.last())
        .expect("at least the epoch-0 record")
        .test_accuracy
}

impl StudyTable {
    /// Test accuracies of `label` at `epoch` across every task and seed.
    pub fn accuracies(&self, label: &str, epoch: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.label == label)
            .map(|r| test_acc_at(&r.records, epoch))
            .collect()
    }

    pub fn mean_accuracy(&self, label: &str, epoch: usize) -> (f64, Option<f64>) {
        mean_stderr(&self.accuracies(label, epoch))
    }
}

/// Fine-tune every checkpoint on every task under every seed.
///
/// Runs fan out over up to `threads` workers; results do not depend on the
/// thread count.
pub fn init_quality_study(
    config: &ModelConfig,
    checkpoints: &[StudyCheckpoint],
    tasks: &[DownstreamTask],
    seeds: &[u64],
    ft: &FinetuneConfig,
    threads: usize,
) -> Result<StudyTable> {
    let budgets: Vec<(&str, u64)> = checkpoints
        .iter()
        .filter_map(|c| c.meta_test_steps.map(|b| (c.label.as_str(), b)))
        .collect();
    if let Some(&(first, b0)) = budgets.first() {
        if let Some(&(other, b)) = budgets.iter().find(|(_, b)| *b != b0) {
            return Err(FinetuneError::BudgetMismatch(format!(
                "{first}: {b0} steps, {other}: {b} steps"
            )));
        }
    }
    let jobs: Vec<(usize, usize, u64)> = checkpoints
        .iter()
        .enumerate()
        .flat_map(|(c, _)| (0..tasks.len()).flat_map(move |t| seeds.iter().map(move |&s| (c, t, s))))
        .collect();
    let run = |&(c, t, seed): &(usize, usize, u64)| {
        finetune(
            config,
            &checkpoints[c].params,
            &tasks[t],
            &FinetuneConfig { seed, ..*ft },
        )
    };
    let threads = threads.clamp(1, jobs.len().max(1));
    let results: Vec<Result<Vec<EpochRecord>>> = if threads == 1 {
        jobs.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<EpochRecord>>>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let jobs = &jobs;
                    let run = &run;
                    scope.spawn(move || {
                        (w..jobs.len())
                            .step_by(threads)
                            .map(|i| (i, run(&jobs[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("fine-tuning worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every job ran")).collect()
    };
    let mut rows = Vec::with_capacity(jobs.len());
    for (&(c, t, seed), r) in jobs.iter().zip(results) {
        rows.push(StudyRow {
            label: checkpoints[c].label.clone(),
            task: tasks[t].name.clone(),
            seed,
            records: r?,
        });
    }
    Ok(StudyTable::from_rows(rows))
}

impl StudyTable {
    /// Summaries per (label, task), in order of first appearance.
    pub fn from_rows(rows: Vec<StudyRow>) -> Self {
        let mut groups: Vec<(&str, &str)> = Vec::new();
        for r in &rows {
            if !groups.contains(&(r.label.as_str(), r.task.as_str())) {
                groups.push((&r.label, &r.task));
            }
        }
        let summary = groups
            .iter()
            .map(|&(label, task)| {
                let mine: Vec<&StudyRow> = rows.iter().filter(|r| r.label == label && r.task == task).collect();
                let e1: Vec<f64> = mine.iter().map(|r| test_acc_at(&r.records, 1)).collect();
                let last: Vec<f64> = mine
                    .iter()
                    .map(|r| r.records.last().expect("records").test_accuracy)
                    .collect();
                let (epoch1_mean, epoch1_stderr) = mean_stderr(&e1);
                let (final_mean, final_stderr) = mean_stderr(&last);
                StudySummary {
                    label: label.to_string(),
                    task: task.to_string(),
                    n: mine.len(),
                    epoch1_mean,
                    epoch1_stderr,
                    final_mean,
                    final_stderr,
                }
            })
            .collect();
        Self { rows, summary }
    }
}

/// One line per (checkpoint, task, seed, epoch).
pub fn write_summary_tsv(table: &StudyTable, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "k\ttask\tseed\tepoch\tdev_acc\ttest_acc")?;
    for r in &table.rows {
        for e in &r.records {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.label, r.task, r.seed, e.epoch, e.dev_accuracy, e.test_accuracy
            )?;
        }
    }
    Ok(())
}
