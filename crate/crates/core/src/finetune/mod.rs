//! Downstream fine-tuning and initialization-quality comparisons.
//!
//! A downstream run keeps every non-head parameter of a checkpoint, adds a
//! freshly initialized task head and trains everything with Adam. Records
//! start at epoch 0, the untouched initialization.

mod study;
mod synth;

pub use study::{
    init_quality_study, mean_stderr, write_summary_tsv, StudyCheckpoint, StudyRow, StudySummary, StudyTable,
};
pub use synth::{synth_downstream, Sizes, CLOZE_CANDIDATES};

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamSet, ParamVars, Tensor, Var};
use crate::model::{self, is_encoder_param, EncoderInput, ModelConfig, ModelError, INIT_STD};
use crate::optim::{self, Optimizer, OptimizerState};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid downstream task: {0}")]
    InvalidTask(String),
    #[error("seed {seed}: no balanced task after {attempts} attempts")]
    DegenerateTask { seed: u64, attempts: u64 },
    #[error("checkpoint incompatible with model config: {0}")]
    Incompatible(String),
    #[error("checkpoints trained with different meta-test budgets: {0}")]
    BudgetMismatch(String),
    #[error("non-finite fine-tuning loss in epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, FinetuneError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DownstreamKind {
    SingleSentenceCls,
    PairCls,
    Cloze,
}

impl DownstreamKind {
    pub const ALL: [DownstreamKind; 3] = [
        DownstreamKind::SingleSentenceCls,
        DownstreamKind::PairCls,
        DownstreamKind::Cloze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DownstreamKind::SingleSentenceCls => "single_sentence_cls",
            DownstreamKind::PairCls => "pair_cls",
            DownstreamKind::Cloze => "cloze",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            DownstreamKind::Cloze => CLOZE_CANDIDATES,
            _ => 2,
        }
    }
}

impl std::str::FromStr for DownstreamKind {
    type Err = FinetuneError;

    fn from_str(s: &str) -> Result<Self> {
        DownstreamKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FinetuneError::InvalidTask(format!("unknown downstream kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamBatch {
    pub input: EncoderInput,
    /// Class per example; for cloze, the index of the right candidate.
    pub labels: Vec<usize>,
    /// Cloze only: `(example, position)` of each blank.
    pub blank_positions: Vec<(usize, usize)>,
    /// Cloze only: candidate token ids per blank.
    pub candidates: Vec<[usize; CLOZE_CANDIDATES]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamTask {
    pub kind: DownstreamKind,
    pub n_classes: usize,
    pub name: String,
    pub train: Vec<DownstreamBatch>,
    pub dev: Vec<DownstreamBatch>,
    pub test: Vec<DownstreamBatch>,
}

fn split_len(split: &[DownstreamBatch]) -> usize {
    split.iter().map(|b| b.labels.len()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch; at epoch 0, over the training split before any update.
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Seeds the head and the batch order; independent of the encoder.
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn head_params(config: &ModelConfig, kind: DownstreamKind, seed: u64) -> ParamSet {
    let mut rng = Stream::new(seed).split("downstream-head");
    let d = config.d_model;
    let mut normal = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect()).expect("shape")
    };
    let mut p = ParamSet::new();
    match kind {
        DownstreamKind::Cloze => {
            p.insert("head.cloze.w", normal(&[d, d])).expect("fresh");
        }
        _ => {
            p.insert("head.cls.w", normal(&[d, kind.n_classes()])).expect("fresh");
            p.insert("head.cls.b", Tensor::zeros(&[kind.n_classes()]))
                .expect("fresh");
        }
    }
    p
}

/// Checkpoint body (every non-head entry) plus a fresh head for `kind`.
pub fn downstream_params(config: &ModelConfig, init: &ParamSet, kind: DownstreamKind, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let reference = model::init_params(config, 0)?;
    let mut out = ParamSet::new();
    for (name, t) in reference.iter().filter(|(n, _)| is_encoder_param(n)) {
        let got = init
            .get(name)
            .ok_or_else(|| FinetuneError::Incompatible(format!("missing {name}")))?;
        if got.shape() != t.shape() {
            return Err(FinetuneError::Incompatible(format!(
                "{name}: shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
        out.insert(name, got.clone())?;
    }
    for (name, t) in head_params(config, kind, seed).iter() {
        out.insert(name, t.clone())?;
    }
    Ok(out)
}

/// Task scores `[batch, n_classes]` for one batch.
fn scores(
    g: &mut Graph,
    config: &ModelConfig,
    kind: DownstreamKind,
    p: &ParamVars,
    b: &DownstreamBatch,
    dropout: model::Dropout<'_>,
) -> Result<Var> {
    let out = model::encode(g, config, p, &b.input, dropout)?;
    match kind {
        DownstreamKind::Cloze => {
            // Candidates are scored against the blank's state through the
            // tied embedding, plus a learned residual projection.
            let n = b.blank_positions.len();
            let d = config.d_model;
            let rows = model::gather_positions(g, &out, &b.blank_positions)?;
            let proj = g.matmul(rows, p.get("head.cloze.w")?)?;
            let query = g.add(rows, proj)?;
            let query = g.reshape(query, &[n, d, 1])?;
            let ids: Vec<usize> = b.candidates.iter().flatten().copied().collect();
            if let Some(&id) = ids.iter().find(|&&t| t >= config.vocab_size) {
                return Err(ModelError::IdOutOfRange {
                    what: "cloze candidate",
                    id,
                    limit: config.vocab_size,
                }
                .into());
            }
            let cand = g.gather(p.get("embeddings.token")?, &ids)?;
            let cand = g.reshape(cand, &[n, CLOZE_CANDIDATES, d])?;
            let s = g.matmul(cand, query)?;
            Ok(g.reshape(s, &[n, CLOZE_CANDIDATES])?)
        }
        _ => Ok(g.linear(out.pooled, p.get("head.cls.w")?, p.get("head.cls.b")?)?),
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

/// Fraction of examples in `split` whose highest score is the label.
pub fn accuracy(
    config: &ModelConfig,
    kind: DownstreamKind,
    params: &ParamSet,
    split: &[DownstreamBatch],
) -> Result<f64> {
    let mut correct = 0usize;
    for b in split {
        let mut g = Graph::new();
        let p = g.bind_constant(params);
        let s = scores(&mut g, config, kind, &p, b, None)?;
        let t = g.value(s);
        let width = t.shape()[1];
        correct += t
            .data()
            .chunks(width)
            .zip(&b.labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / split_len(split) as f64)
}

fn batch_loss(
    config: &ModelConfig,
    kind: DownstreamKind,
    params: &ParamSet,
    b: &DownstreamBatch,
    dropout: model::Dropout<'_>,
) -> Result<(f64, ParamSet)> {
    let mut g = Graph::new();
    let p = g.bind(params);
    let s = scores(&mut g, config, kind, &p, b, dropout)?;
    let loss = g.cross_entropy(s, &b.labels)?;
    let value = g.value(loss).item();
    Ok((value, g.grad_values(loss, &p)?))
}

fn eval_loss(config: &ModelConfig, kind: DownstreamKind, params: &ParamSet, split: &[DownstreamBatch]) -> Result<f64> {
    let mut total = 0.0;
    for b in split {
        let mut g = Graph::new();
        let p = g.bind_constant(params);
        let s = scores(&mut g, config, kind, &p, b, None)?;
        let loss = g.cross_entropy(s, &b.labels)?;
        total += g.value(loss).item();
    }
    Ok(total / split.len() as f64)
}

/// Fine-tune end to end with Adam at a constant rate.
///
/// Returns `epochs + 1` records; `init` is never modified.
pub fn finetune(
    config: &ModelConfig,
    init: &ParamSet,
    task: &DownstreamTask,
    ft: &FinetuneConfig,
) -> Result<Vec<EpochRecord>> {
    if task.train.is_empty() || task.dev.is_empty() || task.test.is_empty() {
        return Err(FinetuneError::InvalidTask(format!("{}: empty split", task.name)));
    }
    let kind = task.kind;
    let mut params = downstream_params(config, init, kind, ft.seed)?;
    let mut opt = OptimizerState::default();
    let mut order_rng = Stream::new(ft.seed).split("downstream-order");
    let mut dropout_rng = Stream::new(ft.seed).split("downstream-dropout");
    let record = |epoch, train_loss, params: &ParamSet| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            train_loss,
            dev_accuracy: accuracy(config, kind, params, &task.dev)?,
            test_accuracy: accuracy(config, kind, params, &task.test)?,
        })
    };
    let mut records = vec![record(0, eval_loss(config, kind, &params, &task.train)?, &params)?];
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    for epoch in 1..=ft.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            let drop = (config.dropout_rate > 0.0).then_some(&mut dropout_rng);
            let (loss, grad) = batch_loss(config, kind, &params, &task.train[i], drop)?;
            if !loss.is_finite() {
                return Err(FinetuneError::NonFinite(epoch));
            }
            total += loss;
            (params, opt) = optim::step(Optimizer::ADAM, ft.lr, &params, &grad, &opt)?;
        }
        records.push(record(epoch, total / order.len() as f64, &params)?);
    }
    Ok(records)
}
