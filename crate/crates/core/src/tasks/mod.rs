//! Synthetic pre-training task distributions.
//!
//! A seeded grammar produces a toy corpus with topical and sequential
//! structure. On top of it sit the masked-LM procedure, next-sentence pairs,
//! two supervised pair-matching tasks and a mixture sampler. A diagonal
//! quadratic family provides closed-form meta-gradients.

mod corpus;
mod masking;
mod pairs;
mod quadratic;

pub use corpus::{generate_corpus, Corpus, Grammar, GrammarParams};
pub use masking::{mask_batch, MaskingRule};
pub use pairs::{make_nsp_pair, make_pair_task_batch, nsp_pair_with_label, pack_pair, pair_example, NspPair};
pub use quadratic::{quadratic_meta_gradient_oracle, QuadraticTask};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::EncoderInput;
use crate::rng::Stream;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
/// First id usable as a content token.
pub const CONTENT_START: usize = 4;

pub fn is_reserved(token: usize) -> bool {
    token < CONTENT_START
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("vocab_size {0} too small: need at least 8 (ids 0..3 are reserved)")]
    VocabTooSmall(usize),
    #[error("invalid generator settings: {0}")]
    InvalidSpec(String),
    #[error("token {token} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("example {0} has no maskable tokens")]
    NoMaskableTokens(usize),
    #[error("task mix is empty")]
    EmptyMix,
    #[error("task mix invalid: {0}")]
    BadMix(String),
    #[error("unstable descent: alpha * max curvature = {0} >= 2")]
    Unstable(f64),
    #[error("quadratic task invalid: {0}")]
    BadQuadratic(String),
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Mlm,
    Nsp,
    QaMatch,
    QqMatch,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Mlm, TaskKind::Nsp, TaskKind::QaMatch, TaskKind::QqMatch];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mlm => "mlm",
            TaskKind::Nsp => "nsp",
            TaskKind::QaMatch => "qa_match",
            TaskKind::QqMatch => "qq_match",
        }
    }

    pub fn uses_labels(self) -> bool {
        self != TaskKind::Mlm
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TaskError::BadMix(format!("unknown task {s:?}")))
    }
}

/// One pre-training batch: padded encoder input plus the supervision its task needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub task: TaskKind,
    pub input: EncoderInput,
    /// `(example, position)` of every prediction target; MLM only.
    pub mask_positions: Vec<(usize, usize)>,
    /// Original token ids at `mask_positions`.
    pub mask_targets: Vec<usize>,
    /// One label per example; pair tasks only.
    pub labels: Vec<bool>,
}

impl Batch {
    /// True when exactly the fields the task needs are populated.
    pub fn fields_match_task(&self) -> bool {
        let masked = !self.mask_positions.is_empty() && self.mask_positions.len() == self.mask_targets.len();
        let labelled = self.labels.len() == self.input.batch;
        match self.task {
            TaskKind::Mlm => masked && self.labels.is_empty(),
            _ => labelled && self.mask_positions.is_empty() && self.mask_targets.is_empty(),
        }
    }
}

/// Pad variable-length sequences into one encoder input.
pub fn pad_sequences(seqs: &[(Vec<usize>, Vec<usize>)]) -> EncoderInput {
    let seq = seqs.iter().map(|(t, _)| t.len()).max().unwrap_or(0);
    let batch = seqs.len();
    let mut tokens = Vec::with_capacity(batch * seq);
    let mut segments = Vec::with_capacity(batch * seq);
    let mut attention_mask = Vec::with_capacity(batch * seq);
    for (t, s) in seqs {
        tokens.extend_from_slice(t);
        segments.extend_from_slice(s);
        attention_mask.extend(std::iter::repeat_n(true, t.len()));
        let pad = seq - t.len();
        tokens.extend(std::iter::repeat_n(PAD, pad));
        segments.extend(std::iter::repeat_n(0, pad));
        attention_mask.extend(std::iter::repeat_n(false, pad));
    }
    EncoderInput {
        batch,
        seq,
        tokens,
        segments,
        attention_mask,
    }
}

/// Probability of each pre-training task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMix {
    entries: Vec<(TaskKind, f64)>,
}

impl TaskMix {
    pub fn new(entries: Vec<(TaskKind, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(TaskError::EmptyMix);
        }
        for (i, (k, p)) in entries.iter().enumerate() {
            if !(p.is_finite() && *p >= 0.0) {
                return Err(TaskError::BadMix(format!("{k}: probability {p}")));
            }
            if entries[..i].iter().any(|(j, _)| j == k) {
                return Err(TaskError::BadMix(format!("{k} listed twice")));
            }
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TaskError::BadMix(format!("probabilities sum to {total}")));
        }
        Ok(Self { entries })
    }

    pub fn only(task: TaskKind) -> Self {
        Self {
            entries: vec![(task, 1.0)],
        }
    }

    pub fn entries(&self) -> &[(TaskKind, f64)] {
        &self.entries
    }

    pub fn draw(&self, rng: &mut Stream) -> TaskKind {
        let w: Vec<f64> = self.entries.iter().map(|e| e.1).collect();
        self.entries[rng.weighted(&w)].0
    }
}

/// Produces pre-training batches of every task from one corpus and grammar.
#[derive(Clone, Debug)]
pub struct PretrainSampler {
    pub corpus: Corpus,
    pub grammar: Grammar,
    pub batch_size: usize,
    pub masking: MaskingRule,
}

impl PretrainSampler {
    pub fn new(grammar: Grammar, corpus: Corpus, batch_size: usize) -> Result<Self> {
        corpus.validate()?;
        if batch_size == 0 {
            return Err(TaskError::InvalidSpec("batch_size must be positive".into()));
        }
        if corpus.vocab_size != grammar.vocab_size() {
            return Err(TaskError::InvalidSpec("corpus and grammar vocabularies differ".into()));
        }
        Ok(Self {
            corpus,
            grammar,
            batch_size,
            masking: MaskingRule::default(),
        })
    }

    /// Longest packed sequence this sampler can emit.
    pub fn max_seq_len(&self) -> usize {
        let longest = self
            .corpus
            .documents
            .iter()
            .flatten()
            .map(Vec::len)
            .max()
            .unwrap_or(0)
            .max(self.grammar.params().sentence_len.1);
        2 * longest + 3
    }

    pub fn batch(&self, task: TaskKind, rng: &mut Stream) -> Result<Batch> {
        match task {
            TaskKind::Mlm => {
                let seqs: Vec<(Vec<usize>, Vec<usize>)> = (0..self.batch_size)
                    .map(|_| {
                        let p = make_nsp_pair(&self.corpus, rng);
                        pack_pair(&p.a, &p.b)
                    })
                    .collect();
                mask_batch(&seqs, &self.masking, self.grammar.vocab_size(), rng)
            }
            TaskKind::Nsp => {
                let (seqs, labels): (Vec<_>, Vec<_>) = (0..self.batch_size)
                    .map(|_| {
                        let p = make_nsp_pair(&self.corpus, rng);
                        (pack_pair(&p.a, &p.b), p.is_next)
                    })
                    .unzip();
                Ok(Batch {
                    task,
                    input: pad_sequences(&seqs),
                    mask_positions: Vec::new(),
                    mask_targets: Vec::new(),
                    labels,
                })
            }
            TaskKind::QaMatch | TaskKind::QqMatch => {
                Ok(make_pair_task_batch(task, &self.grammar, self.batch_size, rng))
            }
        }
    }

    /// `k_plus_1` i.i.d. batches from the mix; the last is the meta-test batch.
    pub fn sample_pretrain_batches(&self, mix: &TaskMix, k_plus_1: usize, rng: &mut Stream) -> Result<Vec<Batch>> {
        (0..k_plus_1)
            .map(|_| {
                let task = mix.draw(rng);
                self.batch(task, rng)
            })
            .collect()
    }
}
