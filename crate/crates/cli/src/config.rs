//! Experiment configuration as flat `section.key = value` text.
//!
//! Every key is required; a persisted config therefore spells out every seed
//! and size it depends on.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use metaprep::finetune::{DownstreamKind, FinetuneConfig, Sizes};
use metaprep::metatrain::{GradMode, MetaConfig};
use metaprep::model::ModelConfig;
use metaprep::optim::Optimizer;
use metaprep::tasks::{GrammarParams, TaskKind, TaskMix};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown field `{field}`")]
    Unknown { line: usize, field: String },
    #[error("line {line}: field `{field}` given twice")]
    Duplicate { line: usize, field: String },
    #[error("missing required field `{0}`")]
    Missing(String),
    #[error("line {line}: field `{field}`: {message}")]
    BadValue {
        line: usize,
        field: String,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Corpus generation and pre-training batch settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub grammar_seed: u64,
    pub corpus_seed: u64,
    pub n_docs: usize,
    pub n_topics: usize,
    pub markov_weight: f64,
    pub topic_affinity: f64,
    pub sentence_len: (usize, usize),
    pub doc_sentences: (usize, usize),
    pub batch_size: usize,
}

impl DataConfig {
    pub fn grammar_params(&self, vocab_size: usize) -> GrammarParams {
        GrammarParams {
            seed: self.grammar_seed,
            vocab_size,
            n_topics: self.n_topics,
            markov_weight: self.markov_weight,
            topic_affinity: self.topic_affinity,
            sentence_len: self.sentence_len,
            doc_sentences: self.doc_sentences,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamConfig {
    pub tasks: Vec<DownstreamKind>,
    pub task_seed: u64,
    pub sizes: Sizes,
    pub epochs: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
}

impl DownstreamConfig {
    /// Fine-tuning settings for one seed.
    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            lr: self.lr,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Seeds parameter initialization and the pre-training batch stream.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    /// `meta.seed` is not a key of its own; it always equals `seed`.
    pub meta: MetaConfig,
    /// Write a checkpoint every this many outer steps (and after the last).
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub mix: TaskMix,
    pub downstream: DownstreamConfig,
}

fn grad_mode_name(m: GradMode) -> &'static str {
    match m {
        GradMode::Full => "full",
        GradMode::FirstOrder => "first_order",
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// The toy setup used by the examples and the acceptance suite.
    pub fn toy() -> Self {
        let model = ModelConfig {
            vocab_size: 32,
            max_len: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            n_segments: 2,
            dropout_rate: 0.0,
        };
        let seed = 0;
        Self {
            seed,
            out_dir: PathBuf::from("runs/toy"),
            model,
            meta: MetaConfig {
                k: 5,
                alpha: 3e-3,
                beta: 3e-3,
                grad_mode: GradMode::FirstOrder,
                outer_optimizer: Optimizer::ADAM,
                total_meta_test_steps: 2000,
                seed,
            },
            checkpoint_every: 500,
            data: DataConfig {
                grammar_seed: 1,
                corpus_seed: 2,
                n_docs: 2000,
                n_topics: 4,
                markov_weight: 0.3,
                topic_affinity: 30.0,
                sentence_len: (3, 6),
                doc_sentences: (2, 6),
                batch_size: 8,
            },
            mix: TaskMix::new(TaskKind::ALL.iter().map(|&t| (t, 0.25)).collect()).expect("uniform mix"),
            downstream: DownstreamConfig {
                tasks: DownstreamKind::ALL.to_vec(),
                task_seed: 100,
                sizes: Sizes::default(),
                epochs: 4,
                lr: 1e-3,
                seeds: (0..10).collect(),
            },
        }
    }

    /// Cross-field checks on top of what each component validates.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.meta.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.meta.seed != self.seed {
            return invalid("meta seed must equal the experiment seed".into());
        }
        metaprep::tasks::Grammar::new(self.data.grammar_params(self.model.vocab_size))
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let longest = 2 * self.data.sentence_len.1 + 3;
        if longest > self.model.max_len {
            return invalid(format!(
                "model.max_len = {} but packed sentence pairs reach {longest} tokens",
                self.model.max_len
            ));
        }
        if self.data.n_docs < 2 {
            return invalid("data.n_docs must be at least 2 (negative pairs need another document)".into());
        }
        if self.data.batch_size == 0 {
            return invalid("data.batch_size must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return invalid("meta.checkpoint_every must be positive".into());
        }
        let d = &self.downstream;
        if d.tasks.is_empty() || d.seeds.is_empty() {
            return invalid("downstream.tasks and finetune.seeds must be non-empty".into());
        }
        if !(d.lr >= 0.0 && d.lr.is_finite()) {
            return invalid(format!("finetune.lr must be finite and non-negative, got {}", d.lr));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut fields = Fields::parse(text)?;
        let seed = fields.take("seed")?;
        let model = ModelConfig {
            vocab_size: fields.take("model.vocab_size")?,
            max_len: fields.take("model.max_len")?,
            d_model: fields.take("model.d_model")?,
            n_heads: fields.take("model.n_heads")?,
            n_layers: fields.take("model.n_layers")?,
            d_ff: fields.take("model.d_ff")?,
            n_segments: fields.take("model.n_segments")?,
            dropout_rate: fields.take("model.dropout_rate")?,
        };
        let meta = MetaConfig {
            k: fields.take("meta.k")?,
            alpha: fields.take("meta.alpha")?,
            beta: fields.take("meta.beta")?,
            grad_mode: fields.take_with("meta.grad_mode", |s| match s {
                "full" => Ok(GradMode::Full),
                "first_order" => Ok(GradMode::FirstOrder),
                _ => Err("expected `full` or `first_order`".to_string()),
            })?,
            outer_optimizer: fields.take_with("meta.outer_optimizer", |s| match s {
                "sgd" => Ok(Optimizer::Sgd),
                "adam" => Ok(Optimizer::ADAM),
                _ => Err("expected `sgd` or `adam`".to_string()),
            })?,
            total_meta_test_steps: fields.take("meta.total_meta_test_steps")?,
            seed,
        };
        let checkpoint_every = fields.take("meta.checkpoint_every")?;
        let data = DataConfig {
            grammar_seed: fields.take("data.grammar_seed")?,
            corpus_seed: fields.take("data.corpus_seed")?,
            n_docs: fields.take("data.n_docs")?,
            n_topics: fields.take("data.n_topics")?,
            markov_weight: fields.take("data.markov_weight")?,
            topic_affinity: fields.take("data.topic_affinity")?,
            sentence_len: (fields.take("data.sentence_min")?, fields.take("data.sentence_max")?),
            doc_sentences: (
                fields.take("data.doc_sentences_min")?,
                fields.take("data.doc_sentences_max")?,
            ),
            batch_size: fields.take("data.batch_size")?,
        };
        let mut entries = Vec::new();
        for task in TaskKind::ALL {
            entries.push((task, fields.take::<f64>(&format!("mix.{}", task.name()))?));
        }
        let mix = TaskMix::new(entries.into_iter().filter(|&(_, p)| p > 0.0).collect())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let downstream = DownstreamConfig {
            tasks: fields.take_with("downstream.tasks", |s| {
                s.split(',')
                    .map(|t| {
                        t.trim()
                            .parse()
                            .map_err(|e: metaprep::finetune::FinetuneError| e.to_string())
                    })
                    .collect()
            })?,
            task_seed: fields.take("downstream.task_seed")?,
            sizes: Sizes {
                train: fields.take("downstream.train")?,
                dev: fields.take("downstream.dev")?,
                test: fields.take("downstream.test")?,
                batch_size: fields.take("downstream.batch_size")?,
            },
            epochs: fields.take("finetune.epochs")?,
            lr: fields.take("finetune.lr")?,
            seeds: fields.take_with("finetune.seeds", |s| {
                s.split(',')
                    .map(|t| t.trim().parse::<u64>().map_err(|e| e.to_string()))
                    .collect()
            })?,
        };
        let out_dir = PathBuf::from(fields.take::<String>("out_dir")?);
        fields.finish()?;
        let config = Self {
            seed,
            out_dir,
            model,
            meta,
            checkpoint_every,
            data,
            mix,
            downstream,
        };
        config.validate()?;
        Ok(config)
    }

    /// Every field, in a fixed order; parses back to an equal config.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(s, "{k} = {v}").expect("write to string");
        };
        kv("seed", &self.seed);
        kv("out_dir", &self.out_dir.display());
        let m = &self.model;
        kv("model.vocab_size", &m.vocab_size);
        kv("model.max_len", &m.max_len);
        kv("model.d_model", &m.d_model);
        kv("model.n_heads", &m.n_heads);
        kv("model.n_layers", &m.n_layers);
        kv("model.d_ff", &m.d_ff);
        kv("model.n_segments", &m.n_segments);
        kv("model.dropout_rate", &m.dropout_rate);
        let mc = &self.meta;
        kv("meta.k", &mc.k);
        kv("meta.alpha", &mc.alpha);
        kv("meta.beta", &mc.beta);
        kv("meta.grad_mode", &grad_mode_name(mc.grad_mode));
        let opt = match mc.outer_optimizer {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        };
        kv("meta.outer_optimizer", &opt);
        kv("meta.total_meta_test_steps", &mc.total_meta_test_steps);
        kv("meta.checkpoint_every", &self.checkpoint_every);
        let d = &self.data;
        kv("data.grammar_seed", &d.grammar_seed);
        kv("data.corpus_seed", &d.corpus_seed);
        kv("data.n_docs", &d.n_docs);
        kv("data.n_topics", &d.n_topics);
        kv("data.markov_weight", &d.markov_weight);
        kv("data.topic_affinity", &d.topic_affinity);
        kv("data.sentence_min", &d.sentence_len.0);
        kv("data.sentence_max", &d.sentence_len.1);
        kv("data.doc_sentences_min", &d.doc_sentences.0);
        kv("data.doc_sentences_max", &d.doc_sentences.1);
        kv("data.batch_size", &d.batch_size);
        for task in TaskKind::ALL {
            let p = self
                .mix
                .entries()
                .iter()
                .find(|(t, _)| *t == task)
                .map_or(0.0, |&(_, p)| p);
            kv(&format!("mix.{}", task.name()), &p);
        }
        let ds = &self.downstream;
        let names: Vec<&str> = ds.tasks.iter().map(|t| t.name()).collect();
        kv("downstream.tasks", &names.join(","));
        kv("downstream.task_seed", &ds.task_seed);
        kv("downstream.train", &ds.sizes.train);
        kv("downstream.dev", &ds.sizes.dev);
        kv("downstream.test", &ds.sizes.test);
        kv("downstream.batch_size", &ds.sizes.batch_size);
        kv("finetune.epochs", &ds.epochs);
        kv("finetune.lr", &ds.lr);
        kv("finetune.seeds", &join(&ds.seeds));
        s
    }

    /// Replace the experiment seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.meta.seed = seed;
        self
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Self::parse(s)
    }
}

struct Fields {
    values: HashMap<String, (usize, String)>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    message: "empty key".into(),
                });
            }
            if values
                .insert(key.to_string(), (line, value.trim().to_string()))
                .is_some()
            {
                return Err(ConfigError::Duplicate {
                    line,
                    field: key.into(),
                });
            }
        }
        Ok(Self { values })
    }

    fn take_with<T>(&mut self, key: &str, parse: impl FnOnce(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        let (line, value) = self
            .values
            .remove(key)
            .ok_or_else(|| ConfigError::Missing(key.into()))?;
        parse(&value).map_err(|message| ConfigError::BadValue {
            line,
            field: key.into(),
            message,
        })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.take_with(key, |s| s.parse::<T>().map_err(|e| format!("{e} (got {s:?})")))
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.values.into_iter().min_by_key(|(_, (line, _))| *line) {
            Some((field, (line, _))) => Err(ConfigError::Unknown { line, field }),
            None => Ok(()),
        }
    }
}
