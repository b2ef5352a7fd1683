//! Building the synthetic world from a config, and the multi-seed studies
//! comparing pre-training depths and starting points.

use thiserror::Error;

use metaprep::autodiff::ParamSet;
use metaprep::finetune::{finetune, synth_downstream, DownstreamTask, FinetuneError, StudyRow, StudyTable};
use metaprep::metatrain::{pretrain, MetaConfig, MetaError};
use metaprep::model::{init_params, ModelError};
use metaprep::tasks::{generate_corpus, Grammar, PretrainSampler, TaskError};

use crate::config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub fn grammar(config: &ExperimentConfig) -> Result<Grammar> {
    Ok(Grammar::new(config.data.grammar_params(config.model.vocab_size))?)
}

pub fn pretrain_sampler(config: &ExperimentConfig, grammar: &Grammar) -> Result<PretrainSampler> {
    let corpus = generate_corpus(grammar, config.data.corpus_seed, config.data.n_docs);
    Ok(PretrainSampler::new(grammar.clone(), corpus, config.data.batch_size)?)
}

pub fn downstream_tasks(config: &ExperimentConfig, grammar: &Grammar) -> Result<Vec<DownstreamTask>> {
    let d = &config.downstream;
    Ok(d.tasks
        .iter()
        .map(|&kind| synth_downstream(kind, grammar, d.task_seed, d.sizes))
        .collect::<std::result::Result<_, _>>()?)
}

/// Everything a study needs, built once.
pub struct World {
    pub config: ExperimentConfig,
    pub sampler: PretrainSampler,
    pub tasks: Vec<DownstreamTask>,
}

impl World {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let g = grammar(config)?;
        Ok(Self {
            sampler: pretrain_sampler(config, &g)?,
            tasks: downstream_tasks(config, &g)?,
            config: config.clone(),
        })
    }

    /// Meta-train at depth `k` from `init` under `seed`, with the configured
    /// budget and step sizes.
    pub fn pretrain(&self, k: usize, seed: u64, init: &ParamSet) -> Result<ParamSet> {
        let meta = MetaConfig {
            k,
            seed,
            ..self.config.meta.clone()
        };
        let (params, _) = pretrain(&meta, &self.sampler, &self.config.mix, &self.config.model, init)?;
        Ok(params)
    }

    /// Fine-tune `params` on every task with fine-tuning seed `seed`.
    pub fn finetune_all(&self, label: &str, seed: u64, params: &ParamSet) -> Result<Vec<StudyRow>> {
        self.tasks
            .iter()
            .map(|task| {
                let records = finetune(
                    &self.config.model,
                    params,
                    task,
                    &self.config.downstream.finetune_config(seed),
                )?;
                Ok(StudyRow {
                    label: label.into(),
                    task: task.name.clone(),
                    seed,
                    records,
                })
            })
            .collect()
    }
}

pub fn depth_label(k: usize) -> String {
    format!("k{k}")
}

/// Epoch-by-epoch downstream accuracy after pre-training at each depth.
///
/// Seeds are paired: seed `s` initializes the parameters, drives the
/// pre-training batch stream and seeds fine-tuning, for every depth alike.
/// Every depth gets the same meta-test budget. Rows labelled `random` come
/// from the untrained initialization.
pub fn depth_study(world: &World, ks: &[usize], seeds: &[u64]) -> Result<StudyTable> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let init = init_params(&world.config.model, seed)?;
        rows.extend(world.finetune_all("random", seed, &init)?);
        for &k in ks {
            let trained = world.pretrain(k, seed, &init)?;
            rows.extend(world.finetune_all(&depth_label(k), seed, &trained)?);
        }
    }
    Ok(StudyTable::from_rows(rows))
}

pub fn warm_label(k: usize) -> String {
    format!("warm-{}", depth_label(k))
}

/// Starting points for meta-pre-training at the configured depth `k > 0`.
///
/// Per seed: the untrained initialization (`random`), depth-0 pre-training
/// from it (`k0`), depth-`k` meta-pre-training from it (`k<k>`, from
/// scratch), and depth-`k` meta-pre-training started from the `k0`
/// checkpoint (`warm-k<k>`). Every pre-training run spends the configured
/// meta-test budget; seeds are paired as in [`depth_study`].
pub fn warm_start_study(world: &World, seeds: &[u64]) -> Result<StudyTable> {
    let k = world.config.meta.k;
    if k == 0 {
        return Err(ExperimentError::Invalid("warm-start study needs meta.k > 0".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let init = init_params(&world.config.model, seed)?;
        rows.extend(world.finetune_all("random", seed, &init)?);
        let base = world.pretrain(0, seed, &init)?;
        rows.extend(world.finetune_all(&depth_label(0), seed, &base)?);
        let scratch = world.pretrain(k, seed, &init)?;
        rows.extend(world.finetune_all(&depth_label(k), seed, &scratch)?);
        let warm = world.pretrain(k, seed, &base)?;
        rows.extend(world.finetune_all(&warm_label(k), seed, &warm)?);
    }
    Ok(StudyTable::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use metaprep::finetune::Sizes;

    fn micro() -> ExperimentConfig {
        let mut c = ExperimentConfig::toy();
        c.model = metaprep::model::ModelConfig {
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
        c.meta.total_meta_test_steps = 3;
        c.meta.k = 2;
        c.downstream.sizes = Sizes {
            train: 32,
            dev: 32,
            test: 32,
            batch_size: 16,
        };
        c.downstream.epochs = 2;
        c.downstream.tasks.truncate(2);
        c.validate().unwrap();
        c
    }

    #[test]
    fn depth_study_shape() {
        let world = World::new(&micro()).unwrap();
        let t = depth_study(&world, &[0, 1], &[3, 4]).unwrap();
        // (random + 2 depths) x 2 tasks x 2 seeds
        assert_eq!(t.rows.len(), 12);
        assert_eq!(t.summary.len(), 6);
        assert!(t.rows.iter().all(|r| r.records.len() == 3));
        assert_eq!(t.accuracies("k1", 1).len(), 4);
    }

    #[test]
    fn studies_agree_on_shared_runs() {
        let world = World::new(&micro()).unwrap();
        let depth = depth_study(&world, &[0, 2], &[5]).unwrap();
        let warm = warm_start_study(&world, &[5]).unwrap();
        assert_eq!(depth.accuracies("random", 1), warm.accuracies("random", 1));
        assert_eq!(depth.accuracies("k0", 1), warm.accuracies("k0", 1));
        assert_eq!(depth.accuracies("k2", 1), warm.accuracies("k2", 1));
        assert_eq!(warm.summary.len(), 4 * 2);
        assert_eq!(warm.accuracies("warm-k2", 1).len(), 2);
    }
}
