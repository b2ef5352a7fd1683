//! Self-contained verification suite behind `metaprep gradcheck`.
//!
//! Every check compares an autodiff result with an independent oracle:
//! central finite differences, the closed-form quadratic meta-gradient, or
//! an exact identity between two code paths.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use metaprep::autodiff::{finite_difference_grad, max_relative_error, Graph, ParamSet};
use metaprep::metatrain::{
    inner_loop, meta_gradient, meta_gradient_first_order, meta_gradient_full, multitask_train, pretrain, Counted,
    GradMode, MetaConfig, MetaError, MetaTrainer, Objective, PretrainObjective,
};
use metaprep::model::{init_params, ModelConfig};
use metaprep::optim::Optimizer;
use metaprep::rng::Stream;
use metaprep::tasks::{
    generate_corpus, quadratic_meta_gradient_oracle, Batch, Grammar, GrammarParams, PretrainSampler, QuadraticTask,
    TaskKind, TaskMix,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const ORACLE_TOLERANCE: f64 = 1e-10;

/// Model size the model-based checks run at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// 310 parameters.
    Tiny,
    /// Two layers, 8 wide.
    Small,
}

impl Scale {
    pub fn model_config(self) -> ModelConfig {
        match self {
            Scale::Tiny => ModelConfig::tiny(),
            Scale::Small => ModelConfig {
                vocab_size: 8,
                max_len: 8,
                d_model: 8,
                n_heads: 2,
                n_layers: 2,
                d_ff: 16,
                n_segments: 2,
                dropout_rate: 0.0,
            },
        }
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "small" => Ok(Scale::Small),
            _ => Err(format!("unknown scale {s:?}; expected `tiny` or `small`")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Options {
    pub scale: Scale,
    /// Negative control: perturb every autodiff result by a relative 1e-3.
    pub corrupt_gradients: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            scale: Scale::Tiny,
            corrupt_gradients: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Error measure; what it means depends on the check.
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4}  {:<28} {:>11.3e}  <= {:<9.1e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.note
        )
    }
}

fn within(name: impl Into<String>, measured: f64, tolerance: f64, note: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        measured,
        tolerance,
        passed: measured <= tolerance,
        note: note.into(),
    }
}

/// Pre-training data small enough for the tiny and small models.
pub fn check_sampler() -> PretrainSampler {
    let params = GrammarParams {
        sentence_len: (1, 2),
        doc_sentences: (2, 3),
        ..GrammarParams::new(2, 8)
    };
    let grammar = Grammar::new(params).expect("valid grammar");
    let corpus = generate_corpus(&grammar, 3, 20);
    PretrainSampler::new(grammar, corpus, 2).expect("valid sampler")
}

/// Initialization spread out enough that second-order terms are visible.
pub fn spread_params(config: &ModelConfig, seed: u64) -> ParamSet {
    let base = init_params(config, seed).expect("valid config");
    let mut rng = Stream::new(seed).split("spread");
    let flat: Vec<f64> = base.flatten().iter().map(|_| 0.4 * rng.normal()).collect();
    let noisy = base.unflatten(&flat).expect("same length");
    let gains = noisy.filter(|n| n.ends_with(".gain")).map(|x| 1.0 + 0.5 * x);
    noisy.overlay(&gains).expect("subset")
}

struct Suite {
    options: Options,
    model: ModelConfig,
    objective: PretrainObjective,
    sampler: PretrainSampler,
}

type R<T> = Result<T, MetaError>;
type Check = Box<dyn Fn(&Suite) -> R<CheckResult>>;

impl Suite {
    fn corrupt(&self, g: ParamSet) -> ParamSet {
        if self.options.corrupt_gradients {
            g.scale(1.0 + 1e-3)
        } else {
            g
        }
    }

    fn corrupt_vec(&self, g: Vec<f64>) -> Vec<f64> {
        if self.options.corrupt_gradients {
            g.into_iter().map(|x| x * (1.0 + 1e-3)).collect()
        } else {
            g
        }
    }

    fn batches(&self, mix: &TaskMix, n: usize, seed: u64) -> R<Vec<Batch>> {
        Ok(self.sampler.sample_pretrain_batches(mix, n, &mut Stream::new(seed))?)
    }

    fn loss_at(&self, p: &ParamSet, batch: &Batch) -> R<f64> {
        let mut g = Graph::new();
        let pv = g.bind_constant(p);
        let l = self.objective.loss(&mut g, &pv, batch)?;
        Ok(g.value(l).item())
    }

    fn loss_gradient(&self, task: TaskKind) -> R<CheckResult> {
        let batch = self.batches(&TaskMix::only(task), 1, 11)?.remove(0);
        let p = spread_params(&self.model, 1);
        let exact = meta_gradient_full(&self.objective, &p, &[], &batch, 0.1)?;
        let fd = finite_difference_grad(|q| self.loss_at(q, &batch), &p, FD_STEP)?;
        let err = max_relative_error(&self.corrupt(exact.grad).flatten(), &fd.flatten());
        Ok(within(
            format!("loss-gradient/{task}"),
            err,
            FD_TOLERANCE,
            "autodiff vs central differences",
        ))
    }

    fn full_meta_gradient(&self, k: usize) -> R<CheckResult> {
        let mix = TaskMix::new(TaskKind::ALL.iter().map(|&t| (t, 0.25)).collect())?;
        let batches = self.batches(&mix, k + 1, 20 + k as u64)?;
        let (train, test) = batches.split_at(k);
        let p = spread_params(&self.model, 2 + k as u64);
        let alpha = 0.5;
        let exact = meta_gradient_full(&self.objective, &p, train, &test[0], alpha)?;
        let fd = finite_difference_grad(
            |q| {
                let r = inner_loop(&self.objective, q, train, alpha, false)?;
                self.loss_at(&r.theta_k, &test[0])
            },
            &p,
            FD_STEP,
        )?;
        let err = max_relative_error(&self.corrupt(exact.grad).flatten(), &fd.flatten());
        Ok(within(
            format!("meta-gradient/full-k{k}"),
            err,
            FD_TOLERANCE,
            format!("{} params, alpha {alpha}", p.num_scalars()),
        ))
    }

    fn quadratic_oracle(&self) -> R<CheckResult> {
        let mut rng = Stream::new(7).split("quadratic-tasks");
        let alpha = 0.1;
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let task = QuadraticTask::random(4, 0.5, 3.0, &mut rng)?;
            let theta0: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
            for k in [0, 1, 2, 5, 10] {
                let oracle = quadratic_meta_gradient_oracle(&task, &theta0, alpha, k)?;
                let got = meta_gradient_full(&task, &task.params(&theta0), &vec![(); k], &(), alpha)?;
                let got = self.corrupt_vec(got.grad.flatten());
                worst = worst.max(max_relative_error(&got, &oracle));
            }
        }
        Ok(within(
            "quadratic-oracle",
            worst,
            ORACLE_TOLERANCE,
            "10 tasks, k in {0,1,2,5,10}",
        ))
    }

    fn first_order_ratio(&self) -> R<CheckResult> {
        let alpha = 0.1;
        let mut worst: f64 = 0.0;
        for lambda in [0.5, 1.0, 2.0, 4.0] {
            let task = QuadraticTask::new(vec![lambda], vec![0.3])?;
            let p = task.params(&[1.7]);
            for k in [0, 1, 2, 5, 10] {
                let train = vec![(); k];
                let full = self.corrupt_vec(meta_gradient_full(&task, &p, &train, &(), alpha)?.grad.flatten());
                let fo = meta_gradient_first_order(&task, &p, &train, &(), alpha)?.grad.flatten();
                let expected = (1.0 - alpha * lambda).powi(k as i32);
                worst = worst.max(((full[0] / fo[0]) - expected).abs() / expected.abs());
            }
        }
        Ok(within(
            "first-order-ratio",
            worst,
            ORACLE_TOLERANCE,
            "full/first-order = (1 - alpha*lambda)^k",
        ))
    }

    fn depth_zero_degeneracy(&self) -> R<CheckResult> {
        let mix = TaskMix::new(TaskKind::ALL.iter().map(|&t| (t, 0.25)).collect())?;
        let mut worst: f64 = 0.0;
        for seed in 0..4 {
            let batch = self.batches(&mix, 1, 40 + seed)?.remove(0);
            let p = spread_params(&self.model, seed);
            let full = self.corrupt(meta_gradient(GradMode::Full, &self.objective, &p, &[], &batch, 0.1)?.grad);
            let fo = meta_gradient(GradMode::FirstOrder, &self.objective, &p, &[], &batch, 0.1)?.grad;
            for (a, b) in full.flatten().iter().zip(fo.flatten()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(within(
            "depth-zero-degeneracy",
            worst,
            0.0,
            "k=0 full and first-order bit-identical",
        ))
    }

    fn first_order_limit(&self) -> R<CheckResult> {
        let batches = self.batches(&TaskMix::only(TaskKind::Mlm), 3, 60)?;
        let (train, test) = batches.split_at(2);
        let p = spread_params(&self.model, 6);
        let mut gaps = Vec::new();
        for alpha in [1e-1, 1e-2, 1e-3] {
            let full = self.corrupt(meta_gradient_full(&self.objective, &p, train, &test[0], alpha)?.grad);
            let fo = meta_gradient_first_order(&self.objective, &p, train, &test[0], alpha)?.grad;
            gaps.push(full.sub(&fo)?.norm() / full.norm());
        }
        let worst = gaps.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
        Ok(CheckResult {
            name: "first-order-limit".into(),
            measured: worst,
            tolerance: 1.0,
            passed: worst < 1.0,
            note: format!(
                "gap at alpha 1e-1/1e-2/1e-3: {:.2e} {:.2e} {:.2e}",
                gaps[0], gaps[1], gaps[2]
            ),
        })
    }

    fn budget_accounting(&self) -> R<CheckResult> {
        let mix = TaskMix::new(TaskKind::ALL.iter().map(|&t| (t, 0.25)).collect())?;
        let n = 4;
        let mut worst: f64 = 0.0;
        for k in [0, 1, 3] {
            for grad_mode in [GradMode::Full, GradMode::FirstOrder] {
                let config = MetaConfig {
                    k,
                    alpha: 0.1,
                    beta: 0.01,
                    grad_mode,
                    outer_optimizer: Optimizer::ADAM,
                    total_meta_test_steps: n,
                    seed: 1,
                };
                // Counted independently of the trainer's own bookkeeping.
                let calls = Cell::new(0);
                let counted = Counted::new(&self.objective, &calls);
                let mut trainer = MetaTrainer::new(config, counted, init_params(&self.model, 1)?)?;
                while !trainer.is_done() {
                    trainer.step(|m, rng| Ok(self.sampler.sample_pretrain_batches(&mix, m, rng)?))?;
                }
                let expected = ((k + 1) * n) as f64;
                worst = worst
                    .max((calls.get() as f64 - expected).abs())
                    .max((trainer.evaluations() as f64 - expected).abs());
            }
        }
        Ok(within(
            "budget-accounting",
            worst,
            0.0,
            "(k+1)*N evaluations, k in {0,1,3}",
        ))
    }

    fn depth_zero_multitask(&self) -> R<CheckResult> {
        let mix = TaskMix::new(TaskKind::ALL.iter().map(|&t| (t, 0.25)).collect())?;
        let steps = 20;
        let config = MetaConfig {
            k: 0,
            alpha: 0.1,
            beta: 0.5,
            grad_mode: GradMode::Full,
            outer_optimizer: Optimizer::Sgd,
            total_meta_test_steps: steps,
            seed: 9,
        };
        let init = init_params(&self.model, 9)?;
        let mut trainer = MetaTrainer::new(config.clone(), self.objective.clone(), init.clone())?;
        let mut meta = vec![init.clone()];
        while !trainer.is_done() {
            trainer.step(|n, rng| Ok(self.sampler.sample_pretrain_batches(&mix, n, rng)?))?;
            meta.push(self.corrupt(trainer.params().clone()));
        }
        let plain = multitask_train(&self.objective, &init, config.beta, steps, config.seed, |rng| {
            let task = mix.draw(rng);
            Ok(self.sampler.batch(task, rng)?)
        })?;
        let mut worst: f64 = if meta.len() == plain.len() { 0.0 } else { f64::INFINITY };
        for (a, b) in meta.iter().zip(&plain) {
            for (x, y) in a.flatten().iter().zip(b.flatten()) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(within(
            "depth-zero-multitask",
            worst,
            1e-12,
            "k=0 SGD vs plain multi-task, 20 steps",
        ))
    }

    fn determinism(&self) -> R<CheckResult> {
        let mix = TaskMix::new(vec![(TaskKind::Mlm, 0.6), (TaskKind::QaMatch, 0.4)])?;
        let config = MetaConfig {
            k: 2,
            alpha: 0.1,
            beta: 0.01,
            grad_mode: GradMode::Full,
            outer_optimizer: Optimizer::ADAM,
            total_meta_test_steps: 5,
            seed: 4,
        };
        let init = spread_params(&self.model, 4);
        let run = || -> R<Vec<u64>> {
            let (p, reports) = pretrain(&config, &self.sampler, &mix, &self.model, &init)?;
            let mut bits: Vec<u64> = p.flatten().iter().map(|x| x.to_bits()).collect();
            bits.extend(reports.iter().map(|r| r.test_loss.to_bits()));
            Ok(bits)
        };
        let (a, b) = (run()?, run()?);
        let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64;
        Ok(within(
            "determinism",
            differing,
            0.0,
            "two identical runs, differing bits",
        ))
    }
}

/// Run every check in order. An error inside a check becomes a failed row.
pub fn run_suite(options: Options) -> Vec<CheckResult> {
    let model = options.scale.model_config();
    let suite = Suite {
        options,
        objective: PretrainObjective::new(model.clone()),
        model,
        sampler: check_sampler(),
    };
    let mut checks: Vec<(String, Check)> = Vec::new();
    for task in TaskKind::ALL {
        checks.push((
            format!("loss-gradient/{task}"),
            Box::new(move |s| s.loss_gradient(task)),
        ));
    }
    for k in 1..=3 {
        checks.push((
            format!("meta-gradient/full-k{k}"),
            Box::new(move |s| s.full_meta_gradient(k)),
        ));
    }
    checks.push(("quadratic-oracle".into(), Box::new(Suite::quadratic_oracle)));
    checks.push(("first-order-ratio".into(), Box::new(Suite::first_order_ratio)));
    checks.push(("depth-zero-degeneracy".into(), Box::new(Suite::depth_zero_degeneracy)));
    checks.push(("first-order-limit".into(), Box::new(Suite::first_order_limit)));
    checks.push(("budget-accounting".into(), Box::new(Suite::budget_accounting)));
    checks.push(("depth-zero-multitask".into(), Box::new(Suite::depth_zero_multitask)));
    checks.push(("determinism".into(), Box::new(Suite::determinism)));
    checks
        .into_iter()
        .map(|(name, check)| {
            check(&suite).unwrap_or_else(|e| CheckResult {
                name,
                measured: f64::NAN,
                tolerance: f64::NAN,
                passed: false,
                note: format!("error: {e}"),
            })
        })
        .collect()
}
