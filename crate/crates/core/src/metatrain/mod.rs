//! Meta-learning pre-training loop.
//!
//! Each outer iteration samples `k + 1` batches. The first `k` drive plain
//! SGD steps of size `alpha` from the shared parameters; the last is the
//! meta-test batch. Its loss at the adapted parameters is differentiated with
//! respect to the starting parameters, either exactly through the unrolled
//! steps or with the first-order shortcut, and the outer optimizer applies
//! the result.

mod objective;

pub use objective::{Counted, Objective, PretrainObjective, QUADRATIC_PARAM};

use std::cell::Cell;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamSet, ParamVars};
use crate::model::ModelError;
use crate::optim::{self, Optimizer, OptimizerState};
use crate::rng::{Stream, StreamPosition};
use crate::tasks::TaskError;

/// Deepest supported inner loop; exact meta-gradients keep every unrolled step in memory.
pub const MAX_DEPTH: usize = 32;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("invalid meta config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at outer step {step}")]
    NonFinite { step: usize, what: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

pub type Result<T> = std::result::Result<T, MetaError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Full,
    FirstOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub grad_mode: GradMode,
    pub outer_optimizer: Optimizer,
    pub total_meta_test_steps: usize,
    pub seed: u64,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MetaError::InvalidConfig(m));
        if self.k > MAX_DEPTH {
            return bad(format!("k = {} exceeds the maximum depth {MAX_DEPTH}", self.k));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaStepReport {
    pub step: usize,
    pub inner_losses: Vec<f64>,
    pub test_loss: f64,
    pub meta_grad_norm: f64,
    pub wallclock: Duration,
}

/// Adapted parameters after an inner loop, with every intermediate point.
#[derive(Clone, Debug)]
pub struct InnerLoop {
    pub theta_k: ParamSet,
    /// `θ₀ … θ_k`.
    pub trajectory: Vec<ParamSet>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grad: ParamSet,
    pub inner_losses: Vec<f64>,
    pub test_loss: f64,
}

fn check_finite(x: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(MetaError::NonFinite { step: 0, what: what() })
    }
}

/// `θ − α g` recorded on the graph.
fn sgd_on_graph(g: &mut Graph, theta: &ParamVars, grads: &[crate::autodiff::Var], alpha: f64) -> Result<ParamVars> {
    let mut next = Vec::with_capacity(grads.len());
    for (&t, &d) in theta.vars().iter().zip(grads) {
        let step = g.scale(d, alpha)?;
        next.push(g.sub(t, step)?);
    }
    Ok(theta.with_vars(next))
}

/// Unroll `batches.len()` inner steps on `g`, keeping `θ_k` connected to `theta0`.
fn unroll<O: Objective>(
    g: &mut Graph,
    obj: &O,
    theta0: &ParamVars,
    batches: &[O::Batch],
    alpha: f64,
) -> Result<(ParamVars, Vec<f64>)> {
    let mut theta = theta0.clone();
    let mut losses = Vec::with_capacity(batches.len());
    for (j, batch) in batches.iter().enumerate() {
        let loss = obj.loss(g, &theta, batch)?;
        losses.push(check_finite(g.value(loss).item(), || {
            format!("inner loss at step {}", j + 1)
        })?);
        let grads = g.grad(loss, theta.vars(), true)?;
        theta = sgd_on_graph(g, &theta, &grads, alpha)?;
    }
    Ok((theta, losses))
}

fn loss_and_grad<O: Objective>(obj: &O, theta: &ParamSet, batch: &O::Batch) -> Result<(f64, ParamSet)> {
    let mut g = Graph::new();
    let p = g.bind(theta);
    let loss = obj.loss(&mut g, &p, batch)?;
    let value = g.value(loss).item();
    Ok((value, g.grad_values(loss, &p)?))
}

/// Plain SGD inner loop. With `differentiable`, the steps are recorded on one
/// graph with second-order tracking; the values are the same either way.
pub fn inner_loop<O: Objective>(
    obj: &O,
    theta0: &ParamSet,
    batches: &[O::Batch],
    alpha: f64,
    differentiable: bool,
) -> Result<InnerLoop> {
    let mut trajectory = vec![theta0.clone()];
    let mut losses = Vec::with_capacity(batches.len());
    if differentiable {
        let mut g = Graph::new();
        let mut theta = g.bind(theta0);
        for (j, batch) in batches.iter().enumerate() {
            let (next, l) = unroll(&mut g, obj, &theta, std::slice::from_ref(batch), alpha)
                .map_err(|e| with_inner_step(e, j + 1))?;
            theta = next;
            losses.extend(l);
            trajectory.push(theta.values(&g));
        }
    } else {
        for (j, batch) in batches.iter().enumerate() {
            let theta = trajectory.last().expect("non-empty");
            let (loss, grad) = loss_and_grad(obj, theta, batch)?;
            losses.push(check_finite(loss, || format!("inner loss at step {}", j + 1))?);
            if !grad.is_finite() {
                return Err(MetaError::NonFinite {
                    step: 0,
                    what: format!("inner gradient at step {}", j + 1),
                });
            }
            trajectory.push(theta.axpy(-alpha, &grad)?);
        }
    }
    Ok(InnerLoop {
        theta_k: trajectory.last().expect("non-empty").clone(),
        trajectory,
        losses,
    })
}

fn with_inner_step(e: MetaError, j: usize) -> MetaError {
    match e {
        MetaError::NonFinite { step, .. } => MetaError::NonFinite {
            step,
            what: format!("inner loss at step {j}"),
        },
        other => other,
    }
}

/// Exact gradient of `θ₀ ↦ L(θ_k(θ₀); test)` by one backward pass through the unrolled loop.
pub fn meta_gradient_full<O: Objective>(
    obj: &O,
    theta0: &ParamSet,
    train: &[O::Batch],
    test: &O::Batch,
    alpha: f64,
) -> Result<MetaGradient> {
    let mut g = Graph::new();
    let p0 = g.bind(theta0);
    let (theta_k, inner_losses) = unroll(&mut g, obj, &p0, train, alpha)?;
    let loss = obj.loss(&mut g, &theta_k, test)?;
    let test_loss = check_finite(g.value(loss).item(), || "meta-test loss".into())?;
    let grad = g.grad_values(loss, &p0)?;
    Ok(MetaGradient {
        grad,
        inner_losses,
        test_loss,
    })
}

/// Gradient of the meta-test loss at `θ_k`, used as if taken at `θ₀`.
pub fn meta_gradient_first_order<O: Objective>(
    obj: &O,
    theta0: &ParamSet,
    train: &[O::Batch],
    test: &O::Batch,
    alpha: f64,
) -> Result<MetaGradient> {
    let inner = inner_loop(obj, theta0, train, alpha, false)?;
    let (loss, grad) = loss_and_grad(obj, &inner.theta_k, test)?;
    Ok(MetaGradient {
        grad,
        inner_losses: inner.losses,
        test_loss: check_finite(loss, || "meta-test loss".into())?,
    })
}

pub fn meta_gradient<O: Objective>(
    mode: GradMode,
    obj: &O,
    theta0: &ParamSet,
    train: &[O::Batch],
    test: &O::Batch,
    alpha: f64,
) -> Result<MetaGradient> {
    match mode {
        GradMode::Full => meta_gradient_full(obj, theta0, train, test, alpha),
        GradMode::FirstOrder => meta_gradient_first_order(obj, theta0, train, test, alpha),
    }
}

/// Apply the outer optimizer with step size `config.beta`.
pub fn outer_update(
    theta0: &ParamSet,
    meta_grad: &ParamSet,
    config: &MetaConfig,
    state: &OptimizerState,
) -> Result<(ParamSet, OptimizerState)> {
    Ok(optim::step(
        config.outer_optimizer,
        config.beta,
        theta0,
        meta_grad,
        state,
    )?)
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: OptimizerState,
    /// Outer steps completed.
    pub step: usize,
    pub rng: StreamPosition,
    pub evaluations: u64,
}

/// Stateful driver of the outer loop.
pub struct MetaTrainer<O: Objective> {
    config: MetaConfig,
    objective: O,
    state: TrainState,
    evaluations: Cell<u64>,
}

impl<O: Objective> MetaTrainer<O> {
    pub fn new(config: MetaConfig, objective: O, init: ParamSet) -> Result<Self> {
        config.validate()?;
        let rng = Stream::new(config.seed).split("pretrain-batches").position();
        Ok(Self {
            config,
            objective,
            state: TrainState {
                params: init,
                optimizer: OptimizerState::default(),
                step: 0,
                rng,
                evaluations: 0,
            },
            evaluations: Cell::new(0),
        })
    }

    pub fn resume(config: MetaConfig, objective: O, state: TrainState) -> Result<Self> {
        config.validate()?;
        let evaluations = Cell::new(state.evaluations);
        Ok(Self {
            config,
            objective,
            state,
            evaluations,
        })
    }

    pub fn config(&self) -> &MetaConfig {
        &self.config
    }

    pub fn objective(&self) -> &O {
        &self.objective
    }

    pub fn params(&self) -> &ParamSet {
        &self.state.params
    }

    pub fn steps_done(&self) -> usize {
        self.state.step
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_meta_test_steps
    }

    /// Loss-gradient evaluations of pre-training batches so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.get()
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            evaluations: self.evaluations.get(),
            ..self.state.clone()
        }
    }

    pub fn into_params(self) -> ParamSet {
        self.state.params
    }

    /// One outer iteration; `sample(n, rng)` must return `n` batches, the last being the meta-test batch.
    pub fn step(
        &mut self,
        mut sample: impl FnMut(usize, &mut Stream) -> Result<Vec<O::Batch>>,
    ) -> Result<MetaStepReport> {
        let started = Instant::now();
        let step = self.state.step + 1;
        let k = self.config.k;
        let mut rng = Stream::from_position(self.state.rng);
        let mut batches = sample(k + 1, &mut rng)?;
        if batches.len() != k + 1 {
            return Err(MetaError::InvalidConfig(format!(
                "sampler returned {} batches, expected {}",
                batches.len(),
                k + 1
            )));
        }
        let test = batches.pop().expect("k + 1 >= 1");
        let counted = Counted::new(&self.objective, &self.evaluations);
        let mg = meta_gradient(
            self.config.grad_mode,
            &counted,
            &self.state.params,
            &batches,
            &test,
            self.config.alpha,
        )
        .map_err(|e| at_step(e, step))?;
        if !mg.grad.is_finite() {
            return Err(MetaError::NonFinite {
                step,
                what: "meta-gradient".into(),
            });
        }
        let (params, optimizer) = outer_update(&self.state.params, &mg.grad, &self.config, &self.state.optimizer)?;
        if !params.is_finite() {
            return Err(MetaError::NonFinite {
                step,
                what: "parameters".into(),
            });
        }
        self.state = TrainState {
            params,
            optimizer,
            step,
            rng: rng.position(),
            evaluations: self.evaluations.get(),
        };
        Ok(MetaStepReport {
            step,
            inner_losses: mg.inner_losses,
            test_loss: mg.test_loss,
            meta_grad_norm: mg.grad.norm(),
            wallclock: started.elapsed(),
        })
    }
}

fn at_step(e: MetaError, step: usize) -> MetaError {
    match e {
        MetaError::NonFinite { what, .. } => MetaError::NonFinite { step, what },
        other => other,
    }
}

/// Run a full meta-pre-training job on the transformer objective.
pub fn pretrain(
    config: &MetaConfig,
    sampler: &crate::tasks::PretrainSampler,
    mix: &crate::tasks::TaskMix,
    model_config: &crate::model::ModelConfig,
    init: &ParamSet,
) -> Result<(ParamSet, Vec<MetaStepReport>)> {
    model_config.validate()?;
    let objective = PretrainObjective::new(model_config.clone());
    let mut trainer = MetaTrainer::new(config.clone(), objective, init.clone())?;
    let mut reports = Vec::with_capacity(config.total_meta_test_steps);
    while !trainer.is_done() {
        reports.push(trainer.step(|n, rng| Ok(sampler.sample_pretrain_batches(mix, n, rng)?))?);
    }
    Ok((trainer.into_params(), reports))
}

/// Ordinary multi-task training: one sampled batch and one SGD step of size `lr` per iteration.
///
/// Draws batches from the same named stream as [`MetaTrainer`], so with
/// depth 0 both consume identical data.
pub fn multitask_train<O: Objective>(
    obj: &O,
    init: &ParamSet,
    lr: f64,
    steps: usize,
    seed: u64,
    mut sample: impl FnMut(&mut Stream) -> Result<O::Batch>,
) -> Result<Vec<ParamSet>> {
    let mut rng = Stream::new(seed).split("pretrain-batches");
    let mut theta = init.clone();
    let mut trajectory = vec![theta.clone()];
    for step in 1..=steps {
        let batch = sample(&mut rng)?;
        let (loss, grad) = loss_and_grad(obj, &theta, &batch)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(MetaError::NonFinite {
                step,
                what: "multi-task loss".into(),
            });
        }
        theta = theta.zip_map(&grad, |t, g| t - lr * g)?;
        trajectory.push(theta.clone());
    }
    Ok(trajectory)
}
