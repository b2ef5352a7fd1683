use std::cell::Cell;

use super::Result;
use crate::autodiff::{Graph, ParamSet, ParamVars, Tensor, Var};
use crate::model::{self, ModelConfig, PairHead};
use crate::tasks::{Batch, QuadraticTask, TaskKind};

/// A scalar training loss over named parameters, recorded on a graph.
pub trait Objective {
    type Batch;

    fn loss(&self, g: &mut Graph, params: &ParamVars, batch: &Self::Batch) -> Result<Var>;
}

/// Counts every loss evaluation of the wrapped objective.
pub struct Counted<'a, O> {
    inner: &'a O,
    count: &'a Cell<u64>,
}

impl<'a, O> Counted<'a, O> {
    pub fn new(inner: &'a O, count: &'a Cell<u64>) -> Self {
        Self { inner, count }
    }
}

impl<O: Objective> Objective for Counted<'_, O> {
    type Batch = O::Batch;

    fn loss(&self, g: &mut Graph, params: &ParamVars, batch: &Self::Batch) -> Result<Var> {
        self.count.set(self.count.get() + 1);
        self.inner.loss(g, params, batch)
    }
}

/// Transformer pre-training loss; the batch's task picks the head.
#[derive(Clone, Debug)]
pub struct PretrainObjective {
    pub config: ModelConfig,
}

impl PretrainObjective {
    pub fn new(config: ModelConfig) -> Self {
        Self { config }
    }
}

impl Objective for PretrainObjective {
    type Batch = Batch;

    fn loss(&self, g: &mut Graph, p: &ParamVars, batch: &Batch) -> Result<Var> {
        // No dropout: meta-gradients need a deterministic loss.
        let out = model::encode(g, &self.config, p, &batch.input, None)?;
        let loss = match batch.task {
            TaskKind::Mlm => model::mlm_loss(g, &self.config, p, &out, &batch.mask_positions, &batch.mask_targets)?,
            TaskKind::Nsp => model::nsp_loss(g, p, &out, &batch.labels)?,
            TaskKind::QaMatch => model::pair_loss(g, p, PairHead::QaMatch, &out, &batch.labels)?,
            TaskKind::QqMatch => model::pair_loss(g, p, PairHead::QqMatch, &out, &batch.labels)?,
        };
        Ok(loss)
    }
}

/// Name of the single parameter vector of a quadratic task.
pub const QUADRATIC_PARAM: &str = "theta";

impl QuadraticTask {
    pub fn params(&self, theta: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(QUADRATIC_PARAM, Tensor::vector(theta.to_vec()))
            .expect("fresh set");
        p
    }
}

impl Objective for QuadraticTask {
    type Batch = ();

    fn loss(&self, g: &mut Graph, p: &ParamVars, _: &()) -> Result<Var> {
        let theta = p.get(QUADRATIC_PARAM)?;
        let c = g.constant(Tensor::vector(self.center.clone()));
        let a = g.constant(Tensor::vector(self.curvature.clone()));
        let d = g.sub(theta, c)?;
        let ad = g.mul(a, d)?;
        let sq = g.mul(ad, d)?;
        let s = g.sum(sq)?;
        Ok(g.scale(s, 0.5)?)
    }
}
