use std::sync::Arc;

use indexmap::{IndexMap, IndexSet};

use super::{AutodiffError, Graph, Tensor, Var};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Ordered, named collection of parameter tensors.
///
/// Arithmetic between two sets requires identical names, order and shapes.
/// `version` increases on every derived set, so snapshots can be told apart.
/// Equality compares names, shapes and values only.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
    version: u64,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len() && self.entries.iter().eq(other.entries.iter())
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(AutodiffError::IncompatibleParams(format!(
                "duplicate parameter {name:?}"
            )));
        }
        self.entries.insert(name, value);
        self.version += 1;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// A set with this layout filled from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return Err(AutodiffError::IncompatibleParams(format!(
                "flat length {} != {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(k, t)| {
                let n = t.len();
                let v = Tensor::from_parts(t.shape().to_vec(), flat[offset..offset + n].to_vec());
                offset += n;
                (k.clone(), v)
            })
            .collect();
        Ok(ParamSet {
            entries,
            version: self.version + 1,
        })
    }

    pub fn is_compatible(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().map(|(k, t)| (k.clone(), t.map(&f))).collect(),
            version: self.version + 1,
        }
    }

    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        if !self.is_compatible(other) {
            return Err(AutodiffError::IncompatibleParams("names or shapes differ".into()));
        }
        Ok(ParamSet {
            entries: self
                .entries
                .iter()
                .zip(other.entries.values())
                .map(|((k, a), b)| (k.clone(), a.zip_map(b, &f)))
                .collect(),
            version: self.version.max(other.version) + 1,
        })
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_| 0.0)
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> ParamSet {
        self.map(|a| a * c)
    }

    /// `self + a * x`.
    pub fn axpy(&self, a: f64, x: &ParamSet) -> Result<ParamSet> {
        self.zip_map(x, |s, xv| s + a * xv)
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        if !self.is_compatible(other) {
            return Err(AutodiffError::IncompatibleParams("names or shapes differ".into()));
        }
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y))
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Subset of entries whose names satisfy `keep`, in the original order.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
            version: self.version + 1,
        }
    }

    /// Copy of `self` with every entry also present in `other` replaced by it.
    pub fn overlay(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut entries = self.entries.clone();
        for (k, t) in &other.entries {
            match entries.get_mut(k) {
                Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                Some(slot) => {
                    return Err(AutodiffError::IncompatibleParams(format!(
                        "{k}: shape {:?} vs {:?}",
                        slot.shape(),
                        t.shape()
                    )))
                }
                None => {}
            }
        }
        Ok(ParamSet {
            entries,
            version: self.version.max(other.version) + 1,
        })
    }
}

/// A [`ParamSet`] placed on a graph: the same names, each bound to a [`Var`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    names: Arc<IndexSet<String>>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .get_index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Same names bound to different vars, e.g. after an update step.
    pub fn with_vars(&self, vars: Vec<Var>) -> ParamVars {
        assert_eq!(vars.len(), self.vars.len());
        ParamVars {
            names: Arc::clone(&self.names),
            vars,
        }
    }

    /// Current values as a detached [`ParamSet`].
    pub fn values(&self, graph: &Graph) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, &v) in self.names.iter().zip(&self.vars) {
            out.entries.insert(name.clone(), graph.value(v).clone());
        }
        out.version = 1;
        out
    }
}

impl Graph {
    /// Place `params` on the graph as differentiable leaves.
    pub fn bind(&mut self, params: &ParamSet) -> ParamVars {
        self.bind_with(params, true)
    }

    /// Place `params` on the graph as constants.
    pub fn bind_constant(&mut self, params: &ParamSet) -> ParamVars {
        self.bind_with(params, false)
    }

    fn bind_with(&mut self, params: &ParamSet, differentiable: bool) -> ParamVars {
        let names: IndexSet<String> = params.entries.keys().cloned().collect();
        let vars = params
            .entries
            .values()
            .map(|t| {
                if differentiable {
                    self.leaf(t.clone())
                } else {
                    self.constant(t.clone())
                }
            })
            .collect();
        ParamVars {
            names: Arc::new(names),
            vars,
        }
    }

    /// Gradients of `output` for every entry of `params`, collected as values.
    pub fn grad_values(&mut self, output: Var, params: &ParamVars) -> Result<ParamSet> {
        let grads = self.grad(output, params.vars(), false)?;
        Ok(params.with_vars(grads).values(self))
    }
}
