//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records primitive operations as they are evaluated. Calling
//! [`Graph::grad`] walks the graph in reverse append order; with
//! `create_graph` set, the backward pass appends its own operations to the
//! same graph, so gradients can be differentiated again. Unrolled inner-loop
//! updates and their meta-gradients are built on exactly this.

mod backward;
mod check;
mod graph;
mod params;
mod tensor;

pub use check::{finite_difference_grad, max_relative_error};
pub use graph::{Graph, Op, Var};
pub use params::{ParamSet, ParamVars};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("grad needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("graph already consumed by a non-differentiable backward pass")]
    GraphConsumed,
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("incompatible parameter sets: {0}")]
    IncompatibleParams(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(g: &mut Graph, xs: &[f64]) -> Var {
        g.leaf(Tensor::vector(xs.to_vec()))
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = vec_var(&mut g, &[1.0, 2.0]);
        let b = vec_var(&mut g, &[3.0, 4.0]);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let a = vec_var(&mut g, &[0.0, 0.0]);
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gelu_at_origin() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.0));
        let y = g.gelu(a).unwrap();
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn square_first_and_second_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let dy = g.grad(y, &[x], true).unwrap()[0];
        assert_eq!(g.value(dy).item(), 6.0);
        let d2y = g.grad(dy, &[x], false).unwrap()[0];
        assert_eq!(g.value(d2y).item(), 2.0);
    }

    #[test]
    fn shape_mismatch_names_the_operation() {
        let mut g = Graph::new();
        let a = vec_var(&mut g, &[1.0, 2.0]);
        let b = vec_var(&mut g, &[1.0, 2.0, 3.0]);
        let err = g.mul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "mul",
                shapes: vec![vec![2], vec![3]]
            }
        );
        assert!(err.to_string().contains("mul"));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let a = vec_var(&mut g, &[1.0, 2.0]);
        assert_eq!(
            g.grad(a, &[a], false).unwrap_err(),
            AutodiffError::NonScalarOutput(vec![2])
        );
    }

    #[test]
    fn consumed_graph_refuses_reuse() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.exp(x).unwrap();
        g.grad(y, &[x], false).unwrap();
        assert!(g.is_consumed());
        assert_eq!(g.grad(y, &[x], false), Err(AutodiffError::GraphConsumed));
        assert_eq!(g.exp(x), Err(AutodiffError::GraphConsumed));
    }

    #[test]
    fn unreachable_and_constant_inputs_get_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.leaf(Tensor::vector(vec![5.0, 5.0, 5.0]));
        let c = g.constant(Tensor::vector(vec![2.0, 2.0]));
        let y = g.mul(x, c).unwrap();
        let y = g.sum(y).unwrap();
        let grads = g.grad(y, &[x, unused, c], false).unwrap();
        assert_eq!(g.value(grads[0]).data(), &[2.0, 2.0]);
        assert_eq!(g.value(grads[1]).data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.value(grads[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn attention_over_single_position_is_exactly_one() {
        let mut g = Graph::new();
        let scores = g.leaf(Tensor::new(vec![1, 1, 1], vec![-3.7]).unwrap());
        let w = g.softmax(scores).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap());
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        for row in g.value(y).data().chunks(3) {
            let mean: f64 = row.iter().sum::<f64>() / 3.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-15);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.5, 0.0, 0.0, 0.0]).unwrap());
        let ce = g.cross_entropy(z, &[1, 2]).unwrap();
        let row0 = -(2.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 0.5f64.exp())).ln();
        let row1 = 3.0f64.ln();
        assert!((g.value(ce).item() - (row0 + row1) / 2.0).abs() < 1e-14);
        assert!(matches!(
            g.cross_entropy(z, &[0, 3]),
            Err(AutodiffError::IndexOutOfRange { .. })
        ));
    }
}
