//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the record in reverse and leaves
//! gradients on every leaf created with `requires_grad`. One graph is meant
//! to live for a single training step.
//!
//! Besides the usual primitives the graph offers [`Graph::grl`], the
//! gradient reversal node: identity on the forward pass, `-lambda` times the
//! upstream gradient on the backward pass.

mod conv;
mod graph;
mod tensor;

use thiserror::Error;

pub use conv::Padding;
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid parameter for {op}: {msg}")]
    InvalidParameter { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(values.to_vec())
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_norm_of_3_4() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3.0, 4.0]));
        let n = g.l2_norm(x).unwrap();
        assert_eq!(g.value(n).item(), Some(5.0));
        assert!(g.value(n).shape().is_empty());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_sum_and_mean() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(t(&[1.0, -2.0, 3.0, 0.5]));
        let m = g.mean(x).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_twice_requires_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0, 2.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(AutodiffError::BackwardTwice));
        g.zero_grad();
        assert!(g.grad(x).is_none());
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.backward(y), Err(AutodiffError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1.0, 2.0]));
        let b = g.constant(t(&[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "add",
                lhs: vec![2],
                rhs: vec![3]
            }
        );
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn log_of_zero_is_numeric_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[0.0]));
        assert_eq!(g.log(x), Err(AutodiffError::NonFinite { op: "log" }));
    }

    #[test]
    fn grl_forward_is_bit_identical() {
        let mut g = Graph::<f32>::new();
        let data = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-7];
        let x = g.param(Tensor::from_vec(data.clone()));
        let y = g.grl(x, 0.5).unwrap();
        let got: Vec<u32> = g.value(y).data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn grl_backward_negates_and_scales() {
        let upstream = [0.5, -1.0, 2.0];
        for (lambda, want) in [(1.0, [-0.5, 1.0, -2.0]), (0.0, [0.0, 0.0, 0.0])] {
            let mut g = Graph::new();
            let x = g.param(t(&[3.0, 1.0, -2.0]));
            let r = g.grl(x, lambda).unwrap();
            let w = g.constant(t(&upstream));
            let prod = g.row_dot(r, w).unwrap();
            g.backward(prod).unwrap();
            assert_eq!(g.grad(x).unwrap().data(), &want);
        }
    }

    #[test]
    fn grl_rejects_negative_lambda() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0]));
        assert!(matches!(g.grl(x, -0.1), Err(AutodiffError::InvalidParameter { op: "grl", .. })));
    }

    #[test]
    fn two_branches_accumulate() {
        // y = sum(3x) + sum(x*x); dy/dx = 3 + 2x
        let mut g = Graph::new();
        let x = g.param(t(&[1.0, -2.0]));
        let a = g.scale(x, 3.0).unwrap();
        let a = g.sum(a).unwrap();
        let b = g.mul(x, x).unwrap();
        let b = g.sum(b).unwrap();
        let y = g.add(a, b).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1.0, 2.0]));
        let c = g.constant(t(&[4.0, 5.0]));
        let p = g.row_dot(x, c).unwrap();
        g.backward(p).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut g = Graph::new();
        let z = g.param(t(&[0.3, -1.2, 20.0]));
        let l = g.bce_with_logits(z, &[1.0, 0.0, 0.0], 15.0).unwrap();
        let v = g.value(l).data().to_vec();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((v[0] + s(0.3).ln()).abs() < 1e-12);
        assert!((v[1] + (1.0 - s(-1.2)).ln()).abs() < 1e-12);
        // clamped at 15
        assert!((v[2] + (1.0 - s(15.0)).ln()).abs() < 1e-9);
        let total = g.sum(l).unwrap();
        g.backward(total).unwrap();
        let d = g.grad(z).unwrap().data();
        assert!((d[0] - (s(0.3) - 1.0)).abs() < 1e-12);
        assert!((d[1] - s(-1.2)).abs() < 1e-12);
        assert_eq!(d[2], 0.0);
    }
}
