//! Minimal reverse-mode differentiable tensor core.
//!
//! All quantities are row-major tensors; ops are mostly on matrices, with
//! elementwise ops broadcasting a vector over the rows of a matrix.

mod graph;
pub mod linalg;
mod rng;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, ParamId, Var};
pub use rng::{Rng, RngState};
pub use scalar::Real;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward called on non-scalar of shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Compares the analytic gradient of a scalar function at `point` with
/// central finite differences.
///
/// `f` builds the scalar from a differentiable leaf. Returns the maximum
/// over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<S, F>(f: F, point: &Tensor<S>, step: S) -> Result<S, NumericsError>
where
    S: Real,
    F: Fn(&mut Graph<S>, Var) -> Result<Var, NumericsError>,
{
    if !(step > S::zero() && step <= S::lit(1e-2)) {
        return Err(NumericsError::InvalidArgument("grad_check step must lie in (0, 1e-2]".into()));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone().with_grad())?;
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let zeros = Tensor::zeros(point.shape());
    let analytic = grads.wrt(x).unwrap_or(&zeros).clone();

    let eval = |t: Tensor<S>| -> Result<S, NumericsError> {
        let mut g = Graph::inference();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        let v = g.value(y).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericsError::NonFinite { op: "grad_check" })
        }
    };
    let mut worst = S::zero();
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (S::lit(2.0) * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(S::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[0.0; 4]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut rng = Rng::new(1);
        let a = random(&[3, 5], &mut rng);
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 16]));
        let y = g.cross_entropy(x, &[11]).unwrap();
        assert!((g.value(y).item() - 16f64.ln()).abs() < 1e-12);
        assert!((g.value(y).item() - 2.7726).abs() < 1e-4);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mse_against_itself_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).with_grad()).unwrap();
        let l = g.mse(x, x).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumericsError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn non_finite_output_names_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1], &[1e200]));
        let err = g.mul(a, a).unwrap_err();
        assert_eq!(err, NumericsError::NonFinite { op: "mul" });
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2]).with_grad()).unwrap();
        let b = g.scale(a, 2.0).unwrap();
        assert!(matches!(g.backward(b), Err(NumericsError::NotScalar { .. })));
    }

    #[test]
    fn grad_check_of_square_at_three() {
        let err = grad_check(|g, x| g.mul(x, x), &t(&[1], &[3.0]), 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_detects_wrong_backward_rule() {
        let mut rng = Rng::new(5);
        let p = random(&[6], &mut rng);
        // Derivative of sin reported as sin: wrong everywhere except by accident.
        let err = grad_check(
            |g, x| {
                let y = g.map(x, f64::sin, f64::sin)?;
                g.sum(y)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        assert!(grad_check(|g, x| g.sum(x), &t(&[1], &[1.0]), 0.5).is_err());
    }

    #[test]
    fn grad_check_reports_non_finite_perturbation() {
        let res = grad_check(
            |g, x| {
                let y = g.map(x, |v| if v > 1.0 { f64::NAN } else { v }, |_| 1.0)?;
                g.sum(y)
            },
            &t(&[1], &[1.0]),
            1e-3,
        );
        assert!(res.is_err());
    }

    #[test]
    fn forward_ops_run_in_single_precision() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![0.1f32, 0.2, 0.3, -1.0, 0.0, 1.0]).unwrap());
        let gamma = g.constant(Tensor::full(&[3], 1.0f32));
        let beta = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        let s = g.softmax(y).unwrap();
        let row: f32 = g.value(s).row(0).iter().sum();
        assert!((row - 1.0).abs() < 1e-6);
    }
}
