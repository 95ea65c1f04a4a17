//! Finite-difference gradient oracle.
//!
//! Analytic gradients come from the f32 tape; numeric gradients are central
//! differences of the same loss re-evaluated in f64, which keeps the oracle
//! independent of the reverse-mode path and free of single-precision noise.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// A scalar loss expressible at any precision, as a function of named
/// parameter tensors (passed in declaration order).
pub trait ScalarLossFn {
    fn eval<E: Scalar>(&self, tape: &Tape<E>, params: &[Var]) -> Var;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub per_parameter: Vec<(String, f64)>,
}

/// Compare reverse-mode gradients against f64 central differences on every
/// element of every parameter.
pub fn grad_check<L: ScalarLossFn>(
    loss_fn: &L,
    params: &[(String, Tensor<f32>)],
    eps: f64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Parameter(format!(
            "grad_check eps must be in [1e-6, 1e-2], got {eps}"
        )));
    }

    // Analytic side: f32 tape.
    let tape = Tape::<f32>::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = loss_fn.eval(&tape, &vars);
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = tape.backward(loss);

    // Numeric side: f64 central differences.
    let base: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.cast()).collect();
    let eval_f64 = |ps: &[Tensor<f64>]| -> f64 {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var> = ps.iter().map(|t| tape.param(t.clone())).collect();
        let loss = loss_fn.eval(&tape, &vars);
        tape.value(loss).item()
    };

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut per_parameter = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let analytic = grads
            .wrt(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].1.shape().to_vec()));
        let mut param_rel = 0.0f64;
        for ei in 0..base[pi].numel() {
            let mut plus = base.clone();
            plus[pi].data_mut()[ei] += eps;
            let mut minus = base.clone();
            minus[pi].data_mut()[ei] -= eps;
            let fp = eval_f64(&plus);
            let fm = eval_f64(&minus);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check perturbed loss at {name}[{ei}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[ei] as f64;
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            param_rel = param_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        max_rel = max_rel.max(param_rel);
        per_parameter.push((name.clone(), param_rel));
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        per_parameter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumSquares;
    impl ScalarLossFn for SumSquares {
        fn eval<E: Scalar>(&self, tape: &Tape<E>, params: &[Var]) -> Var {
            tape.sum(tape.sqr(params[0]))
        }
    }

    #[test]
    fn quadratic_closed_form() {
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(&SumSquares, &[("x".to_string(), x)], 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        assert!(grad_check(&SumSquares, &[("x".to_string(), x.clone())], 1e-7).is_err());
        assert!(grad_check(&SumSquares, &[("x".to_string(), x)], 0.1).is_err());
    }

    struct SigmoidConvLoss;
    impl ScalarLossFn for SigmoidConvLoss {
        fn eval<E: Scalar>(&self, tape: &Tape<E>, params: &[Var]) -> Var {
            let y = tape
                .conv2d(params[0], params[1], params[2], 1, 1)
                .unwrap();
            tape.mean(tape.sigmoid(y))
        }
    }

    #[test]
    fn conv_and_sigmoid_pass_gradcheck() {
        let mut rng = crate::testutil::rng(7);
        let x = crate::testutil::rand_tensor(&mut rng, &[1, 2, 5, 5], 1.0);
        let w = crate::testutil::rand_tensor(&mut rng, &[3, 2, 3, 3], 0.5);
        let b = crate::testutil::rand_tensor(&mut rng, &[3], 0.5);
        let report = grad_check(
            &SigmoidConvLoss,
            &[
                ("input".to_string(), x),
                ("weight".to_string(), w),
                ("bias".to_string(), b),
            ],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
    }
}
