//! Combining the task and distillation components into the training loss.

use crate::distill::types::DistillConfig;
use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Scalar;

/// task + alpha * rm + beta * pfi, as plain numbers (logging/reporting).
pub fn total_distill_loss(
    task_loss: f32,
    rm_loss: f32,
    pfi_loss: f32,
    config: &DistillConfig,
) -> Result<f32> {
    for (name, v) in [("task", task_loss), ("rm", rm_loss), ("pfi", pfi_loss)] {
        if !v.is_finite() {
            return Err(Error::Training(format!(
                "non-finite {name} loss component: {v}"
            )));
        }
    }
    Ok(task_loss + config.alpha * rm_loss + config.beta * pfi_loss)
}

/// Same combination on the tape; checks each component before combining so a
/// blow-up is reported by name rather than as a NaN total.
pub fn total_distill_loss_var<E: Scalar>(
    tape: &Tape<E>,
    task: Var,
    rm: Var,
    pfi: Var,
    config: &DistillConfig,
) -> Result<Var> {
    for (name, v) in [("task", task), ("rm", rm), ("pfi", pfi)] {
        if !tape.value(v).is_finite() {
            return Err(Error::Training(format!("non-finite {name} loss component")));
        }
    }
    let mut out = task;
    if config.alpha != 0.0 {
        out = tape.add(out, tape.scale(rm, config.alpha as f64));
    }
    if config.beta != 0.0 {
        out = tape.add(out, tape.scale(pfi, config.beta as f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn paper_coefficients_hand_case() {
        let cfg = DistillConfig::default();
        assert_eq!(cfg.alpha, 4.0);
        assert_eq!(cfg.beta, 1.5);
        let got = total_distill_loss(1.0, 0.1, 0.2, &cfg).unwrap();
        assert!((got - 1.7).abs() < 1e-6);
    }

    #[test]
    fn zero_weights_degenerate_to_task() {
        let cfg = DistillConfig {
            alpha: 0.0,
            beta: 0.0,
            ..DistillConfig::default()
        };
        let got = total_distill_loss(0.73, 123.0, 456.0, &cfg).unwrap();
        assert_eq!(got, 0.73);

        // On the tape the combination must be bit-exact: no add-of-zero.
        let tape = Tape::<f32>::new();
        let task = tape.constant(Tensor::scalar(0.73f32));
        let rm = tape.constant(Tensor::scalar(9.0f32));
        let pfi = tape.constant(Tensor::scalar(9.0f32));
        let v = total_distill_loss_var(&tape, task, rm, pfi, &cfg).unwrap();
        assert_eq!(v, task);
    }

    #[test]
    fn non_finite_component_named() {
        let cfg = DistillConfig::default();
        let err = total_distill_loss(1.0, f32::NAN, 0.0, &cfg).unwrap_err();
        assert!(err.to_string().contains("rm"), "{err}");
        let err = total_distill_loss(1.0, 0.0, f32::INFINITY, &cfg).unwrap_err();
        assert!(err.to_string().contains("pfi"), "{err}");
    }
}
