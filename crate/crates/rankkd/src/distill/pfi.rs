//! Prediction-guided feature imitation: weight the per-position feature
//! difference by the (detached) per-position prediction difference.

use crate::distill::types::{DifferenceMap, PfiForm};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// Per level, per position: (1/C) sum_c (p_stu - p_tea)^2 over post-sigmoid
/// class probabilities ([C,H,W] maps). Detached: this is a loss weight.
pub fn prediction_difference<E: Scalar>(
    student: &[Tensor<E>],
    teacher: &[Tensor<E>],
) -> DifferenceMap<E> {
    assert_eq!(student.len(), teacher.len());
    let levels = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            assert_eq!(s.shape(), t.shape());
            mean_sq_over_channels(s, t)
        })
        .collect();
    DifferenceMap { levels }
}

fn mean_sq_over_channels<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let sh = a.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let hw = h * w;
    let mut out = Tensor::<E>::zeros(vec![h, w]);
    for ci in 0..c {
        for p in 0..hw {
            let d = a.data()[ci * hw + p] - b.data()[ci * hw + p];
            out.data_mut()[p] = out.data_mut()[p] + d * d;
        }
    }
    let inv = E::from_f64(1.0 / c as f64);
    for v in out.data_mut() {
        *v = *v * inv;
    }
    out
}

/// Per level, per position: (1/Q) sum_q (f_stu - f_tea)^2, on the tape so the
/// gradient reaches the (adapter-projected) student features.
pub fn feature_difference<E: Scalar>(
    tape: &Tape<E>,
    student_adapted: &[Var],
    teacher: &[Tensor<E>],
) -> Vec<Var> {
    assert_eq!(student_adapted.len(), teacher.len());
    student_adapted
        .iter()
        .zip(teacher)
        .map(|(&sv, tt)| {
            let diff = tape.add_const(sv, &tt.map(|v| -v));
            tape.mean_channels(tape.sqr(diff))
        })
        .collect()
}

/// (1/L) sum_l (1/(H_l W_l)) sum_positions (P_dif * F_dif)^2 in the squared
/// form, or without the outer square in the linear form. P_dif is a frozen
/// weight; gradient flows only through F_dif.
pub fn pfi_loss<E: Scalar>(
    tape: &Tape<E>,
    p_dif: &DifferenceMap<E>,
    f_dif: &[Var],
    form: PfiForm,
) -> Var {
    assert_eq!(p_dif.levels.len(), f_dif.len());
    let nl = f_dif.len();
    let mut total: Option<Var> = None;
    for (pm, &fv) in p_dif.levels.iter().zip(f_dif) {
        let sh = pm.shape();
        let hw = sh[0] * sh[1];
        let prod = tape.mul_const(fv, pm);
        let lvl = match form {
            PfiForm::Squared => tape.sqr(prod),
            PfiForm::Linear => prod,
        };
        let s = tape.scale(tape.sum(lvl), 1.0 / hw as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, s),
            None => s,
        });
    }
    tape.scale(total.expect("at least one level"), 1.0 / nl as f64)
}
