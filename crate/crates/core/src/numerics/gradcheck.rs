use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{Tape, Var};

/// Central-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss on a fresh tape from the parameter leaves it is
/// handed. Returns the largest relative error over every parameter entry,
/// using `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn gradient_check<F>(f: F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        check_finite(tape.scalar(loss))?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .map(|v| grads.get(*v).cloned().expect("parameter gradient"))
            .collect::<Vec<_>>()
    };

    let eval = |probe: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        check_finite(tape.scalar(loss))
    };

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Matrix> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for k in 0..param.data().len() {
            let base = param.data()[k];
            probe[pi].data_mut()[k] = base + FD_STEP;
            let up = eval(&probe)?;
            probe[pi].data_mut()[k] = base - FD_STEP;
            let down = eval(&probe)?;
            probe[pi].data_mut()[k] = base;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let exact = analytic[pi].data()[k];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("objective evaluated to {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact_to_rounding() {
        let a = Matrix::from_rows(&[[2.0, 0.5, -1.0], [0.5, 3.0, 0.25], [-1.0, 0.25, 1.5]]).unwrap();
        let x = Matrix::from_rows(&[[0.3, -1.2, 0.7]]).unwrap();
        let err = gradient_check(
            |t, p| {
                let am = t.constant(a.clone());
                let ax = t.matmul_t(am, p[0])?;
                let xax = t.matmul(p[0], ax)?;
                Ok(xax)
            },
            &[x],
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        let logits = Matrix::from_rows(&[[0.2, -1.0, 2.0], [1.5, 0.3, -0.4]]).unwrap();
        let err = gradient_check(
            |t, p| {
                let ls = t.log_softmax_rows(p[0]);
                t.pick_sum(ls, &[(0, 2, -0.5), (1, 0, -0.5)])
            },
            &[logits],
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let x = Matrix::from_rows(&[[800.0]]).unwrap();
        let res = gradient_check(|t, p| Ok(t.exp(p[0])), &[x]);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
