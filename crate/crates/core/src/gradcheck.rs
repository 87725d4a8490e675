//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Floor for the relative-error denominator.
pub const RELATIVE_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per parameter and must return a
/// scalar node. It has to be deterministic: any sampling noise must be
/// fixed outside the closure.
pub fn finite_difference_check<F>(f: F, params: &[Matrix], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Numerical(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::Numerical(format!("objective evaluated to {}", tape.scalar(out))));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").clone();
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_EPS);
            report.checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((pi, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let r = finite_difference_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[Matrix::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-9, "{r:?}");
        assert!((r.analytic - 6.0).abs() < 1e-15);
    }

    #[test]
    fn linear_is_exact_to_rounding() {
        let w = Matrix::from_rows(&[[0.5, -1.0, 2.0]]).unwrap();
        let r = finite_difference_check(
            move |t, v| {
                let c = t.constant(w.clone());
                let p = t.mul(c, v[0])?;
                Ok(t.sum(p))
            },
            &[Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-10, "{r:?}");
    }

    #[test]
    fn non_finite_objective_fails() {
        let r = finite_difference_check(
            |t, v| {
                let l = t.ln(v[0])?;
                let s = t.sum(l);
                Ok(t.scale(s, f64::INFINITY))
            },
            &[Matrix::scalar(2.0)],
            1e-5,
        );
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn elementwise_ops_match_differences() {
        let x = Matrix::from_rows(&[[0.3, -1.2], [0.8, 2.0]]).unwrap();
        let y = Matrix::from_rows(&[[1.1, 0.4], [-0.6, 0.9]]).unwrap();
        let bias = Matrix::from_rows(&[[0.2], [-0.3]]).unwrap();
        let r = finite_difference_check(
            |t, v| {
                let sp = t.softplus(v[0]);
                let e = t.exp(v[1]);
                let l = t.ln(e)?;
                let th = t.tanh(l);
                let m = t.mul(sp, th)?;
                let m = t.add_column(m, v[2])?;
                let mm = t.matmul(m, v[1])?;
                let tr = t.transpose(mm);
                let sm = t.softmax_rows(tr);
                let d = t.sub(sm, v[0])?;
                let sh = t.add_scalar(d, 0.5);
                let a = t.add_n(&[sh, v[1], v[0]])?;
                let ce = t.mean_cross_entropy(a, &[1, 0])?;
                Ok(t.scale(ce, 3.0))
            },
            &[x, y, bias],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn kl_op_matches_differences() {
        let mu = Matrix::from_rows(&[[0.3, -0.2, 1.0]]).unwrap();
        let sigma = Matrix::from_rows(&[[0.5, 1.3, 0.8]]).unwrap();
        let r = finite_difference_check(
            |t, v| t.kl_diag_gaussian(v[0], v[1], 0.1, 0.7),
            &[mu, sigma],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-7, "{r:?}");
    }
}
