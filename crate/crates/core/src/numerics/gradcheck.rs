//! Central-difference gradient checking.

use super::{backward, Graph, NumericsError, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences
/// of step `h`, coordinate by coordinate.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&Var) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&xv)?;
    let analytic = backward(&y, &[&xv])?.grads.remove(0);
    let value = |t: &Tensor| -> Result<f64, E> {
        let g = Graph::new();
        // Evaluated as a parameter so functions that differentiate internally
        // see the same graph structure as in the analytic pass.
        let v = g.param(t.clone());
        Ok(f(&v)?.item())
    };
    compare_gradient(value, &analytic, x, h, tol)
}

/// Checks a supplied `analytic` gradient against central differences of `f`.
pub fn compare_gradient<F, E>(f: F, analytic: &Tensor, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&Tensor) -> Result<f64, E>,
{
    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if err > max_rel_err || err.is_nan() {
            max_rel_err = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        passed: max_rel_err < tol && analytic.shape() == x.shape(),
        max_rel_err,
        worst_index,
        analytic: analytic.clone(),
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{NumericsError, RngStream};

    #[test]
    fn quadratic_passes_tightly() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let r = finite_diff_check(|v: &Var| v.sq_l2_norm(), &x, 1e-5, 1e-8).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn softplus_chain_passes() {
        let mut rng = RngStream::new(11);
        let w = Tensor::randn([1, 4], &mut rng);
        let x = Tensor::randn([4, 1], &mut rng);
        let r = finite_diff_check(
            |v| {
                let wv = v.graph().constant(w.clone());
                wv.matmul(v)?.softplus()?.sum()
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let wrong = Tensor::vector(vec![2.0, 5.0]);
        let r = compare_gradient(
            |t| Ok::<_, NumericsError>(t.data().iter().map(|v| v * v).sum()),
            &wrong,
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, 1);
    }
}
