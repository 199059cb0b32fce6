//! Central finite-difference checks against tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per input; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates sitting on a kink (relu, max), where one-sided slopes
    /// disagree by more than the central-difference error.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares tape gradients of the scalar `f(inputs)` with central
/// differences.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if !v.is_scalar() {
            return Err(Error::Usage("gradient check needs a scalar output".into()));
        }
        Ok(v.item())
    };
    let f0 = eval(inputs)?;
    let h = opts.step;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (i, grad) in analytic.iter().enumerate() {
        let n = inputs[i].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            let one_sided_gap = ((fp - f0) / h - (f0 - fm) / h).abs();
            if err >= opts.tolerance && one_sided_gap >= (a - numeric).abs() {
                report.kinks += 1;
                continue;
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_passes() {
        let x = Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = check_gradients(
            &[x],
            |_, v| Ok(v[0].mul(v[0])?.sigmoid().sum()),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::new([2], vec![0.5, 1.5]).unwrap();
        let report = check_gradients(
            &[x],
            |tape, v| {
                let value = v[0].value().map(|a| a * a);
                // Claims d/dx x^2 = x.
                let out = tape.record(&[v[0]], value, |g| vec![Some(g.clone())]);
                Ok(out.sum())
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed(1e-4));
        assert_eq!(report.kinks, 0);
    }

    #[test]
    fn relu_kink_is_reported() {
        let x = Tensor::new([2], vec![0.0, 1.0]).unwrap();
        let report =
            check_gradients(&[x], |_, v| Ok(v[0].relu().sum()), GradCheckOptions::default()).unwrap();
        assert_eq!(report.kinks, 1);
        assert!(report.passed(1e-4));
    }
}
