//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `||a - n|| / max(||a||, ||n||)` in the 2-norm; 0 when both vanish.
pub fn normwise_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Worst errors found by [`grad_check_inputs`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    /// Largest [`rel_err`] over checked coordinates.
    pub elementwise: f64,
    /// Largest [`normwise_rel_err`] over inputs, restricted to the checked
    /// coordinates of each.
    pub normwise: f64,
    pub coordinates: usize,
    /// `(analytic, numeric)` at the coordinate with the largest elementwise error.
    pub worst: (f64, f64),
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences `(f(x+eps) - f(x-eps)) / 2eps`, over every element.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    Ok(grad_check_inputs(|vars| f(vars[0]), std::slice::from_ref(x), eps, None)?.elementwise)
}

/// Like [`grad_check`] over several inputs at once.
///
/// With `probe = Some((count, seed))` only `count` randomly chosen elements
/// of each input are perturbed; the analytic gradient is still computed in
/// full.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    probe: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect::<Vec<_>>()
    };

    let eval = |which: usize, perturbed: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::<f64>::new();
        let vars: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                tape.constant(if i == which {
                    perturbed.clone()
                } else {
                    t.clone()
                })
            })
            .collect();
        let out = f(&vars)?.value();
        if out.numel() != 1 {
            return Err(Error::Autodiff("grad_check needs a scalar function".into()));
        }
        Ok(out.data()[0])
    };

    let mut rng = probe.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut report = GradCheckReport::default();
    for (which, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match (probe, rng.as_mut()) {
            (Some((count, _)), Some(rng)) if count < x.numel() => {
                let mut c = sample(rng, x.numel(), count).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..x.numel()).collect(),
        };
        let mut work = x.clone();
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = work.data()[i];
            work.data_mut()[i] = orig + eps;
            let plus = eval(which, &work)?;
            work.data_mut()[i] = orig - eps;
            let minus = eval(which, &work)?;
            work.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = analytic[which].data()[i];
            let e = rel_err(analytic, numeric);
            if e > report.elementwise {
                report.elementwise = e;
                report.worst = (analytic, numeric);
            }
            a.push(analytic);
            n.push(numeric);
        }
        let nw = normwise_rel_err(&a, &n);
        report.normwise = report.normwise.max(nw);
        report.coordinates += coords.len();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_measures() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(0.0, 1e-12) - 1e-4).abs() < 1e-18);
        assert!(
            (normwise_rel_err(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-15
        );
        assert_eq!(normwise_rel_err(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_f64(&[3], &[0.3, -0.7, 1.1]).unwrap();
        assert!(grad_check(|v| Ok(v.relu().sum()), &x, 1e-6).unwrap() < 1e-9);
        // Differentiated path scales by 2, the evaluated one by 3.
        fn lying<'t>(v: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
            Ok(v[0]
                .scale(if v[0].requires_grad() { 2.0 } else { 3.0 })
                .sum())
        }
        let r = grad_check_inputs(lying, &[x], 1e-6, Some((2, 1))).unwrap();
        assert_eq!(r.coordinates, 2);
        assert!((r.elementwise - 1.0 / 3.0).abs() < 1e-8);
        assert!((r.normwise - 1.0 / 3.0).abs() < 1e-8);
    }
}
