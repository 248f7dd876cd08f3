use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over sampled coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_relative_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Central difference `(f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `build` records the function on a fresh tape given one trainable leaf per
/// entry of `params` and returns the scalar output. When the parameters hold
/// more than `samples` coordinates, `samples` of them are drawn with `seed`.
pub fn gradient_check<E, F>(
    build: F,
    params: &[Tensor<f64>],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out).expect("gradient_check needs a scalar output");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let total: usize = params.iter().map(|p| p.len()).sum();
    let coords: Vec<(usize, usize)> = if total <= samples {
        params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples)
            .map(|_| {
                let mut flat = rng.random_range(0..total);
                let mut idx = 0;
                while flat >= params[idx].len() {
                    flat -= params[idx].len();
                    idx += 1;
                }
                (idx, flat)
            })
            .collect()
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        checked: coords.len(),
    };
    for (pi, ci) in coords {
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + eps;
        let plus = eval(&work)?;
        work[pi].data_mut()[ci] = orig - eps;
        let minus = eval(&work)?;
        work[pi].data_mut()[ci] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[pi][ci];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_relative_error || err.is_nan() {
            report.max_relative_error = err;
            report.worst = (pi, ci);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::DiffError;

    #[test]
    fn cube_at_two() {
        let numeric = central_difference(|x| x * x * x, 2.0, 1e-5);
        assert!((numeric - 12.0).abs() < 1e-8);
    }

    #[test]
    fn linear_function_is_exact_for_any_step() {
        let p = vec![Tensor::from_vec(2, 2, vec![0.5, -1.0, 2.0, 3.0]).unwrap()];
        for eps in [1e-7, 1e-5, 1e-3] {
            let r = gradient_check(
                |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var, DiffError> {
                    let s = tape.scale(v[0], 3.0);
                    Ok(tape.sum(s))
                },
                &p,
                eps,
                10,
                0,
            )
            .unwrap();
            assert!(r.max_relative_error < 1e-8, "eps {eps}: {r:?}");
        }
    }
}
