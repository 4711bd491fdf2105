//! Free-constant fitting: turns a skeleton into a scored model by minimizing
//! training NMSE with a restarted Nelder-Mead simplex.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{nmse, Dataset, Partition, ScoreError};
use crate::expr::{evaluate, EvalError, Skeleton};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitBudget {
    pub restarts: usize,
    pub max_evals: usize,
    /// Already mixed from (run seed, solution id); restarts add their index.
    pub seed: u64,
}

impl Default for FitBudget {
    fn default() -> Self {
        Self {
            restarts: 4,
            max_evals: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub skeleton: Skeleton,
    pub params: Vec<f64>,
    /// Training (ID) NMSE at `params`.
    pub fit_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("no parameter setting produced a finite loss")]
    NoFiniteLoss,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Nelder-Mead outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

/// Minimizes `f` from `x0` with the standard reflection/expansion/
/// contraction/shrink coefficients (1, 2, 1/2, 1/2). Non-finite values are
/// treated as +inf. Stops at `max_evals` or when both the value spread and
/// the simplex diameter collapse; a collapsed simplex is rebuilt around the
/// best vertex once to rule out premature convergence.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], max_evals: usize) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let start_value = eval(x0, &mut evals);
    if dim == 0 || max_evals <= 1 {
        return Minimum {
            x: x0.to_vec(),
            value: start_value,
            evals,
        };
    }

    let mut best = (x0.to_vec(), start_value);
    let mut rebuilt = false;
    'outer: loop {
        let mut simplex: Vec<(Vec<f64>, f64)> = vec![best.clone()];
        for i in 0..dim {
            if evals >= max_evals {
                break 'outer;
            }
            let mut p = best.0.clone();
            p[i] += 0.1 * p[i].abs().max(1.0);
            let v = eval(&p, &mut evals);
            simplex.push((p, v));
        }

        loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            if simplex[0].1 < best.1 {
                best = simplex[0].clone();
            }
            if evals >= max_evals {
                break 'outer;
            }
            let lo = simplex[0].1;
            let hi = simplex[dim].1;
            let spread_ok = hi.is_finite() && (hi - lo) <= 1e-14 * lo.abs() + 1e-300;
            let diameter = simplex[1..]
                .iter()
                .flat_map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            let scale = simplex[0].0.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            if spread_ok && diameter <= 1e-10 * scale {
                break;
            }

            let centroid: Vec<f64> = (0..dim)
                .map(|j| simplex[..dim].iter().map(|(p, _)| p[j]).sum::<f64>() / dim as f64)
                .collect();
            let worst = simplex[dim].clone();
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&worst.0)
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };

            let reflected = along(-1.0);
            let fr = eval(&reflected, &mut evals);
            if fr < simplex[0].1 {
                let expanded = along(-2.0);
                let fe = eval(&expanded, &mut evals);
                simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
                continue;
            }
            if fr < simplex[dim - 1].1 {
                simplex[dim] = (reflected, fr);
                continue;
            }
            let (contracted, fc) = if fr < worst.1 {
                let c = along(-0.5);
                let v = eval(&c, &mut evals);
                (c, v)
            } else {
                let c = along(0.5);
                let v = eval(&c, &mut evals);
                (c, v)
            };
            if fc < fr.min(worst.1) {
                simplex[dim] = (contracted, fc);
                continue;
            }
            let anchor = simplex[0].0.clone();
            for vertex in simplex.iter_mut().skip(1) {
                if evals >= max_evals {
                    break;
                }
                let p: Vec<f64> = anchor
                    .iter()
                    .zip(&vertex.0)
                    .map(|(a, x)| a + 0.5 * (x - a))
                    .collect();
                let v = eval(&p, &mut evals);
                *vertex = (p, v);
            }
        }
        if rebuilt {
            break;
        }
        rebuilt = true;
    }
    Minimum {
        x: best.0,
        value: best.1,
        evals,
    }
}

/// Fits the skeleton's free constants against the dataset's ID rows.
///
/// Restart 0 starts from all ones; later restarts draw each coordinate
/// uniformly from [-2, 2] using `(budget.seed, restart)`.
pub fn fit_constants(
    skeleton: &Skeleton,
    data: &Dataset,
    budget: &FitBudget,
) -> Result<FittedModel, FitError> {
    let id = data.partition(Partition::Id);
    let frame = id.frame()?;
    let target = id.target();
    // Surface structural errors (missing columns) before optimizing.
    let probe = vec![1.0; skeleton.param_count];
    let first = evaluate(skeleton, &probe, &frame)?;
    let first_loss = nmse(&first, target)?;

    if skeleton.param_count == 0 {
        if !first_loss.is_finite() {
            return Err(FitError::NoFiniteLoss);
        }
        return Ok(FittedModel {
            skeleton: skeleton.clone(),
            params: Vec::new(),
            fit_loss: first_loss,
        });
    }

    let loss = |p: &[f64]| -> f64 {
        match evaluate(skeleton, p, &frame) {
            Ok(pred) => nmse(&pred, target).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        }
    };
    let mut best: Option<Minimum> = None;
    for restart in 0..budget.restarts.max(1) {
        let x0: Vec<f64> = if restart == 0 {
            probe.clone()
        } else {
            let mut rng = rng_from(&[budget.seed, restart as u64]);
            (0..skeleton.param_count)
                .map(|_| rng.gen_range(-2.0..=2.0))
                .collect()
        };
        let found = nelder_mead(&loss, &x0, budget.max_evals);
        if best.as_ref().is_none_or(|b| found.value < b.value) {
            best = Some(found);
        }
    }
    let best = best.expect("at least one restart");
    if !best.value.is_finite() || best.x.iter().any(|p| !p.is_finite()) {
        return Err(FitError::NoFiniteLoss);
    }
    Ok(FittedModel {
        skeleton: skeleton.clone(),
        params: best.x,
        fit_loss: best.value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn line_data(xs: &[f64], f: impl Fn(f64) -> f64) -> Dataset {
        Dataset::new(
            "line",
            vec![
                ("x".into(), xs.to_vec()),
                ("y".into(), xs.iter().map(|&x| f(x)).collect()),
            ],
            "y",
            &vec![false; xs.len()],
            false,
            None,
        )
        .unwrap()
    }

    #[test]
    fn rosenbrock() {
        let f = |p: &[f64]| (1.0 - p[0]).powi(2) + 100.0 * (p[1] - p[0] * p[0]).powi(2);
        let m = nelder_mead(f, &[-1.2, 1.0], 5000);
        assert!(m.value < 1e-12, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn respects_eval_budget() {
        let mut calls = 0;
        let m = nelder_mead(
            |p: &[f64]| {
                calls += 1;
                p.iter().map(|v| v.sin()).sum()
            },
            &[0.3, 0.2, 0.1],
            50,
        );
        assert!(m.evals <= 50);
        assert_eq!(calls, m.evals);
    }

    #[test]
    fn linear_scale_matches_closed_form() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        let data = line_data(&xs, |x| 2.0 * x);
        let model = fit_constants(&parse("c0 * x").unwrap(), &data, &FitBudget::default()).unwrap();
        let sxy: f64 = xs.iter().map(|x| x * 2.0 * x).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        assert!((model.params[0] - sxy / sxx).abs() < 1e-6);
        assert!(model.fit_loss < 1e-12);
    }

    #[test]
    fn parameter_free_identity() {
        let xs: Vec<f64> = (1..=5).map(f64::from).collect();
        let data = line_data(&xs, |x| x);
        let model = fit_constants(&parse("x").unwrap(), &data, &FitBudget::default()).unwrap();
        assert!(model.params.is_empty());
        assert_eq!(model.fit_loss, 0.0);
    }

    #[test]
    fn infeasible_domain() {
        let data = line_data(&[-1.0, -2.0], |x| x);
        assert_eq!(
            fit_constants(&parse("log(x)").unwrap(), &data, &FitBudget::default()),
            Err(FitError::NoFiniteLoss)
        );
        assert_eq!(
            fit_constants(&parse("c0 * log(x)").unwrap(), &data, &FitBudget::default()),
            Err(FitError::NoFiniteLoss)
        );
    }

    #[test]
    fn missing_variable_is_an_error() {
        let data = line_data(&[1.0, 2.0], |x| x);
        assert!(matches!(
            fit_constants(&parse("c0 * z").unwrap(), &data, &FitBudget::default()),
            Err(FitError::Eval(EvalError::MissingVariable(_)))
        ));
    }

    #[test]
    fn deterministic_and_dominates_all_ones() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let data = line_data(&xs, |x| 1.7 * (-0.4 * x).exp() * (2.1 * x).cos());
        let skel = parse("c0 * exp(-c1 * x) * cos(c2 * x)").unwrap();
        let budget = FitBudget {
            seed: 99,
            ..FitBudget::default()
        };
        let a = fit_constants(&skel, &data, &budget).unwrap();
        let b = fit_constants(&skel, &data, &budget).unwrap();
        assert_eq!(a, b);
        let id = data.partition(Partition::Id);
        let ones = evaluate(&skel, &[1.0, 1.0, 1.0], &id.frame().unwrap()).unwrap();
        assert!(a.fit_loss <= nmse(&ones, id.target()).unwrap());
    }

    #[test]
    fn fitting_never_reads_ood() {
        let mut is_ood = vec![false; 8];
        is_ood[6] = true;
        is_ood[7] = true;
        let xs: Vec<f64> = (0..8).map(f64::from).collect();
        let data = Dataset::new(
            "d",
            vec![("x".into(), xs.clone()), ("y".into(), xs.iter().map(|x| 3.0 * x).collect())],
            "y",
            &is_ood,
            false,
            None,
        )
        .unwrap();
        fit_constants(&parse("c0 * x + c1").unwrap(), &data, &FitBudget::default()).unwrap();
        assert_eq!(data.ood_reads(), 0);
    }
}
