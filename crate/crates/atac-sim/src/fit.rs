//! Small damped Gauss-Newton (Levenberg-Marquardt) engine for the handful of
//! low-dimensional nonlinear fits in this crate.
//!
//! Residuals are supplied as a closure, the Jacobian is taken by forward
//! differences, and simple box bounds are handled by projection. Convergence
//! means the relative parameter step fell below `step_tol`; the iteration
//! cap is a hard error.

/// Fit configuration. The defaults match the fitting contract used by the
/// spectroscopy operations: iteration cap 200, relative step tolerance 1e-10.
#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub max_iter: usize,
    pub step_tol: f64,
    pub initial_lambda: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 200, step_tol: 1e-10, initial_lambda: 1e-3 }
    }
}

/// Result of a successful fit.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub params: Vec<f64>,
    /// 1σ parameter uncertainties from the scaled covariance.
    pub sigmas: Vec<f64>,
    /// Covariance matrix, row-major p×p.
    pub covariance: Vec<f64>,
    /// Euclidean norm of the residual vector at the solution.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Set when the normal equations were near-singular and a ridge term was
    /// needed; uncertainties along the degenerate direction are inflated.
    pub rank_deficient: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("fit: no convergence after {0} iterations")]
    NonConvergence(usize),
    #[error("fit: fewer residuals ({n_res}) than parameters ({n_par})")]
    Underdetermined { n_res: usize, n_par: usize },
    #[error("fit: residual function produced a non-finite value")]
    NonFinite,
}

/// Box bounds for the parameters; use infinities for unbounded entries.
#[derive(Clone, Debug)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] }
    }

    fn clamp(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Solve the symmetric p×p system `a x = b` in place by Gaussian elimination
/// with partial pivoting. Returns false if a pivot collapses.
fn solve_in_place(a: &mut [f64], b: &mut [f64], p: usize) -> bool {
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..p {
        let mut pivot_row = col;
        let mut pivot = a[col * p + col].abs();
        for row in (col + 1)..p {
            let cand = a[row * p + col].abs();
            if cand > pivot {
                pivot = cand;
                pivot_row = row;
            }
        }
        if pivot <= scale * 1e-13 {
            return false;
        }
        if pivot_row != col {
            for k in 0..p {
                a.swap(col * p + k, pivot_row * p + k);
            }
            b.swap(col, pivot_row);
        }
        let inv = 1.0 / a[col * p + col];
        for row in (col + 1)..p {
            let factor = a[row * p + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for k in col..p {
                a[row * p + k] -= factor * a[col * p + k];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..p).rev() {
        let mut acc = b[col];
        for k in (col + 1)..p {
            acc -= a[col * p + k] * b[k];
        }
        b[col] = acc / a[col * p + col];
    }
    true
}

/// Invert a symmetric positive-ish p×p matrix by solving against unit
/// vectors. Returns None when singular.
fn invert(a: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut out = vec![0.0; p * p];
    for col in 0..p {
        let mut m = a.to_vec();
        let mut e = vec![0.0; p];
        e[col] = 1.0;
        if !solve_in_place(&mut m, &mut e, p) {
            return None;
        }
        for row in 0..p {
            out[row * p + col] = e[row];
        }
    }
    Some(out)
}

/// Minimize the sum of squared residuals over `params`.
///
/// `residuals(p, out)` must fill `out` (fixed length across calls) with the
/// residual vector at `p`. Weighted fits pre-scale their residuals.
pub fn levenberg_marquardt<F>(
    mut residuals: F,
    initial: &[f64],
    n_residuals: usize,
    bounds: &Bounds,
    opts: &FitOptions,
) -> Result<FitOutcome, FitError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n_par = initial.len();
    if n_residuals < n_par {
        return Err(FitError::Underdetermined { n_res: n_residuals, n_par });
    }

    let mut params = initial.to_vec();
    bounds.clamp(&mut params);
    let mut res = vec![0.0; n_residuals];
    residuals(&params, &mut res);
    if !res.iter().all(|v| v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    let mut cost = sum_sq(&res);

    let mut lambda = opts.initial_lambda;
    let mut jac = vec![0.0; n_residuals * n_par];
    let mut res_probe = vec![0.0; n_residuals];
    let mut rank_deficient = false;
    let mut jtj = vec![0.0; n_par * n_par];
    let mut stagnant_iters = 0usize;
    let mut nu = 2.0;

    let mut res_back = vec![0.0; n_residuals];
    for iter in 1..=opts.max_iter {
        // Central-difference Jacobian.
        for j in 0..n_par {
            let step = 6e-6 * params[j].abs().max(1e-6);
            let mut probe = params.clone();
            probe[j] += step;
            residuals(&probe, &mut res_probe);
            probe[j] = params[j] - step;
            residuals(&probe, &mut res_back);
            for i in 0..n_residuals {
                jac[i * n_par + j] = (res_probe[i] - res_back[i]) / (2.0 * step);
            }
        }

        for a in 0..n_par {
            for b in a..n_par {
                let mut acc = 0.0;
                for i in 0..n_residuals {
                    acc += jac[i * n_par + a] * jac[i * n_par + b];
                }
                jtj[a * n_par + b] = acc;
                jtj[b * n_par + a] = acc;
            }
        }
        let mut jtr = vec![0.0; n_par];
        for a in 0..n_par {
            let mut acc = 0.0;
            for i in 0..n_residuals {
                acc += jac[i * n_par + a] * res[i];
            }
            jtr[a] = acc;
        }

        // Damped step with gain-ratio damping control: the damping factor
        // shrinks smoothly when the quadratic model predicts the observed
        // reduction well and grows geometrically when it does not.
        loop {
            let mut system = jtj.clone();
            let mut ok = true;
            for d in 0..n_par {
                let diag = jtj[d * n_par + d];
                if !(diag > 0.0) {
                    // Degenerate column: regularize with an absolute ridge.
                    system[d * n_par + d] = diag + lambda + 1e-30;
                    rank_deficient = true;
                    ok = diag.is_finite();
                } else {
                    system[d * n_par + d] = diag * (1.0 + lambda);
                }
                if !ok {
                    break;
                }
            }
            if !ok {
                return Err(FitError::NonFinite);
            }
            let mut delta = jtr.clone();
            if !solve_in_place(&mut system, &mut delta, n_par) {
                rank_deficient = true;
                lambda *= nu;
                nu *= 2.0;
                if lambda > 1e16 {
                    return Ok(finish(params, res, jtj, n_par, n_residuals, iter, rank_deficient));
                }
                continue;
            }

            let mut trial = params.clone();
            for j in 0..n_par {
                trial[j] -= delta[j];
            }
            bounds.clamp(&mut trial);
            residuals(&trial, &mut res_probe);
            let trial_cost = if res_probe.iter().all(|v| v.is_finite()) {
                sum_sq(&res_probe)
            } else {
                f64::INFINITY
            };

            // Reduction predicted by the damped quadratic model.
            let mut predicted = 0.0;
            for j in 0..n_par {
                predicted +=
                    delta[j] * (lambda * jtj[j * n_par + j] * delta[j] + jtr[j]);
            }

            if trial_cost <= cost && predicted > 0.0 {
                let rho = (cost - trial_cost) / predicted;
                let step_norm = params
                    .iter()
                    .zip(&trial)
                    .map(|(old, new)| (new - old) * (new - old))
                    .sum::<f64>()
                    .sqrt();
                let param_norm = trial.iter().map(|p| p * p).sum::<f64>().sqrt();
                let rel_step = step_norm / (param_norm + opts.step_tol);
                let cost_drop = cost - trial_cost;
                params = trial;
                std::mem::swap(&mut res, &mut res_probe);
                cost = trial_cost;
                lambda =
                    (lambda * (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0)).max(1e-14);
                nu = 2.0;
                // Primary stop: relative parameter step. Secondary stop:
                // repeated iterations with only noise-floor progress.
                if cost_drop <= 1e-8 * cost.max(1e-300) {
                    stagnant_iters += 1;
                } else {
                    stagnant_iters = 0;
                }
                if rel_step < opts.step_tol || stagnant_iters >= 5 {
                    return Ok(finish(
                        params,
                        res,
                        jtj,
                        n_par,
                        n_residuals,
                        iter,
                        rank_deficient,
                    ));
                }
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e16 {
                // No downhill direction left at any damping: converged to
                // working precision.
                return Ok(finish(params, res, jtj, n_par, n_residuals, iter, rank_deficient));
            }
        }
    }
    Err(FitError::NonConvergence(opts.max_iter))
}

fn finish(
    params: Vec<f64>,
    res: Vec<f64>,
    jtj: Vec<f64>,
    n_par: usize,
    n_res: usize,
    iterations: usize,
    mut rank_deficient: bool,
) -> FitOutcome {
    let dof = (n_res.saturating_sub(n_par)).max(1) as f64;
    let variance = sum_sq(&res) / dof;
    let covariance = match invert(&jtj, n_par) {
        Some(inv) => inv.iter().map(|v| v * variance).collect(),
        None => {
            rank_deficient = true;
            // Ridge just enough to invert; the affected sigmas blow up,
            // which is the intended signal.
            let mut ridged = jtj.clone();
            let scale = (0..n_par)
                .map(|d| jtj[d * n_par + d])
                .fold(0.0_f64, f64::max)
                .max(1e-300);
            for d in 0..n_par {
                ridged[d * n_par + d] += scale * 1e-14;
            }
            invert(&ridged, n_par)
                .map(|inv| inv.iter().map(|v| v * variance).collect())
                .unwrap_or_else(|| vec![f64::INFINITY; n_par * n_par])
        }
    };
    let sigmas = (0..n_par)
        .map(|d| covariance[d * n_par + d].max(0.0).sqrt())
        .collect();
    FitOutcome {
        params,
        sigmas,
        covariance,
        residual_norm: sum_sq(&res).sqrt(),
        iterations,
        rank_deficient,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exponential_parameters() {
        // y = a exp(-b x), noiseless.
        let (a_true, b_true) = (2.5, 0.7);
        let xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| a_true * (-b_true * x).exp()).collect();
        let out = levenberg_marquardt(
            |p, out| {
                for (i, (&x, &y)) in xs.iter().zip(&ys).enumerate() {
                    out[i] = p[0] * (-p[1] * x).exp() - y;
                }
            },
            &[1.0, 0.2],
            xs.len(),
            &Bounds::unbounded(2),
            &FitOptions::default(),
        )
        .unwrap();
        assert!((out.params[0] - a_true).abs() < 1e-8);
        assert!((out.params[1] - b_true).abs() < 1e-8);
        assert!(out.residual_norm < 1e-10);
    }

    #[test]
    fn respects_bounds() {
        // Best unconstrained slope is -2; bounds force it to zero.
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [0.0, -2.0, -4.0, -6.0];
        let bounds = Bounds { lower: vec![0.0], upper: vec![f64::INFINITY] };
        let out = levenberg_marquardt(
            |p, out| {
                for (i, (&x, &y)) in xs.iter().zip(&ys).enumerate() {
                    out[i] = p[0] * x - y;
                }
            },
            &[1.0],
            xs.len(),
            &bounds,
            &FitOptions::default(),
        )
        .unwrap();
        assert!(out.params[0] >= 0.0);
        assert!(out.params[0] < 1e-6);
    }

    #[test]
    fn underdetermined_is_an_error() {
        let r = levenberg_marquardt(
            |_p, _out| {},
            &[1.0, 2.0, 3.0],
            2,
            &Bounds::unbounded(3),
            &FitOptions::default(),
        );
        assert!(matches!(r, Err(FitError::Underdetermined { .. })));
    }

    #[test]
    fn collinear_data_flags_rank_deficiency() {
        // Two perfectly correlated parameters: y = (a + b) x.
        let xs: Vec<f64> = (1..20).map(|i| i as f64).collect();
        let out = levenberg_marquardt(
            |p, out| {
                for (i, &x) in xs.iter().enumerate() {
                    out[i] = (p[0] + p[1]) * x - 2.0 * x;
                }
            },
            &[0.5, 0.5],
            xs.len(),
            &Bounds::unbounded(2),
            &FitOptions::default(),
        )
        .unwrap();
        assert!(out.rank_deficient);
        assert!((out.params[0] + out.params[1] - 2.0).abs() < 1e-8);
    }
}
