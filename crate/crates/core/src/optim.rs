//! Bounded Nelder–Mead minimization.
//!
//! Trial points are projected onto the box before evaluation. Non-finite
//! objective values are treated as `+inf`, so the simplex retreats from
//! regions where the covariance cannot be factored.

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the spread of simplex values falls below
    /// `rel_tol * (|f_best| + rel_tol)`.
    pub rel_tol: f64,
    /// ... and the simplex is narrower than this in every coordinate.
    pub x_tol: f64,
    /// Initial simplex step per coordinate.
    pub step: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub n_evals: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    bounds: &[(f64, f64)],
    opts: &NelderMeadOptions,
) -> Minimum {
    let dim = x0.len();
    assert_eq!(bounds.len(), dim);
    assert_eq!(opts.step.len(), dim);
    let n_evals = std::cell::Cell::new(0usize);
    let mut eval = |x: &[f64]| {
        n_evals.set(n_evals.get() + 1);
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut start = x0.to_vec();
    project(&mut start, bounds);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let f0 = eval(&start);
    simplex.push((start.clone(), f0));
    for i in 0..dim {
        let mut x = start.clone();
        x[i] += opts.step[i];
        if x[i] > bounds[i].1 {
            x[i] = start[i] - opts.step[i];
        }
        project(&mut x, bounds);
        let fx = eval(&x);
        simplex.push((x, fx));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if best.is_finite() && (worst - best).abs() <= opts.rel_tol * (best.abs() + opts.rel_tol) {
            let spread = (0..dim)
                .map(|i| {
                    simplex
                        .iter()
                        .map(|p| (p.0[i] - simplex[0].0[i]).abs())
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if spread < opts.x_tol {
                converged = true;
                break;
            }
        }
        if n_evals.get() >= opts.max_evals {
            break;
        }

        let mut centroid = vec![0.0; dim];
        for p in &simplex[..dim] {
            for (c, v) in centroid.iter_mut().zip(&p.0) {
                *c += v / dim as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut x: Vec<f64> = centroid
                .iter()
                .zip(&simplex[dim].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            project(&mut x, bounds);
            x
        };

        let xr = along(alpha);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = eval(&xe);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[dim].1 {
            let x = along(alpha * rho);
            let v = eval(&x);
            (x, v)
        } else {
            let x = along(-rho);
            let v = eval(&x);
            (x, v)
        };
        if fc < simplex[dim].1.min(fr) {
            simplex[dim] = (xc, fc);
            continue;
        }
        let best_x = simplex[0].0.clone();
        for p in simplex.iter_mut().skip(1) {
            let mut x: Vec<f64> = best_x.iter().zip(&p.0).map(|(b, v)| b + sigma * (v - b)).collect();
            project(&mut x, bounds);
            let v = eval(&x);
            *p = (x, v);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        n_evals: n_evals.get(),
        converged,
    }
}
