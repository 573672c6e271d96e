//! Derivative-free minimisation: Nelder–Mead followed by a BFGS polish on
//! central finite-difference gradients.

#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    pub initial_step: f64,
    pub max_evals: usize,
    /// Simplex diameter threshold (infinity norm, unconstrained coordinates).
    pub x_tol: f64,
    /// Spread of objective values across the simplex.
    pub f_tol: f64,
    pub bfgs_iters: usize,
    pub grad_tol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.5,
            max_evals: 20_000,
            x_tol: 1e-9,
            f_tol: 1e-10,
            bfgs_iters: 200,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub simplex_converged: bool,
    pub grad_norm: f64,
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn call(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counted<F>,
    x0: &[f64],
    opts: &OptimOptions,
) -> (Vec<f64>, f64, bool) {
    let n = x0.len();
    let f0 = obj.call(x0);
    if n == 0 {
        return (vec![], f0, true);
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        let f = obj.call(&x);
        simplex.push((x, f));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    while obj.evals < opts.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = &simplex[0];
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&best.0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let spread = simplex[n].1 - best.1;
        if diameter < opts.x_tol && spread.abs() < opts.f_tol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid
                .iter()
                .zip(worst)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let worst = simplex[n].0.clone();
        let xr = along(alpha, &worst);
        let fr = obj.call(&xr);
        if fr < simplex[0].1 {
            let xe = along(gamma, &worst);
            let fe = obj.call(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(rho, &worst);
            let fc = obj.call(&xc);
            (xc, fc)
        } else {
            let xc = along(-rho, &worst);
            let fc = obj.call(&xc);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for (x, f) in simplex.iter_mut().skip(1) {
            for (xi, bi) in x.iter_mut().zip(&x_best) {
                *xi = bi + sigma * (*xi - bi);
            }
            *f = obj.call(x);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, f) = simplex.swap_remove(0);
    (x, f, converged)
}

/// Central-difference gradient.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn bfgs<F: FnMut(&[f64]) -> f64>(
    obj: &mut Counted<F>,
    x0: Vec<f64>,
    f0: f64,
    opts: &OptimOptions,
) -> (Vec<f64>, f64, f64) {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f0;
    let mut g = fd_gradient(&mut |z: &[f64]| obj.call(z), &x);
    if g.iter().any(|v| !v.is_finite()) {
        return (x, fx, f64::INFINITY);
    }
    let mut h = vec![vec![0.0; n]; n];
    for (i, row) in h.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..opts.bfgs_iters {
        if norm(&g) < opts.grad_tol {
            break;
        }
        let mut d: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| h[i][j] * g[j]).sum::<f64>())
            .collect();
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            slope = -norm(&g).powi(2);
            for (i, row) in h.iter_mut().enumerate() {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[i] = 1.0;
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let fnew = obj.call(&xn);
            if fnew <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        let gn = fd_gradient(&mut |z: &[f64]| obj.call(z), &xn);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gn;
        if sy > 1e-12 {
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| h[i][j] * y[j]).sum())
                .collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h[i][j] +=
                        (sy + yhy) * s[i] * s[j] / (sy * sy) - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
        if improvement.abs() < 1e-14 * fx.abs().max(1.0) {
            break;
        }
    }
    let gn = norm(&g);
    (x, fx, gn)
}

/// Minimises `f` from `x0`. The returned point is never worse than `x0`.
pub fn minimize<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], opts: &OptimOptions) -> OptimResult {
    let mut obj = Counted { f, evals: 0 };
    let (x, fx, simplex_converged) = nelder_mead(&mut obj, x0, opts);
    let (x, fx, grad_norm) = if x.is_empty() {
        (x, fx, 0.0)
    } else {
        bfgs(&mut obj, x, fx, opts)
    };
    OptimResult {
        x,
        f: fx,
        evals: obj.evals,
        simplex_converged,
        grad_norm,
    }
}
