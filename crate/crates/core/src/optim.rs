//! BFGS minimisation with a backtracking line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    /// Converged when the Euclidean gradient norm drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Objective returning `(value, gradient)`; non-finite values mark
/// infeasible points and make the line search back off.
pub trait Objective {
    fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>);
}

impl<F> Objective for F
where
    F: Fn(&DVector<f64>) -> (f64, DVector<f64>),
{
    fn eval(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        self(x)
    }
}

pub fn minimize<O: Objective + ?Sized>(obj: &O, x0: DVector<f64>, opts: &BfgsOptions) -> BfgsOutcome {
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = obj.eval(&x);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return BfgsOutcome { grad_norm: f64::INFINITY, value: f, x, iterations: 0, converged: false };
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iter = 0;
    while iter < opts.max_iter {
        let gnorm = g.norm();
        if gnorm < opts.tol {
            return BfgsOutcome { x, value: f, grad_norm: gnorm, iterations: iter, converged: true };
        }
        iter += 1;
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if slope >= 0.0 {
            h = DMatrix::identity(n, n);
            p = -g.clone();
            slope = -gnorm * gnorm;
        }
        // First step from an identity metric is scaled to a unit move.
        let mut step = if fresh { (1.0 / p.norm()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &p * step;
            let (fn_, gn) = obj.eval(&xn);
            if fn_.is_finite() && gn.iter().all(|v| v.is_finite()) {
                let armijo = fn_ <= f + 1e-4 * step * slope;
                // Near the optimum the decrease is lost in rounding; take the
                // step anyway when the gradient clearly shrinks.
                let flat = fn_ <= f + 1e-13 * f.abs().max(1.0) && gn.norm() < 0.5 * gnorm;
                if armijo || flat {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if fresh {
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - ρ(s Hy' + Hy s') + (ρ² y'Hy + ρ) s s'
            h = &h - (&s * hy.transpose() + &hy * s.transpose()) * rho
                + (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh = false;
        }
        x = xn;
        f = fn_;
        g = gn;
    }
    let gnorm = g.norm();
    BfgsOutcome { converged: gnorm < opts.tol, x, value: f, grad_norm: gnorm, iterations: iter }
}

/// Central-difference gradient.
pub fn numeric_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let step = h * x[k].abs().max(1.0);
        xp[k] = x[k] + step;
        let fp = f(&xp);
        xp[k] = x[k] - step;
        let fm = f(&xp);
        xp[k] = x[k];
        g[k] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Symmetrised central-difference Jacobian of a gradient function.
pub fn numeric_hessian<G: Fn(&DVector<f64>) -> DVector<f64>>(grad: G, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for k in 0..n {
        let step = h * x[k].abs().max(1.0);
        xp[k] = x[k] + step;
        let gp = grad(&xp);
        xp[k] = x[k] - step;
        let gm = grad(&xp);
        xp[k] = x[k];
        for j in 0..n {
            hess[(j, k)] = (gp[j] - gm[j]) / (2.0 * step);
        }
    }
    (&hess + hess.transpose()) * 0.5
}
