//! One Gibbs sweep of the median growth model under the AL augmentation.
//!
//! Full conditionals are derived in `docs/derivations.md`. Small q×q
//! matrices are kept as row-major slices to avoid per-subject allocation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::al::median_draw_with_latent;
use super::selection::{self, SelectionScope};
use super::{AugmentedState, RmbPriors};
use crate::data::LongitudinalDataset;
use crate::error::{GcmError, Result};
use crate::model::GrowthModelSpec;
use crate::random::{sample_gig_half, sample_inv_gamma, sample_inv_wishart, std_normal};

/// In-place lower Cholesky of a row-major q×q matrix; false if not PD.
pub(crate) fn chol_in_place(a: &mut [f64], q: usize) -> bool {
    for j in 0..q {
        let mut d = a[j * q + j];
        for k in 0..j {
            d -= a[j * q + k] * a[j * q + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * q + j] = d;
        for i in j + 1..q {
            let mut s = a[i * q + j];
            for k in 0..j {
                s -= a[i * q + k] * a[j * q + k];
            }
            a[i * q + j] = s / d;
        }
        for k in j + 1..q {
            a[j * q + k] = 0.0;
        }
    }
    true
}

/// Solves `L x = b` in place.
pub(crate) fn solve_lower(l: &[f64], q: usize, b: &mut [f64]) {
    for i in 0..q {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * q + k] * b[k];
        }
        b[i] = s / l[i * q + i];
    }
}

/// Solves `L' x = b` in place.
pub(crate) fn solve_upper_t(l: &[f64], q: usize, b: &mut [f64]) {
    for i in (0..q).rev() {
        let mut s = b[i];
        for k in i + 1..q {
            s -= l[k * q + i] * b[k];
        }
        b[i] = s / l[i * q + i];
    }
}

fn chol_solve(l: &[f64], q: usize, b: &mut [f64]) {
    solve_lower(l, q, b);
    solve_upper_t(l, q, b);
}

/// Adaptive proposal settings and acceptance counters.
#[derive(Debug, Clone)]
pub struct Tuning {
    /// Random-walk scale for masked cells, in units of the AL standard deviation.
    pub y_step: f64,
    /// Multiplier on the α proposal covariance.
    pub alpha_scale: f64,
    /// Lower Cholesky factor of the base α proposal covariance.
    pub alpha_chol: [[f64; 3]; 3],
    pub y_accepted: u64,
    pub y_proposed: u64,
    pub alpha_accepted: u64,
    pub alpha_proposed: u64,
}

impl Tuning {
    pub fn new(y_step: f64) -> Self {
        let s = 10.0 * 2.38 / 3f64.sqrt();
        Self {
            y_step,
            alpha_scale: 1.0,
            alpha_chol: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]],
            y_accepted: 0,
            y_proposed: 0,
            alpha_accepted: 0,
            alpha_proposed: 0,
        }
    }

    pub fn y_acceptance(&self) -> f64 {
        rate(self.y_accepted, self.y_proposed)
    }

    pub fn alpha_acceptance(&self) -> f64 {
        rate(self.alpha_accepted, self.alpha_proposed)
    }

    pub fn reset_counts(&mut self) {
        self.y_accepted = 0;
        self.y_proposed = 0;
        self.alpha_accepted = 0;
        self.alpha_proposed = 0;
    }
}

fn rate(a: u64, n: u64) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        a as f64 / n as f64
    }
}

/// Which blocks a sweep updates; all are on in normal use. The
/// joint-distribution tests switch blocks off to check each in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocks {
    pub w: bool,
    pub beta_u: bool,
    pub psi: bool,
    /// σ jointly with a fresh w.
    pub sigma: bool,
    pub missing: bool,
    pub alpha: bool,
}

impl Blocks {
    pub const ALL: Blocks = Blocks { w: true, beta_u: true, psi: true, sigma: true, missing: true, alpha: true };
    pub const NONE: Blocks = Blocks { w: false, beta_u: false, psi: false, sigma: false, missing: false, alpha: false };
}

pub struct GibbsSampler<'a> {
    data: &'a LongitudinalDataset,
    priors: &'a RmbPriors,
    selection: bool,
    q: usize,
    t: usize,
    /// Row-major T×q loadings.
    lambda: Vec<f64>,
    missing: Vec<(usize, usize)>,
    missing_mh: Vec<(usize, usize)>,
    missing_free: Vec<(usize, usize)>,
    active: Vec<bool>,
    /// Per-subject Cholesky of Ψ⁻¹ + Λ'D⁻¹Λ, M⁻¹Λ'D⁻¹Λ and M⁻¹Λ'D⁻¹y.
    m_chol: Vec<f64>,
    m_inv_a: Vec<f64>,
    m_inv_b: Vec<f64>,
    pub tuning: Tuning,
    pub blocks: Blocks,
    scope: SelectionScope,
}

impl<'a> GibbsSampler<'a> {
    pub fn new(
        spec: &GrowthModelSpec,
        data: &'a LongitudinalDataset,
        priors: &'a RmbPriors,
        selection: bool,
        y_step: f64,
    ) -> Result<Self> {
        let (n, t, q) = (data.n_subjects(), data.n_occasions(), spec.n_effects());
        if spec.n_occasions() != t {
            return Err(GcmError::Dimension("data and model occasions differ".into()));
        }
        priors.validate(q)?;
        let l = spec.loadings();
        let lambda = (0..t * q).map(|k| l[(k / q, k % q)]).collect();
        let missing = (0..n).flat_map(|i| (0..t).map(move |k| (i, k))).filter(|&(i, k)| !data.is_observed(i, k)).collect();
        Ok(Self {
            data,
            priors,
            selection,
            q,
            t,
            lambda,
            missing,
            active: Vec::new(),
            missing_mh: Vec::new(),
            missing_free: Vec::new(),
            m_chol: vec![0.0; n * q * q],
            m_inv_a: vec![0.0; n * q * q],
            m_inv_b: vec![0.0; n * q],
            tuning: Tuning::new(y_step),
            blocks: Blocks::ALL,
            scope: SelectionScope::default(),
        }
        .with_active_cells())
    }

    fn with_active_cells(mut self) -> Self {
        self.set_scope(self.scope);
        self
    }

    pub fn scope(&self) -> SelectionScope {
        self.scope
    }

    pub fn set_scope(&mut self, scope: SelectionScope) {
        self.scope = scope;
        self.active = active_cells(self.data, self.selection, scope);
        let t = self.t;
        let (mh, free): (Vec<_>, Vec<_>) = self.missing.iter().partition(|&&(i, k)| self.active[i * t + k]);
        self.missing_mh = mh;
        self.missing_free = free;
    }

    /// Masked cells updated by Metropolis in selection mode.
    pub fn selection_cells(&self) -> &[(usize, usize)] {
        &self.missing_mh
    }

    pub fn selection(&self) -> bool {
        self.selection
    }

    pub fn missing_cells(&self) -> &[(usize, usize)] {
        &self.missing
    }

    fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    #[inline]
    pub(crate) fn cell_mean(&self, state: &AugmentedState, i: usize, k: usize) -> f64 {
        let mut m = 0.0;
        for j in 0..self.q {
            m += self.lambda[k * self.q + j] * (state.beta[j] + state.u[(i, j)]);
        }
        m
    }

    /// One full sweep: (σ, W), (β, u), Ψ, masked y, then α in selection mode.
    pub fn step<R: Rng + ?Sized>(&mut self, state: &mut AugmentedState, rng: &mut R) -> Result<()> {
        // (σ, w) as one block: σ with w integrated out, then w given σ.
        if self.blocks.sigma {
            self.update_sigma_marginal(state, rng)?;
            self.update_w(state, rng);
        } else if self.blocks.w {
            self.update_w(state, rng);
        }
        if self.blocks.beta_u {
            self.update_beta_u(state, rng)?;
        }
        if self.blocks.psi {
            self.update_psi(state, rng)?;
        }
        let collapsed_alpha = self.scope == SelectionScope::AtRisk;
        if self.blocks.missing {
            if self.selection {
                let alpha = state.alpha.ok_or_else(|| GcmError::InvalidParameter("selection mode needs alpha".into()))?;
                if !collapsed_alpha {
                    let (acc, prop) = selection::mh_missing_cells(self, state, &alpha, rng);
                    self.tuning.y_accepted += acc;
                    self.tuning.y_proposed += prop;
                } else if !self.blocks.alpha {
                    // Otherwise the α block redraws these cells.
                    selection::draw_selection_cells(self, state, &alpha, rng);
                }
            }
            self.impute_ignorable(state, rng);
        }
        if self.selection && self.blocks.alpha {
            let accepted = if collapsed_alpha {
                selection::mh_alpha_collapsed(self, state, rng)?
            } else {
                selection::mh_alpha(self, state, rng)?
            };
            self.tuning.alpha_proposed += 1;
            self.tuning.alpha_accepted += accepted as u64;
        }
        Ok(())
    }

    /// `w_it ~ GIG(1/2, r²/(8σ), 2/σ)`.
    pub fn update_w<R: Rng + ?Sized>(&self, state: &mut AugmentedState, rng: &mut R) {
        let psi = 2.0 / state.sigma;
        let chi_scale = 1.0 / (8.0 * state.sigma);
        for k in 0..self.t {
            for i in (0..self.data.n_subjects()).filter(|&i| self.active[i * self.t + k]) {
                let r = state.y[(i, k)] - self.cell_mean(state, i, k);
                state.w[(i, k)] = sample_gig_half(r * r * chi_scale, psi, rng);
            }
        }
    }

    /// Draws β from its conditional with u integrated out, then each u_i given β.
    pub fn update_beta_u<R: Rng + ?Sized>(&mut self, state: &mut AugmentedState, rng: &mut R) -> Result<()> {
        let (q, t, n) = (self.q, self.t, self.data.n_subjects());
        let qq = q * q;
        let psi_inv = {
            let c = crate::linalg::cholesky(&state.psi, "psi")?;
            c.inverse()
        };
        let mut prec = vec![0.0; qq];
        let mut rhs = vec![0.0; q];
        let mut a = vec![0.0; qq];
        let mut b = vec![0.0; q];
        let mut col = vec![0.0; q];
        for i in 0..n {
            a.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
            for k in (0..t).filter(|&k| self.active[i * t + k]) {
                let inv_d = 1.0 / (8.0 * state.sigma * state.w[(i, k)]);
                let lk = &self.lambda[k * q..(k + 1) * q];
                let yk = state.y[(i, k)] * inv_d;
                for r in 0..q {
                    b[r] += lk[r] * yk;
                    for c in 0..=r {
                        a[r * q + c] += lk[r] * lk[c] * inv_d;
                    }
                }
            }
            for r in 0..q {
                for c in 0..r {
                    a[c * q + r] = a[r * q + c];
                }
            }
            let m = &mut self.m_chol[i * qq..(i + 1) * qq];
            for r in 0..q {
                for c in 0..q {
                    m[r * q + c] = psi_inv[(r, c)] + a[r * q + c];
                }
            }
            if !chol_in_place(m, q) {
                return Err(GcmError::NotPositiveDefinite(format!("random-effect precision of subject {i}")));
            }
            // X = M⁻¹A column by column, stored row-major.
            let x = &mut self.m_inv_a[i * qq..(i + 1) * qq];
            for c in 0..q {
                for r in 0..q {
                    col[r] = a[r * q + c];
                }
                chol_solve(m, q, &mut col);
                for r in 0..q {
                    x[r * q + c] = col[r];
                }
            }
            let v = &mut self.m_inv_b[i * q..(i + 1) * q];
            v.copy_from_slice(&b);
            chol_solve(m, q, v);
            // Λ'V⁻¹Λ = A − A M⁻¹ A and Λ'V⁻¹y = b − A M⁻¹ b.
            for r in 0..q {
                let mut s = b[r];
                for j in 0..q {
                    s -= a[r * q + j] * v[j];
                }
                rhs[r] += s;
                for c in 0..q {
                    let mut s = a[r * q + c];
                    for j in 0..q {
                        s -= a[r * q + j] * x[j * q + c];
                    }
                    prec[r * q + c] += s;
                }
            }
        }
        for r in 0..q {
            for c in 0..r {
                let avg = 0.5 * (prec[r * q + c] + prec[c * q + r]);
                prec[r * q + c] = avg;
                prec[c * q + r] = avg;
            }
            prec[r * q + r] += 1.0 / self.priors.beta_var;
            rhs[r] += self.priors.beta_mean / self.priors.beta_var;
        }
        if !chol_in_place(&mut prec, q) {
            return Err(GcmError::NotPositiveDefinite("fixed-effect posterior precision".into()));
        }
        let mut mean = rhs;
        chol_solve(&prec, q, &mut mean);
        let mut z: Vec<f64> = (0..q).map(|_| std_normal(rng)).collect();
        solve_upper_t(&prec, q, &mut z);
        for r in 0..q {
            state.beta[r] = mean[r] + z[r];
        }
        for i in 0..n {
            let m = &self.m_chol[i * qq..(i + 1) * qq];
            let x = &self.m_inv_a[i * qq..(i + 1) * qq];
            let v = &self.m_inv_b[i * q..(i + 1) * q];
            for zr in z.iter_mut() {
                *zr = std_normal(rng);
            }
            solve_upper_t(m, q, &mut z);
            for r in 0..q {
                let mut s = v[r] + z[r];
                for c in 0..q {
                    s -= x[r * q + c] * state.beta[c];
                }
                state.u[(i, r)] = s;
            }
        }
        Ok(())
    }

    /// `Ψ ~ IW(S₀ + Σ u_i u_i', ν₀ + N)`.
    pub fn update_psi<R: Rng + ?Sized>(&self, state: &mut AugmentedState, rng: &mut R) -> Result<()> {
        let scale = &self.priors.psi_scale + state.u.transpose() * &state.u;
        state.psi = sample_inv_wishart(&scale, self.priors.psi_df + self.data.n_subjects() as f64, rng)?;
        Ok(())
    }

    /// `σ ~ IG(a₀ + 3NT/2, b₀ + Σw + Σr²/(16w))`.
    pub fn update_sigma<R: Rng + ?Sized>(&self, state: &mut AugmentedState, rng: &mut R) -> Result<()> {
        let mut rate = self.priors.sigma_scale;
        for k in 0..self.t {
            for i in (0..self.data.n_subjects()).filter(|&i| self.active[i * self.t + k]) {
                let r = state.y[(i, k)] - self.cell_mean(state, i, k);
                let w = state.w[(i, k)];
                rate += w + r * r / (16.0 * w);
            }
        }
        let shape = self.priors.sigma_shape + 1.5 * self.n_active() as f64;
        state.sigma = sample_inv_gamma(shape, rate, rng)?;
        Ok(())
    }

    /// `σ ~ IG(a + NT, b + Σ|r|/2)`, the conditional with w integrated out.
    /// Only valid as a block when followed by a fresh w draw.
    pub fn update_sigma_marginal<R: Rng + ?Sized>(&self, state: &mut AugmentedState, rng: &mut R) -> Result<()> {
        let mut abs_sum = 0.0;
        for k in 0..self.t {
            for i in (0..self.data.n_subjects()).filter(|&i| self.active[i * self.t + k]) {
                abs_sum += (state.y[(i, k)] - self.cell_mean(state, i, k)).abs();
            }
        }
        let shape = self.priors.sigma_shape + self.n_active() as f64;
        state.sigma = sample_inv_gamma(shape, self.priors.sigma_scale + 0.5 * abs_sum, rng)?;
        Ok(())
    }

    /// Draws each masked (y, w) pair outside the selection terms from the AL
    /// mixture at its current median.
    pub fn impute_ignorable<R: Rng + ?Sized>(&self, state: &mut AugmentedState, rng: &mut R) {
        for &(i, k) in &self.missing_free {
            let mu = self.cell_mean(state, i, k);
            let (y, w) = median_draw_with_latent(mu, state.sigma, rng);
            state.y[(i, k)] = y;
            state.w[(i, k)] = w;
        }
    }

    pub(crate) fn data(&self) -> &LongitudinalDataset {
        self.data
    }

    pub(crate) fn priors(&self) -> &RmbPriors {
        self.priors
    }

    pub(crate) fn n_occasions(&self) -> usize {
        self.t
    }
}

/// Cells entering the (σ, w, β, u) updates, row-major: observed cells, plus
/// in selection mode any masked cell in a selection term. Other masked cells
/// integrate out and are redrawn from the AL after the parameter updates.
fn active_cells(data: &LongitudinalDataset, selection: bool, scope: SelectionScope) -> Vec<bool> {
    let (n, t) = (data.n_subjects(), data.n_occasions());
    (0..n * t)
        .map(|c| {
            let (i, k) = (c / t, c % t);
            data.is_observed(i, k)
                || (selection && (scope.includes(data, i, k) || (k + 1 < t && scope.includes(data, i, k + 1))))
        })
        .collect()
}

/// Posterior mean and covariance of β given W, Ψ, σ with u integrated out,
/// computed by the direct GLS formula over each subject's cells. With
/// `observed_in` only that dataset's observed cells enter. Used to check the
/// blocked update.
pub fn beta_conditional_direct(
    spec: &GrowthModelSpec,
    state: &AugmentedState,
    priors: &RmbPriors,
    observed_in: Option<&LongitudinalDataset>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, t) = state.y.shape();
    let q = spec.n_effects();
    let mut prec = DMatrix::identity(q, q) / priors.beta_var;
    let mut rhs = DVector::from_element(q, priors.beta_mean / priors.beta_var);
    for i in 0..n {
        let cells: Vec<usize> = (0..t).filter(|&k| observed_in.is_none_or(|d| d.is_observed(i, k))).collect();
        let lambda = spec.loadings_for(&cells);
        let mut v = &lambda * &state.psi * lambda.transpose();
        for (j, &k) in cells.iter().enumerate() {
            v[(j, j)] += 8.0 * state.sigma * state.w[(i, k)];
        }
        let v_inv = v.try_inverse().ok_or_else(|| GcmError::NotPositiveDefinite("marginal covariance".into()))?;
        let y = DVector::from_iterator(cells.len(), cells.iter().map(|&k| state.y[(i, k)]));
        prec += lambda.transpose() * &v_inv * &lambda;
        rhs += lambda.transpose() * &v_inv * y;
    }
    let cov = prec.try_inverse().ok_or_else(|| GcmError::NotPositiveDefinite("beta precision".into()))?;
    Ok((&cov * rhs, cov))
}

/// One sweep with a freshly built sampler.
pub fn gibbs_step<R: Rng + ?Sized>(
    state: &mut AugmentedState,
    data: &LongitudinalDataset,
    spec: &GrowthModelSpec,
    priors: &RmbPriors,
    rng: &mut R,
    selection: bool,
) -> Result<()> {
    let mut sampler = GibbsSampler::new(spec, data, priors, selection, super::DEFAULT_MH_STEP)?;
    sampler.step(state, rng)
}

/// Redraws every masked cell from its AL conditional (ignorable missingness).
pub fn impute_missing_ignorable<R: Rng + ?Sized>(
    state: &mut AugmentedState,
    data: &LongitudinalDataset,
    spec: &GrowthModelSpec,
    rng: &mut R,
) -> Result<()> {
    let priors = RmbPriors::default_for(spec.n_effects());
    let sampler = GibbsSampler::new(spec, data, &priors, false, super::DEFAULT_MH_STEP)?;
    sampler.impute_ignorable(state, rng);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cholesky_solves() {
        let mut a = vec![4.0, 2.0, 0.4, 2.0, 3.0, 0.5, 0.4, 0.5, 2.0];
        let orig = DMatrix::from_row_slice(3, 3, &a);
        assert!(chol_in_place(&mut a, 3));
        let mut b = vec![1.0, -2.0, 0.5];
        chol_solve(&a, 3, &mut b);
        let exact = orig.clone().lu().solve(&DVector::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        for k in 0..3 {
            assert!((b[k] - exact[k]).abs() < 1e-12);
        }
        let mut bad = vec![1.0, 2.0, 2.0, 1.0];
        assert!(!chol_in_place(&mut bad, 2));
    }
}
