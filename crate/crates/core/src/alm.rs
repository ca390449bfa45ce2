//! Weighted mixed p-norm low-rank factorization.
//!
//! Minimizes `Σ_Ω Σ_k c_ijk |y_ij - u_i v_jᵀ|^p_k` over rank-`r` factors by an
//! augmented Lagrangian alternation on the split `L = U Vᵀ`:
//!
//! 1. `(U, V)` from the rank-`r` truncated SVD of `L + Λ/ρ`,
//! 2. `L` entrywise through the scalar proximal operator,
//! 3. `Λ += ρ (L - U Vᵀ)` and `ρ *= α`.
//!
//! [`solve_weighted_l2`] is an alternating least-squares solver for the
//! special case where every exponent equals 2.

use nalgebra::{Cholesky, DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::data::{FactorPair, ObservedMatrix};
use crate::error::{Error, Result};
use crate::mixture::{abs_pow, MoepModel, Responsibilities};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlmOptions {
    pub rho0: f64,
    pub alpha: f64,
    pub max_iter: usize,
    /// Stop once `‖L - U Vᵀ‖_F / ‖Y‖_F` falls to this value.
    pub tol: f64,
}

impl Default for AlmOptions {
    fn default() -> Self {
        Self {
            rho0: 1e-2,
            alpha: 1.05,
            max_iter: 200,
            tol: 1e-7,
        }
    }
}

impl AlmOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho0 > 0.0 && self.rho0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "rho0 must be > 0, got {}",
                self.rho0
            )));
        }
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be > 1, got {}",
                self.alpha
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter(
                "max_iter must be at least 1".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Auxiliary matrix, multiplier and penalty of the augmented Lagrangian.
#[derive(Debug, Clone)]
pub struct AlmState {
    pub l: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub rho: f64,
    pub alpha: f64,
    pub iteration: usize,
}

impl AlmState {
    /// `L = U Vᵀ`, `Λ = 0`, `ρ = ρ₀`.
    pub fn new(factors: &FactorPair, opts: &AlmOptions) -> Self {
        let l = factors.product();
        let lambda = DMatrix::zeros(l.nrows(), l.ncols());
        Self {
            l,
            lambda,
            rho: opts.rho0,
            alpha: opts.alpha,
            iteration: 0,
        }
    }

    /// `L + Λ/ρ`, the matrix the factor step approximates.
    pub fn target(&self) -> DMatrix<f64> {
        &self.l + &self.lambda / self.rho
    }

    /// Multiplier ascent followed by the penalty increase.
    pub fn advance(&mut self, product: &DMatrix<f64>) {
        self.lambda += (&self.l - product) * self.rho;
        self.rho *= self.alpha;
        self.iteration += 1;
    }
}

/// Per-entry, per-component coefficients `c_ijk = η_k γ_ijk` with exponents `p_k`,
/// stored entry-major over the observed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxWeights {
    exponents: Vec<f64>,
    coeffs: Vec<f64>,
}

impl ProxWeights {
    pub fn new(exponents: Vec<f64>, coeffs: Vec<f64>) -> Result<Self> {
        let k = exponents.len();
        if k == 0 || coeffs.len() % k != 0 {
            return Err(Error::Shape(format!(
                "{} coefficients cannot form rows of {k}",
                coeffs.len()
            )));
        }
        if let Some(p) = exponents.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "exponent {p} must be positive"
            )));
        }
        if let Some(c) = coeffs.iter().find(|c| !(**c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "coefficient {c} must be finite and >= 0"
            )));
        }
        Ok(Self { exponents, coeffs })
    }

    /// Coefficients `η_k γ_ijk` from a fitted mixture.
    pub fn from_mixture(model: &MoepModel, resp: &Responsibilities) -> Result<Self> {
        if resp.n_components() != model.k() {
            return Err(Error::Shape(format!(
                "responsibilities have {} components, model has {}",
                resp.n_components(),
                model.k()
            )));
        }
        let eta = model.precisions();
        let coeffs = resp
            .as_slice()
            .chunks_exact(model.k())
            .flat_map(|row| row.iter().zip(&eta).map(|(g, e)| g * e))
            .collect();
        Self::new(model.shapes(), coeffs)
    }

    /// One component with the same coefficient on every entry.
    pub fn uniform(entries: usize, p: f64, c: f64) -> Result<Self> {
        Self::new(vec![p], vec![c; entries])
    }

    pub fn n_components(&self) -> usize {
        self.exponents.len()
    }

    pub fn n_entries(&self) -> usize {
        self.coeffs.len() / self.exponents.len()
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    #[inline]
    pub fn coeffs(&self, idx: usize) -> &[f64] {
        let k = self.exponents.len();
        &self.coeffs[idx * k..(idx + 1) * k]
    }

    pub fn all_quadratic(&self) -> bool {
        self.exponents.iter().all(|&p| p == 2.0)
    }

    /// The same weights divided by the mean per-entry coefficient sum. The
    /// minimizer of [`Self::objective`] is unchanged; the rescaling keeps the
    /// penalty schedule of the ALM solver independent of the data scale.
    pub fn normalized(&self) -> Self {
        let entries = self.n_entries().max(1) as f64;
        let mean = self.coeffs.iter().sum::<f64>() / entries;
        if !(mean > 0.0 && mean.is_finite()) {
            return self.clone();
        }
        Self {
            exponents: self.exponents.clone(),
            coeffs: self.coeffs.iter().map(|c| c / mean).collect(),
        }
    }

    /// `Σ_Ω Σ_k c_ijk |e_ij|^p_k`.
    pub fn objective(&self, residuals: &[f64]) -> f64 {
        let k = self.exponents.len();
        residuals
            .iter()
            .zip(self.coeffs.chunks_exact(k))
            .map(|(&e, row)| {
                row.iter()
                    .zip(&self.exponents)
                    .map(|(&c, &p)| if c > 0.0 { c * abs_pow(e, p) } else { 0.0 })
                    .sum::<f64>()
            })
            .sum()
    }

    /// Entrywise weights `w̃_ij = (Σ_k c_ijk)^{1/2}` on Ω and zero elsewhere, so
    /// that `‖W̃ ⊙ (Y - U Vᵀ)‖²` equals [`Self::objective`] when every
    /// exponent is 2.
    pub fn l2_weights(&self, y: &ObservedMatrix) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(y.nrows(), y.ncols());
        for (idx, &(i, j)) in y.omega().iter().enumerate() {
            w[(i, j)] = self.coeffs(idx).iter().sum::<f64>().sqrt();
        }
        w
    }
}

/// Rank-`r` truncated SVD of `target`, split as `U_r Σ^{1/2}`, `V_r Σ^{1/2}`.
pub fn factor_step(target: &DMatrix<f64>, rank: usize) -> Result<FactorPair> {
    let (m, n) = target.shape();
    if rank == 0 || rank > m.min(n) {
        return Err(Error::InvalidParameter(format!(
            "rank {rank} is invalid for a {m}x{n} matrix"
        )));
    }
    if !target.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("factor step target".into()));
    }
    let svd = SVD::try_new(target.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u_full = svd.u.expect("requested U");
    let vt_full = svd.v_t.expect("requested Vᵀ");
    let mut u = DMatrix::zeros(m, rank);
    let mut v = DMatrix::zeros(n, rank);
    for k in 0..rank {
        let scale = svd.singular_values[k].max(0.0).sqrt();
        u.set_column(k, &(u_full.column(k) * scale));
        v.set_column(k, &(vt_full.row(k).transpose() * scale));
    }
    Ok(FactorPair { u, v })
}

/// `argmin_s ½(t - s)² + (1/ρ) Σ_l c_l |s|^{p_l}` over the real line.
///
/// `terms` holds `(c_l, p_l)` pairs with `c_l >= 0`, `p_l > 0`.
pub fn prox_scalar(t: f64, terms: &[(f64, f64)], rho: f64) -> f64 {
    assert!(rho > 0.0 && rho.is_finite(), "rho must be positive");
    let mut a = Vec::with_capacity(terms.len());
    let mut p = Vec::with_capacity(terms.len());
    for &(c, q) in terms {
        assert!(
            c >= 0.0 && c.is_finite(),
            "coefficient must be finite and >= 0"
        );
        assert!(q > 0.0 && q.is_finite(), "exponent must be positive");
        if c > 0.0 {
            a.push(c / rho);
            p.push(q);
        }
    }
    if t == 0.0 {
        return t;
    }
    prox_abs(t.abs(), &a, &p).copysign(t)
}

/// `Σ a s^p`, `Σ a p s^{p-1}`, `Σ a p (p-1) s^{p-2}` for `s > 0`.
#[inline]
fn penalty_derivs(s: f64, a: &[f64], p: &[f64]) -> (f64, f64, f64) {
    let ln_s = s.ln();
    let mut val = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for (&ai, &pi) in a.iter().zip(p) {
        let w = if pi == 1.0 {
            ai * s
        } else if pi == 2.0 {
            ai * s * s
        } else {
            ai * (pi * ln_s).exp()
        };
        val += w;
        let w1 = pi * w / s;
        d1 += w1;
        d2 += (pi - 1.0) * w1 / s;
    }
    (val, d1, d2)
}

#[inline]
fn prox_objective(s: f64, x: f64, a: &[f64], p: &[f64]) -> f64 {
    let pen = if s > 0.0 {
        penalty_derivs(s, a, p).0
    } else {
        0.0
    };
    0.5 * (x - s) * (x - s) + pen
}

const NEWTON_CAP: usize = 50;

/// Minimizer over `s >= 0` of `½(x - s)² + Σ a_l s^{p_l}` for `x > 0`, `a_l > 0`.
///
/// The minimizer lies in `[0, x]`. When some `p_l < 1`, `s² φ''(s)` is a sum of
/// powers whose coefficients change sign exactly once in exponent order, so
/// `φ` is concave then convex on `(0, x]`: the only interior candidate is the
/// root of `φ'` right of the inflection point, which is compared with `s = 0`.
/// Without such terms `φ` is convex.
pub(crate) fn prox_abs(x: f64, a: &[f64], p: &[f64]) -> f64 {
    if x == 0.0 || a.is_empty() {
        return x;
    }
    if a.len() == 1 {
        if p[0] == 2.0 {
            return x / (1.0 + 2.0 * a[0]);
        }
        if p[0] == 1.0 {
            return (x - a[0]).max(0.0);
        }
    }
    let lo = if p.iter().any(|&q| q < 1.0) {
        let Some(sc) = inflection(x, a, p) else {
            return 0.0;
        };
        let (_, d1, _) = penalty_derivs(sc, a, p);
        if sc - x + d1 >= 0.0 {
            return 0.0;
        }
        sc
    } else {
        let slope0: f64 = a
            .iter()
            .zip(p)
            .filter(|(_, &q)| q == 1.0)
            .map(|(&ai, _)| ai)
            .sum();
        if slope0 >= x {
            return 0.0;
        }
        0.0
    };
    let root = stationary_root(x, a, p, lo, x);
    if prox_objective(root, x, a, p) < 0.5 * x * x {
        root
    } else {
        0.0
    }
}

/// Root of `φ''` in `(0, x)`, or `None` when `φ` is concave on all of `(0, x]`.
fn inflection(x: f64, a: &[f64], p: &[f64]) -> Option<f64> {
    // h(s) = s² φ''(s) = s² + Σ a p (p-1) s^p, monotone sign change from - to +.
    let h = |s: f64| {
        let (_, _, d2) = penalty_derivs(s, a, p);
        s * s * (1.0 + d2)
    };
    if a.len() == 1 {
        let sc = (a[0] * p[0] * (1.0 - p[0])).powf(1.0 / (2.0 - p[0]));
        return (sc < x).then_some(sc);
    }
    if h(x) <= 0.0 {
        return None;
    }
    let mut hi = x;
    let mut lo = x * 0.5;
    while h(lo) > 0.0 {
        hi = lo;
        lo *= 0.5;
        if lo == 0.0 {
            return Some(0.0);
        }
    }
    // Bisection in log space, refined by Newton on ln s.
    let (mut ul, mut uh) = (lo.ln(), hi.ln());
    let mut u = 0.5 * (ul + uh);
    for _ in 0..NEWTON_CAP {
        let s = u.exp();
        let ln_s = u;
        let mut hv = s * s;
        let mut dh = 2.0 * s * s;
        for (&ai, &pi) in a.iter().zip(p) {
            let w = ai * pi * (pi - 1.0) * (pi * ln_s).exp();
            hv += w;
            dh += pi * w;
        }
        if hv > 0.0 {
            uh = u;
        } else {
            ul = u;
        }
        let mut next = u - hv / dh;
        if !(dh > 0.0 && next > ul && next < uh) {
            next = 0.5 * (ul + uh);
        }
        if (next - u).abs() <= 1e-14 * (1.0 + u.abs()) || uh - ul <= 1e-14 * (1.0 + u.abs()) {
            return Some(next.exp());
        }
        u = next;
    }
    Some(u.exp())
}

/// Root of `φ'(s) = s - x + Σ a p s^{p-1}` in `(lo, hi]`, where `φ'` is increasing
/// with `φ'(lo⁺) < 0 < φ'(hi)`. Safeguarded Newton with a golden-section
/// fallback on `φ`.
fn stationary_root(x: f64, a: &[f64], p: &[f64], lo: f64, hi: f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    let mut s = hi;
    for _ in 0..NEWTON_CAP {
        let (_, d1, d2) = penalty_derivs(s, a, p);
        let g = s - x + d1;
        let dg = 1.0 + d2;
        if g == 0.0 {
            return s;
        }
        if g > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let mut next = s - g / dg;
        if !(dg > 0.0 && next > lo && next < hi) {
            next = if lo > 0.0 && hi > 4.0 * lo {
                (lo * hi).sqrt()
            } else {
                0.5 * (lo + hi)
            };
        }
        if (next - s).abs() <= 4.0 * f64::EPSILON * s || hi - lo <= 4.0 * f64::EPSILON * hi {
            return next;
        }
        s = next;
    }
    golden_section(|s| prox_objective(s, x, a, p), lo, hi)
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Relative size below which a penalty term is dropped from an entry's prox
/// problem in the solver loop.
const NEGLIGIBLE_TERM: f64 = 1e-13;

/// Entrywise `L` update. On Ω, `l_ij = y_ij - prox(t_ij)` with
/// `t_ij = y_ij - u_i v_jᵀ + Λ_ij/ρ`; elsewhere `l_ij = u_i v_jᵀ - Λ_ij/ρ`.
pub fn l_step(
    y: &ObservedMatrix,
    factors: &FactorPair,
    state: &AlmState,
    weights: &ProxWeights,
) -> DMatrix<f64> {
    l_step_with_product(y, &factors.product(), state, weights)
}

fn l_step_with_product(
    y: &ObservedMatrix,
    product: &DMatrix<f64>,
    state: &AlmState,
    weights: &ProxWeights,
) -> DMatrix<f64> {
    let inv_rho = 1.0 / state.rho;
    let mut l = product - &state.lambda / state.rho;
    let exps = weights.exponents();
    let k = exps.len();
    let mut a = Vec::with_capacity(k);
    let mut p = Vec::with_capacity(k);
    for (idx, &(i, j)) in y.omega().iter().enumerate() {
        let yij = y.values()[(i, j)];
        let t = yij - l[(i, j)];
        let x = t.abs();
        a.clear();
        p.clear();
        let coeffs = weights.coeffs(idx);
        if k == 1 {
            if coeffs[0] > 0.0 {
                a.push(coeffs[0] * inv_rho);
                p.push(exps[0]);
            }
        } else if x > 0.0 {
            let mut total = 0.0;
            let mut vals = [0.0; 16];
            for (kk, (&c, &q)) in coeffs.iter().zip(exps).enumerate() {
                let v = if c > 0.0 {
                    c * inv_rho * abs_pow(x, q)
                } else {
                    0.0
                };
                if kk < vals.len() {
                    vals[kk] = v;
                }
                total += v;
            }
            let cutoff = NEGLIGIBLE_TERM * total.min(0.5 * x * x);
            for (kk, (&c, &q)) in coeffs.iter().zip(exps).enumerate() {
                let v = if kk < vals.len() {
                    vals[kk]
                } else {
                    c * inv_rho * abs_pow(x, q)
                };
                if c > 0.0 && v > cutoff {
                    a.push(c * inv_rho);
                    p.push(q);
                }
            }
        }
        let s = if t == 0.0 {
            0.0
        } else {
            prox_abs(x, &a, &p).copysign(t)
        };
        l[(i, j)] = yij - s;
    }
    l
}

/// Output of [`solve_weighted_lrmf`].
#[derive(Debug, Clone)]
pub struct AlmOutput {
    pub factors: FactorPair,
    pub iterations: usize,
    /// `‖L - U Vᵀ‖_F / ‖Y‖_F` after each iteration.
    pub gap_trace: Vec<f64>,
    /// False when the iteration cap was hit before the tolerance; the
    /// factors are then those of the smallest recorded gap.
    pub converged: bool,
}

/// Augmented Lagrangian solver for `min Σ_Ω Σ_k c_ijk |y_ij - u_i v_jᵀ|^p_k`.
pub fn solve_weighted_lrmf(
    y: &ObservedMatrix,
    weights: &ProxWeights,
    rank: usize,
    init: &FactorPair,
    opts: &AlmOptions,
) -> Result<AlmOutput> {
    opts.validate()?;
    check_factor_shapes(y, init, rank)?;
    if weights.n_entries() != y.omega_size() {
        return Err(Error::Shape(format!(
            "{} weight rows for {} observed entries",
            weights.n_entries(),
            y.omega_size()
        )));
    }
    let scale = match y.observed_norm() {
        n if n > 0.0 => n,
        _ => 1.0,
    };
    let weights = &weights.normalized();
    let mut state = AlmState::new(init, opts);
    let mut gap_trace = Vec::with_capacity(opts.max_iter);
    let mut best: Option<(f64, FactorPair)> = None;
    let mut converged = false;
    let mut factors = init.clone();
    for _ in 0..opts.max_iter {
        factors = factor_step(&state.target(), rank)?;
        let product = factors.product();
        state.l = l_step_with_product(y, &product, &state, weights);
        let gap = (&state.l - &product).norm() / scale;
        if !gap.is_finite() {
            return Err(Error::NonFinite("ALM iterate".into()));
        }
        gap_trace.push(gap);
        state.advance(&product);
        if gap <= opts.tol {
            converged = true;
            break;
        }
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, factors.clone()));
        }
    }
    if !converged {
        if let Some((_, f)) = best {
            factors = f;
        }
    }
    Ok(AlmOutput {
        factors,
        iterations: gap_trace.len(),
        gap_trace,
        converged,
    })
}

fn check_factor_shapes(y: &ObservedMatrix, init: &FactorPair, rank: usize) -> Result<()> {
    let (m, n) = y.shape();
    if rank == 0 || rank > m.min(n) {
        return Err(Error::InvalidParameter(format!(
            "rank {rank} is invalid for a {m}x{n} matrix"
        )));
    }
    if init.u.shape() != (m, rank) || init.v.shape() != (n, rank) {
        return Err(Error::Shape(format!(
            "factors are {}x{} and {}x{}, expected {m}x{rank} and {n}x{rank}",
            init.u.nrows(),
            init.u.ncols(),
            init.v.nrows(),
            init.v.ncols()
        )));
    }
    if !init.is_finite() {
        return Err(Error::NonFinite("initial factors".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Options {
    pub max_iter: usize,
    /// Stop when the relative objective decrease of a sweep falls below this.
    pub tol: f64,
}

impl Default for L2Options {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            tol: 1e-12,
        }
    }
}

/// Output of [`solve_weighted_l2`].
#[derive(Debug, Clone)]
pub struct L2Output {
    pub factors: FactorPair,
    /// `‖W̃ ⊙ (Y - U Vᵀ)‖²` at the start and after each sweep.
    pub objective_trace: Vec<f64>,
    /// Number of row or column systems that needed the ridge.
    pub ridge_solves: usize,
}

const RIDGE: f64 = 1e-10;

/// Alternating weighted least squares for `min ‖W̃ ⊙ (Y - U Vᵀ)‖²`.
///
/// `weights` is the entrywise `W̃`; it is zeroed outside the mask of `y`.
pub fn solve_weighted_l2(
    y: &ObservedMatrix,
    weights: &DMatrix<f64>,
    rank: usize,
    init: &FactorPair,
    opts: &L2Options,
) -> Result<L2Output> {
    check_factor_shapes(y, init, rank)?;
    if weights.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "weights are {}x{}, data is {}x{}",
            weights.nrows(),
            weights.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    if !weights.iter().all(|w| w.is_finite()) {
        return Err(Error::NonFinite("weights".into()));
    }
    let (m, n) = y.shape();
    let w2 = DMatrix::from_fn(m, n, |i, j| {
        if y.is_observed(i, j) {
            weights[(i, j)].powi(2)
        } else {
            0.0
        }
    });
    let yv = y.values();
    let mut u = init.u.clone();
    let mut v = init.v.clone();
    let mut ridge_solves = 0;
    let objective = |u: &DMatrix<f64>, v: &DMatrix<f64>| -> f64 {
        let prod = u * v.transpose();
        w2.zip_map(&(yv - prod), |w, e| w * e * e).sum()
    };
    let mut trace = vec![objective(&u, &v)];
    for _ in 0..opts.max_iter {
        // Rows of U with V fixed.
        for i in 0..m {
            let (row, ridged) = weighted_ls(&v, |j| w2[(i, j)], |j| yv[(i, j)], rank)?;
            ridge_solves += ridged as usize;
            u.set_row(i, &row.transpose());
        }
        for j in 0..n {
            let (row, ridged) = weighted_ls(&u, |i| w2[(i, j)], |i| yv[(i, j)], rank)?;
            ridge_solves += ridged as usize;
            v.set_row(j, &row.transpose());
        }
        let obj = objective(&u, &v);
        if !obj.is_finite() {
            return Err(Error::NonFinite("weighted least-squares iterate".into()));
        }
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(obj);
        if prev - obj <= opts.tol * prev.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(L2Output {
        factors: FactorPair { u, v },
        objective_trace: trace,
        ridge_solves,
    })
}

/// Settings of [`refine_reweighted`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReweightOptions {
    /// Upper bound on the number of weighted least-squares solves.
    pub max_rounds: usize,
    /// Initial smoothing width relative to the RMS of the starting residuals;
    /// 0 disables the continuation.
    pub start_width: f64,
    /// Factor applied to the smoothing width after each round.
    pub decay: f64,
    pub l2: L2Options,
}

impl Default for ReweightOptions {
    fn default() -> Self {
        Self {
            max_rounds: 10,
            start_width: 0.0,
            decay: 0.5,
            l2: L2Options {
                max_iter: 50,
                tol: 1e-10,
            },
        }
    }
}

/// Reweighted least squares for `Σ_Ω Σ_k c_ijk |e_ij|^p_k`, warm-started at
/// `init`.
///
/// Each round replaces every term by the quadratic that touches `c|e|^p` at
/// `max(|e₀|, δ)` and solves the resulting weighted L2 problem. The width `δ`
/// of term `k` starts at `start_width` times the RMS residual, shrinks by
/// `decay` per round and never drops below `floors[k]` (an empty slice means
/// a negligible floor). Large widths make the early rounds close to plain
/// least squares. Once every width has reached its floor, a round that does
/// not lower the objective ends the loop. The iterate with the lowest
/// objective, `init` included, is returned.
pub fn refine_reweighted(
    y: &ObservedMatrix,
    weights: &ProxWeights,
    floors: &[f64],
    rank: usize,
    init: &FactorPair,
    opts: &ReweightOptions,
) -> Result<FactorPair> {
    check_factor_shapes(y, init, rank)?;
    if weights.n_entries() != y.omega_size() {
        return Err(Error::Shape(format!(
            "{} weight rows for {} observed entries",
            weights.n_entries(),
            y.omega_size()
        )));
    }
    if !floors.is_empty() && floors.len() != weights.n_components() {
        return Err(Error::Shape(format!(
            "{} floors for {} terms",
            floors.len(),
            weights.n_components()
        )));
    }
    if !(opts.start_width >= 0.0 && opts.decay > 0.0 && opts.decay < 1.0) {
        return Err(Error::InvalidParameter(
            "reweighting needs start_width >= 0 and decay in (0, 1)".into(),
        ));
    }
    let tiny =
        1e-10 * (y.observed_norm() / (y.omega_size().max(1) as f64).sqrt()).max(f64::MIN_POSITIVE);
    let floors: Vec<f64> = (0..weights.n_components())
        .map(|k| floors.get(k).map_or(tiny, |f| f.max(tiny)))
        .collect();
    let mut current = init.clone();
    let mut residuals = y.residuals(&current);
    let mut value = weights.objective(&residuals);
    let (mut best, mut best_value) = (current.clone(), value);
    let rms = (residuals.iter().map(|e| e * e).sum::<f64>() / residuals.len().max(1) as f64).sqrt();
    let mut width = opts.start_width * rms;
    for _ in 0..opts.max_rounds {
        let smoothing = floors.iter().any(|&f| width > f);
        let mut w2: Vec<f64> = residuals
            .iter()
            .enumerate()
            .map(|(idx, &e)| {
                weights
                    .coeffs(idx)
                    .iter()
                    .zip(weights.exponents())
                    .zip(&floors)
                    .map(|((&c, &p), &f)| {
                        if c > 0.0 {
                            0.5 * c * p * e.abs().max(f.max(width)).powf(p - 2.0)
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            })
            .collect();
        let mean = w2.iter().sum::<f64>() / w2.len().max(1) as f64;
        if !(mean > 0.0 && mean.is_finite()) {
            break;
        }
        w2.iter_mut().for_each(|w| *w /= mean);
        let mut wmat = DMatrix::zeros(y.nrows(), y.ncols());
        for (idx, &(i, j)) in y.omega().iter().enumerate() {
            wmat[(i, j)] = w2[idx].sqrt();
        }
        let out = solve_weighted_l2(y, &wmat, rank, &current, &opts.l2)?;
        let next_residuals = y.residuals(&out.factors);
        let next = weights.objective(&next_residuals);
        if !next.is_finite() {
            break;
        }
        let stalled = !(next < value - 1e-12 * value.abs());
        current = out.factors;
        residuals = next_residuals;
        value = next;
        if value < best_value {
            best = current.clone();
            best_value = value;
        }
        if !smoothing && stalled {
            break;
        }
        width *= opts.decay;
    }
    Ok(best)
}

/// Solves `(Bᵀ D B) x = Bᵀ D y` for one row, adding a ridge on failure.
fn weighted_ls(
    basis: &DMatrix<f64>,
    w: impl Fn(usize) -> f64,
    y: impl Fn(usize) -> f64,
    rank: usize,
) -> Result<(DVector<f64>, bool)> {
    let mut gram = DMatrix::<f64>::zeros(rank, rank);
    let mut rhs = DVector::<f64>::zeros(rank);
    for t in 0..basis.nrows() {
        let wt = w(t);
        if wt == 0.0 {
            continue;
        }
        let b = basis.row(t);
        let yt = y(t);
        for a in 0..rank {
            rhs[a] += wt * b[a] * yt;
            for c in 0..=a {
                gram[(a, c)] += wt * b[a] * b[c];
            }
        }
    }
    for a in 0..rank {
        for c in 0..a {
            gram[(c, a)] = gram[(a, c)];
        }
    }
    let max_diag = (0..rank).map(|a| gram[(a, a)]).fold(0.0, f64::max);
    let well_posed = max_diag > 0.0 && (0..rank).all(|a| gram[(a, a)] > 1e-12 * max_diag);
    if well_posed {
        if let Some(ch) = Cholesky::new(gram.clone()) {
            return Ok((ch.solve(&rhs), false));
        }
    }
    for a in 0..rank {
        gram[(a, a)] += RIDGE * max_diag.max(1.0);
    }
    Cholesky::new(gram)
        .map(|ch| (ch.solve(&rhs), true))
        .ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal))
    }

    /// Dense grid over `[lo, hi]` followed by golden-section refinement
    /// around the best grid cells.
    fn grid_oracle(t: f64, terms: &[(f64, f64)], rho: f64, lo: f64, hi: f64, step: f64) -> f64 {
        let f = |s: f64| {
            0.5 * (t - s) * (t - s)
                + terms.iter().map(|&(c, p)| c * s.abs().powf(p)).sum::<f64>() / rho
        };
        let n = ((hi - lo) / step).round() as usize;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=n {
            let s = lo + step * i as f64;
            let v = f(s);
            if v < best.0 {
                best = (v, s);
            }
        }
        let s = golden_section(f, (best.1 - step).max(lo), (best.1 + step).min(hi));
        let cands = [s, 0.0, best.1];
        *cands
            .iter()
            .min_by(|a, b| f(**a).total_cmp(&f(**b)))
            .unwrap()
    }

    #[test]
    fn prox_closed_forms() {
        assert!((prox_scalar(3.0, &[(2.0, 2.0)], 4.0) - 3.0 / 2.0).abs() < 1e-15);
        assert!((prox_scalar(-3.0, &[(2.0, 1.0)], 4.0) + 2.5).abs() < 1e-15);
        assert_eq!(prox_scalar(0.3, &[(2.0, 1.0)], 4.0), 0.0);
        assert_eq!(prox_scalar(1.7, &[], 1.0), 1.7);
        assert_eq!(prox_scalar(1.7, &[(0.0, 0.5)], 1.0), 1.7);
    }

    #[test]
    fn prox_half_power_against_grid() {
        let s = prox_scalar(1.0, &[(2.0, 0.5)], 1.0);
        let oracle = grid_oracle(1.0, &[(2.0, 0.5)], 1.0, -2.0, 2.0, 1e-6);
        assert!((s - oracle).abs() < 1e-8, "{s} vs {oracle}");
        // Large t moves the minimizer away from zero.
        let s = prox_scalar(4.0, &[(2.0, 0.5)], 1.0);
        let oracle = grid_oracle(4.0, &[(2.0, 0.5)], 1.0, -8.0, 8.0, 1e-5);
        assert!(s > 1.0 && (s - oracle).abs() < 1e-8, "{s} vs {oracle}");
    }

    #[test]
    fn prox_mixed_terms_against_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shapes = [0.2, 0.5, 1.0, 1.5, 2.0];
        for _ in 0..40 {
            let t: f64 = rng.random_range(-4.0..4.0);
            let k = rng.random_range(1..4);
            let terms: Vec<(f64, f64)> = (0..k)
                .map(|_| {
                    (
                        rng.random_range(0.0..2.0),
                        shapes[rng.random_range(0..shapes.len())],
                    )
                })
                .collect();
            let rho = rng.random_range(0.5..3.0);
            let s = prox_scalar(t, &terms, rho);
            let r = 2.0 * t.abs();
            let oracle = grid_oracle(t, &terms, rho, -r, r, 1e-4);
            let f = |s: f64| {
                0.5 * (t - s) * (t - s)
                    + terms.iter().map(|&(c, p)| c * s.abs().powf(p)).sum::<f64>() / rho
            };
            assert!(
                f(s) <= f(oracle) + 1e-12,
                "t={t} terms={terms:?} rho={rho}: {s} vs {oracle}"
            );
        }
    }

    #[test]
    fn factor_step_identity_drops_two_units() {
        let f = factor_step(&DMatrix::identity(4, 4), 2).unwrap();
        let resid = DMatrix::<f64>::identity(4, 4) - f.product();
        assert!((resid.norm_squared() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn factor_step_matches_tail_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = randn(40, 20, &mut rng);
        let f = factor_step(&target, 4).unwrap();
        let sv = target.clone().singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let tail: f64 = sv[4..].iter().map(|s| s * s).sum();
        let resid = (&target - f.product()).norm_squared();
        assert!((resid - tail).abs() < 1e-9 * tail);
        // Balanced split.
        for k in 0..4 {
            assert!((f.u.column(k).norm() - f.v.column(k).norm()).abs() < 1e-10);
        }
    }

    #[test]
    fn factor_step_rejects_non_finite() {
        let mut t = DMatrix::identity(3, 3);
        t[(0, 1)] = f64::NAN;
        assert!(factor_step(&t, 1).is_err());
    }

    #[test]
    fn l_step_without_observations_is_quadratic_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y =
            ObservedMatrix::new(randn(3, 4, &mut rng), DMatrix::from_element(3, 4, false)).unwrap();
        let f = FactorPair::new(randn(3, 2, &mut rng), randn(4, 2, &mut rng)).unwrap();
        let mut state = AlmState::new(&f, &AlmOptions::default());
        state.lambda = randn(3, 4, &mut rng);
        let w = ProxWeights::new(vec![1.0], vec![]).unwrap();
        let l = l_step(&y, &f, &state, &w);
        assert_eq!(l, f.product() - &state.lambda / state.rho);
    }

    #[test]
    fn l_step_with_zero_weights_ignores_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = ObservedMatrix::fully_observed(randn(3, 3, &mut rng)).unwrap();
        let f = FactorPair::new(randn(3, 1, &mut rng), randn(3, 1, &mut rng)).unwrap();
        let mut state = AlmState::new(&f, &AlmOptions::default());
        state.lambda = randn(3, 3, &mut rng);
        let w = ProxWeights::uniform(9, 0.5, 0.0).unwrap();
        let l = l_step(&y, &f, &state, &w);
        let expected = f.product() - &state.lambda / state.rho;
        assert!((l - expected).amax() < 1e-12);
    }

    #[test]
    fn l_step_quadratic_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = ObservedMatrix::fully_observed(randn(3, 3, &mut rng)).unwrap();
        let f = FactorPair::new(randn(3, 1, &mut rng), randn(3, 1, &mut rng)).unwrap();
        let mut state = AlmState::new(&f, &AlmOptions::default());
        state.lambda = randn(3, 3, &mut rng);
        state.rho = 0.7;
        let c = 1.3;
        let l = l_step(&y, &f, &state, &ProxWeights::uniform(9, 2.0, c).unwrap());
        let prod = f.product();
        for i in 0..3 {
            for j in 0..3 {
                // Minimizer of c (y - l)² + (ρ/2)(l - uv + Λ/ρ)².
                let m = prod[(i, j)] - state.lambda[(i, j)] / state.rho;
                let expected =
                    (2.0 * c * y.values()[(i, j)] + state.rho * m) / (2.0 * c + state.rho);
                assert!((l[(i, j)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alm_recovers_exact_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = randn(20, 2, &mut rng) * randn(2, 12, &mut rng);
        let y = ObservedMatrix::fully_observed(truth.clone()).unwrap();
        let init = FactorPair::new(randn(20, 2, &mut rng), randn(12, 2, &mut rng)).unwrap();
        let out = solve_weighted_lrmf(
            &y,
            &ProxWeights::uniform(240, 2.0, 1.0).unwrap(),
            2,
            &init,
            &AlmOptions::default(),
        )
        .unwrap();
        let rel = (&truth - out.factors.product()).norm() / truth.norm();
        assert!(rel <= 1e-6, "rel = {rel}");
    }

    #[test]
    fn alm_laplace_path_ignores_gross_outlier() {
        let u = DMatrix::from_column_slice(6, 1, &[1.0, -0.9, 1.2, 0.8, -1.1, 1.0]);
        let v = DMatrix::from_column_slice(4, 1, &[0.9, -1.1, 1.0, 1.2]);
        let truth = &u * v.transpose();
        let mut data = truth.clone();
        data[(2, 1)] += 5.0;
        let y = ObservedMatrix::fully_observed(data).unwrap();
        let init = factor_step(y.values(), 1).unwrap();
        let w = ProxWeights::uniform(24, 1.0, 1.0).unwrap();
        let out = solve_weighted_lrmf(&y, &w, 1, &init, &AlmOptions::default()).unwrap();
        let prod = out.factors.product();
        for i in 0..6 {
            for j in 0..4 {
                if (i, j) != (2, 1) {
                    assert!((prod[(i, j)] - truth[(i, j)]).abs() < 1e-3, "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn weighted_l2_uniform_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = randn(15, 10, &mut rng);
        let y = ObservedMatrix::fully_observed(data.clone()).unwrap();
        let init = FactorPair::new(randn(15, 3, &mut rng), randn(10, 3, &mut rng)).unwrap();
        let out = solve_weighted_l2(
            &y,
            &DMatrix::from_element(15, 10, 1.0),
            3,
            &init,
            &L2Options::default(),
        )
        .unwrap();
        let best = (&data - factor_step(&data, 3).unwrap().product()).norm_squared();
        let got = *out.objective_trace.last().unwrap();
        assert!((got - best).abs() <= 1e-8 * best, "{got} vs {best}");
    }

    #[test]
    fn weighted_l2_is_monotone_with_missing() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = randn(40, 4, &mut rng) * randn(4, 20, &mut rng) + randn(40, 20, &mut rng) * 0.1;
        let mask = DMatrix::from_fn(40, 20, |_, _| rng.random::<f64>() > 0.2);
        let y = ObservedMatrix::new(data, mask).unwrap();
        let init = FactorPair::new(randn(40, 4, &mut rng), randn(20, 4, &mut rng)).unwrap();
        let w = DMatrix::from_fn(40, 20, |_, _| rng.random_range(0.5..2.0));
        let out = solve_weighted_l2(
            &y,
            &w,
            4,
            &init,
            &L2Options {
                max_iter: 100,
                tol: 0.0,
            },
        )
        .unwrap();
        for pair in out.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn weighted_l2_two_by_two_by_hand() {
        // y = [[2, 3], [4, ·]] with v fixed at (1, 1) after the first sweep:
        // rank-1 fit of the observed 3 entries is exact with u = (2, 4) scaled,
        // e.g. u v^T = [[2, 3], [4, 6]].
        let values = DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 4.0, 0.0]);
        let mask = DMatrix::from_row_slice(2, 2, &[true, true, true, false]);
        let y = ObservedMatrix::new(values, mask).unwrap();
        let init = FactorPair::new(
            DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
        )
        .unwrap();
        let out = solve_weighted_l2(
            &y,
            &DMatrix::from_element(2, 2, 1.0),
            1,
            &init,
            &L2Options::default(),
        )
        .unwrap();
        let prod = out.factors.product();
        assert!((prod[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((prod[(0, 1)] - 3.0).abs() < 1e-6);
        assert!((prod[(1, 0)] - 4.0).abs() < 1e-6);
        assert!((prod[(1, 1)] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn weighted_l2_ridge_on_empty_row() {
        let values = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        let mask = DMatrix::from_row_slice(3, 2, &[true, true, true, true, false, false]);
        let y = ObservedMatrix::new(values, mask).unwrap();
        let init = FactorPair::new(
            DMatrix::from_element(3, 1, 1.0),
            DMatrix::from_element(2, 1, 1.0),
        )
        .unwrap();
        let out = solve_weighted_l2(
            &y,
            &DMatrix::from_element(3, 2, 1.0),
            1,
            &init,
            &L2Options::default(),
        )
        .unwrap();
        assert!(out.ridge_solves > 0);
        assert!(out.factors.is_finite());
    }

    #[test]
    fn alm_quadratic_matches_weighted_l2() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = randn(30, 3, &mut rng) * randn(3, 15, &mut rng) + randn(30, 15, &mut rng) * 0.05;
        let mask = DMatrix::from_fn(30, 15, |_, _| rng.random::<f64>() > 0.2);
        let y = ObservedMatrix::new(data, mask).unwrap();
        let coeffs: Vec<f64> = (0..y.omega_size())
            .map(|_| rng.random_range(0.5..2.0))
            .collect();
        let weights = ProxWeights::new(vec![2.0], coeffs).unwrap();
        let init = FactorPair::new(randn(30, 3, &mut rng), randn(15, 3, &mut rng)).unwrap();
        let l2 = solve_weighted_l2(&y, &weights.l2_weights(&y), 3, &init, &L2Options::default())
            .unwrap();
        let alm = solve_weighted_lrmf(&y, &weights, 3, &init, &AlmOptions::default()).unwrap();
        let a = weights.objective(&y.residuals(&alm.factors));
        let b = weights.objective(&y.residuals(&l2.factors));
        assert!((a - b).abs() <= 1e-4 * b, "alm {a} vs l2 {b}");
    }
}
