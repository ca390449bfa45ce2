//! Zero-mean exponential power (generalized Gaussian) distribution.
//!
//! The density is `p η^(1/p) / (2 Γ(1/p)) · exp(-η |x|^p)`. Two equivalent
//! scale parameterizations are supported alongside the precision `η`:
//! `σ` with `η = 1 / (p σ^p)`, and `τ` with `η = τ^(-p)`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::ln_gamma;

/// Shape `p` and precision `η` of a zero-mean exponential power law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpParams {
    p: f64,
    eta: f64,
}

impl EpParams {
    pub fn new(p: f64, eta: f64) -> Result<Self> {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "shape p must be finite and > 0, got {p}"
            )));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "precision eta must be finite and > 0, got {eta}"
            )));
        }
        Ok(Self { p, eta })
    }

    /// From the `σ` form, `η = 1 / (p σ^p)`.
    pub fn from_sigma(p: f64, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be > 0, got {sigma}"
            )));
        }
        Self::new(p, 1.0 / (p * sigma.powf(p)))
    }

    /// From the `τ` form, `η = τ^(-p)`.
    pub fn from_tau(p: f64, tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tau must be > 0, got {tau}"
            )));
        }
        Self::new(p, tau.powf(-p))
    }

    /// Laplace law with scale `b` (rate `1/b`).
    pub fn laplace(scale: f64) -> Result<Self> {
        Self::new(1.0, 1.0 / scale)
    }

    /// Gaussian law with the given variance.
    pub fn gaussian(variance: f64) -> Result<Self> {
        Self::new(2.0, 1.0 / (2.0 * variance))
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn sigma(&self) -> f64 {
        (1.0 / (self.p * self.eta)).powf(1.0 / self.p)
    }

    pub fn tau(&self) -> f64 {
        self.eta.powf(-1.0 / self.p)
    }

    /// `ln(p η^(1/p) / (2 Γ(1/p)))`.
    pub fn log_normalizer(&self) -> f64 {
        log_normalizer(self.p, self.eta)
    }

    /// Log-density without input validation.
    pub fn log_pdf(&self, x: f64) -> f64 {
        self.log_normalizer() - self.eta * x.abs().powf(self.p)
    }

    pub fn variance(&self) -> f64 {
        let tau = self.tau();
        tau * tau * (ln_gamma(3.0 / self.p) - ln_gamma(1.0 / self.p)).exp()
    }

    /// Draws one value with the gamma-power transform.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let gamma = Gamma::new(1.0 / self.p, 1.0).expect("shape 1/p is positive");
        let g: f64 = gamma.sample(rng);
        let magnitude = self.tau() * g.powf(1.0 / self.p);
        if rng.random::<bool>() {
            magnitude
        } else {
            -magnitude
        }
    }
}

pub(crate) fn log_normalizer(p: f64, eta: f64) -> f64 {
    p.ln() + eta.ln() / p - std::f64::consts::LN_2 - ln_gamma(1.0 / p)
}

/// Log-density of `EP(0, p, η)` at `x`.
pub fn ep_log_pdf(x: f64, params: &EpParams) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("ep_log_pdf argument {x}")));
    }
    EpParams::new(params.p, params.eta)?;
    Ok(params.log_pdf(x))
}

/// Analytic absolute moment `E|X|^k = τ^k Γ((k+1)/p) / Γ(1/p)`.
pub fn ep_abs_moment(k: u32, params: &EpParams) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("moment order must be >= 1".into()));
    }
    let p = params.p;
    let log_moment =
        k as f64 * params.tau().ln() + ln_gamma((k as f64 + 1.0) / p) - ln_gamma(1.0 / p);
    let moment = log_moment.exp();
    if !moment.is_finite() {
        return Err(Error::Numerical(format!(
            "E|X|^{k} overflows for p = {p}, eta = {} (log moment {log_moment:.3e})",
            params.eta
        )));
    }
    Ok(moment)
}

/// Sampling route for [`ep_sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EpSampler {
    /// `s · τ · g^(1/p)` with `g ~ Gamma(1/p, 1)` and a uniform sign. Exact for every `p > 0`.
    #[default]
    GammaPower,
    /// Gamma mixture for the latent width followed by slice sampling of the
    /// triangular conditional. Only defined for `0 < p < 1`.
    GammaMixtureSlice,
}

/// Slice-sampler steps per draw of the triangular conditional.
pub const SLICE_STEPS: usize = 20;

/// `n` i.i.d. draws from `EP(0, p, η)` with a generator seeded from `seed`.
pub fn ep_sample(n: usize, params: &EpParams, seed: u64, method: EpSampler) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ep_sample_with(n, params, method, &mut rng)
}

pub fn ep_sample_with<R: Rng + ?Sized>(
    n: usize,
    params: &EpParams,
    method: EpSampler,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be >= 1".into()));
    }
    EpParams::new(params.p, params.eta)?;
    match method {
        EpSampler::GammaPower => {
            let gamma = Gamma::new(1.0 / params.p, 1.0)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            let tau = params.tau();
            let inv_p = 1.0 / params.p;
            Ok((0..n)
                .map(|_| {
                    let g: f64 = gamma.sample(rng);
                    let magnitude = tau * g.powf(inv_p);
                    if rng.random::<bool>() {
                        magnitude
                    } else {
                        -magnitude
                    }
                })
                .collect())
        }
        EpSampler::GammaMixtureSlice => sample_mixture_slice(n, params, rng),
    }
}

fn sample_mixture_slice<R: Rng + ?Sized>(
    n: usize,
    params: &EpParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let p = params.p;
    if p >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "gamma-mixture slice sampler requires 0 < p < 1, got {p}"
        )));
    }
    let inv_p = 1.0 / p;
    let heavy = Gamma::new(2.0 + inv_p, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let light = Gamma::new(1.0 + inv_p, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let heavy_weight = 0.5 * (1.0 + p);
    let tau = params.tau();

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = if rng.random::<f64>() < heavy_weight {
            heavy.sample(rng)
        } else {
            light.sample(rng)
        };
        let half_width = tau * w.powf(inv_p);
        // Triangular kernel (1 - |b| / c)_+; each horizontal slice is an interval.
        let mut beta = 0.0_f64;
        for _ in 0..SLICE_STEPS {
            let height = 1.0 - beta.abs() / half_width;
            let level = rng.random::<f64>() * height;
            let reach = half_width * (1.0 - level);
            beta = (2.0 * rng.random::<f64>() - 1.0) * reach;
        }
        out.push(beta);
    }
    Ok(out)
}
