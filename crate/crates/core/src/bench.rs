//! Synthetic benchmarks: noise regimes, data generation, reconstruction
//! measures, foreground scoring and noise-density comparison.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alm::{factor_step, solve_weighted_l2, L2Options};
use crate::data::{FactorPair, ObservedMatrix};
use crate::ep::EpParams;
use crate::error::{Error, Result};
use crate::mixture::MoepModel;

/// A univariate noise law that can be sampled and evaluated.
pub trait NoiseDistribution: Send + Sync {
    fn sample(&self, rng: &mut dyn rand::RngCore) -> f64;
    fn log_pdf(&self, x: f64) -> f64;
}

impl NoiseDistribution for EpParams {
    fn sample(&self, mut rng: &mut dyn rand::RngCore) -> f64 {
        EpParams::sample(self, &mut rng)
    }

    fn log_pdf(&self, x: f64) -> f64 {
        EpParams::log_pdf(self, x)
    }
}

/// Uniform law on `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uniform {
    pub low: f64,
    pub high: f64,
}

impl NoiseDistribution for Uniform {
    fn sample(&self, rng: &mut dyn rand::RngCore) -> f64 {
        self.low + (self.high - self.low) * rng.random::<f64>()
    }

    fn log_pdf(&self, x: f64) -> f64 {
        if x >= self.low && x <= self.high {
            -(self.high - self.low).ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Point mass at zero; only sampling is meaningful.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Zero;

impl NoiseDistribution for Zero {
    fn sample(&self, _rng: &mut dyn rand::RngCore) -> f64 {
        0.0
    }

    fn log_pdf(&self, x: f64) -> f64 {
        if x == 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Weighted mixture of noise laws.
pub struct NoiseMixture {
    pub parts: Vec<(f64, Box<dyn NoiseDistribution>)>,
}

impl NoiseDistribution for NoiseMixture {
    fn sample(&self, rng: &mut dyn rand::RngCore) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (w, d) in &self.parts {
            acc += w;
            if u < acc {
                return d.sample(rng);
            }
        }
        self.parts
            .last()
            .expect("mixture is non-empty")
            .1
            .sample(rng)
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let terms: Vec<f64> = self
            .parts
            .iter()
            .map(|(w, d)| w.ln() + d.log_pdf(x))
            .collect();
        crate::special::log_sum_exp(&terms)
    }
}

impl NoiseDistribution for MoepModel {
    fn sample(&self, rng: &mut dyn rand::RngCore) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let comps = self.components();
        for c in comps {
            acc += c.pi;
            if u < acc {
                return NoiseDistribution::sample(&c.params(), rng);
            }
        }
        NoiseDistribution::sample(&comps[comps.len() - 1].params(), rng)
    }

    fn log_pdf(&self, x: f64) -> f64 {
        MoepModel::log_pdf(self, x)
    }
}

/// The six synthetic noise settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// `N(0, 0.04)`.
    Gaussian,
    /// Exponential power with `p = 0.2`, `σ = 0.2`.
    Ep,
    /// Laplace with scale `0.2`.
    Laplace,
    /// 12.5% of observed entries replaced by `U[-20, 20]` noise, the rest noiseless.
    Sparse,
    /// 25% `U[-5, 5]`, 25% `N(0, 0.04)`, 50% `N(0, 0.01)`.
    Mixture1,
    /// 37.5% EP with `p = 0.5`, `σ = 0.1`; 50% Laplace with scale `0.3`; 12.5% `N(0, 0.01)`.
    Mixture2,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::Gaussian,
        Regime::Ep,
        Regime::Laplace,
        Regime::Sparse,
        Regime::Mixture1,
        Regime::Mixture2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::Gaussian => "gaussian",
            Regime::Ep => "ep",
            Regime::Laplace => "laplace",
            Regime::Sparse => "sparse",
            Regime::Mixture1 => "mixture1",
            Regime::Mixture2 => "mixture2",
        }
    }

    /// Disjoint blocks `(fraction, law)` of observed entries. The last block
    /// takes whatever the floors of the earlier ones leave.
    pub fn blocks(&self) -> Vec<(f64, Box<dyn NoiseDistribution>)> {
        let ep =
            |p: f64, sigma: f64| Box::new(EpParams::from_sigma(p, sigma).expect("valid constants"));
        let gauss = |var: f64| Box::new(EpParams::gaussian(var).expect("valid constants"));
        let laplace = |b: f64| Box::new(EpParams::laplace(b).expect("valid constants"));
        match self {
            Regime::Gaussian => vec![(1.0, gauss(0.04))],
            Regime::Ep => vec![(1.0, ep(0.2, 0.2))],
            Regime::Laplace => vec![(1.0, laplace(0.2))],
            Regime::Sparse => vec![
                (
                    0.125,
                    Box::new(Uniform {
                        low: -20.0,
                        high: 20.0,
                    }),
                ),
                (0.875, Box::new(Zero)),
            ],
            Regime::Mixture1 => vec![
                (
                    0.25,
                    Box::new(Uniform {
                        low: -5.0,
                        high: 5.0,
                    }),
                ),
                (0.25, gauss(0.04)),
                (0.5, gauss(0.01)),
            ],
            Regime::Mixture2 => vec![
                (0.375, ep(0.5, 0.1)),
                (0.5, laplace(0.3)),
                (0.125, gauss(0.01)),
            ],
        }
    }

    /// The noise law as a mixture over its blocks.
    pub fn noise_law(&self) -> NoiseMixture {
        NoiseMixture {
            parts: self.blocks(),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown regime '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub missing: f64,
    pub regime: Regime,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(regime: Regime, seed: u64) -> Self {
        Self {
            m: 40,
            n: 20,
            r: 4,
            missing: 0.2,
            regime,
            seed,
        }
    }
}

/// Generated data with its ground truth.
#[derive(Debug, Clone)]
pub struct Synthetic {
    /// Noisy data; unobserved entries hold the clean value.
    pub y_no: DMatrix<f64>,
    pub mask: DMatrix<bool>,
    pub y_gt: DMatrix<f64>,
    pub u_gt: DMatrix<f64>,
    pub v_gt: DMatrix<f64>,
    /// Added noise, zero outside the mask.
    pub noise: DMatrix<f64>,
    /// Noise block index per entry (`usize::MAX` outside the mask).
    pub block: DMatrix<usize>,
}

impl Synthetic {
    pub fn observed(&self) -> ObservedMatrix {
        ObservedMatrix::new(self.y_no.clone(), self.mask.clone())
            .expect("generated data is consistent")
    }

    pub fn truth_factors(&self) -> FactorPair {
        FactorPair {
            u: self.u_gt.clone(),
            v: self.v_gt.clone(),
        }
    }
}

/// Low-rank data with exactly `⌊missing · m n⌋` missing entries and regime
/// noise on the observed ones.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    let SyntheticSpec {
        m,
        n,
        r,
        missing,
        regime,
        seed,
    } = *spec;
    if m == 0 || n == 0 || r == 0 || r > m.min(n) {
        return Err(Error::InvalidParameter(format!(
            "invalid size {m}x{n} with rank {r}"
        )));
    }
    if !(0.0..1.0).contains(&missing) {
        return Err(Error::InvalidParameter(format!(
            "missing fraction {missing} must lie in [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_gt = DMatrix::from_fn(m, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let v_gt = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y_gt = &u_gt * v_gt.transpose();

    let mut cells: Vec<usize> = (0..m * n).collect();
    cells.shuffle(&mut rng);
    let n_missing = (missing * (m * n) as f64).floor() as usize;
    let mut mask = DMatrix::from_element(m, n, true);
    for &c in &cells[..n_missing] {
        mask[(c % m, c / m)] = false;
    }
    let mut observed: Vec<usize> = (0..m * n).filter(|&c| mask[(c % m, c / m)]).collect();
    observed.shuffle(&mut rng);

    let blocks = regime.blocks();
    let total = observed.len();
    let mut noise = DMatrix::zeros(m, n);
    let mut block = DMatrix::from_element(m, n, usize::MAX);
    let mut start = 0;
    for (b, (frac, law)) in blocks.iter().enumerate() {
        let end = if b + 1 == blocks.len() {
            total
        } else {
            (start + (frac * total as f64).floor() as usize).min(total)
        };
        for &c in &observed[start..end] {
            let (i, j) = (c % m, c / m);
            noise[(i, j)] = law.sample(&mut rng);
            block[(i, j)] = b;
        }
        start = end;
    }
    let y_no = &y_gt + &noise;
    Ok(Synthetic {
        y_no,
        mask,
        y_gt,
        u_gt,
        v_gt,
        noise,
        block,
    })
}

/// Largest principal angle between the column spans of `a` and `b`.
///
/// Bases come from an SVD of each matrix, keeping singular values above
/// `max(m, k) ε σ_max`. With `Q_small` the basis of lower dimension, the
/// angle is `asin ‖(I - Q_big Q_bigᵀ) Q_small‖₂`, which stays accurate for
/// nearly identical subspaces.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "{} rows vs {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    if qa.ncols() == 0 || qb.ncols() == 0 {
        return Err(Error::Numerical("a zero matrix has no column span".into()));
    }
    let (small, big) = if qa.ncols() <= qb.ncols() {
        (qa, qb)
    } else {
        (qb, qa)
    };
    let proj = &small - &big * (big.transpose() * &small);
    let s = proj.singular_values().max();
    Ok(s.min(1.0).asin())
}

fn orthonormal_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("factor matrix".into()));
    }
    let svd = nalgebra::SVD::try_new(a.clone(), true, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let cutoff = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * smax;
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > cutoff && smax > 0.0)
        .collect();
    Ok(DMatrix::from_fn(a.nrows(), keep.len(), |i, c| {
        u[(i, keep[c])]
    }))
}

/// Reconstruction and subspace measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measures {
    /// `Σ_Ω |y_no - ũ ṽᵀ|`.
    pub c1: f64,
    /// `(Σ_Ω (y_no - ũ ṽᵀ)²)^{1/2}`.
    pub c2: f64,
    /// `Σ |y_gt - ũ ṽᵀ|` over every entry.
    pub c3: f64,
    /// `‖y_gt - ũ ṽᵀ‖_F`.
    pub c4: f64,
    /// Largest principal angle between `U_gt` and `Ũ`.
    pub c5: f64,
    /// Largest principal angle between `V_gt` and `Ṽ`.
    pub c6: f64,
}

impl Measures {
    pub fn as_array(&self) -> [f64; 6] {
        [self.c1, self.c2, self.c3, self.c4, self.c5, self.c6]
    }
}

/// Measures of estimated factors against the ground truth.
pub fn evaluate(factors: &FactorPair, truth: &Synthetic) -> Result<Measures> {
    let prod = factors.product();
    if prod.shape() != truth.y_gt.shape() {
        return Err(Error::Shape(format!(
            "estimate is {}x{}, truth is {}x{}",
            prod.nrows(),
            prod.ncols(),
            truth.y_gt.nrows(),
            truth.y_gt.ncols()
        )));
    }
    let mut c1 = 0.0;
    let mut c2 = 0.0;
    for ((&y, &p), &w) in truth.y_no.iter().zip(prod.iter()).zip(truth.mask.iter()) {
        if w {
            c1 += (y - p).abs();
            c2 += (y - p) * (y - p);
        }
    }
    let diff = &truth.y_gt - &prod;
    Ok(Measures {
        c1,
        c2: c2.sqrt(),
        c3: diff.iter().map(|d| d.abs()).sum(),
        c4: diff.norm(),
        c5: principal_angle(&truth.u_gt, &factors.u)?,
        c6: principal_angle(&truth.v_gt, &factors.v)?,
    })
}

/// Best F-measure over magnitude thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub fmeasure: f64,
    pub threshold: f64,
}

const MAX_THRESHOLDS: usize = 512;

/// Entries with `|detected| >= threshold` are labeled positive. Candidate
/// thresholds are the smallest magnitude (everything positive) and the
/// midpoints between consecutive distinct magnitudes, thinned evenly to at
/// most 512.
pub fn fmeasure(detected: &DMatrix<f64>, truth: &DMatrix<bool>) -> Result<FScore> {
    if detected.shape() != truth.shape() {
        return Err(Error::Shape("detected and truth shapes differ".into()));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::InvalidParameter(
            "truth support is empty; recall is undefined".into(),
        ));
    }
    let mut scored: Vec<(f64, bool)> = detected
        .iter()
        .zip(truth.iter())
        .map(|(d, &t)| (d.abs(), t))
        .collect();
    if scored.iter().any(|(d, _)| d.is_nan()) {
        return Err(Error::NonFinite("detected values".into()));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut unique: Vec<f64> = scored.iter().map(|s| s.0).collect();
    unique.dedup();
    let mut candidates = vec![unique[0]];
    candidates.extend(unique.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    if candidates.len() > MAX_THRESHOLDS {
        let last = candidates.len() - 1;
        candidates = (0..MAX_THRESHOLDS)
            .map(|i| candidates[i * last / (MAX_THRESHOLDS - 1)])
            .collect();
    }
    // Suffix counts of true labels over the ascending sort.
    let total = scored.len();
    let mut true_from = vec![0usize; total + 1];
    for i in (0..total).rev() {
        true_from[i] = true_from[i + 1] + scored[i].1 as usize;
    }
    let mut best = FScore {
        precision: 0.0,
        recall: 0.0,
        fmeasure: -1.0,
        threshold: candidates[0],
    };
    for &thr in &candidates {
        let first = scored.partition_point(|s| s.0 < thr);
        let predicted = total - first;
        let tp = true_from[first];
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = tp as f64 / positives as f64;
        let f = if tp > 0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if f > best.fmeasure {
            best = FScore {
                precision,
                recall,
                fmeasure: f,
                threshold: thr,
            };
        }
    }
    Ok(best)
}

/// Monte-Carlo estimate of `KL(true ‖ fitted)` from `n_samples` draws of the
/// true noise.
pub fn density_recovery_divergence(
    fitted: &dyn NoiseDistribution,
    truth: &dyn NoiseDistribution,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples < 10_000 {
        return Err(Error::InvalidParameter(format!(
            "need at least 10^4 samples, got {n_samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let x = truth.sample(&mut rng);
        acc += truth.log_pdf(x) - fitted.log_pdf(x);
    }
    let kl = acc / n_samples as f64;
    if kl.is_nan() {
        return Err(Error::NonFinite("divergence estimate".into()));
    }
    Ok(kl)
}

/// `(x, true density, fitted density)` on an even grid over `[lo, hi]`.
pub fn density_curves(
    fitted: &dyn NoiseDistribution,
    truth: &dyn NoiseDistribution,
    lo: f64,
    hi: f64,
    points: usize,
) -> Vec<(f64, f64, f64)> {
    let step = if points > 1 {
        (hi - lo) / (points - 1) as f64
    } else {
        0.0
    };
    (0..points)
        .map(|i| {
            let x = lo + step * i as f64;
            (x, truth.log_pdf(x).exp(), fitted.log_pdf(x).exp())
        })
        .collect()
}

/// Least-squares factorization over the observed entries, started from the
/// truncated SVD of the zero-filled data.
pub fn svd_baseline(y: &ObservedMatrix, rank: usize) -> Result<FactorPair> {
    let init = factor_step(y.values(), rank)?;
    let weights = y.mask().map(|b| if b { 1.0 } else { 0.0 });
    let out = solve_weighted_l2(
        y,
        &weights,
        rank,
        &init,
        &L2Options {
            max_iter: 500,
            tol: 1e-12,
        },
    )?;
    Ok(out.factors)
}

/// Video-like test data: a low-rank background over `frames` columns of
/// `height · width` pixels and a moving square of heavy-tailed noise.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub data: Synthetic,
    /// Entries inside the moving block.
    pub support: DMatrix<bool>,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub rank: usize,
    pub block: usize,
    /// Variance of the Gaussian background noise.
    pub background_variance: f64,
    /// Shape of the block noise.
    pub block_p: f64,
    /// Scale `τ` of the block noise (density `∝ exp(-|x/τ|^p)`).
    pub block_tau: f64,
    pub seed: u64,
}

impl VideoSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            height: 16,
            width: 16,
            frames: 20,
            rank: 2,
            block: 4,
            background_variance: 0.01,
            block_p: 0.5,
            block_tau: 0.2,
            seed,
        }
    }
}

/// Rows index pixels `y · width + x`, columns index frames. The block starts
/// in the top-left corner and moves one pixel per frame along the diagonal,
/// wrapping inside the frame.
pub fn synthetic_video(spec: &VideoSpec) -> Result<SyntheticVideo> {
    let VideoSpec {
        height,
        width,
        frames,
        rank,
        block,
        background_variance,
        block_p,
        block_tau,
        seed,
    } = *spec;
    if block == 0 || block > height.min(width) {
        return Err(Error::InvalidParameter(format!(
            "block size {block} does not fit"
        )));
    }
    let m = height * width;
    if rank == 0 || rank > m.min(frames) {
        return Err(Error::InvalidParameter(format!("rank {rank} is invalid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_gt = DMatrix::from_fn(m, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let v_gt = DMatrix::from_fn(frames, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y_gt = &u_gt * v_gt.transpose();
    let background = EpParams::gaussian(background_variance)?;
    let heavy = EpParams::from_tau(block_p, block_tau)?;
    let mut support = DMatrix::from_element(m, frames, false);
    let mut noise = DMatrix::zeros(m, frames);
    let mut block_id = DMatrix::zeros(m, frames);
    for f in 0..frames {
        let oy = f % (height - block + 1);
        let ox = f % (width - block + 1);
        for dy in 0..block {
            for dx in 0..block {
                support[((oy + dy) * width + ox + dx, f)] = true;
            }
        }
    }
    for j in 0..frames {
        for i in 0..m {
            if support[(i, j)] {
                noise[(i, j)] = heavy.sample(&mut rng);
                block_id[(i, j)] = 1;
            } else {
                noise[(i, j)] = background.sample(&mut rng);
            }
        }
    }
    let y_no = &y_gt + &noise;
    Ok(SyntheticVideo {
        data: Synthetic {
            y_no,
            mask: DMatrix::from_element(m, frames, true),
            y_gt,
            u_gt,
            v_gt,
            noise,
            block: block_id,
        },
        support,
        height,
        width,
        frames,
    })
}
