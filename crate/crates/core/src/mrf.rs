//! Markov random field prior over the component indicators: mean-field
//! E-step, variational lower bound and the variational EM driver.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::ObservedMatrix;
use crate::em::{fit_with, EmConfig, EmDiagnostics, EmResult, ExactPosterior, Posterior};
use crate::error::{Error, Result};
use crate::mixture::{e_step, MoepModel, Responsibilities};
use crate::special::log_sum_exp;

/// Which matrix axis indexes pixels; the other one indexes frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelAxis {
    /// Row `y · width + x`, column = frame.
    #[default]
    Rows,
    Columns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neighborhood {
    /// Up, down, left and right within a frame.
    Spatial4,
    /// The four spatial neighbors plus the same pixel in the previous and
    /// next frame.
    #[default]
    SpatioTemporal6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub pixels: PixelAxis,
    pub neighborhood: Neighborhood,
}

impl GridShape {
    /// Pixels on rows, six-neighbor scheme.
    pub fn new(height: usize, width: usize, frames: usize) -> Self {
        Self {
            height,
            width,
            frames,
            pixels: PixelAxis::Rows,
            neighborhood: Neighborhood::default(),
        }
    }

    pub fn matrix_shape(&self) -> (usize, usize) {
        let pixels = self.height * self.width;
        match self.pixels {
            PixelAxis::Rows => (pixels, self.frames),
            PixelAxis::Columns => (self.frames, pixels),
        }
    }

    /// `(pixel, frame)` to `(row, column)`.
    fn entry(&self, pixel: usize, frame: usize) -> (usize, usize) {
        match self.pixels {
            PixelAxis::Rows => (pixel, frame),
            PixelAxis::Columns => (frame, pixel),
        }
    }

    fn pixel_frame(&self, i: usize, j: usize) -> (usize, usize) {
        match self.pixels {
            PixelAxis::Rows => (i, j),
            PixelAxis::Columns => (j, i),
        }
    }

    pub fn check(&self, y: &ObservedMatrix) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::InvalidParameter(
                "grid dimensions must be positive".into(),
            ));
        }
        if self.matrix_shape() != y.shape() {
            return Err(Error::Shape(format!(
                "a {}x{}x{} grid needs a {:?} matrix, got {:?}",
                self.height,
                self.width,
                self.frames,
                self.matrix_shape(),
                y.shape()
            )));
        }
        Ok(())
    }
}

/// Neighbor lists over the observed entries, indexed like the residual
/// vector (compressed rows).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl NeighborGraph {
    pub fn build(grid: &GridShape, y: &ObservedMatrix) -> Result<Self> {
        grid.check(y)?;
        let (m, n) = y.shape();
        let mut index = vec![usize::MAX; m * n];
        for (idx, &(i, j)) in y.omega().iter().enumerate() {
            index[i * n + j] = idx;
        }
        let (h, w, f) = (
            grid.height as isize,
            grid.width as isize,
            grid.frames as isize,
        );
        let mut steps: Vec<(isize, isize, isize)> =
            vec![(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0)];
        if grid.neighborhood == Neighborhood::SpatioTemporal6 {
            steps.extend([(0, 0, -1), (0, 0, 1)]);
        }
        let mut offsets = Vec::with_capacity(y.omega_size() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for &(i, j) in y.omega() {
            let (pixel, frame) = grid.pixel_frame(i, j);
            let (py, px) = ((pixel / grid.width) as isize, (pixel % grid.width) as isize);
            for &(dy, dx, dt) in &steps {
                let (qy, qx, qt) = (py + dy, px + dx, frame as isize + dt);
                if qy < 0 || qy >= h || qx < 0 || qx >= w || qt < 0 || qt >= f {
                    continue;
                }
                let (qi, qj) = grid.entry((qy * w + qx) as usize, qt as usize);
                let q = index[qi * n + qj];
                if q != usize::MAX {
                    neighbors.push(q);
                }
            }
            offsets.push(neighbors.len());
        }
        Ok(Self { offsets, neighbors })
    }

    /// Builds a graph from explicit lists; every relation must be symmetric.
    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        for (a, list) in lists.iter().enumerate() {
            for &b in list {
                if b >= n || b == a || !lists[b].contains(&a) {
                    return Err(Error::InvalidParameter(format!(
                        "neighbor {b} of {a} is invalid or one-sided"
                    )));
                }
            }
        }
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        for list in lists {
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Ok(Self { offsets, neighbors })
    }

    pub fn n_entries(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn neighbors(&self, idx: usize) -> &[usize] {
        &self.neighbors[self.offsets[idx]..self.offsets[idx + 1]]
    }

    /// Number of ordered neighbor pairs.
    pub fn ordered_pairs(&self) -> usize {
        self.neighbors.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MrfConfig {
    /// Coupling strength `τ`.
    pub tau: f64,
    pub max_sweeps: usize,
    /// Weight of the new sweep in `γ ← (1 - d) γ_old + d γ_new`.
    pub damping: f64,
    /// Largest responsibility change that ends the sweeps.
    pub tol: f64,
}

impl Default for MrfConfig {
    fn default() -> Self {
        Self {
            tau: 10.0,
            max_sweeps: 100,
            damping: 0.5,
            tol: 1e-6,
        }
    }
}

impl MrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tau must be finite and >= 0, got {}",
                self.tau
            )));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidParameter(
                "max_sweeps must be at least 1".into(),
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

#[derive(Debug, Clone)]
pub struct VariationalEStep {
    pub resp: Responsibilities,
    pub sweeps: usize,
    pub converged: bool,
}

fn check_inputs(
    residuals: &[f64],
    model: &MoepModel,
    graph: &NeighborGraph,
    resp: &Responsibilities,
) -> Result<()> {
    if graph.n_entries() != residuals.len() || resp.n_entries() != residuals.len() {
        return Err(Error::Shape(format!(
            "{} residuals, {} graph entries, {} responsibility rows",
            residuals.len(),
            graph.n_entries(),
            resp.n_entries()
        )));
    }
    if resp.n_components() != model.k() {
        return Err(Error::Shape(format!(
            "{} responsibility columns for {} components",
            resp.n_components(),
            model.k()
        )));
    }
    Ok(())
}

/// `ln π_k + ln f_k(e)` for every entry, entry-major.
fn data_terms(residuals: &[f64], model: &MoepModel) -> Result<Vec<f64>> {
    let k = model.k();
    let terms = model.log_terms();
    let mut out = vec![0.0; residuals.len() * k];
    for (&e, row) in residuals.iter().zip(out.chunks_exact_mut(k)) {
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("residual {e}")));
        }
        terms.fill(e, row);
    }
    Ok(out)
}

/// Damped synchronous mean-field sweeps of
/// `γ_ijk ∝ π_k f_k(e_ij) exp(τ Σ_{N(i,j)} γ_pqk)` from `init`.
/// With `τ = 0` the exact posterior is returned.
pub fn variational_e_step(
    residuals: &[f64],
    model: &MoepModel,
    graph: &NeighborGraph,
    mrf: &MrfConfig,
    init: &Responsibilities,
) -> Result<VariationalEStep> {
    mrf.validate()?;
    check_inputs(residuals, model, graph, init)?;
    if mrf.tau == 0.0 {
        return Ok(VariationalEStep {
            resp: e_step(residuals, model)?.resp,
            sweeps: 0,
            converged: true,
        });
    }
    let k = model.k();
    let data = data_terms(residuals, model)?;
    let mut gamma = init.clone();
    gamma.renormalize();
    let mut fresh = vec![0.0; k];
    let mut next = vec![0.0; residuals.len() * k];
    for sweep in 1..=mrf.max_sweeps {
        let old = gamma.as_slice();
        for (idx, out) in next.chunks_exact_mut(k).enumerate() {
            fresh.copy_from_slice(&data[idx * k..(idx + 1) * k]);
            for &q in graph.neighbors(idx) {
                for (f, &g) in fresh.iter_mut().zip(&old[q * k..(q + 1) * k]) {
                    *f += mrf.tau * g;
                }
            }
            let lse = log_sum_exp(&fresh);
            let row = &old[idx * k..(idx + 1) * k];
            for ((o, &f), &g) in out.iter_mut().zip(&fresh).zip(row) {
                let target = if lse.is_finite() {
                    (f - lse).exp()
                } else {
                    1.0 / k as f64
                };
                *o = (1.0 - mrf.damping) * g + mrf.damping * target;
            }
        }
        let change = next
            .iter()
            .zip(old)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        gamma.as_mut_slice().copy_from_slice(&next);
        if change < mrf.tol {
            return Ok(VariationalEStep {
                resp: gamma,
                sweeps: sweep,
                converged: true,
            });
        }
    }
    Ok(VariationalEStep {
        resp: gamma,
        sweeps: mrf.max_sweeps,
        converged: false,
    })
}

/// Variational lower bound without its additive constant:
/// `Σ γ (ln π + ln f) + τ/8 Σ_{ordered pairs} Σ_k (2γ - 1)(2γ' - 1) - Σ γ ln γ`.
///
/// The `τ/8` weight on ordered pairs makes the mean-field update above the
/// coordinate-wise maximizer of this bound.
pub fn lower_bound(
    residuals: &[f64],
    model: &MoepModel,
    graph: &NeighborGraph,
    mrf: &MrfConfig,
    resp: &Responsibilities,
) -> Result<f64> {
    check_inputs(residuals, model, graph, resp)?;
    let k = model.k();
    let data = data_terms(residuals, model)?;
    let gamma = resp.as_slice();
    let mut expected = 0.0;
    let mut entropy = 0.0;
    for (&g, &d) in gamma.iter().zip(&data) {
        if g > 0.0 {
            expected += g * d;
            entropy -= g * g.ln();
        }
    }
    let mut coupling = 0.0;
    if mrf.tau != 0.0 {
        for idx in 0..graph.n_entries() {
            let row = &gamma[idx * k..(idx + 1) * k];
            for &q in graph.neighbors(idx) {
                let other = &gamma[q * k..(q + 1) * k];
                coupling += row
                    .iter()
                    .zip(other)
                    .map(|(a, b)| (2.0 * a - 1.0) * (2.0 * b - 1.0))
                    .sum::<f64>();
            }
        }
    }
    Ok(expected + mrf.tau / 8.0 * coupling + entropy)
}

/// Mean-field posterior; the objective is the lower bound up to a constant
/// per component count. A refresh that would lower it keeps the previous
/// responsibilities.
struct MrfPosterior<'a> {
    graph: &'a NeighborGraph,
    mrf: &'a MrfConfig,
}

impl MrfPosterior<'_> {
    fn sweep(
        &self,
        residuals: &[f64],
        model: &MoepModel,
        init: &Responsibilities,
        diag: &mut EmDiagnostics,
    ) -> Result<(Responsibilities, f64)> {
        let out = variational_e_step(residuals, model, self.graph, self.mrf, init)?;
        if !out.converged {
            diag.estep_unconverged += 1;
        }
        let value = self.objective(residuals, model, &out.resp)?;
        Ok((out.resp, value))
    }

    /// [`lower_bound`] minus `τ/8 · K` per ordered pair. With normalized rows
    /// the coupling sum equals `4 Σ_k γ γ' + K - 4`, so the subtracted part is
    /// a constant that only moves when a component is pruned.
    fn objective(
        &self,
        residuals: &[f64],
        model: &MoepModel,
        resp: &Responsibilities,
    ) -> Result<f64> {
        let bound = lower_bound(residuals, model, self.graph, self.mrf, resp)?;
        Ok(bound - self.mrf.tau / 8.0 * self.graph.ordered_pairs() as f64 * model.k() as f64)
    }
}

impl Posterior for MrfPosterior<'_> {
    fn initial(
        &mut self,
        residuals: &[f64],
        model: &MoepModel,
        diag: &mut EmDiagnostics,
    ) -> Result<(Responsibilities, f64)> {
        let exact = e_step(residuals, model)?;
        diag.underflows += exact.underflows;
        self.sweep(residuals, model, &exact.resp, diag)
    }

    fn refresh(
        &mut self,
        residuals: &[f64],
        model: &MoepModel,
        mut prev: Responsibilities,
        diag: &mut EmDiagnostics,
    ) -> Result<(Responsibilities, f64)> {
        prev.renormalize();
        let before = self.objective(residuals, model, &prev)?;
        let (resp, value) = self.sweep(residuals, model, &prev, diag)?;
        if value >= before {
            Ok((resp, value))
        } else {
            Ok((prev, before))
        }
    }
}

/// Variational EM for the factorization with an MRF prior on the
/// indicators. The M-step is the one of [`crate::em::fit_pmoep`]; with
/// `τ = 0` the result is identical to it.
pub fn fit_pmoep_mrf(
    y: &ObservedMatrix,
    grid: &GridShape,
    config: &EmConfig,
    mrf: &MrfConfig,
) -> Result<EmResult> {
    mrf.validate()?;
    let graph = NeighborGraph::build(grid, y)?;
    if mrf.tau == 0.0 {
        return fit_with(y, config, || ExactPosterior);
    }
    fit_with(y, config, || MrfPosterior { graph: &graph, mrf })
}

/// Responsibilities of component `k` laid out on the matrix; missing entries
/// are zero.
pub fn responsibility_map(
    y: &ObservedMatrix,
    resp: &Responsibilities,
    k: usize,
) -> Result<DMatrix<f64>> {
    if resp.n_entries() != y.omega_size() || k >= resp.n_components() {
        return Err(Error::Shape(
            "responsibilities do not match the data".into(),
        ));
    }
    let (m, n) = y.shape();
    let mut out = DMatrix::zeros(m, n);
    for (idx, &(i, j)) in y.omega().iter().enumerate() {
        out[(i, j)] = resp.row(idx)[k];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::EpComponent;

    fn two_gaussians() -> MoepModel {
        MoepModel::new(vec![
            EpComponent {
                p: 2.0,
                eta: 50.0,
                pi: 0.6,
            },
            EpComponent {
                p: 2.0,
                eta: 0.5,
                pi: 0.4,
            },
        ])
        .unwrap()
    }

    fn square(tau: f64) -> (NeighborGraph, MrfConfig) {
        let y = ObservedMatrix::fully_observed(DMatrix::zeros(4, 1)).unwrap();
        let grid = GridShape {
            neighborhood: Neighborhood::Spatial4,
            ..GridShape::new(2, 2, 1)
        };
        (
            NeighborGraph::build(&grid, &y).unwrap(),
            MrfConfig {
                tau,
                max_sweeps: 500,
                ..MrfConfig::default()
            },
        )
    }

    #[test]
    fn interior_entries_have_six_neighbors() {
        let y = ObservedMatrix::fully_observed(DMatrix::zeros(9, 3)).unwrap();
        let g = NeighborGraph::build(&GridShape::new(3, 3, 3), &y).unwrap();
        // Centre pixel 4 of the middle frame: row 4, column 1, column-major order.
        let idx = y.omega().iter().position(|&e| e == (4, 1)).unwrap();
        assert_eq!(g.neighbors(idx).len(), 6);
        let corner = y.omega().iter().position(|&e| e == (0, 0)).unwrap();
        assert_eq!(g.neighbors(corner).len(), 3);
    }

    #[test]
    fn neighbor_relation_is_symmetric_and_skips_missing() {
        let mut mask = DMatrix::from_element(12, 4, true);
        mask[(5, 2)] = false;
        let y = ObservedMatrix::new(DMatrix::zeros(12, 4), mask).unwrap();
        let g = NeighborGraph::build(&GridShape::new(3, 4, 4), &y).unwrap();
        for a in 0..g.n_entries() {
            for &b in g.neighbors(a) {
                assert!(g.neighbors(b).contains(&a));
            }
        }
        assert_eq!(g.n_entries(), 47);
    }

    #[test]
    fn transposed_layout_matches() {
        let rows = ObservedMatrix::fully_observed(DMatrix::zeros(6, 2)).unwrap();
        let cols = ObservedMatrix::fully_observed(DMatrix::zeros(2, 6)).unwrap();
        let a = NeighborGraph::build(&GridShape::new(2, 3, 2), &rows).unwrap();
        let grid = GridShape {
            pixels: PixelAxis::Columns,
            ..GridShape::new(2, 3, 2)
        };
        let b = NeighborGraph::build(&grid, &cols).unwrap();
        assert_eq!(a.ordered_pairs(), b.ordered_pairs());
        assert!(NeighborGraph::build(&grid, &rows).is_err());
    }

    #[test]
    fn zero_coupling_is_the_exact_posterior() {
        let model = two_gaussians();
        let residuals = [0.01, -0.3, 1.2, 0.05];
        let (graph, mrf) = square(0.0);
        let init = Responsibilities::uniform(4, 2);
        let out = variational_e_step(&residuals, &model, &graph, &mrf, &init).unwrap();
        let exact = e_step(&residuals, &model).unwrap();
        assert_eq!(out.resp, exact.resp);
        let bound = lower_bound(&residuals, &model, &graph, &mrf, &out.resp).unwrap();
        assert!((bound - exact.log_likelihood).abs() < 1e-10);
    }

    #[test]
    fn isolated_entry_matches_exact_posterior() {
        let model = two_gaussians();
        let graph = NeighborGraph::from_lists(&[vec![]]).unwrap();
        let mrf = MrfConfig::default();
        let out = variational_e_step(
            &[0.4],
            &model,
            &graph,
            &mrf,
            &Responsibilities::uniform(1, 2),
        )
        .unwrap();
        let exact = e_step(&[0.4], &model).unwrap();
        // Damped sweeps stop within about the sweep tolerance of the fixed point.
        for (a, b) in out.resp.as_slice().iter().zip(exact.resp.as_slice()) {
            assert!((a - b).abs() < 2e-6);
        }
    }

    #[test]
    fn strong_coupling_reaches_consensus() {
        let model = MoepModel::new(vec![
            EpComponent {
                p: 2.0,
                eta: 1.0,
                pi: 0.5,
            },
            EpComponent {
                p: 2.0,
                eta: 1.0,
                pi: 0.5,
            },
        ])
        .unwrap();
        let (graph, mrf) = square(10.0);
        let init = Responsibilities::from_rows(2, [0.55, 0.45].repeat(4)).unwrap();
        let out = variational_e_step(&[0.0; 4], &model, &graph, &mrf, &init).unwrap();
        assert!(out.converged);
        for idx in 0..4 {
            assert!(out.resp.row(idx)[0] > 0.99);
        }
    }

    #[test]
    fn single_component_bound() {
        let model = MoepModel::new(vec![EpComponent {
            p: 1.0,
            eta: 2.0,
            pi: 1.0,
        }])
        .unwrap();
        let (graph, mrf) = square(10.0);
        let residuals = [0.1, -0.2, 0.3, 0.0];
        let resp = Responsibilities::uniform(4, 1);
        let data: f64 = residuals.iter().map(|&e| model.log_pdf(e)).sum();
        let bound = lower_bound(&residuals, &model, &graph, &mrf, &resp).unwrap();
        assert_eq!(graph.ordered_pairs(), 8);
        assert!((bound - (data + 10.0 / 8.0 * 8.0)).abs() < 1e-12);
    }

    #[test]
    fn hand_set_two_by_two_bound() {
        let model = two_gaussians();
        let (graph, mrf) = square(2.0);
        let residuals = [0.0, 0.5, -1.0, 0.25];
        let g = [0.9, 0.1, 0.3, 0.7, 0.0, 1.0, 0.5, 0.5];
        let resp = Responsibilities::from_rows(2, g.to_vec()).unwrap();
        let mut direct = 0.0;
        for e in 0..4 {
            for k in 0..2 {
                let c = model.components()[k];
                let lp = c.pi.ln() + c.params().log_pdf(residuals[e]);
                let gk = g[e * 2 + k];
                direct += gk * lp;
                if gk > 0.0 {
                    direct -= gk * gk.ln();
                }
            }
        }
        // Square 0-1 / 2-3 rows, 0-2 / 1-3 columns.
        for (a, b) in [(0, 1), (2, 3), (0, 2), (1, 3)] {
            for k in 0..2 {
                direct += 2.0 * 2.0 / 8.0 * (2.0 * g[a * 2 + k] - 1.0) * (2.0 * g[b * 2 + k] - 1.0);
            }
        }
        let bound = lower_bound(&residuals, &model, &graph, &mrf, &resp).unwrap();
        assert!((bound - direct).abs() < 1e-12, "{bound} vs {direct}");
    }

    #[test]
    fn sweeps_keep_rows_normalized() {
        let model = two_gaussians();
        let (graph, _) = square(0.0);
        let mrf = MrfConfig {
            tau: 25.0,
            max_sweeps: 3,
            damping: 1.0,
            tol: 1e-12,
        };
        let init =
            Responsibilities::from_rows(2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = variational_e_step(&[0.0, 0.1, -0.1, 2.0], &model, &graph, &mrf, &init).unwrap();
        assert!(out.resp.max_row_error() < 1e-12);
        assert!(out.resp.as_slice().iter().all(|g| (0.0..=1.0).contains(g)));
    }

    #[test]
    fn config_validation() {
        assert!(MrfConfig {
            damping: 0.0,
            ..MrfConfig::default()
        }
        .validate()
        .is_err());
        assert!(MrfConfig {
            tau: f64::NAN,
            ..MrfConfig::default()
        }
        .validate()
        .is_err());
        assert!(MrfConfig::default().validate().is_ok());
    }
}
