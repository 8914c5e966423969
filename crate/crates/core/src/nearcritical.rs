//! Critical temperature with a small external field.
//!
//! The field is carried by a ghost site. With renormalized field `h` and
//! scale factor `Θ`, the lattice field is `H = h Θ / β_c`, so that
//! `β_c H Σ_x S_x = h Φ(1_window)`. For `H > 0` a site's spin average is
//! the probability that it is joined to the ghost, which is the estimator
//! used below for magnetizations and mean fields.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clusters::{label_with, Labels, UnionFind};
use crate::error::{invalid, Result};
use crate::exec::{try_map, Execution};
use crate::lattice::{LatticeGeometry, Region};
use crate::sampler::{
    ghost_p_from_field, sample_ensemble, BondConfiguration, ChainConfig, Ensemble, ModelParams,
    SpinConfiguration, BETA_C,
};
use crate::stats::{batch_mean, fit_exponential, ExponentialFit, TwoPointAccumulator, TwoPointRow, DEFAULT_BLOCKS};

/// Critical Ising model in renormalized field `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostModel {
    pub h: f64,
    pub theta: f64,
    /// Where the field acts; `None` means the whole torus.
    pub window: Option<Region>,
}

impl GhostModel {
    pub fn new(h: f64, theta: f64) -> Result<Self> {
        if !(h >= 0.0) || !h.is_finite() {
            return Err(invalid(format!("renormalized field must be finite and >= 0, got {h}")));
        }
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(invalid(format!("scale factor must be positive, got {theta}")));
        }
        Ok(Self { h, theta, window: None })
    }

    pub fn with_window(mut self, window: Option<Region>) -> Self {
        self.window = window;
        self
    }

    /// Lattice field `H = h Θ / β_c`.
    pub fn field(&self) -> f64 {
        self.h * self.theta / BETA_C
    }

    pub fn ghost_p(&self) -> f64 {
        ghost_p_from_field(self.field())
    }

    pub fn params(&self) -> ModelParams {
        ModelParams::critical_ising().with_field(self.field()).with_field_window(self.window)
    }
}

/// Swendsen–Wang on the lattice plus ghost. At `h = 0` this is exactly the
/// zero-field chain (same generator consumption, same stream).
pub fn sample_ghost_ensemble<'g>(
    geom: &'g LatticeGeometry,
    model: &GhostModel,
    chain: &ChainConfig,
) -> Result<Ensemble<'g>> {
    sample_ensemble(geom, &model.params(), chain)
}

/// Runs one chain, handing each retained state and its cluster labels to
/// `visit`.
pub fn for_each_labeled(
    geom: &LatticeGeometry,
    params: &ModelParams,
    chain: &ChainConfig,
    mut visit: impl FnMut(&BondConfiguration, &SpinConfiguration, &Labels),
) -> Result<()> {
    let mut ens = sample_ensemble(geom, params, chain)?;
    let mut uf = UnionFind::new(geom.n_sites());
    while let Some((_, bonds, spins)) = ens.next_state() {
        let labels = label_with(geom, bonds, &mut uf);
        visit(bonds, spins, &labels);
    }
    Ok(())
}

/// Sites joined to the ghost, optionally only those in `sites`.
pub fn ghost_connected(labels: &Labels, sites: Option<&[u32]>) -> usize {
    match sites {
        None => labels
            .sizes
            .iter()
            .zip(&labels.ghost)
            .filter(|(_, &g)| g)
            .map(|(&s, _)| s as usize)
            .sum(),
        Some(sites) => sites.iter().filter(|&&s| labels.ghost[labels.id[s as usize] as usize]).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnetizationPoint {
    pub h: f64,
    /// Lattice field `H`.
    pub field: f64,
    /// Volume-averaged `<S_0>`: the ghost-connected fraction for `h > 0`,
    /// the spin average at `h = 0`.
    pub m: f64,
    pub stderr: f64,
    /// Plain spin average, for comparison.
    pub m_spins: f64,
    pub m_spins_stderr: f64,
    pub n_samples: usize,
}

/// `<S_0>` for every `h` on the grid. Grid point `i` runs on stream
/// `chain.stream + i`.
pub fn magnetization_curve(
    geom: &LatticeGeometry,
    theta: f64,
    h_grid: &[f64],
    window: Option<Region>,
    chain: &ChainConfig,
    exec: Execution,
) -> Result<Vec<MagnetizationPoint>> {
    let models = h_grid
        .iter()
        .map(|&h| Ok(GhostModel::new(h, theta)?.with_window(window)))
        .collect::<Result<Vec<_>>>()?;
    let n = geom.n_sites() as f64;
    let jobs: Vec<(usize, GhostModel)> = models.into_iter().enumerate().collect();
    try_map(exec, jobs, |(i, model)| {
        let cfg = chain.clone().stream(chain.stream + i as u64);
        let mut ghost = Vec::with_capacity(cfg.n_samples);
        let mut spin = Vec::with_capacity(cfg.n_samples);
        for_each_labeled(geom, &model.params(), &cfg, |_, spins, labels| {
            ghost.push(ghost_connected(labels, None) as f64 / n);
            spin.push(spins.magnetization() as f64 / n);
        })?;
        let (m_spins, m_spins_stderr) = batch_mean(&spin, DEFAULT_BLOCKS)?;
        let (m, stderr) = if model.field() > 0.0 {
            batch_mean(&ghost, DEFAULT_BLOCKS)?
        } else {
            (m_spins, m_spins_stderr)
        };
        Ok(MagnetizationPoint {
            h: model.h,
            field: model.field(),
            m,
            stderr,
            m_spins,
            m_spins_stderr,
            n_samples: cfg.n_samples,
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedCorrelation {
    pub h: f64,
    /// `P(x <-> x + r e, cluster avoids the ghost)` along both axes.
    pub rows: Vec<TwoPointRow>,
    pub fit: Option<ExponentialFit>,
    pub fit_window: (usize, usize),
}

/// Truncated two-point function under `model`, with an exponential fit
/// over separations in `fit_window` (inclusive, lattice units). The fit is
/// skipped when fewer than three rows in the window have positive values.
pub fn truncated_correlation(
    geom: &LatticeGeometry,
    model: &GhostModel,
    chain: &ChainConfig,
    r_max: usize,
    fit_window: (usize, usize),
) -> Result<TruncatedCorrelation> {
    let mut acc = TwoPointAccumulator::new(geom, r_max, true)?;
    for_each_labeled(geom, &model.params(), chain, |_, _, labels| acc.add(geom, labels))?;
    let rows = acc.table(geom)?;
    let fit = fit_correlation_window(&rows, fit_window, true);
    Ok(TruncatedCorrelation { h: model.h, rows, fit, fit_window })
}

/// Exponential fit of two-point rows over `window`. With `weighted`, each
/// point is weighted by its standard error.
pub fn fit_correlation_window(rows: &[TwoPointRow], window: (usize, usize), weighted: bool) -> Option<ExponentialFit> {
    let pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter(|r| r.r >= window.0 && r.r <= window.1 && r.tau > 0.0)
        .map(|r| (r.r as f64, r.tau, if weighted { r.stderr } else { 0.0 }))
        .collect();
    fit_exponential(&pts).ok()
}

/// Thermodynamic integration of the mean field over `[0, h]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyEstimate {
    pub t_grid: Vec<f64>,
    /// `E_t[Φ(1_window)]` and its standard error at each grid point.
    pub mean_field: Vec<(f64, f64)>,
    /// Cumulative `f̂(t_j) = area^{-1} ∫_0^{t_j} E_t[Φ] dt` (trapezoid rule)
    /// and its standard error, grid points being independent chains.
    pub f_hat: Vec<(f64, f64)>,
    /// Continuum area of the window.
    pub area: f64,
}

impl FreeEnergyEstimate {
    /// `f̂` at a grid point.
    pub fn at(&self, t: f64) -> Option<(f64, f64)> {
        self.t_grid.iter().position(|&g| g == t).map(|i| self.f_hat[i])
    }
}

/// The default grid: `0` followed by `h 2^{-k}` for `k = 6, ..., 0` and then
/// `2h`, nine points geometric near zero.
pub fn default_free_energy_grid(h: f64) -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend((0..=6).rev().map(|k| h / (1u64 << k) as f64));
    g.push(2.0 * h);
    g
}

pub fn check_free_energy_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.first() != Some(&0.0) {
        return Err(invalid("free-energy grid must start at 0"));
    }
    if t_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("free-energy grid must be strictly increasing"));
    }
    Ok(())
}

/// Continuum area of the field window (the whole lattice for `None`).
pub fn window_area(geom: &LatticeGeometry, window_sites: Option<&[u32]>) -> f64 {
    window_sites.map_or(geom.n_sites(), |s| s.len()) as f64 * geom.spacing().powi(2)
}

/// Cumulative trapezoid integral of per-grid-point mean fields, each with
/// an independent standard error.
pub fn integrate_free_energy(t_grid: &[f64], mean_field: Vec<(f64, f64)>, area: f64) -> FreeEnergyEstimate {
    let mut f_hat = vec![(0.0, 0.0)];
    let mut var_weights = vec![0.0; t_grid.len()];
    let mut acc = 0.0;
    for j in 1..t_grid.len() {
        let dt = t_grid[j] - t_grid[j - 1];
        acc += 0.5 * dt * (mean_field[j - 1].0 + mean_field[j].0);
        var_weights[j - 1] += 0.5 * dt;
        var_weights[j] += 0.5 * dt;
        let var: f64 = (0..=j).map(|k| (var_weights[k] * mean_field[k].1).powi(2)).sum();
        f_hat.push((acc / area, var.sqrt() / area));
    }
    FreeEnergyEstimate { t_grid: t_grid.to_vec(), mean_field, f_hat, area }
}

/// Free-energy density by thermodynamic integration. The field acts on
/// `window` (the whole torus for `None`) and the integrand is
/// `E_t[Φ(1_window)] = Θ Σ_{x ∈ window} P_t(x <-> ghost)`, which vanishes
/// identically at `t = 0`. Grid point `i` runs on stream `chain.stream + i`.
pub fn free_energy_density(
    geom: &LatticeGeometry,
    theta: f64,
    window: Option<Region>,
    t_grid: &[f64],
    chain: &ChainConfig,
    exec: Execution,
) -> Result<FreeEnergyEstimate> {
    check_free_energy_grid(t_grid)?;
    let window_sites = window.map(|w| geom.sites_in_region(&w));
    let area = window_area(geom, window_sites.as_deref());
    let jobs: Vec<(usize, f64)> = t_grid.iter().copied().enumerate().collect();
    let mean_field = try_map(exec, jobs, |(i, t)| {
        if t == 0.0 {
            return Ok((0.0, 0.0));
        }
        let model = GhostModel::new(t, theta)?.with_window(window);
        let cfg = chain.clone().stream(chain.stream + i as u64);
        let mut series = Vec::with_capacity(cfg.n_samples);
        for_each_labeled(geom, &model.params(), &cfg, |_, _, labels| {
            series.push(theta * ghost_connected(labels, window_sites.as_deref()) as f64);
        })?;
        batch_mean(&series, DEFAULT_BLOCKS)
    })?;
    Ok(integrate_free_energy(t_grid, mean_field, area))
}

/// Empirical law of the spin pattern on a fixed set of sites (at most 64),
/// keyed by the bit pattern with bit `k` set when site `k` is down.
pub fn window_patterns<'a>(
    sites: &[u32],
    samples: impl IntoIterator<Item = &'a SpinConfiguration>,
) -> Result<BTreeMap<u64, usize>> {
    if sites.len() > 64 {
        return Err(invalid("pattern windows hold at most 64 sites"));
    }
    let mut out = BTreeMap::new();
    for s in samples {
        let key = sites
            .iter()
            .enumerate()
            .fold(0u64, |k, (i, &x)| k | (((s.spin(x) < 0) as u64) << i));
        *out.entry(key).or_insert(0) += 1;
    }
    Ok(out)
}

/// Comparison of two window-pattern laws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternComparison {
    /// Patterns seen at least `min_count` times under one law and never
    /// under the other.
    pub exclusive: Vec<u64>,
    /// Largest `|log(freq_a / freq_b)|` over patterns seen under both.
    pub max_abs_log_ratio: f64,
}

impl PatternComparison {
    pub fn mutually_continuous(&self) -> bool {
        self.exclusive.is_empty()
    }
}

pub fn compare_patterns(a: &BTreeMap<u64, usize>, b: &BTreeMap<u64, usize>, min_count: usize) -> PatternComparison {
    let na = a.values().sum::<usize>().max(1) as f64;
    let nb = b.values().sum::<usize>().max(1) as f64;
    let mut exclusive = Vec::new();
    let mut max_abs_log_ratio: f64 = 0.0;
    for k in a.keys().chain(b.keys().filter(|k| !a.contains_key(k))) {
        match (a.get(k).copied().unwrap_or(0), b.get(k).copied().unwrap_or(0)) {
            (0, c) | (c, 0) if c >= min_count => exclusive.push(*k),
            (0, _) | (_, 0) => {}
            (ca, cb) => {
                let r = ((ca as f64 / na) / (cb as f64 / nb)).ln().abs();
                max_abs_log_ratio = max_abs_log_ratio.max(r);
            }
        }
    }
    exclusive.sort_unstable();
    PatternComparison { exclusive, max_abs_log_ratio }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Boundary;
    use crate::sampler::exact_expectation;

    #[test]
    fn field_and_ghost_probability_are_derived() {
        let m = GhostModel::new(0.5, 0.2).unwrap();
        assert!((m.field() - 0.1 / BETA_C).abs() < 1e-15);
        assert!((m.ghost_p() - (1.0 - (-0.2f64).exp())).abs() < 1e-15);
        let zero = GhostModel::new(0.0, 0.2).unwrap();
        assert_eq!(zero.ghost_p(), 0.0);
        assert!(!zero.params().has_ghost());
        assert!(GhostModel::new(-1.0, 1.0).is_err());
        assert!(GhostModel::new(1.0, 0.0).is_err());
    }

    #[test]
    fn zero_field_stream_equals_critical_stream() {
        let g = LatticeGeometry::new(8, Boundary::Torus, 1.0).unwrap();
        let cfg = ChainConfig::with_defaults(11, 8, 20);
        let a: Vec<_> = sample_ghost_ensemble(&g, &GhostModel::new(0.0, 1.0).unwrap(), &cfg).unwrap().collect();
        let b: Vec<_> = sample_ensemble(&g, &ModelParams::critical_ising(), &cfg).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn single_site_magnetization_is_tanh() {
        let g = LatticeGeometry::new(1, Boundary::Free, 1.0).unwrap();
        let model = GhostModel::new(0.3, 0.5).unwrap();
        let exact = exact_expectation(&g, &model.params(), |_, l| l.ghost[0] as u8 as f64).unwrap();
        assert!((exact - (BETA_C * model.field()).tanh()).abs() < 1e-15);
        let mut cfg = ChainConfig::with_defaults(3, 1, 40_000);
        cfg.decorrelation_sweeps = 1;
        let curve = magnetization_curve(&g, 0.5, &[0.3], None, &cfg, Execution::Sequential).unwrap();
        assert!((curve[0].m - exact).abs() < 4.0 * curve[0].stderr, "{curve:?}");
    }

    #[test]
    fn magnetization_increases_with_field() {
        let g = LatticeGeometry::new(8, Boundary::Torus, 1.0).unwrap();
        let cfg = ChainConfig::with_defaults(5, 8, 400);
        let curve = magnetization_curve(&g, 0.1, &[0.0, 0.05, 0.2, 1.0], None, &cfg, Execution::Parallel).unwrap();
        assert!(curve[0].m.abs() < 4.0 * curve[0].stderr + 1e-3);
        for w in curve.windows(2) {
            assert!(w[1].m > w[0].m, "{curve:?}");
        }
        assert!(curve[3].m > 0.5, "{curve:?}");
    }

    #[test]
    fn free_energy_grid_rules() {
        let g = LatticeGeometry::new(4, Boundary::Torus, 0.25).unwrap();
        let cfg = ChainConfig::with_defaults(1, 4, 10);
        assert!(free_energy_density(&g, 1.0, None, &[0.1, 0.2], &cfg, Execution::Sequential).is_err());
        assert!(free_energy_density(&g, 1.0, None, &[0.0, 0.2, 0.2], &cfg, Execution::Sequential).is_err());
        let grid = default_free_energy_grid(0.5);
        assert_eq!(grid.len(), 9);
        assert_eq!((grid[0], grid[7], grid[8]), (0.0, 0.5, 1.0));
        let cfg = ChainConfig::with_defaults(1, 4, 200);
        let fe = free_energy_density(&g, 0.3, None, &grid, &cfg, Execution::Sequential).unwrap();
        assert_eq!(fe.f_hat[0], (0.0, 0.0));
        assert!(fe.f_hat.windows(2).all(|w| w[1].0 > w[0].0));
        assert!((fe.area - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pattern_comparison() {
        let up = SpinConfiguration::uniform(4, 0);
        let down = up.flipped();
        let a = window_patterns(&[0, 1], [&up, &up, &down]).unwrap();
        let b = window_patterns(&[0, 1], [&up, &up, &up]).unwrap();
        assert_eq!(a.get(&0b11), Some(&1));
        let c = compare_patterns(&a, &b, 1);
        assert_eq!(c.exclusive, vec![0b11]);
        assert!(!c.mutually_continuous());
        assert!(compare_patterns(&a, &b, 2).mutually_continuous());
    }
}
