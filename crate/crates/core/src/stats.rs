//! Empirical distributions, Wasserstein-2 distances, resampling errors,
//! two-point functions and weighted log-log fits.

use serde::{Deserialize, Serialize};

use crate::clusters::Labels;
use crate::error::{invalid, Error, Result};
use crate::lattice::{Boundary, LatticeGeometry};

/// Neumaier-compensated running sum. Accumulating the same values in the
/// same order is bitwise reproducible, and merging per-worker partial sums
/// loses far less than naive addition.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &NeumaierSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

pub fn compensated_mean(xs: &[f64]) -> f64 {
    xs.iter().copied().collect::<NeumaierSum>().value() / xs.len() as f64
}

/// Mean and batch-means standard error of a correlated series. The series
/// is split into `n_blocks` contiguous blocks (fewer when the series is
/// short); the stderr is the spread of block means.
pub fn batch_mean(series: &[f64], n_blocks: usize) -> Result<(f64, f64)> {
    if series.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mean = compensated_mean(series);
    let nb = n_blocks.min(series.len()).max(1);
    if nb < 2 {
        return Ok((mean, f64::NAN));
    }
    let block = series.len() / nb;
    let means: Vec<f64> = (0..nb)
        .map(|b| {
            let end = if b + 1 == nb { series.len() } else { (b + 1) * block };
            compensated_mean(&series[b * block..end])
        })
        .collect();
    let m = compensated_mean(&means);
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nb - 1) as f64;
    Ok((mean, (var / nb as f64).sqrt()))
}

/// Default number of batches for batch-means errors.
pub const DEFAULT_BLOCKS: usize = 32;

/// Delete-one-block jackknife of a statistic of the whole series. Returns
/// the full-sample estimate and the jackknife standard error.
pub fn block_jackknife(
    series: &[f64],
    n_blocks: usize,
    statistic: impl Fn(&[f64]) -> f64,
) -> Result<(f64, f64)> {
    if series.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let full = statistic(series);
    let nb = n_blocks.min(series.len());
    if nb < 2 {
        return Ok((full, f64::NAN));
    }
    let block = series.len() / nb;
    let mut rest = Vec::with_capacity(series.len());
    let reps: Vec<f64> = (0..nb)
        .map(|b| {
            let end = if b + 1 == nb { series.len() } else { (b + 1) * block };
            rest.clear();
            rest.extend_from_slice(&series[..b * block]);
            rest.extend_from_slice(&series[end..]);
            statistic(&rest)
        })
        .collect();
    let m = compensated_mean(&reps);
    let var = reps.iter().map(|x| (x - m).powi(2)).sum::<f64>() * (nb - 1) as f64 / nb as f64;
    Ok((full, var.sqrt()))
}

/// A finite sample kept in draw order (for correlated-error estimates) and
/// in sorted order (for quantile couplings).
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDistribution {
    series: Vec<f64>,
    sorted: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("empirical distribution needs at least one sample"));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(invalid("samples must be finite"));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { series: samples, sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    /// Samples in the order they were drawn.
    pub fn series(&self) -> &[f64] {
        &self.series
    }

    pub fn mean(&self) -> f64 {
        compensated_mean(&self.sorted)
    }

    /// Central moment of order `k` (biased, divides by `n`).
    pub fn central_moment(&self, k: i32) -> f64 {
        central_moment(&self.sorted, k)
    }

    pub fn variance(&self) -> f64 {
        self.central_moment(2)
    }

    /// Raw moment `E[X^k]`.
    pub fn raw_moment(&self, k: i32) -> f64 {
        self.sorted.iter().map(|x| x.powi(k)).collect::<NeumaierSum>().value() / self.len() as f64
    }

    /// Batch-means standard error of the mean of `g(X)`.
    pub fn stderr_of(&self, g: impl Fn(f64) -> f64) -> f64 {
        let mapped: Vec<f64> = self.series.iter().map(|&x| g(x)).collect();
        batch_mean(&mapped, DEFAULT_BLOCKS).map(|(_, e)| e).unwrap_or(f64::NAN)
    }

    /// Quantile function `F^{-1}(u)` for `u` in `(0, 1]`: the
    /// `ceil(n u)`-th order statistic.
    pub fn quantile(&self, u: f64) -> f64 {
        let n = self.len();
        let k = ((u * n as f64).ceil() as usize).clamp(1, n);
        self.sorted[k - 1]
    }
}

fn central_moment(xs: &[f64], k: i32) -> f64 {
    let m = compensated_mean(xs);
    xs.iter().map(|x| (x - m).powi(k)).collect::<NeumaierSum>().value() / xs.len() as f64
}

fn standardized_fourth(xs: &[f64]) -> f64 {
    let m2 = central_moment(xs, 2);
    central_moment(xs, 4) / (m2 * m2)
}

/// Wasserstein-2 distance between two empirical laws. Equal sizes pair
/// order statistics; otherwise the quantile functions are compared exactly
/// on the merged grid of their breakpoints `{i/n} ∪ {j/m}`.
pub fn wasserstein2(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> f64 {
    let (a, b) = (p.sorted(), q.sorted());
    if a.len() == b.len() {
        let s: NeumaierSum = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
        return (s.value() / a.len() as f64).sqrt();
    }
    let (n, m) = (a.len() as u128, b.len() as u128);
    // Breakpoints i/n and j/m, merged exactly with integer cross products.
    let (mut i, mut j) = (0u128, 0u128);
    let mut last = 0.0;
    let mut acc = NeumaierSum::new();
    while i < n && j < m {
        let x = a[i as usize];
        let y = b[j as usize];
        let (next_i, next_j) = ((i + 1) * m, (j + 1) * n);
        let u = if next_i <= next_j { (i + 1) as f64 / n as f64 } else { (j + 1) as f64 / m as f64 };
        acc.add((u - last) * (x - y) * (x - y));
        last = u;
        if next_i <= next_j {
            i += 1;
        }
        if next_j <= next_i {
            j += 1;
        }
    }
    acc.value().max(0.0).sqrt()
}

/// Sample kurtosis `m4 / m2^2` with a block-jackknife standard error.
pub fn kurtosis(p: &EmpiricalDistribution) -> Result<(f64, f64)> {
    if p.len() < 100 {
        return Err(invalid(format!("kurtosis needs at least 100 samples, got {}", p.len())));
    }
    block_jackknife(p.series(), 50, standardized_fourth)
}

/// Straight-line fit `y = intercept + slope x` with per-point weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
    pub r_squared: f64,
}

/// Weighted least squares. `sigma[i]` is the standard error of `y[i]`;
/// `None` means unit weights. Parameter errors come from the weighted normal
/// equations, rescaled by the reduced chi-square when it exceeds one.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> Result<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n || sigma.is_some_and(|s| s.len() != n) {
        return Err(invalid("linear fit needs at least two matching points"));
    }
    let w: Vec<f64> = match sigma {
        Some(s) => {
            if s.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
                return Err(invalid("fit errors must be positive and finite"));
            }
            s.iter().map(|e| 1.0 / (e * e)).collect()
        }
        None => vec![1.0; n],
    };
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = (0..n).map(|i| w[i] * (x[i] - xm).powi(2)).sum();
    let sxy: f64 = (0..n).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    let syy: f64 = (0..n).map(|i| w[i] * (y[i] - ym).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(invalid("fit abscissae are all equal"));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = (0..n).map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - chi2 / syy } else { 1.0 };
    let scale = if n > 2 && (sigma.is_none() || chi2 / (n - 2) as f64 > 1.0) {
        chi2 / (n - 2) as f64
    } else {
        1.0
    };
    let scale = if sigma.is_none() && n == 2 { 0.0 } else { scale };
    let slope_var = scale / sxx;
    let intercept_var = scale * (1.0 / sw + xm * xm / sxx);
    Ok(LinearFit {
        slope,
        intercept,
        slope_stderr: slope_var.sqrt(),
        intercept_stderr: intercept_var.sqrt(),
        r_squared,
    })
}

/// A point `(x, y, stderr of y)` for the fitting routines.
pub type DataPoint = (f64, f64, f64);

/// Power law `y = amplitude * x^exponent`, fitted on log-log axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub exponent: f64,
    pub amplitude: f64,
    pub stderr: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
}

/// Weighted log-log fit. Points with zero stderr get unit weight in log
/// space together with all the others.
pub fn fit_power_law(points: &[DataPoint]) -> Result<ExponentFit> {
    if points.len() < 3 {
        return Err(invalid("power-law fit needs at least 3 points"));
    }
    if points.iter().any(|&(x, y, _)| !(x > 0.0) || !(y > 0.0)) {
        return Err(invalid("power-law fit needs positive x and y"));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let fit = weighted_linear_fit(&lx, &ly, log_sigmas(points).as_deref())?;
    Ok(ExponentFit {
        exponent: fit.slope,
        amplitude: fit.intercept.exp(),
        stderr: fit.slope_stderr,
        r_squared: fit.r_squared,
        window: window(points),
    })
}

/// Exponential `y = amplitude * exp(-x / length)`, fitted on log-linear axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFit {
    /// Decay rate `1 / length`.
    pub mass: f64,
    pub mass_stderr: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
}

impl ExponentialFit {
    pub fn correlation_length(&self) -> f64 {
        1.0 / self.mass
    }
}

pub fn fit_exponential(points: &[DataPoint]) -> Result<ExponentialFit> {
    if points.len() < 3 {
        return Err(invalid("exponential fit needs at least 3 points"));
    }
    if points.iter().any(|&(_, y, _)| !(y > 0.0)) {
        return Err(invalid("exponential fit needs positive y"));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let fit = weighted_linear_fit(&x, &ly, log_sigmas(points).as_deref())?;
    Ok(ExponentialFit {
        mass: -fit.slope,
        mass_stderr: fit.slope_stderr,
        amplitude: fit.intercept.exp(),
        r_squared: fit.r_squared,
        window: window(points),
    })
}

// Relative errors become absolute errors of the logarithm. Weighting is
// used only when every point carries a positive error.
fn log_sigmas(points: &[DataPoint]) -> Option<Vec<f64>> {
    points
        .iter()
        .map(|&(_, y, e)| (e > 0.0 && e.is_finite()).then(|| e / y))
        .collect()
}

fn window(points: &[DataPoint]) -> (f64, f64) {
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Empirical survival function `P(N >= k)` of a nonnegative integer sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalTail {
    /// `(k, P(N >= k), binomial stderr, number of samples with N >= k)` for
    /// `k = 0..=max`.
    pub table: Vec<(u64, f64, f64, usize)>,
    /// Geometric-decay fit over `k >= 1` with at least `min_events` samples.
    pub fit: Option<GeometricFit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricFit {
    pub lambda: f64,
    pub lambda_stderr: f64,
    pub r_squared: f64,
    pub k_max: u64,
}

/// Tail events needed for a `k` to enter the geometric fit.
pub const MIN_TAIL_EVENTS: usize = 50;

pub fn survival_tail(samples: &[u64]) -> SurvivalTail {
    let n = samples.len();
    let max = samples.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max as usize + 2];
    for &s in samples {
        counts[s as usize] += 1;
    }
    let mut at_least = vec![0usize; max as usize + 2];
    for k in (0..=max as usize).rev() {
        at_least[k] = at_least[k + 1] + counts[k];
    }
    let table: Vec<(u64, f64, f64, usize)> = (0..=max)
        .map(|k| {
            let c = at_least[k as usize];
            let p = if n == 0 { 0.0 } else { c as f64 / n as f64 };
            let e = if n == 0 { 0.0 } else { (p * (1.0 - p) / n as f64).sqrt() };
            (k, p, e, c)
        })
        .collect();
    let pts: Vec<DataPoint> = table
        .iter()
        .filter(|r| r.0 >= 1 && r.3 >= MIN_TAIL_EVENTS)
        .map(|&(k, p, e, _)| (k as f64, p, e))
        .collect();
    let fit = fit_geometric(&pts);
    SurvivalTail { table, fit }
}

// log P(N >= k) = c + k log(lambda). Two points determine the line; a single
// point pins it through P(N >= 0) = 1.
fn fit_geometric(pts: &[DataPoint]) -> Option<GeometricFit> {
    let k_max = pts.last()?.0 as u64;
    if pts.len() == 1 {
        let (k, p, e) = pts[0];
        let lambda = p.powf(1.0 / k);
        return Some(GeometricFit {
            lambda,
            lambda_stderr: lambda * e / (p * k),
            r_squared: 1.0,
            k_max,
        });
    }
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let sig = log_sigmas(pts);
    let fit = weighted_linear_fit(&x, &y, sig.as_deref()).ok()?;
    let lambda = fit.slope.exp();
    Some(GeometricFit {
        lambda,
        lambda_stderr: lambda * fit.slope_stderr,
        r_squared: fit.r_squared,
        k_max,
    })
}

/// Same-cluster frequency as a function of separation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPointRow {
    /// Separation in lattice units.
    pub r: usize,
    pub tau: f64,
    pub stderr: f64,
    pub pairs_per_sample: usize,
}

/// Accumulates `P(x <-> x + r e)` along both lattice axes for every site
/// `x`, for `r = 0..=r_max`, one value per configuration so that errors can
/// be estimated by batch means. The `exclude_ghost` variant counts only
/// pairs whose common cluster avoids the ghost (the truncated correlation).
#[derive(Clone, Debug)]
pub struct TwoPointAccumulator {
    r_max: usize,
    exclude_ghost: bool,
    // series[r][sample]
    series: Vec<Vec<f64>>,
}

impl TwoPointAccumulator {
    pub fn new(geom: &LatticeGeometry, r_max: usize, exclude_ghost: bool) -> Result<Self> {
        if geom.boundary() != Boundary::Torus {
            return Err(invalid("two-point functions are measured on a torus"));
        }
        if r_max >= geom.width().min(geom.height()) {
            return Err(invalid(format!("r_max {r_max} does not fit on the torus")));
        }
        Ok(Self { r_max, exclude_ghost, series: vec![Vec::new(); r_max + 1] })
    }

    /// Rebuilds an accumulator from stored per-configuration rows, each
    /// holding `tau` at `r = 0..=r_max`.
    pub fn from_rows<'a>(r_max: usize, exclude_ghost: bool, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut series = vec![Vec::new(); r_max + 1];
        for row in rows {
            if row.len() != r_max + 1 {
                return Err(invalid(format!("two-point row has {} entries, expected {}", row.len(), r_max + 1)));
            }
            for (s, &v) in series.iter_mut().zip(row) {
                s.push(v);
            }
        }
        Ok(Self { r_max, exclude_ghost, series })
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    /// The row of the most recently added configuration.
    pub fn last_row(&self) -> Option<Vec<f64>> {
        self.series.iter().map(|s| s.last().copied()).collect()
    }

    pub fn add(&mut self, geom: &LatticeGeometry, labels: &Labels) {
        let (w, h) = (geom.width(), geom.height());
        let pairs = 2 * w * h;
        let mut counts = vec![0u64; self.r_max + 1];
        for y in 0..h {
            for x in 0..w {
                let s = geom.site(x, y);
                let c = labels.id[s as usize];
                if self.exclude_ghost && labels.ghost[c as usize] {
                    continue;
                }
                for (r, count) in counts.iter_mut().enumerate() {
                    let e = geom.site((x + r) % w, y);
                    let n = geom.site(x, (y + r) % h);
                    *count += (labels.id[e as usize] == c) as u64 + (labels.id[n as usize] == c) as u64;
                }
            }
        }
        for (r, c) in counts.into_iter().enumerate() {
            self.series[r].push(c as f64 / pairs as f64);
        }
    }

    pub fn n_samples(&self) -> usize {
        self.series[0].len()
    }

    /// Per-configuration series at separation `r`.
    pub fn series(&self, r: usize) -> &[f64] {
        &self.series[r]
    }

    pub fn table(&self, geom: &LatticeGeometry) -> Result<Vec<TwoPointRow>> {
        let pairs = 2 * geom.n_sites();
        self.series
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let (tau, stderr) = batch_mean(s, DEFAULT_BLOCKS)?;
                Ok(TwoPointRow { r, tau, stderr, pairs_per_sample: pairs })
            })
            .collect()
    }
}

/// Two-point table over an ensemble of labelings on a torus.
pub fn two_point<L: AsRef<Labels>>(
    geom: &LatticeGeometry,
    ensemble: impl IntoIterator<Item = L>,
    r_max: usize,
) -> Result<Vec<TwoPointRow>> {
    let mut acc = TwoPointAccumulator::new(geom, r_max, false)?;
    for l in ensemble {
        acc.add(geom, l.as_ref());
    }
    if acc.n_samples() == 0 {
        return Err(Error::EmptyEnsemble);
    }
    acc.table(geom)
}

/// Full displacement-resolved connectivity `P(0 <-> d)` for every torus
/// displacement `d`, averaged over all base points. Used to check
/// `sum_{x,y in box} tau(y - x)` against the cluster-size estimate of the
/// scale factor.
#[derive(Clone, Debug)]
pub struct ConnectivityMap {
    width: usize,
    height: usize,
    // Summed over samples, indexed by `dy * width + dx`.
    counts: Vec<f64>,
    n_samples: usize,
}

impl ConnectivityMap {
    pub fn new(geom: &LatticeGeometry) -> Result<Self> {
        if geom.boundary() != Boundary::Torus {
            return Err(invalid("connectivity maps are measured on a torus"));
        }
        Ok(Self {
            width: geom.width(),
            height: geom.height(),
            counts: vec![0.0; geom.n_sites()],
            n_samples: 0,
        })
    }

    /// Adds one configuration. Cost is `sum_i |C_i|^2`, so this is meant
    /// for moderate lattices.
    pub fn add(&mut self, geom: &LatticeGeometry, labels: &Labels) {
        let n = geom.n_sites();
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); labels.n_clusters()];
        for s in 0..n as u32 {
            members[labels.id[s as usize] as usize].push(s);
        }
        let mut local = vec![0u64; n];
        for m in &members {
            for &a in m {
                let (ax, ay) = geom.coords(a);
                for &b in m {
                    let (bx, by) = geom.coords(b);
                    let dx = (bx + self.width - ax) % self.width;
                    let dy = (by + self.height - ay) % self.height;
                    local[dy * self.width + dx] += 1;
                }
            }
        }
        for (c, l) in self.counts.iter_mut().zip(local) {
            *c += l as f64 / n as f64;
        }
        self.n_samples += 1;
    }

    /// `tau(dx, dy)` averaged over base points and samples.
    pub fn tau(&self, dx: usize, dy: usize) -> f64 {
        self.counts[(dy % self.height) * self.width + dx % self.width] / self.n_samples as f64
    }

    /// `sum_{x,y} tau(y - x)` over the sites of a `side x side` block.
    pub fn box_double_sum(&self, side: usize) -> f64 {
        let mut acc = NeumaierSum::new();
        for dy in -(side as i64 - 1)..side as i64 {
            for dx in -(side as i64 - 1)..side as i64 {
                let mult = (side as i64 - dx.abs()) * (side as i64 - dy.abs());
                let ux = dx.rem_euclid(self.width as i64) as usize;
                let uy = dy.rem_euclid(self.height as i64) as usize;
                acc.add(mult as f64 * self.tau(ux, uy));
            }
        }
        acc.value()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(v: &[f64]) -> EmpiricalDistribution {
        EmpiricalDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein2(&dist(&[1.0, 5.0, 2.0]), &dist(&[5.0, 1.0, 2.0])), 0.0);
        assert_eq!(wasserstein2(&dist(&[0.0]), &dist(&[-3.5])), 3.5);
        assert_eq!(wasserstein2(&dist(&[0.0, 2.0]), &dist(&[1.0, 3.0])), 1.0);
        assert!(EmpiricalDistribution::new(vec![]).is_err());
    }

    #[test]
    fn unequal_sizes_use_merged_quantiles() {
        // {0, 1} vs {0, 0, 3}: on (0,1/3] 0-0, (1/3,1/2] 0-0, (1/2,2/3] 1-0,
        // (2/3,1] 1-3. Integral = 1/6 * 1 + 1/3 * 4 = 1.5.
        let w = wasserstein2(&dist(&[0.0, 1.0]), &dist(&[0.0, 0.0, 3.0]));
        assert!((w - 1.5f64.sqrt()).abs() < 1e-15);
        // Replicating every sample leaves the law unchanged.
        let a = dist(&[0.3, -1.0, 2.0]);
        let b = dist(&[0.3, 0.3, -1.0, -1.0, 2.0, 2.0]);
        assert!(wasserstein2(&a, &b) < 1e-15);
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let s: NeumaierSum = [1.0, 1e100, 1.0, -1e100].into_iter().collect();
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn kurtosis_calibration() {
        let coin: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let (k, _) = kurtosis(&dist(&coin)).unwrap();
        assert!((k - 1.0).abs() < 1e-12);
        assert!(kurtosis(&dist(&coin[..99])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gauss: Vec<f64> = (0..200_000)
            .map(|_| {
                // Box-Muller.
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                let v: f64 = rng.gen();
                (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
            })
            .collect();
        let (k, e) = kurtosis(&dist(&gauss)).unwrap();
        assert!((k - 3.0).abs() < 4.0 * e, "{k} +- {e}");
        assert!(e < 0.05);
    }

    #[test]
    fn power_law_fits_synthetic_data() {
        let pts: Vec<DataPoint> = [2.0, 4.0, 8.0, 16.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(-0.25), 0.0)).collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.exponent + 0.25).abs() < 1e-12);
        assert!((f.amplitude - 3.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(f.window, (2.0, 16.0));

        let pts: Vec<DataPoint> = [16.0, 32.0, 64.0].iter().map(|&x: &f64| (x, x.powf(3.75), 0.01 * x.powf(3.75))).collect();
        assert!((fit_power_law(&pts).unwrap().exponent - 3.75).abs() < 1e-12);
        assert!(fit_power_law(&[(1.0, 1.0, 0.0), (2.0, 0.0, 0.0), (3.0, 1.0, 0.0)]).is_err());
        assert!(fit_power_law(&pts[..2]).is_err());
    }

    #[test]
    fn exponential_fit_recovers_mass() {
        let pts: Vec<DataPoint> = (1..10).map(|r| (r as f64, 2.0 * (-0.3 * r as f64).exp(), 0.0)).collect();
        let f = fit_exponential(&pts).unwrap();
        assert!((f.mass - 0.3).abs() < 1e-12);
        assert!((f.correlation_length() - 1.0 / 0.3).abs() < 1e-9);
    }

    #[test]
    fn weighted_fit_errors_match_textbook() {
        // Three points with equal unit errors on an exact line: the slope
        // variance is 1 / sum (x - xbar)^2 = 1/2.
        let f = weighted_linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0], Some(&[1.0, 1.0, 1.0])).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-15);
        assert!((f.slope_stderr - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn survival_counts() {
        let t = survival_tail(&[1, 1, 2]);
        assert_eq!(t.table[0].1, 1.0);
        assert_eq!(t.table[1].1, 1.0);
        assert!((t.table[2].1 - 1.0 / 3.0).abs() < 1e-15);
        assert!(t.fit.is_none());

        let t = survival_tail(&[0; 10]);
        assert_eq!(t.table.len(), 1);
        assert!(t.fit.is_none());
    }

    #[test]
    fn geometric_tail_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<u64> = (0..100_000)
            .map(|_| {
                let mut k = 0;
                while rng.gen::<f64>() < 0.4 {
                    k += 1;
                }
                k
            })
            .collect();
        let fit = survival_tail(&samples).fit.unwrap();
        assert!((fit.lambda - 0.4).abs() < 0.01, "{fit:?}");
    }

    #[test]
    fn batch_means_of_iid_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..64_000).map(|_| rng.gen::<f64>()).collect();
        let (m, e) = batch_mean(&xs, 32).unwrap();
        let expect = (1.0f64 / 12.0 / 64_000.0).sqrt();
        assert!((m - 0.5).abs() < 5.0 * expect);
        assert!(e > 0.5 * expect && e < 1.5 * expect, "{e} vs {expect}");
        assert!(matches!(batch_mean(&[], 4), Err(Error::EmptyEnsemble)));
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, 1..40)
    }

    proptest! {
        #[test]
        fn wasserstein_is_a_metric(a in vec_strategy(), b in vec_strategy(), c in vec_strategy()) {
            let (a, b, c) = (dist(&a), dist(&b), dist(&c));
            let ab = wasserstein2(&a, &b);
            prop_assert_eq!(ab, wasserstein2(&b, &a));
            prop_assert_eq!(wasserstein2(&a, &a), 0.0);
            prop_assert!(ab <= wasserstein2(&a, &c) + wasserstein2(&c, &b) + 1e-12);
        }
    }
}
