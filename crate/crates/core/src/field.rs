//! The scale factor, per-cluster area measures and the magnetization field.
//!
//! `Θ^{-2} = E[Σ_i |C_i ∩ box|^2]` makes the unit-box block magnetization
//! have second moment one. The field `Φ(f) = Θ Σ_x f(a x) S_x` is computed
//! either from spins directly or as `Σ_i η_i μ_i(f)` with one independent
//! fair sign per FK cluster; the two agree in law.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clusters::{trace_outer_loop, ClusterDecomposition, Labels};
use crate::error::{invalid, Error, Result};
use crate::lattice::{LatticeGeometry, Region};
use crate::sampler::SpinConfiguration;
use crate::stats::{batch_mean, NeumaierSum, DEFAULT_BLOCKS};

/// A test function `f`, either an indicator or a continuous profile
/// sampled at the site positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    Indicator { region: Region },
    /// `prod_axes sin^2(pi (z - z0) / w)` on a rectangle, zero outside: a
    /// continuous bump vanishing on the rectangle's edges.
    Bump { region: Region },
}

impl TestFunction {
    pub fn indicator(region: Region) -> Self {
        TestFunction::Indicator { region }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            TestFunction::Indicator { region } => region.contains(x, y) as u8 as f64,
            TestFunction::Bump { region } => match *region {
                Region::Rect { x0, y0, x1, y1 } if region.contains(x, y) => {
                    let s = |t: f64, a: f64, b: f64| (std::f64::consts::PI * (t - a) / (b - a)).sin().powi(2);
                    s(x, x0, x1) * s(y, y0, y1)
                }
                _ => 0.0,
            },
        }
    }

    /// Samples `f` on the lattice.
    pub fn on(&self, geom: &LatticeGeometry) -> Result<SiteWeights> {
        match self {
            TestFunction::Indicator { region } => Ok(SiteWeights::indicator(geom.sites_in_region(region))),
            TestFunction::Bump { region } => {
                if !matches!(region, Region::Rect { .. }) {
                    return Err(invalid("bump test functions need a rectangular support"));
                }
                Ok(SiteWeights::sampled(geom, |x, y| self.eval(x, y)))
            }
        }
    }
}

/// A test function evaluated on the sites of one geometry: the sites of its
/// support and, unless it is an indicator, the value at each.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteWeights {
    sites: Vec<u32>,
    weights: Option<Vec<f64>>,
}

impl SiteWeights {
    pub fn indicator(mut sites: Vec<u32>) -> Self {
        sites.sort_unstable();
        sites.dedup();
        Self { sites, weights: None }
    }

    /// Grid-samples `f` at every site position, keeping the nonzero values.
    pub fn sampled(geom: &LatticeGeometry, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut sites = Vec::new();
        let mut weights = Vec::new();
        for s in 0..geom.n_sites() as u32 {
            let (x, y) = geom.position(s);
            let v = f(x, y);
            if v != 0.0 {
                sites.push(s);
                weights.push(v);
            }
        }
        Self { sites, weights: Some(weights) }
    }

    pub fn sites(&self) -> &[u32] {
        &self.sites
    }

    pub fn is_indicator(&self) -> bool {
        self.weights.is_none()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.sites.iter().enumerate().map(move |(i, &s)| {
            (s, self.weights.as_ref().map_or(1.0, |w| w[i]))
        })
    }
}

/// Estimated scale factor for one observation box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub theta: f64,
    pub theta_inv_sq: f64,
    pub stderr: f64,
    #[serde(rename = "box")]
    pub region: Region,
    pub n_samples: usize,
    /// Free-form label of the ensemble the estimate came from.
    pub ensemble_id: String,
}

impl ThetaEstimate {
    pub fn from_inv_sq(theta_inv_sq: f64, stderr: f64, region: Region, n_samples: usize, ensemble_id: impl Into<String>) -> Self {
        Self {
            theta: theta_inv_sq.powf(-0.5),
            theta_inv_sq,
            stderr,
            region,
            n_samples,
            ensemble_id: ensemble_id.into(),
        }
    }

    /// Standard error of `Θ` itself, by propagation from `Θ^{-2}`.
    pub fn theta_stderr(&self) -> f64 {
        0.5 * self.theta * self.stderr / self.theta_inv_sq
    }
}

/// Streams configurations into the per-sample series of
/// `Σ_i |C_i ∩ box|^2`.
#[derive(Clone, Debug)]
pub struct ThetaAccumulator {
    region: Region,
    box_sites: Vec<u32>,
    scratch: Vec<u32>,
    series: Vec<f64>,
}

impl ThetaAccumulator {
    pub fn new(geom: &LatticeGeometry, region: Region) -> Self {
        Self {
            region,
            box_sites: geom.sites_in_region(&region),
            scratch: Vec::new(),
            series: Vec::new(),
        }
    }

    pub fn add(&mut self, labels: &Labels) {
        let s = labels.sum_squared_restricted(&self.box_sites, &mut self.scratch);
        self.series.push(s as f64);
    }

    pub fn box_size(&self) -> usize {
        self.box_sites.len()
    }

    pub fn series(&self) -> &[f64] {
        &self.series
    }

    pub fn finish(&self, ensemble_id: impl Into<String>) -> Result<ThetaEstimate> {
        let (mean, stderr) = batch_mean(&self.series, DEFAULT_BLOCKS)?;
        Ok(ThetaEstimate::from_inv_sq(mean, stderr, self.region, self.series.len(), ensemble_id))
    }
}

pub fn estimate_theta<L: AsRef<Labels>>(
    geom: &LatticeGeometry,
    ensemble: impl IntoIterator<Item = L>,
    region: Region,
    ensemble_id: impl Into<String>,
) -> Result<ThetaEstimate> {
    let mut acc = ThetaAccumulator::new(geom, region);
    for l in ensemble {
        acc.add(l.as_ref());
    }
    if acc.series.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    acc.finish(ensemble_id)
}

/// The rescaled counting measure `Θ Σ_{x ∈ C} δ(z - a x)` of one cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaMeasure {
    pub cluster: usize,
    pub theta: f64,
    pub positions: Vec<(f64, f64)>,
}

impl AreaMeasure {
    pub fn of(dec: &ClusterDecomposition, geom: &LatticeGeometry, cluster: usize, theta: f64) -> Self {
        let positions = dec.sites(cluster).iter().map(|&s| geom.position(s)).collect();
        Self { cluster, theta, positions }
    }

    pub fn integrate(&self, f: &TestFunction) -> f64 {
        let s: NeumaierSum = self.positions.iter().map(|&(x, y)| f.eval(x, y)).collect();
        self.theta * s.value()
    }

    pub fn mass_in(&self, region: &Region) -> f64 {
        self.theta * self.positions.iter().filter(|&&(x, y)| region.contains(x, y)).count() as f64
    }
}

/// `Σ_{x ∈ C_i} f(x)` for every cluster meeting the support of `f`, in
/// increasing cluster index.
pub fn cluster_integrals(labels: &Labels, f: &SiteWeights) -> Vec<(u32, f64)> {
    let mut touched: Vec<(u32, f64)> = Vec::new();
    let mut slot = vec![u32::MAX; labels.n_clusters()];
    for (s, w) in f.iter() {
        let c = labels.id[s as usize];
        let k = &mut slot[c as usize];
        if *k == u32::MAX {
            *k = touched.len() as u32;
            touched.push((c, 0.0));
        }
        touched[*k as usize].1 += w;
    }
    touched.sort_unstable_by_key(|t| t.0);
    touched
}

pub fn field_value_from_spins(geom: &LatticeGeometry, spins: &SpinConfiguration, theta: f64, f: &SiteWeights) -> f64 {
    debug_assert_eq!(spins.len(), geom.n_sites());
    let s: NeumaierSum = f.iter().map(|(x, w)| w * spins.spin(x) as f64).collect();
    theta * s.value()
}

/// How cluster loop diameters are obtained for the cutoff.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopDiameter {
    /// Cluster diameter plus one lattice spacing; within `a` of the traced
    /// loop diameter.
    #[default]
    Proxy,
    /// Trace each outer loop on the medial lattice. Wrapping clusters get
    /// the torus extent.
    Traced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterContribution {
    pub cluster: u32,
    pub eta: i8,
    /// `μ_i(f)`.
    pub mass: f64,
    pub loop_diameter: f64,
}

/// One realization of `Φ(f)` and the coupled cutoff fields `Φ_ε(f)`, which
/// keep only clusters whose loop diameter exceeds `ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub value: f64,
    pub cutoff_values: Vec<(f64, f64)>,
    pub per_cluster: Vec<ClusterContribution>,
}

impl FieldSample {
    /// `Σ_{diam ≤ ε} μ_i(f)^2`: the conditional expectation of
    /// `(Φ - Φ_ε)^2` given the clusters.
    pub fn small_cluster_square_mass(&self, eps: f64) -> f64 {
        self.per_cluster
            .iter()
            .filter(|c| c.loop_diameter <= eps)
            .map(|c| c.mass * c.mass)
            .collect::<NeumaierSum>()
            .value()
    }

    pub fn cutoff(&self, eps: f64) -> Option<f64> {
        self.cutoff_values.iter().find(|(e, _)| *e == eps).map(|&(_, v)| v)
    }
}

// Fair ±1 signs are drawn as colors in {0, 1} so that the q = 2 Potts field
// consumes the generator identically.
fn draw_sign(rng: &mut impl Rng) -> i8 {
    if rng.gen_range(0..2u32) == 0 {
        1
    } else {
        -1
    }
}

fn signed_sum(parts: &[ClusterContribution], keep: impl Fn(&ClusterContribution) -> bool) -> f64 {
    parts
        .iter()
        .filter(|c| keep(c))
        .map(|c| c.eta as f64 * c.mass)
        .collect::<NeumaierSum>()
        .value()
}

pub fn field_sample_from_clusters(
    dec: &ClusterDecomposition,
    geom: &LatticeGeometry,
    theta: f64,
    f: &SiteWeights,
    epsilons: &[f64],
    diameters: LoopDiameter,
    rng: &mut impl Rng,
) -> Result<FieldSample> {
    if epsilons.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(invalid("cutoff list must be sorted ascending"));
    }
    let per_cluster = cluster_integrals(dec.labels(), f)
        .into_iter()
        .map(|(c, m)| {
            let loop_diameter = match diameters {
                LoopDiameter::Proxy => dec.loop_diameter_proxy(c as usize),
                LoopDiameter::Traced => match trace_outer_loop(dec, geom, c as usize) {
                    Ok(l) => l.diameter,
                    Err(Error::WrappingCluster { extent }) => extent,
                    Err(e) => return Err(e),
                },
            };
            Ok(ClusterContribution { cluster: c, eta: draw_sign(rng), mass: theta * m, loop_diameter })
        })
        .collect::<Result<Vec<_>>>()?;
    let value = signed_sum(&per_cluster, |_| true);
    let cutoff_values = epsilons
        .iter()
        .map(|&e| (e, signed_sum(&per_cluster, |c| c.loop_diameter > e)))
        .collect();
    Ok(FieldSample { value, cutoff_values, per_cluster })
}

/// The unit-box block magnetization from spins.
pub fn block_magnetization_from_spins(
    geom: &LatticeGeometry,
    spins: &SpinConfiguration,
    theta: f64,
    unit_box: &SiteWeights,
) -> f64 {
    field_value_from_spins(geom, spins, theta, unit_box)
}

/// The unit-box block magnetization from clusters with fresh signs.
pub fn block_magnetization_from_clusters(
    dec: &ClusterDecomposition,
    geom: &LatticeGeometry,
    theta: f64,
    unit_box: &SiteWeights,
    rng: &mut impl Rng,
) -> Result<f64> {
    field_sample_from_clusters(dec, geom, theta, unit_box, &[], LoopDiameter::Proxy, rng).map(|s| s.value)
}

/// The `q` color fields `Φ^(k) = Σ_i η_i^k μ_i(f)` with
/// `η_i^k = 1` if cluster `i` has color `k` and `-1/(q-1)` otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PottsField {
    pub values: Vec<f64>,
    /// `Σ_{c_i = k} Σ_{x ∈ C_i} f(x)`, unscaled. For indicators these are
    /// integers, and `Σ_k (q m_k - total) = 0` holds exactly.
    pub color_mass: Vec<f64>,
    pub total: f64,
}

impl PottsField {
    /// `q m_k - total`, proportional to `Φ^(k)`.
    pub fn numerators(&self) -> Vec<f64> {
        let q = self.values.len() as f64;
        self.color_mass.iter().map(|m| q * m - self.total).collect()
    }
}

pub fn potts_color_field(
    labels: &Labels,
    theta: f64,
    f: &SiteWeights,
    q: u32,
    rng: &mut impl Rng,
) -> Result<PottsField> {
    if q < 2 {
        return Err(invalid(format!("Potts color fields need q >= 2, got {q}")));
    }
    let q = q as usize;
    let other = -1.0 / (q - 1) as f64;
    let masses = cluster_integrals(labels, f);
    let colors: Vec<usize> = masses.iter().map(|_| rng.gen_range(0..q as u32) as usize).collect();
    let values = (0..q)
        .map(|k| {
            masses
                .iter()
                .zip(&colors)
                .map(|(&(_, m), &c)| if c == k { 1.0 } else { other } * (theta * m))
                .collect::<NeumaierSum>()
                .value()
        })
        .collect();
    let mut color_mass = vec![NeumaierSum::new(); q];
    for (&(_, m), &c) in masses.iter().zip(&colors) {
        color_mass[c].add(m);
    }
    let total: NeumaierSum = masses.iter().map(|m| m.1).collect();
    Ok(PottsField {
        values,
        color_mass: color_mass.iter().map(NeumaierSum::value).collect(),
        total: total.value(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicPoint {
    pub t: f64,
    /// Mean of `cos(t Φ)`.
    pub chi: f64,
    pub stderr: f64,
    /// Mean of `sin(t Φ)`; zero in expectation by spin-flip symmetry.
    pub sin_mean: f64,
    pub sin_stderr: f64,
}

pub fn characteristic_functional(samples: &[f64], t_grid: &[f64]) -> Result<Vec<CharacteristicPoint>> {
    if samples.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    t_grid
        .iter()
        .map(|&t| {
            let cos: Vec<f64> = samples.iter().map(|x| (t * x).cos()).collect();
            let sin: Vec<f64> = samples.iter().map(|x| (t * x).sin()).collect();
            let (chi, stderr) = batch_mean(&cos, DEFAULT_BLOCKS)?;
            let (sin_mean, sin_stderr) = batch_mean(&sin, DEFAULT_BLOCKS)?;
            Ok(CharacteristicPoint { t, chi, stderr, sin_mean, sin_stderr })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clusters::{decompose, label};
    use crate::lattice::Boundary;
    use crate::sampler::{chain_rng, exact_expectation, BondConfiguration, ModelParams, P_C};

    fn unit_rect() -> Region {
        Region::Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    #[test]
    fn theta_of_single_site_box() {
        let g = LatticeGeometry::new(4, Boundary::Torus, 1.0).unwrap();
        let bonds = BondConfiguration::closed(&g, false);
        let labels = label(&g, &bonds);
        let t = estimate_theta(&g, [&labels, &labels], Region::Rect { x0: 0.0, y0: 0.0, x1: 0.5, y1: 0.5 }, "t").unwrap();
        assert_eq!((t.theta_inv_sq, t.theta), (1.0, 1.0));
        let r: Result<ThetaEstimate> = estimate_theta(&g, Vec::<Labels>::new(), unit_rect(), "t");
        assert!(matches!(r, Err(Error::EmptyEnsemble)));
    }

    #[test]
    fn theta_of_fully_open_lattice() {
        let g = LatticeGeometry::new(5, Boundary::Torus, 0.2).unwrap();
        let mut bonds = BondConfiguration::closed(&g, false);
        (0..g.n_bonds()).for_each(|b| bonds.open.set(b, true));
        let t = estimate_theta(&g, [label(&g, &bonds)], unit_rect(), "t").unwrap();
        assert_eq!(t.theta_inv_sq, 625.0);
    }

    #[test]
    fn two_site_theta_and_normalization_are_exact() {
        let g = LatticeGeometry::rectangle(2, 1, Boundary::Free, 0.5).unwrap();
        let params = ModelParams::critical_ising();
        let both = SiteWeights::indicator(vec![0, 1]);
        let inv_sq = exact_expectation(&g, &params, |_, l| {
            l.sum_squared_restricted(both.sites(), &mut Vec::new()) as f64
        })
        .unwrap();
        assert!((inv_sq - (2.0 + 2.0 * P_C / (2.0 - P_C))).abs() < 1e-14);
        // E[M^2] with independent cluster signs is E[Σ μ_i^2] = Θ^2 Θ^{-2}.
        let theta = inv_sq.powf(-0.5);
        let m2 = exact_expectation(&g, &params, |_, l| {
            cluster_integrals(l, &both).iter().map(|(_, m)| (theta * m).powi(2)).sum()
        })
        .unwrap();
        assert!((m2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn spin_field_examples() {
        let g = LatticeGeometry::new(4, Boundary::Torus, 0.25).unwrap();
        let f = TestFunction::indicator(Region::Rect { x0: 0.0, y0: 0.0, x1: 0.5, y1: 0.5 }).on(&g).unwrap();
        let up = SpinConfiguration::uniform(16, 0);
        assert_eq!(field_value_from_spins(&g, &up, 2.0, &f), 8.0);
        assert_eq!(field_value_from_spins(&g, &up.flipped(), 2.0, &f), -8.0);
        let zero = SiteWeights::sampled(&g, |_, _| 0.0);
        assert_eq!(field_value_from_spins(&g, &up, 2.0, &zero), 0.0);
    }

    #[test]
    fn cluster_field_invariants() {
        let g = LatticeGeometry::new(16, Boundary::Torus, 1.0 / 8.0).unwrap();
        let mut rng = chain_rng(5, 0);
        let mut bonds = BondConfiguration::closed(&g, false);
        for b in 0..g.n_bonds() {
            bonds.open.set(b, rng.gen_bool(0.45));
        }
        let dec = decompose(&g, &bonds);
        let f = TestFunction::Bump { region: Region::Rect { x0: 0.25, y0: 0.25, x1: 1.5, y1: 1.25 } }.on(&g).unwrap();
        let eps = [0.0, 0.2, 0.4, 0.8, 100.0];
        let s = field_sample_from_clusters(&dec, &g, 0.7, &f, &eps, LoopDiameter::Traced, &mut rng).unwrap();
        assert_eq!(s.cutoff(0.0), Some(s.value));
        assert_eq!(s.cutoff(100.0), Some(0.0));
        let direct: f64 = s.per_cluster.iter().map(|c| c.eta as f64 * c.mass).sum();
        assert!((direct - s.value).abs() < 1e-12);
        // The removed clusters are nested, so their squared mass (the
        // conditional mean of (Φ - Φ_ε)^2) cannot decrease with ε.
        let sq: Vec<f64> = eps.iter().map(|&e| s.small_cluster_square_mass(e)).collect();
        assert!(sq.windows(2).all(|w| w[0] <= w[1]), "{sq:?}");
        for c in &s.per_cluster {
            assert!(c.mass > 0.0 && c.loop_diameter >= dec.cluster(c.cluster as usize).diameter);
        }
        assert!(field_sample_from_clusters(&dec, &g, 1.0, &f, &[0.5, 0.1], LoopDiameter::Proxy, &mut rng).is_err());
    }

    #[test]
    fn single_cluster_field_is_signed_mass() {
        let g = LatticeGeometry::new(4, Boundary::Torus, 0.25).unwrap();
        let mut bonds = BondConfiguration::closed(&g, false);
        (0..g.n_bonds()).for_each(|b| bonds.open.set(b, true));
        let dec = decompose(&g, &bonds);
        let f = TestFunction::indicator(Region::Rect { x0: 0.0, y0: 0.0, x1: 0.5, y1: 1.0 }).on(&g).unwrap();
        let s = field_sample_from_clusters(&dec, &g, 0.5, &f, &[0.0], LoopDiameter::Proxy, &mut chain_rng(1, 0)).unwrap();
        assert_eq!(s.value.abs(), 4.0);
        let measure = AreaMeasure::of(&dec, &g, 0, 0.5);
        assert_eq!(measure.mass_in(&Region::Rect { x0: 0.0, y0: 0.0, x1: 0.5, y1: 1.0 }), 4.0);
        assert_eq!(measure.integrate(&TestFunction::indicator(unit_rect())), 8.0);
    }

    #[test]
    fn potts_single_cluster_and_color_sum() {
        let g = LatticeGeometry::new(3, Boundary::Free, 1.0).unwrap();
        let mut bonds = BondConfiguration::closed(&g, false);
        (0..g.n_bonds()).for_each(|b| bonds.open.set(b, true));
        let labels = label(&g, &bonds);
        let f = SiteWeights::indicator((0..9).collect());
        let mut rng = chain_rng(2, 0);
        let p = potts_color_field(&labels, 1.0, &f, 3, &mut rng).unwrap();
        let k = p.values.iter().position(|&v| v == 9.0).unwrap();
        for (j, v) in p.values.iter().enumerate() {
            if j != k {
                assert_eq!(*v, -4.5);
            }
        }
        assert_eq!(p.numerators().iter().sum::<f64>(), 0.0);
        assert!(potts_color_field(&labels, 1.0, &f, 1, &mut rng).is_err());
    }

    #[test]
    fn potts_q2_matches_ising_signs_bitwise() {
        let g = LatticeGeometry::new(12, Boundary::Torus, 1.0 / 6.0).unwrap();
        let mut rng = chain_rng(8, 0);
        let mut bonds = BondConfiguration::closed(&g, false);
        for b in 0..g.n_bonds() {
            bonds.open.set(b, rng.gen_bool(0.5));
        }
        let dec = decompose(&g, &bonds);
        let f = TestFunction::Bump { region: Region::Rect { x0: 0.1, y0: 0.2, x1: 1.3, y1: 1.9 } }.on(&g).unwrap();
        let ising = field_sample_from_clusters(&dec, &g, 0.3, &f, &[], LoopDiameter::Proxy, &mut chain_rng(4, 1)).unwrap();
        let potts = potts_color_field(dec.labels(), 0.3, &f, 2, &mut chain_rng(4, 1)).unwrap();
        assert_eq!(ising.value.to_bits(), potts.values[0].to_bits());
        assert_eq!((-ising.value).to_bits(), potts.values[1].to_bits());
    }

    #[test]
    fn characteristic_functional_basics() {
        let samples: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
        let pts = characteristic_functional(&samples, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(pts[0].chi, 1.0);
        assert!(pts[1].chi > pts[2].chi);
        let var = samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64;
        assert!((pts[1].chi - (1.0 - 0.125 * var)).abs() < 0.01);
        assert!(characteristic_functional(&[], &[0.0]).is_err());
    }
}
