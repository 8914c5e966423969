//! FK bond and spin sampling at the critical point.
//!
//! Swendsen–Wang is the main dynamics; it alternates the two conditionals of
//! the Edwards–Sokal joint measure. Wolff single-cluster updates are a
//! cross-check for q = 2 without a field. An external field is represented
//! by a ghost site: every lattice site in the field window may bond to it
//! with probability `1 - exp(-2 beta |H|)`, and the ghost cluster keeps the
//! color favoured by the field.

mod oracle;

pub use oracle::{exact_expectation, exact_expectations, exact_spin_distribution, ORACLE_BOND_LIMIT};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::BitVec;
use crate::clusters::UnionFind;
use crate::error::{invalid, Error, Result};
use crate::lattice::{Direction, LatticeGeometry, Region};

/// Critical inverse temperature `log(1 + sqrt 2) / 2`.
pub const BETA_C: f64 = 0.440_686_793_509_771_5;

/// Critical bond probability `2 - sqrt 2`.
pub const P_C: f64 = 0.585_786_437_626_905;

pub fn p_from_beta(beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(invalid(format!("beta must be nonnegative, got {beta}")));
    }
    Ok(-(-2.0 * beta).exp_m1())
}

/// Ghost bond probability at the critical temperature for lattice field `H`.
pub fn ghost_p_from_field(field: f64) -> f64 {
    -(-2.0 * BETA_C * field.abs()).exp_m1()
}

/// The per-chain generator: ChaCha8 keyed by the master seed, one stream per
/// chain index.
pub fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub q: u32,
    pub beta: f64,
    /// Lattice external field `H`. Zero means no ghost site at all.
    #[serde(default)]
    pub field: f64,
    /// Where the field acts; `None` means every site.
    #[serde(default)]
    pub field_window: Option<Region>,
}

impl ModelParams {
    pub fn critical(q: u32) -> Self {
        let beta = if q == 2 { BETA_C } else { potts_beta_c(q) };
        Self { q, beta, field: 0.0, field_window: None }
    }

    pub fn critical_ising() -> Self {
        Self::critical(2)
    }

    pub fn with_field(mut self, field: f64) -> Self {
        self.field = field;
        self
    }

    pub fn with_field_window(mut self, window: Option<Region>) -> Self {
        self.field_window = window;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.q) {
            return Err(invalid(format!("q must be in 2..=255, got {}", self.q)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(invalid(format!("beta must be finite and nonnegative, got {}", self.beta)));
        }
        if !self.field.is_finite() {
            return Err(invalid("field must be finite"));
        }
        if self.q > 2 && self.field < 0.0 {
            return Err(invalid("Potts fields must be nonnegative (they favour color 1)"));
        }
        Ok(())
    }

    pub fn p(&self) -> f64 {
        -(-2.0 * self.beta).exp_m1()
    }

    pub fn ghost_p(&self) -> f64 {
        -(-2.0 * self.beta * self.field.abs()).exp_m1()
    }

    pub fn has_ghost(&self) -> bool {
        self.field != 0.0
    }

    /// Color carried by the ghost cluster: index 0 (spin +1) for positive
    /// fields, index 1 (spin -1) for negative ones.
    pub fn forced_color(&self) -> u8 {
        if self.field >= 0.0 {
            0
        } else {
            1
        }
    }

    /// Sites coupled to the ghost, or `None` when there is no ghost.
    pub fn ghost_sites(&self, geom: &LatticeGeometry) -> Option<Vec<bool>> {
        if !self.has_ghost() {
            return None;
        }
        let n = geom.n_sites();
        Some(match &self.field_window {
            None => vec![true; n],
            Some(r) => (0..n as u32)
                .map(|s| {
                    let (x, y) = geom.position(s);
                    r.contains(x, y)
                })
                .collect(),
        })
    }
}

/// Self-dual point of the q-state Potts model on the square lattice,
/// `beta_c = log(1 + sqrt q) / 2`, i.e. `p_c = sqrt q / (1 + sqrt q)` with
/// the same `p = 1 - exp(-2 beta)` as for Ising.
pub fn potts_beta_c(q: u32) -> f64 {
    0.5 * (1.0 + (q as f64).sqrt()).ln()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BondConfiguration {
    pub open: BitVec,
    /// Ghost bonds indexed by site; empty when there is no ghost.
    pub ghost_open: BitVec,
}

impl BondConfiguration {
    pub fn closed(geom: &LatticeGeometry, with_ghost: bool) -> Self {
        Self {
            open: BitVec::zeros(geom.n_bonds()),
            ghost_open: BitVec::zeros(if with_ghost { geom.n_sites() } else { 0 }),
        }
    }

    pub fn open_fraction(&self) -> f64 {
        self.open.count_ones() as f64 / self.open.len() as f64
    }
}

/// Colors in `0..q`. For q = 2, color 0 is spin +1 and color 1 is spin -1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpinConfiguration {
    pub colors: Vec<u8>,
}

impl SpinConfiguration {
    pub fn uniform(n: usize, color: u8) -> Self {
        Self { colors: vec![color; n] }
    }

    pub fn random(n: usize, q: u32, rng: &mut impl Rng) -> Self {
        Self { colors: (0..n).map(|_| rng.gen_range(0..q) as u8).collect() }
    }

    #[inline]
    pub fn spin(&self, site: u32) -> i32 {
        if self.colors[site as usize] == 0 {
            1
        } else {
            -1
        }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// Global spin flip (q = 2).
    pub fn flipped(&self) -> Self {
        Self { colors: self.colors.iter().map(|&c| 1 - c).collect() }
    }

    pub fn magnetization(&self) -> i64 {
        self.colors.iter().map(|&c| if c == 0 { 1i64 } else { -1 }).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    SwendsenWang,
    Wolff,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub seed: u64,
    /// Independent stream of the seed; chains of one run differ only here.
    #[serde(default)]
    pub stream: u64,
    pub thermalization_sweeps: usize,
    /// Sweeps between retained samples (at least one is always performed).
    pub decorrelation_sweeps: usize,
    pub n_samples: usize,
    pub algorithm: Algorithm,
}

impl ChainConfig {
    /// Defaults: `10 L` thermalization sweeps, 2 sweeps between samples,
    /// Swendsen–Wang.
    pub fn with_defaults(seed: u64, side: usize, n_samples: usize) -> Self {
        Self {
            seed,
            stream: 0,
            thermalization_sweeps: 10 * side,
            decorrelation_sweeps: 2,
            n_samples,
            algorithm: Algorithm::SwendsenWang,
        }
    }

    pub fn stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.algorithm == Algorithm::Wolff && (params.q != 2 || params.has_ghost()) {
            return Err(Error::WolffUnsupported);
        }
        Ok(())
    }

    pub fn sweeps_per_sample(&self) -> usize {
        self.decorrelation_sweeps.max(1)
    }
}

#[inline]
fn bernoulli_threshold(p: f64) -> Threshold {
    if p <= 0.0 {
        Threshold::Never
    } else if p >= 1.0 {
        Threshold::Always
    } else {
        Threshold::Below((p * 18_446_744_073_709_551_616.0) as u64)
    }
}

#[derive(Clone, Copy)]
enum Threshold {
    Never,
    Always,
    Below(u64),
}

impl Threshold {
    #[inline]
    fn draw(self, rng: &mut impl RngCore) -> bool {
        match self {
            Threshold::Never => false,
            Threshold::Always => true,
            Threshold::Below(t) => rng.next_u64() < t,
        }
    }
}

const UNSET: u8 = u8::MAX;

/// Reusable buffers for Swendsen–Wang sweeps.
#[derive(Clone, Debug, Default)]
pub struct SwendsenWang {
    uf: UnionFind,
    root_color: Vec<u8>,
}

impl SwendsenWang {
    /// One sweep in place: draw bonds given the spins, then recolor the
    /// clusters of the new bonds. Afterwards `(bonds, spins)` is a coupled
    /// Edwards–Sokal pair.
    pub fn sweep(
        &mut self,
        geom: &LatticeGeometry,
        params: &ModelParams,
        ghost_sites: Option<&[bool]>,
        spins: &mut SpinConfiguration,
        bonds: &mut BondConfiguration,
        rng: &mut impl RngCore,
    ) {
        let n = geom.n_sites();
        let ghost = n as u32;
        self.uf.reset(n + 1);
        bonds.open.clear();
        let colors = &spins.colors;
        let t = bernoulli_threshold(params.p());
        for (i, bond) in geom.bonds().iter().enumerate() {
            if colors[bond.a as usize] == colors[bond.b as usize] && t.draw(rng) {
                bonds.open.set(i, true);
                self.uf.union(bond.a, bond.b);
            }
        }
        let forced = params.forced_color();
        match ghost_sites {
            Some(mask) => {
                if bonds.ghost_open.len() != n {
                    bonds.ghost_open = BitVec::zeros(n);
                } else {
                    bonds.ghost_open.clear();
                }
                let tg = bernoulli_threshold(params.ghost_p());
                for s in 0..n {
                    if mask[s] && colors[s] == forced && tg.draw(rng) {
                        bonds.ghost_open.set(s, true);
                        self.uf.union(s as u32, ghost);
                    }
                }
            }
            None => bonds.ghost_open = BitVec::zeros(0),
        }

        self.root_color.clear();
        self.root_color.resize(n + 1, UNSET);
        if ghost_sites.is_some() {
            let g = self.uf.find(ghost);
            self.root_color[g as usize] = forced;
        }
        let q = params.q;
        for s in 0..n {
            let r = self.uf.find(s as u32) as usize;
            if self.root_color[r] == UNSET {
                self.root_color[r] = rng.gen_range(0..q) as u8;
            }
            spins.colors[s] = self.root_color[r];
        }
    }

    /// Bonds given spins only (the first half of a sweep), without touching
    /// the spins. Used to attach an FK configuration to a Wolff state.
    pub fn draw_bonds(
        geom: &LatticeGeometry,
        params: &ModelParams,
        spins: &SpinConfiguration,
        bonds: &mut BondConfiguration,
        rng: &mut impl RngCore,
    ) {
        bonds.open.clear();
        bonds.ghost_open = BitVec::zeros(0);
        let t = bernoulli_threshold(params.p());
        for (i, bond) in geom.bonds().iter().enumerate() {
            if spins.colors[bond.a as usize] == spins.colors[bond.b as usize] && t.draw(rng) {
                bonds.open.set(i, true);
            }
        }
    }
}

/// Functional form of one Swendsen–Wang sweep.
pub fn sw_sweep(
    geom: &LatticeGeometry,
    params: &ModelParams,
    spins: &SpinConfiguration,
    rng: &mut impl RngCore,
) -> (BondConfiguration, SpinConfiguration) {
    let mask = params.ghost_sites(geom);
    let mut bonds = BondConfiguration::closed(geom, mask.is_some());
    let mut spins = spins.clone();
    SwendsenWang::default().sweep(geom, params, mask.as_deref(), &mut spins, &mut bonds, rng);
    (bonds, spins)
}

/// Reusable buffers for Wolff updates.
#[derive(Clone, Debug, Default)]
pub struct Wolff {
    stack: Vec<u32>,
    visited: Vec<u32>,
    generation: u32,
}

impl Wolff {
    /// Grow one cluster from a uniformly random seed and flip it. Returns the
    /// cluster size.
    pub fn step(
        &mut self,
        geom: &LatticeGeometry,
        params: &ModelParams,
        spins: &mut SpinConfiguration,
        rng: &mut impl RngCore,
    ) -> Result<usize> {
        if params.q != 2 || params.has_ghost() {
            return Err(Error::WolffUnsupported);
        }
        let n = geom.n_sites();
        if self.visited.len() != n {
            self.visited = vec![0; n];
            self.generation = 0;
        }
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.visited.iter_mut().for_each(|v| *v = 0);
            self.generation = 1;
        }
        let gen = self.generation;
        let t = bernoulli_threshold(params.p());
        let seed = rng.gen_range(0..n as u32);
        let color = spins.colors[seed as usize];
        self.stack.clear();
        self.stack.push(seed);
        self.visited[seed as usize] = gen;
        let mut size = 0;
        while let Some(s) = self.stack.pop() {
            size += 1;
            spins.colors[s as usize] = 1 - color;
            for dir in Direction::ALL {
                let Some(t_site) = geom.neighbor(s, dir) else { continue };
                if geom.bond_toward(s, dir).is_none() {
                    continue;
                }
                let ti = t_site as usize;
                if self.visited[ti] != gen && spins.colors[ti] == color && t.draw(rng) {
                    self.visited[ti] = gen;
                    self.stack.push(t_site);
                }
            }
        }
        Ok(size)
    }

    /// A fixed number of steps, `ceil(N^{1/8})`. The critical mean cluster
    /// size grows like `N^{7/8}`, so a sweep flips about one lattice volume.
    /// The count must not depend on the cluster sizes drawn: stopping once a
    /// volume has been flipped biases the retained states.
    pub fn sweep(
        &mut self,
        geom: &LatticeGeometry,
        params: &ModelParams,
        spins: &mut SpinConfiguration,
        rng: &mut impl RngCore,
    ) -> Result<()> {
        for _ in 0..wolff_steps_per_sweep(geom.n_sites()) {
            self.step(geom, params, spins, rng)?;
        }
        Ok(())
    }
}

pub fn wolff_steps_per_sweep(n_sites: usize) -> usize {
    ((n_sites as f64).powf(0.125).ceil() as usize).max(1)
}

/// Functional form of one Wolff update.
pub fn wolff_step(
    geom: &LatticeGeometry,
    params: &ModelParams,
    spins: &SpinConfiguration,
    rng: &mut impl RngCore,
) -> Result<SpinConfiguration> {
    let mut out = spins.clone();
    Wolff::default().step(geom, params, &mut out, rng)?;
    Ok(out)
}

/// Serializable chain state: spins plus the generator position. Restoring it
/// continues the chain bit for bit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainCheckpoint {
    pub seed: u64,
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub colors: Vec<u8>,
    pub sweeps_done: u64,
    pub emitted: usize,
}

/// A single Markov chain. Owns its state; one worker drives it.
#[derive(Clone, Debug)]
pub struct Chain<'g> {
    geom: &'g LatticeGeometry,
    params: ModelParams,
    algorithm: Algorithm,
    ghost_sites: Option<Vec<bool>>,
    rng: ChaCha8Rng,
    seed: u64,
    stream: u64,
    spins: SpinConfiguration,
    bonds: BondConfiguration,
    sw: SwendsenWang,
    wolff: Wolff,
    sweeps_done: u64,
}

impl<'g> Chain<'g> {
    /// Fresh chain from a uniformly random coloring.
    pub fn new(
        geom: &'g LatticeGeometry,
        params: ModelParams,
        algorithm: Algorithm,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        params.validate()?;
        if algorithm == Algorithm::Wolff && (params.q != 2 || params.has_ghost()) {
            return Err(Error::WolffUnsupported);
        }
        let mut rng = chain_rng(seed, stream);
        let spins = SpinConfiguration::random(geom.n_sites(), params.q, &mut rng);
        let ghost_sites = params.ghost_sites(geom);
        let bonds = BondConfiguration::closed(geom, ghost_sites.is_some());
        Ok(Self {
            geom,
            params,
            algorithm,
            ghost_sites,
            rng,
            seed,
            stream,
            spins,
            bonds,
            sw: SwendsenWang::default(),
            wolff: Wolff::default(),
            sweeps_done: 0,
        })
    }

    pub fn sweep(&mut self) {
        match self.algorithm {
            Algorithm::SwendsenWang => self.sw.sweep(
                self.geom,
                &self.params,
                self.ghost_sites.as_deref(),
                &mut self.spins,
                &mut self.bonds,
                &mut self.rng,
            ),
            Algorithm::Wolff => {
                self.wolff
                    .sweep(self.geom, &self.params, &mut self.spins, &mut self.rng)
                    .expect("validated at construction");
                SwendsenWang::draw_bonds(self.geom, &self.params, &self.spins, &mut self.bonds, &mut self.rng);
            }
        }
        self.sweeps_done += 1;
    }

    pub fn spins(&self) -> &SpinConfiguration {
        &self.spins
    }

    pub fn bonds(&self) -> &BondConfiguration {
        &self.bonds
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn geometry(&self) -> &'g LatticeGeometry {
        self.geom
    }

    pub fn sweeps_done(&self) -> u64 {
        self.sweeps_done
    }

    pub fn checkpoint(&self, emitted: usize) -> ChainCheckpoint {
        let pos = self.rng.get_word_pos();
        ChainCheckpoint {
            seed: self.seed,
            stream: self.stream,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
            colors: self.spins.colors.clone(),
            sweeps_done: self.sweeps_done,
            emitted,
        }
    }

    pub fn restore(
        geom: &'g LatticeGeometry,
        params: ModelParams,
        algorithm: Algorithm,
        ckpt: &ChainCheckpoint,
    ) -> Result<Self> {
        if ckpt.colors.len() != geom.n_sites() {
            return Err(invalid("checkpoint does not match the lattice"));
        }
        let mut chain = Self::new(geom, params, algorithm, ckpt.seed, ckpt.stream)?;
        chain.rng.set_word_pos(((ckpt.word_pos_hi as u128) << 64) | ckpt.word_pos_lo as u128);
        chain.spins.colors.clone_from(&ckpt.colors);
        chain.sweeps_done = ckpt.sweeps_done;
        // Bonds of the current state are not part of the checkpoint; the
        // next emitted sample is produced by fresh sweeps.
        Ok(chain)
    }
}

/// One retained state of an ensemble.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub index: usize,
    pub bonds: BondConfiguration,
    pub spins: SpinConfiguration,
}

/// Stream of retained samples of one chain.
#[derive(Clone, Debug)]
pub struct Ensemble<'g> {
    chain: Chain<'g>,
    config: ChainConfig,
    emitted: usize,
    thermalized: bool,
}

pub fn sample_ensemble<'g>(
    geom: &'g LatticeGeometry,
    params: &ModelParams,
    config: &ChainConfig,
) -> Result<Ensemble<'g>> {
    config.validate(params)?;
    let chain = Chain::new(geom, params.clone(), config.algorithm, config.seed, config.stream)?;
    Ok(Ensemble { chain, config: config.clone(), emitted: 0, thermalized: false })
}

impl<'g> Ensemble<'g> {
    pub fn resume(
        geom: &'g LatticeGeometry,
        params: &ModelParams,
        config: &ChainConfig,
        ckpt: &ChainCheckpoint,
    ) -> Result<Self> {
        config.validate(params)?;
        if ckpt.seed != config.seed || ckpt.stream != config.stream {
            return Err(invalid("checkpoint belongs to a different chain"));
        }
        let chain = Chain::restore(geom, params.clone(), config.algorithm, ckpt)?;
        let thermalized = ckpt.sweeps_done >= config.thermalization_sweeps as u64;
        Ok(Self { chain, config: config.clone(), emitted: ckpt.emitted, thermalized })
    }

    pub fn checkpoint(&self) -> ChainCheckpoint {
        self.chain.checkpoint(self.emitted)
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn chain(&self) -> &Chain<'g> {
        &self.chain
    }

    /// Advance to the next retained state and borrow it.
    pub fn next_state(&mut self) -> Option<(usize, &BondConfiguration, &SpinConfiguration)> {
        if self.emitted >= self.config.n_samples {
            return None;
        }
        if !self.thermalized {
            while self.chain.sweeps_done < self.config.thermalization_sweeps as u64 {
                self.chain.sweep();
            }
            self.thermalized = true;
        }
        for _ in 0..self.config.sweeps_per_sample() {
            self.chain.sweep();
        }
        let index = self.emitted;
        self.emitted += 1;
        Some((index, &self.chain.bonds, &self.chain.spins))
    }

    /// Collect every remaining sample, failing once their storage would
    /// exceed `byte_budget`.
    pub fn collect_within(mut self, byte_budget: usize) -> Result<Vec<Sample>> {
        let per_sample = self.chain.geom.n_bonds().div_ceil(8)
            + self.chain.geom.n_sites()
            + self.chain.ghost_sites.as_ref().map_or(0, |m| m.len().div_ceil(8));
        let mut out = Vec::new();
        let mut used = 0usize;
        while self.emitted < self.config.n_samples {
            if used + per_sample > byte_budget {
                return Err(Error::Exhausted { completed: out.len() });
            }
            let s = self.next().expect("more samples remain");
            used += per_sample;
            out.push(s);
        }
        Ok(out)
    }
}

impl Iterator for Ensemble<'_> {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        let (index, bonds, spins) = self.next_state()?;
        Some(Sample { index, bonds: bonds.clone(), spins: spins.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Boundary;

    #[test]
    fn critical_constants() {
        let bc = 0.5 * (1.0 + 2f64.sqrt()).ln();
        assert!((BETA_C - bc).abs() < 1e-16);
        assert!((p_from_beta(BETA_C).unwrap() - (2.0 - 2f64.sqrt())).abs() < 1e-15);
        assert!((P_C - (2.0 - 2f64.sqrt())).abs() < 1e-15);
        assert_eq!(p_from_beta(0.0).unwrap(), 0.0);
        assert!(p_from_beta(-0.1).is_err());
        assert_eq!(ghost_p_from_field(0.0), 0.0);
        assert!((potts_beta_c(2) - BETA_C).abs() < 1e-15);
        assert!((ModelParams::critical_ising().p() - P_C).abs() < 1e-15);
    }

    #[test]
    fn all_plus_opens_with_probability_p() {
        let g = LatticeGeometry::new(64, Boundary::Torus, 1.0).unwrap();
        let params = ModelParams::critical_ising();
        let spins = SpinConfiguration::uniform(g.n_sites(), 0);
        let mut rng = chain_rng(1, 0);
        let (bonds, _) = sw_sweep(&g, &params, &spins, &mut rng);
        let f = bonds.open_fraction();
        let se = (P_C * (1.0 - P_C) / g.n_bonds() as f64).sqrt();
        assert!((f - P_C).abs() < 5.0 * se, "open fraction {f}");
    }

    #[test]
    fn p_zero_opens_nothing() {
        let g = LatticeGeometry::new(16, Boundary::Torus, 1.0).unwrap();
        let params = ModelParams { q: 2, beta: 0.0, field: 0.0, field_window: None };
        let spins = SpinConfiguration::uniform(g.n_sites(), 0);
        let mut rng = chain_rng(2, 0);
        let (bonds, new) = sw_sweep(&g, &params, &spins, &mut rng);
        assert_eq!(bonds.open.count_ones(), 0);
        let plus = new.colors.iter().filter(|&&c| c == 0).count() as f64 / 256.0;
        assert!((plus - 0.5).abs() < 0.15);
    }

    #[test]
    fn p_one_is_absorbing() {
        let g = LatticeGeometry::new(8, Boundary::Torus, 1.0).unwrap();
        let params = ModelParams { q: 2, beta: f64::INFINITY.min(1e3), field: 0.0, field_window: None };
        assert_eq!(params.p(), 1.0);
        let mut spins = SpinConfiguration::uniform(g.n_sites(), 0);
        let mut rng = chain_rng(3, 0);
        for _ in 0..5 {
            let (bonds, next) = sw_sweep(&g, &params, &spins, &mut rng);
            assert_eq!(bonds.open.count_ones(), g.n_bonds());
            assert!(next.colors.iter().all(|&c| c == next.colors[0]));
            spins = next;
        }
    }

    #[test]
    fn wolff_edge_cases() {
        let g = LatticeGeometry::new(6, Boundary::Torus, 1.0).unwrap();
        let cold = ModelParams { q: 2, beta: 0.0, field: 0.0, field_window: None };
        let mut rng = chain_rng(4, 0);
        let spins = SpinConfiguration::random(36, 2, &mut rng);
        let out = wolff_step(&g, &cold, &spins, &mut rng).unwrap();
        let diff = spins.colors.iter().zip(&out.colors).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 1);

        let hot = ModelParams { q: 2, beta: 1e3, field: 0.0, field_window: None };
        let mut w = Wolff::default();
        let mut s = spins.clone();
        let flipped = w.step(&g, &hot, &mut s, &mut rng).unwrap();
        // The flipped set is exactly one like-colored component of the input.
        let changed: Vec<u32> =
            (0..36).filter(|&i| s.colors[i as usize] != spins.colors[i as usize]).collect();
        assert_eq!(changed.len(), flipped);
        let mut bonds = BondConfiguration::closed(&g, false);
        SwendsenWang::draw_bonds(&g, &hot, &spins, &mut bonds, &mut rng);
        let lab = crate::clusters::label(&g, &bonds);
        let c = lab.id[changed[0] as usize];
        let comp: Vec<u32> = (0..36).filter(|&i| lab.id[i as usize] == c).collect();
        assert_eq!(comp, changed);

        let potts = ModelParams::critical(3);
        assert!(matches!(wolff_step(&g, &potts, &spins, &mut rng), Err(Error::WolffUnsupported)));
        let field = ModelParams::critical_ising().with_field(0.1);
        assert!(wolff_step(&g, &field, &spins, &mut rng).is_err());
        let cfg = ChainConfig { algorithm: Algorithm::Wolff, ..ChainConfig::with_defaults(0, 6, 1) };
        assert!(sample_ensemble(&g, &field, &cfg).is_err());
    }

    #[test]
    fn ensembles_are_reproducible() {
        let g = LatticeGeometry::new(8, Boundary::Torus, 1.0).unwrap();
        let p = ModelParams::critical_ising();
        let cfg = ChainConfig::with_defaults(42, 8, 5);
        let a: Vec<Sample> = sample_ensemble(&g, &p, &cfg).unwrap().collect();
        let b: Vec<Sample> = sample_ensemble(&g, &p, &cfg).unwrap().collect();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        let c: Vec<Sample> = sample_ensemble(&g, &p, &ChainConfig { seed: 43, ..cfg.clone() }).unwrap().collect();
        assert_ne!(a[0], c[0]);
        let d: Vec<Sample> = sample_ensemble(&g, &p, &cfg.clone().stream(1)).unwrap().collect();
        assert_ne!(a[0], d[0]);
        let empty = ChainConfig { n_samples: 0, ..cfg };
        assert_eq!(sample_ensemble(&g, &p, &empty).unwrap().count(), 0);
    }

    #[test]
    fn checkpoint_resume_is_bitwise_continuous() {
        let g = LatticeGeometry::new(8, Boundary::Torus, 1.0).unwrap();
        for (params, algorithm) in [
            (ModelParams::critical_ising(), Algorithm::SwendsenWang),
            (ModelParams::critical_ising(), Algorithm::Wolff),
            (ModelParams::critical_ising().with_field(0.05), Algorithm::SwendsenWang),
        ] {
            let cfg = ChainConfig { algorithm, ..ChainConfig::with_defaults(7, 8, 10) };
            let full: Vec<Sample> = sample_ensemble(&g, &params, &cfg).unwrap().collect();
            let mut first = sample_ensemble(&g, &params, &cfg).unwrap();
            let head: Vec<Sample> = first.by_ref().take(4).collect();
            let ckpt = first.checkpoint();
            let json = serde_json::to_string(&ckpt).unwrap();
            let ckpt: ChainCheckpoint = serde_json::from_str(&json).unwrap();
            let tail: Vec<Sample> = Ensemble::resume(&g, &params, &cfg, &ckpt).unwrap().collect();
            assert_eq!(head.len() + tail.len(), 10);
            assert_eq!(&full[..4], &head[..]);
            assert_eq!(&full[4..], &tail[..]);
        }
    }

    #[test]
    fn budget_exhaustion_reports_progress() {
        let g = LatticeGeometry::new(8, Boundary::Torus, 1.0).unwrap();
        let cfg = ChainConfig::with_defaults(1, 8, 10);
        let e = sample_ensemble(&g, &ModelParams::critical_ising(), &cfg).unwrap();
        match e.collect_within(3 * (16 + 64)) {
            Err(Error::Exhausted { completed }) => assert_eq!(completed, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ghost_cluster_keeps_forced_color() {
        let g = LatticeGeometry::new(8, Boundary::Torus, 1.0).unwrap();
        for field in [0.3, -0.3] {
            let params = ModelParams::critical_ising().with_field(field);
            let mut rng = chain_rng(5, 0);
            let mut spins = SpinConfiguration::random(64, 2, &mut rng);
            for _ in 0..10 {
                let (bonds, next) = sw_sweep(&g, &params, &spins, &mut rng);
                let lab = crate::clusters::label(&g, &bonds);
                for s in 0..64u32 {
                    if lab.ghost[lab.id[s as usize] as usize] {
                        assert_eq!(next.colors[s as usize], params.forced_color());
                    }
                }
                spins = next;
            }
        }
    }
}
