//! Exhaustive enumeration on small graphs.
//!
//! The bond oracle sums over every FK configuration with random-cluster
//! weight `p^open (1-p)^closed q^(clusters not joined to the ghost)`, times
//! `g^ghost_open (1-g)^ghost_closed` for the ghost bonds. The spin oracle
//! sums Ising Gibbs weights directly in spin space and shares no code with
//! the bond oracle.

use crate::clusters::{label_with, Labels, UnionFind};
use crate::error::{invalid, Error, Result};
use crate::lattice::LatticeGeometry;

use super::{BondConfiguration, ModelParams};

/// Largest total number of lattice plus ghost bonds the oracle enumerates.
pub const ORACLE_BOND_LIMIT: usize = 26;

/// Exact random-cluster expectation of a scalar observable.
pub fn exact_expectation(
    geom: &LatticeGeometry,
    params: &ModelParams,
    observable: impl Fn(&BondConfiguration, &Labels) -> f64,
) -> Result<f64> {
    let v = exact_expectations(geom, params, 1, |b, l, out| out[0] = observable(b, l))?;
    Ok(v[0])
}

/// Exact expectations of `n_outputs` observables in one enumeration. The
/// closure writes the observable values for one configuration into `out`.
pub fn exact_expectations(
    geom: &LatticeGeometry,
    params: &ModelParams,
    n_outputs: usize,
    observables: impl Fn(&BondConfiguration, &Labels, &mut [f64]),
) -> Result<Vec<f64>> {
    params.validate()?;
    let ghost_sites: Vec<usize> = match params.ghost_sites(geom) {
        Some(mask) => mask.iter().enumerate().filter(|(_, &m)| m).map(|(s, _)| s).collect(),
        None => Vec::new(),
    };
    let nb = geom.n_bonds();
    let total = nb + ghost_sites.len();
    if total > ORACLE_BOND_LIMIT {
        return Err(Error::OracleTooLarge { bonds: total, limit: ORACLE_BOND_LIMIT });
    }
    let p = params.p();
    let g = params.ghost_p();
    let q = params.q as f64;
    let mut bonds = BondConfiguration::closed(geom, params.has_ghost());
    let mut uf = UnionFind::new(geom.n_sites());
    let mut acc = vec![0.0; n_outputs];
    let mut out = vec![0.0; n_outputs];
    let mut z = 0.0;
    for mask in 0u64..(1u64 << total) {
        let mut w = 1.0;
        for i in 0..nb {
            let on = (mask >> i) & 1 == 1;
            bonds.open.set(i, on);
            w *= if on { p } else { 1.0 - p };
        }
        for (j, &s) in ghost_sites.iter().enumerate() {
            let on = (mask >> (nb + j)) & 1 == 1;
            bonds.ghost_open.set(s, on);
            w *= if on { g } else { 1.0 - g };
        }
        if w == 0.0 {
            continue;
        }
        let labels = label_with(geom, &bonds, &mut uf);
        w *= q.powi(labels.n_ghost_free_clusters() as i32);
        out.iter_mut().for_each(|o| *o = 0.0);
        observables(&bonds, &labels, &mut out);
        for (a, o) in acc.iter_mut().zip(&out) {
            *a += w * o;
        }
        z += w;
    }
    Ok(acc.into_iter().map(|a| a / z).collect())
}

/// Exact Ising Gibbs distribution `exp(-beta E) / Z` over all `2^N` spin
/// states, with `E = -sum_bonds S_x S_y - H sum_x S_x`. In state index `k`,
/// bit `x` set means spin `-1` at site `x`.
pub fn exact_spin_distribution(geom: &LatticeGeometry, beta: f64, field: f64) -> Result<Vec<f64>> {
    let n = geom.n_sites();
    if n > 20 {
        return Err(invalid(format!("spin enumeration over {n} sites is too large")));
    }
    let spin = |k: usize, x: u32| if (k >> x) & 1 == 1 { -1.0 } else { 1.0 };
    let log_w: Vec<f64> = (0..1usize << n)
        .map(|k| {
            let coupling: f64 = geom.bonds().iter().map(|b| spin(k, b.a) * spin(k, b.b)).sum();
            let magnet: f64 = (0..n as u32).map(|x| spin(k, x)).sum();
            beta * (coupling + field * magnet)
        })
        .collect();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}
