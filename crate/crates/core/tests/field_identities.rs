use isingfield::clusters::{decompose, label, trace_outer_loop, LoopKind};
use isingfield::field::{
    field_sample_from_clusters, field_value_from_spins, LoopDiameter, SiteWeights, ThetaAccumulator,
};
use isingfield::lattice::{Boundary, BulkBox, LatticeGeometry};
use isingfield::sampler::{
    chain_rng, exact_expectations, exact_spin_distribution, sample_ensemble, BondConfiguration, ChainConfig,
    ModelParams, BETA_C,
};
use isingfield::stats::{batch_mean, ConnectivityMap};
use proptest::prelude::*;

/// On the 3x3 block the spin route and the random-sign cluster route give
/// the same law of the block magnetization. Second and fourth moments are
/// compared exactly: spin enumeration against bond enumeration with
/// `E[(Σ η_i n_i)^4] = 3 (Σ n_i^2)^2 - 2 Σ n_i^4`.
#[test]
fn spin_and_cluster_block_magnetization_have_equal_moments() {
    let g = LatticeGeometry::new(3, Boundary::Free, 1.0).unwrap();
    let spins = exact_spin_distribution(&g, BETA_C, 0.0).unwrap();
    let (mut m2, mut m4) = (0.0, 0.0);
    for (k, w) in spins.iter().enumerate() {
        let m = 9.0 - 2.0 * k.count_ones() as f64;
        m2 += w * m.powi(2);
        m4 += w * m.powi(4);
    }
    let clusters = exact_expectations(&g, &ModelParams::critical_ising(), 2, |_, l, out| {
        let s2: f64 = l.sizes.iter().map(|&n| (n as f64).powi(2)).sum();
        let s4: f64 = l.sizes.iter().map(|&n| (n as f64).powi(4)).sum();
        out[0] = s2;
        out[1] = 3.0 * s2 * s2 - 2.0 * s4;
    })
    .unwrap();
    assert!((clusters[0] - m2).abs() < 1e-12 * m2, "{} vs {m2}", clusters[0]);
    assert!((clusters[1] - m4).abs() < 1e-12 * m4, "{} vs {m4}", clusters[1]);
}

#[test]
fn connectivity_double_sum_matches_cluster_size_estimate() {
    let bulk = BulkBox::new(8, 2.0).unwrap();
    let g = &bulk.geometry;
    let mut map = ConnectivityMap::new(g).unwrap();
    let mut theta = ThetaAccumulator::new(g, bulk.observation);
    let mut ens = sample_ensemble(g, &ModelParams::critical_ising(), &ChainConfig::with_defaults(4, 16, 3000)).unwrap();
    while let Some((_, bonds, _)) = ens.next_state() {
        let l = label(g, bonds);
        map.add(g, &l);
        theta.add(&l);
    }
    let est = theta.finish("t").unwrap();
    let sum = map.box_double_sum(8);
    assert!((sum - est.theta_inv_sq).abs() < 4.0 * est.stderr, "{sum} vs {} ± {}", est.theta_inv_sq, est.stderr);
}

#[test]
fn cluster_signs_reproduce_the_spin_second_moment() {
    let bulk = BulkBox::new(8, 2.0).unwrap();
    let g = &bulk.geometry;
    let unit = SiteWeights::indicator(g.sites_in_region(&bulk.observation));
    let mut signs = chain_rng(5, 7);
    let (mut from_spins, mut from_clusters) = (Vec::new(), Vec::new());
    let mut ens = sample_ensemble(g, &ModelParams::critical_ising(), &ChainConfig::with_defaults(5, 16, 4000)).unwrap();
    while let Some((_, bonds, spins)) = ens.next_state() {
        from_spins.push(field_value_from_spins(g, spins, 1.0, &unit).powi(2));
        let dec = decompose(g, bonds);
        let s = field_sample_from_clusters(&dec, g, 1.0, &unit, &[], LoopDiameter::Proxy, &mut signs).unwrap();
        from_clusters.push(s.value.powi(2));
    }
    let a = batch_mean(&from_spins, 40).unwrap();
    let b = batch_mean(&from_clusters, 40).unwrap();
    assert!((a.0 - b.0).abs() < 4.5 * a.1.hypot(b.1), "{a:?} vs {b:?}");
}

fn random_bonds(g: &LatticeGeometry, bits: &[bool]) -> BondConfiguration {
    let mut b = BondConfiguration::closed(g, false);
    for (i, &o) in bits.iter().enumerate().take(g.n_bonds()) {
        b.open.set(i, o);
    }
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every cluster on a free lattice has an outer loop that winds once
    /// around each of its sites, and the cutoff field removes clusters in
    /// order of loop diameter.
    #[test]
    fn outer_loops_enclose_their_clusters(bits in prop::collection::vec(any::<bool>(), 112), seed in any::<u64>()) {
        let g = LatticeGeometry::new(8, Boundary::Free, 0.125).unwrap();
        let bonds = random_bonds(&g, &bits);
        let dec = decompose(&g, &bonds);
        for i in 0..dec.n_clusters() {
            let lp = trace_outer_loop(&dec, &g, i).unwrap();
            prop_assert_eq!(lp.kind, LoopKind::Type1SitesInside);
            prop_assert_eq!(lp.length() % 2, 0);
            prop_assert!(lp.length() >= 4 * dec.cluster(i).size.min(1));
            for &s in dec.sites(i) {
                prop_assert_eq!(lp.winding_number(dec.unwrapped(s)), 1);
            }
            prop_assert!(lp.diameter >= dec.cluster(i).diameter - 1e-12);
            prop_assert!(lp.diameter <= dec.cluster(i).diameter + 2.0 * g.spacing() + 1e-12);
            prop_assert!((dec.loop_diameter_proxy(i) - lp.diameter).abs() <= g.spacing() + 1e-12);
        }

        let f = SiteWeights::sampled(&g, |x, y| 1.0 + x - y);
        let eps = [0.0, 0.1, 0.3, 0.6, 2.0];
        let s = field_sample_from_clusters(&dec, &g, 0.5, &f, &eps, LoopDiameter::Traced, &mut chain_rng(seed, 0)).unwrap();
        prop_assert!((s.cutoff_values[0].1 - s.value).abs() < 1e-12);
        prop_assert_eq!(s.cutoff_values[4].1, 0.0);
        for w in eps.windows(2) {
            prop_assert!(s.small_cluster_square_mass(w[0]) <= s.small_cluster_square_mass(w[1]));
        }
    }
}
