use isingfield::exec::Execution;
use isingfield::lattice::{Boundary, LatticeGeometry, Region};
use isingfield::nearcritical::{
    compare_patterns, magnetization_curve, sample_ghost_ensemble, window_patterns, GhostModel,
};
use isingfield::sampler::{exact_expectation, exact_spin_distribution, sample_ensemble, ChainConfig, ModelParams, BETA_C};

#[test]
fn zero_field_ghost_chain_is_the_plain_chain() {
    let g = LatticeGeometry::new(8, Boundary::Torus, 1.0).unwrap();
    let cfg = ChainConfig::with_defaults(21, 8, 25);
    let ghost: Vec<_> = sample_ghost_ensemble(&g, &GhostModel::new(0.0, 0.3).unwrap(), &cfg).unwrap().collect();
    let plain: Vec<_> = sample_ensemble(&g, &ModelParams::critical_ising(), &cfg).unwrap().collect();
    assert_eq!(ghost, plain);
}

/// Ghost connection probability equals the spin expectation, and both grow
/// with the field.
#[test]
fn exact_magnetization_is_monotone_in_the_field() {
    let g = LatticeGeometry::new(3, Boundary::Free, 1.0).unwrap();
    let mut last = 0.0;
    for field in [0.0, 1e-3, 1e-2, 0.05, 0.2, 1.0] {
        let params = ModelParams::critical_ising().with_field(field);
        let ghost = exact_expectation(&g, &params, |_, l| {
            (0..9).filter(|&s| l.ghost[l.id[s] as usize]).count() as f64 / 9.0
        })
        .unwrap();
        let spins = exact_spin_distribution(&g, BETA_C, field).unwrap();
        let m: f64 = spins.iter().enumerate().map(|(k, w)| w * (9.0 - 2.0 * k.count_ones() as f64) / 9.0).sum();
        assert!((ghost - m).abs() < 1e-10 * m.abs().max(1e-3), "H = {field}: {ghost} vs {m}");
        assert!(field == 0.0 || ghost > last);
        last = ghost;
    }
}

#[test]
fn sampled_magnetization_curve_increases() {
    let g = LatticeGeometry::new(16, Boundary::Torus, 1.0 / 16.0).unwrap();
    let h = [0.0, 0.5, 2.0, 8.0];
    let cfg = ChainConfig::with_defaults(31, 16, 400);
    let curve = magnetization_curve(&g, 0.1, &h, None, &cfg, Execution::Parallel).unwrap();
    assert!(curve[0].m.abs() < 0.1);
    for w in curve.windows(2) {
        assert!(w[1].m > w[0].m - 3.0 * w[0].stderr.hypot(w[1].stderr), "{curve:?}");
    }
    let same = magnetization_curve(&g, 0.1, &h, None, &cfg, Execution::Sequential).unwrap();
    assert_eq!(curve, same);
}

#[test]
fn local_patterns_are_mutually_continuous_across_fields() {
    let g = LatticeGeometry::new(16, Boundary::Torus, 1.0 / 16.0).unwrap();
    let window = g.sites_in_region(&Region::Rect { x0: 0.25, y0: 0.25, x1: 0.375, y1: 0.375 });
    assert_eq!(window.len(), 4);
    let cfg = ChainConfig::with_defaults(41, 16, 3000);
    let laws: Vec<_> = [0.0, 0.05]
        .iter()
        .map(|&h| {
            let samples: Vec<_> =
                sample_ghost_ensemble(&g, &GhostModel::new(h, 0.2).unwrap(), &cfg).unwrap().map(|s| s.spins).collect();
            window_patterns(&window, &samples).unwrap()
        })
        .collect();
    let cmp = compare_patterns(&laws[0], &laws[1], 30);
    assert!(cmp.mutually_continuous(), "{cmp:?}");
    assert!(cmp.max_abs_log_ratio < 3.0);
}
