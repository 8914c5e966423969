//! One function per experiment. Each runs its chains on the worker pool,
//! writes its tables and returns the invariant checks it evaluated.

use anyhow::{bail, Result};
use isingfield::clusters::{count_crossing_clusters, decompose, label_with, trace_outer_loop, LoopKind, UnionFind};
use isingfield::exec::{map, Execution};
use isingfield::field::{
    field_sample_from_clusters, field_value_from_spins, potts_color_field, LoopDiameter, SiteWeights, ThetaEstimate,
};
use isingfield::lattice::{Boundary, BulkBox, LatticeGeometry};
use isingfield::nearcritical::{
    check_free_energy_grid, default_free_energy_grid, fit_correlation_window, ghost_connected, integrate_free_energy,
    window_area, GhostModel,
};
use isingfield::sampler::{chain_rng, exact_expectations, ModelParams};
use isingfield::stats::{
    batch_mean, fit_power_law, kurtosis, survival_tail, wasserstein2, EmpiricalDistribution, TwoPointAccumulator,
    TwoPointRow, DEFAULT_BLOCKS,
};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::Experiment;
use crate::output::RunContext;
use crate::runner::{run_chain, ChainSpec, Records};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check { name: name.into(), pass, detail: detail.into() }
}

/// Streams of theta-estimation chains start here; main chains use small
/// stream numbers.
const THETA_STREAM: u64 = 1 << 20;
const SIGN_SALT: u64 = 0x5349_474e_5f45_5441;

/// Generator for the cluster signs (or colors) of sample `index` of the
/// chain on `stream`. Independent of the chain's own generator and of
/// sample order, so resumed runs draw the same signs.
fn sign_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    chain_rng(seed ^ SIGN_SALT, (stream << 32) | index as u64)
}

fn mean_err(series: &[f64]) -> Result<(f64, f64)> {
    Ok(batch_mean(series, DEFAULT_BLOCKS)?)
}

fn z_score(a: (f64, f64), b: (f64, f64)) -> f64 {
    let s = a.1.hypot(b.1);
    if s > 0.0 {
        (a.0 - b.0).abs() / s
    } else if a.0 == b.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn run(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    match ctx.config.experiment {
        Experiment::OracleCheck => oracle_check(ctx, exec),
        Experiment::TwoPoint => two_point(ctx, exec),
        Experiment::ThetaScaling => theta_scaling(ctx, exec),
        Experiment::FieldDist => field_dist(ctx, exec),
        Experiment::CutoffRemoval => cutoff_removal(ctx, exec),
        Experiment::Crossings => crossings(ctx, exec),
        Experiment::PottsField => potts_field(ctx, exec),
        Experiment::NearCritical => near_critical(ctx, exec),
        Experiment::FreeEnergy => free_energy(ctx, exec),
        Experiment::LoopValidate => loop_validate(ctx, exec),
    }
}

/// Runs `job` for every item on the pool, in input order.
fn each<T: Send, R: Send>(exec: Execution, items: Vec<T>, job: impl Fn(T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    map(exec, items, job).into_iter().collect()
}

fn unit_torus(side: usize, boundary: Boundary) -> Result<LatticeGeometry> {
    Ok(LatticeGeometry::new(side, boundary, 1.0 / side as f64)?)
}

fn bulk_box(ctx: &RunContext, side: usize) -> Result<BulkBox> {
    Ok(BulkBox::new(side, ctx.config.geometry.margin)?)
}

fn weights(ctx: &RunContext, bulk: &BulkBox) -> Result<Vec<SiteWeights>> {
    ctx.config
        .test_functions(bulk.observation)
        .iter()
        .map(|f| Ok(f.on(&bulk.geometry)?))
        .collect()
}

fn box_details(bulk: &BulkBox) -> serde_json::Value {
    json!({
        "box_side": bulk.box_side,
        "torus_side": bulk.geometry.side(),
        "spacing": bulk.geometry.spacing(),
        "unit_box": bulk.observation,
    })
}

// Scale factor

#[derive(Serialize)]
struct ThetaRow {
    #[serde(rename = "L")]
    torus_side: usize,
    boundary: Boundary,
    #[serde(rename = "box")]
    box_side: usize,
    theta_inv_sq: f64,
    stderr: f64,
    n_samples: usize,
    seed: u64,
}

struct Theta {
    estimate: ThetaEstimate,
    key: Option<String>,
    row: ThetaRow,
}

/// `Θ` for the unit box of `bulk`: the configured value, or an estimate
/// from a zero-field chain of the same geometry.
fn theta_for(ctx: &RunContext, bulk: &BulkBox, run: usize, q: u32) -> Result<Theta> {
    let cfg = &ctx.config;
    let g = &bulk.geometry;
    let row = |est: &ThetaEstimate| ThetaRow {
        torus_side: g.side(),
        boundary: g.boundary(),
        box_side: bulk.box_side,
        theta_inv_sq: est.theta_inv_sq,
        stderr: est.stderr,
        n_samples: est.n_samples,
        seed: cfg.seed,
    };
    if let Some(theta) = cfg.analysis.theta {
        let estimate = ThetaEstimate::from_inv_sq(theta.powi(-2), 0.0, bulk.observation, 0, "config");
        return Ok(Theta { row: row(&estimate), estimate, key: None });
    }
    let key = format!("theta-box{}-q{q}", bulk.box_side);
    let n = cfg.analysis.theta_samples.unwrap_or(cfg.chain.samples);
    let spec = ChainSpec {
        key: key.clone(),
        geom: g,
        params: ModelParams::critical(q),
        chain: cfg.chain.chain(cfg.seed, THETA_STREAM + run as u64, g.side(), n),
        width: 1,
    };
    let box_sites = g.sites_in_region(&bulk.observation);
    let mut uf = UnionFind::new(g.n_sites());
    let mut scratch = Vec::new();
    let records = run_chain(ctx, &spec, |_, bonds, _, out| {
        out[0] = label_with(g, bonds, &mut uf).sum_squared_restricted(&box_sites, &mut scratch) as f64;
        Ok(())
    })?;
    let (mean, stderr) = mean_err(&records.column(0))?;
    let estimate = ThetaEstimate::from_inv_sq(mean, stderr, bulk.observation, records.len(), key.clone());
    Ok(Theta { row: row(&estimate), estimate, key: Some(key) })
}

fn write_thetas(ctx: &RunContext, thetas: &[&Theta]) -> Result<()> {
    let keys: Vec<String> = thetas.iter().filter_map(|t| t.key.clone()).collect();
    ctx.write_csv(
        "theta.csv",
        &keys,
        json!({ "margin": ctx.config.geometry.margin, "source": if ctx.config.analysis.theta.is_some() { "config" } else { "estimated" } }),
        thetas.iter().map(|t| &t.row),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct PowerFitRow<'a> {
    quantity: &'a str,
    label: String,
    exponent: f64,
    stderr: f64,
    amplitude: f64,
    r_squared: f64,
    x_lo: f64,
    x_hi: f64,
}

fn theta_scaling(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    let sides = ctx.config.geometry.sides.clone();
    let thetas = each(exec, sides.iter().copied().enumerate().collect(), |(i, side)| {
        theta_for(ctx, &bulk_box(ctx, side)?, i, ctx.config.model.q)
    })?;
    write_thetas(ctx, &thetas.iter().collect::<Vec<_>>())?;
    let keys: Vec<String> = thetas.iter().filter_map(|t| t.key.clone()).collect();
    let mut checks = Vec::new();
    let increasing = thetas.windows(2).all(|w| w[1].row.theta_inv_sq > w[0].row.theta_inv_sq);
    checks.push(check("theta-increasing", increasing || sides.windows(2).any(|w| w[1] <= w[0]), "Θ^-2 grows with the box side"));
    if sides.len() >= 3 {
        let pts: Vec<(f64, f64, f64)> =
            thetas.iter().map(|t| (t.row.box_side as f64, t.row.theta_inv_sq, t.row.stderr)).collect();
        let fit = fit_power_law(&pts)?;
        println!("theta-scaling: Θ^-2 ~ L^{:.4} ± {:.4} (R^2 {:.4})", fit.exponent, fit.stderr, fit.r_squared);
        ctx.write_csv(
            "theta_fit.csv",
            &keys,
            json!({ "weights": "batch-means stderr" }),
            [PowerFitRow {
                quantity: "theta_inv_sq",
                label: "box".into(),
                exponent: fit.exponent,
                stderr: fit.stderr,
                amplitude: fit.amplitude,
                r_squared: fit.r_squared,
                x_lo: fit.window.0,
                x_hi: fit.window.1,
            }],
        )?;
    }
    Ok(checks)
}

// Oracle

#[derive(Serialize)]
struct OracleRow {
    side: usize,
    observable: String,
    exact: f64,
    estimate: f64,
    stderr: f64,
    z: f64,
    pass: bool,
}

fn oracle_check(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    let cfg = &ctx.config;
    let boundary = cfg.boundary();
    let params = cfg.model.params();
    let results = each(exec, cfg.geometry.sides.iter().copied().enumerate().collect(), |(i, side)| {
        let g = LatticeGeometry::new(side, boundary, 1.0)?;
        let n = g.n_sites() as u32;
        let pairs: Vec<(u32, u32)> = (0..n).flat_map(|x| (x + 1..n).map(move |y| (x, y))).collect();
        let mut names: Vec<String> = pairs.iter().map(|(x, y)| format!("connected({x},{y})")).collect();
        names.extend((0..g.n_bonds()).map(|b| format!("open({b})")));
        names.push("clusters".into());
        let width = names.len();
        let observe = |open: &isingfield::bits::BitVec, l: &isingfield::clusters::Labels, out: &mut [f64]| {
            for (k, &(x, y)) in pairs.iter().enumerate() {
                out[k] = l.connected(x, y) as u8 as f64;
            }
            for b in 0..open.len() {
                out[pairs.len() + b] = open.get(b) as u8 as f64;
            }
            out[width - 1] = l.n_ghost_free_clusters() as f64;
        };
        let exact = exact_expectations(&g, &params, width, |b, l, out| observe(&b.open, l, out))?;
        let spec = ChainSpec {
            key: format!("oracle-L{side}"),
            geom: &g,
            params: params.clone(),
            chain: cfg.chain.chain(cfg.seed, i as u64, side, cfg.chain.samples),
            width,
        };
        let mut uf = UnionFind::new(g.n_sites());
        let records = run_chain(ctx, &spec, |_, bonds, _, out| {
            observe(&bonds.open, &label_with(&g, bonds, &mut uf), out);
            Ok(())
        })?;
        let rows = names
            .into_iter()
            .enumerate()
            .map(|(j, observable)| {
                let (estimate, stderr) = mean_err(&records.column(j))?;
                let z = z_score((estimate, stderr), (exact[j], 0.0));
                Ok(OracleRow { side, observable, exact: exact[j], estimate, stderr, z, pass: z < 4.0 })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((spec.key, rows))
    })?;
    let keys: Vec<String> = results.iter().map(|r| r.0.clone()).collect();
    let rows: Vec<&OracleRow> = results.iter().flat_map(|r| &r.1).collect();
    println!("{:>4}  {:<18} {:>10} {:>10} {:>9} {:>6}  result", "L", "observable", "exact", "estimate", "stderr", "z");
    for r in &rows {
        println!(
            "{:>4}  {:<18} {:>10.6} {:>10.6} {:>9.2e} {:>6.2}  {}",
            r.side,
            r.observable,
            r.exact,
            r.estimate,
            r.stderr,
            r.z,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    ctx.write_csv("oracle.csv", &keys, json!({ "params": params, "boundary": boundary, "tolerance_z": 4.0 }), &rows)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    let worst = rows.iter().map(|r| r.z).fold(0.0, f64::max);
    Ok(vec![check("oracle-agreement", failed == 0, format!("{failed} of {} observables beyond 4σ, max |z| {worst:.2}", rows.len()))])
}

// Two-point function

#[derive(Serialize)]
struct TwoPointCsvRow {
    #[serde(rename = "L")]
    side: usize,
    r: usize,
    tau: f64,
    stderr: f64,
    n_samples: usize,
}

fn two_point_rows(records: &Records, offset: usize, r_max: usize, exclude_ghost: bool, g: &LatticeGeometry) -> Result<Vec<TwoPointRow>> {
    let rows = records.rows().map(|r| &r[offset..offset + r_max + 1]);
    Ok(TwoPointAccumulator::from_rows(r_max, exclude_ghost, rows)?.table(g)?)
}

fn fit_window(ctx: &RunContext, r_max: usize) -> (usize, usize) {
    ctx.config
        .analysis
        .fit_window
        .map_or((4.min(r_max), r_max), |(lo, hi)| (lo.ceil() as usize, (hi.floor() as usize).min(r_max)))
}

fn two_point(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    let cfg = &ctx.config;
    let params = cfg.model.params();
    let truncated = params.has_ghost();
    let results = each(exec, cfg.geometry.sides.iter().copied().enumerate().collect(), |(i, side)| {
        let g = unit_torus(side, Boundary::Torus)?;
        let r_max = cfg.analysis.r_max.unwrap_or((side / 8).max(1)).min(side - 1);
        let spec = ChainSpec {
            key: format!("two-point-L{side}"),
            geom: &g,
            params: params.clone(),
            chain: cfg.chain.chain(cfg.seed, i as u64, side, cfg.chain.samples),
            width: r_max + 1,
        };
        let mut acc = TwoPointAccumulator::new(&g, r_max, truncated)?;
        let mut uf = UnionFind::new(g.n_sites());
        let records = run_chain(ctx, &spec, |_, bonds, _, out| {
            acc.add(&g, &label_with(&g, bonds, &mut uf));
            out.copy_from_slice(&acc.last_row().expect("row just added"));
            Ok(())
        })?;
        let rows = two_point_rows(&records, 0, r_max, truncated, &g)?;
        let window = fit_window(ctx, r_max);
        let pts: Vec<(f64, f64, f64)> = rows
            .iter()
            .filter(|r| r.r >= window.0 && r.r <= window.1 && r.tau > 0.0)
            .map(|r| (r.r as f64, r.tau, r.stderr))
            .collect();
        let fit = if truncated {
            None
        } else {
            fit_power_law(&pts).ok().map(|f| PowerFitRow {
                quantity: "tau",
                label: format!("L={side}"),
                exponent: f.exponent,
                stderr: f.stderr,
                amplitude: f.amplitude,
                r_squared: f.r_squared,
                x_lo: f.window.0,
                x_hi: f.window.1,
            })
        };
        let exp_fit = if truncated { fit_correlation_window(&rows, window, true) } else { None };
        Ok((spec.key, side, records.len(), rows, fit, exp_fit))
    })?;
    let keys: Vec<String> = results.iter().map(|r| r.0.clone()).collect();
    let table = results.iter().flat_map(|(_, side, n, rows, _, _)| {
        rows.iter().map(move |r| TwoPointCsvRow { side: *side, r: r.r, tau: r.tau, stderr: r.stderr, n_samples: *n })
    });
    ctx.write_csv("two_point.csv", &keys, json!({ "params": params, "truncated": truncated, "units": "lattice" }), table)?;
    let mut checks = Vec::new();
    for (key, side, _, rows, fit, exp_fit) in &results {
        let monotone = rows.windows(2).all(|w| w[1].tau <= w[0].tau + 3.0 * w[0].stderr.hypot(w[1].stderr));
        checks.push(check(format!("{key}-decreasing"), monotone, "τ(r) nonincreasing within 3σ"));
        if let Some(f) = fit {
            println!("L = {side}: τ(r) ~ r^{:.4} ± {:.4} over [{}, {}]", f.exponent, f.stderr, f.x_lo, f.x_hi);
        }
        if let Some(f) = exp_fit {
            println!("L = {side}: truncated τ(r) ~ exp(-r / {:.3}), R^2 {:.4}", f.correlation_length(), f.r_squared);
        }
    }
    let fits: Vec<&PowerFitRow> = results.iter().filter_map(|r| r.4.as_ref()).collect();
    if !fits.is_empty() {
        ctx.write_csv("two_point_fit.csv", &keys, json!({ "weights": "batch-means stderr" }), fits)?;
    }
    Ok(checks)
}

// Field samples

#[derive(Serialize)]
struct FieldRow {
    run_id: usize,
    sample_idx: usize,
    f_id: usize,
    epsilon: f64,
    value: f64,
}

#[derive(Serialize)]
struct FieldSummaryRow {
    #[serde(rename = "box")]
    box_side: usize,
    f_id: usize,
    route: &'static str,
    mean: f64,
    stderr: f64,
    second_moment: f64,
    second_moment_stderr: f64,
    kurtosis: Option<f64>,
    kurtosis_stderr: Option<f64>,
    w2_to_next_box: Option<f64>,
}

struct FieldRun {
    key: String,
    theta: Theta,
    box_side: usize,
    records: Records,
}

fn field_dist(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    let cfg = &ctx.config;
    let sides = cfg.geometry.sides.clone();
    let runs = each(exec, sides.iter().copied().enumerate().collect(), |(i, side)| {
        let bulk = bulk_box(ctx, side)?;
        let g = &bulk.geometry;
        let theta = theta_for(ctx, &bulk, i, 2)?;
        let th = theta.estimate.theta;
        let fs = weights(ctx, &bulk)?;
        let stream = i as u64;
        let spec = ChainSpec {
            key: format!("field-box{side}"),
            geom: g,
            params: ModelParams::critical_ising(),
            chain: cfg.chain.chain(cfg.seed, stream, g.side(), cfg.chain.samples),
            width: 2 * fs.len(),
        };
        let records = run_chain(ctx, &spec, |index, bonds, spins, out| {
            let dec = decompose(g, bonds);
            let mut signs = sign_rng(cfg.seed, stream, index);
            for (k, f) in fs.iter().enumerate() {
                out[2 * k] = field_value_from_spins(g, spins, th, f);
                out[2 * k + 1] =
                    field_sample_from_clusters(&dec, g, th, f, &[], LoopDiameter::Proxy, &mut signs)?.value;
            }
            Ok(())
        })?;
        Ok(FieldRun { key: spec.key, theta, box_side: side, records })
    })?;
    let n_f = runs[0].records.width / 2;
    let mut keys: Vec<String> = runs.iter().map(|r| r.key.clone()).collect();
    keys.extend(runs.iter().filter_map(|r| r.theta.key.clone()));
    write_thetas(ctx, &runs.iter().map(|r| &r.theta).collect::<Vec<_>>())?;
    let details = json!({
        "boxes": runs.iter().map(|r| box_details(&bulk_box(ctx, r.box_side).expect("validated"))).collect::<Vec<_>>(),
        "test_functions": cfg.test_functions(bulk_box(ctx, runs[0].box_side)?.observation),
    });
    for (name, route) in [("field.csv", 0), ("field_clusters.csv", 1)] {
        let rows = runs.iter().enumerate().flat_map(|(run_id, r)| {
            r.records.rows().enumerate().flat_map(move |(sample_idx, row)| {
                (0..n_f).map(move |f_id| FieldRow { run_id, sample_idx, f_id, epsilon: 0.0, value: row[2 * f_id + route] })
            })
        });
        ctx.write_csv(name, &keys, details.clone(), rows)?;
    }

    let mut summary = Vec::new();
    let mut checks = Vec::new();
    for (ri, r) in runs.iter().enumerate() {
        for f_id in 0..n_f {
            let mut moments = Vec::new();
            for (route, name) in [(0, "spins"), (1, "clusters")] {
                let v = r.records.column(2 * f_id + route);
                let sq: Vec<f64> = v.iter().map(|x| x * x).collect();
                let (mean, stderr) = mean_err(&v)?;
                let (m2, m2_err) = mean_err(&sq)?;
                let dist = EmpiricalDistribution::new(v)?;
                let k = kurtosis(&dist).ok();
                let w2 = runs.get(ri + 1).map(|next| {
                    let other = EmpiricalDistribution::new(next.records.column(2 * f_id + route)).expect("finite samples");
                    wasserstein2(&dist, &other)
                });
                moments.push((m2, m2_err));
                summary.push(FieldSummaryRow {
                    box_side: r.box_side,
                    f_id,
                    route: name,
                    mean,
                    stderr,
                    second_moment: m2,
                    second_moment_stderr: m2_err,
                    kurtosis: k.map(|k| k.0),
                    kurtosis_stderr: k.map(|k| k.1),
                    w2_to_next_box: w2,
                });
            }
            let z = z_score(moments[0], moments[1]);
            checks.push(check(
                format!("second-moment-box{}-f{f_id}", r.box_side),
                z < 4.0,
                format!("spins {:.4} vs clusters {:.4}, |z| = {z:.2}", moments[0].0, moments[1].0),
            ));
        }
    }
    ctx.write_csv("field_summary.csv", &keys, details, &summary)?;
    Ok(checks)
}

#[derive(Serialize)]
struct CutoffRow {
    #[serde(rename = "box")]
    box_side: usize,
    f_id: usize,
    epsilon: f64,
    mean_sq_gap: f64,
    stderr: f64,
}

fn cutoff_removal(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    let cfg = &ctx.config;
    let diameters = cfg.analysis.loop_diameter.unwrap_or_default();
    let sides = cfg.geometry.sides.clone();
    let runs = each(exec, sides.iter().copied().enumerate().collect(), |(i, side)| {
        let bulk = bulk_box(ctx, side)?;
        let g = &bulk.geometry;
        let eps = cfg.epsilons(g.spacing());
        let theta = theta_for(ctx, &bulk, i, 2)?;
        let th = theta.estimate.theta;
        let fs = weights(ctx, &bulk)?;
        let stream = i as u64;
        let per_f = 1 + eps.len();
        let spec = ChainSpec {
            key: format!("cutoff-box{side}"),
            geom: g,
            params: ModelParams::critical_ising(),
            chain: cfg.chain.chain(cfg.seed, stream, g.side(), cfg.chain.samples),
            width: fs.len() * per_f,
        };
        let records = run_chain(ctx, &spec, |index, bonds, _, out| {
            let dec = decompose(g, bonds);
            let mut signs = sign_rng(cfg.seed, stream, index);
            for (k, f) in fs.iter().enumerate() {
                let s = field_sample_from_clusters(&dec, g, th, f, &eps, diameters, &mut signs)?;
                out[k * per_f] = s.value;
                for (j, (_, v)) in s.cutoff_values.iter().enumerate() {
                    out[k * per_f + 1 + j] = *v;
                }
            }
            Ok(())
        })?;
        Ok((FieldRun { key: spec.key, theta, box_side: side, records }, eps))
    })?;
    let mut keys: Vec<String> = runs.iter().map(|r| r.0.key.clone()).collect();
    keys.extend(runs.iter().filter_map(|r| r.0.theta.key.clone()));
    write_thetas(ctx, &runs.iter().map(|r| &r.0.theta).collect::<Vec<_>>())?;
    let details = json!({
        "loop_diameter": diameters,
        "boxes": runs.iter().map(|r| box_details(&bulk_box(ctx, r.0.box_side).expect("validated"))).collect::<Vec<_>>(),
        "test_functions": cfg.test_functions(bulk_box(ctx, runs[0].0.box_side)?.observation),
        "epsilon_zero_means": "uncut field",
    });
    let rows = runs.iter().enumerate().flat_map(|(run_id, (r, eps))| {
        let per_f = 1 + eps.len();
        r.records.rows().enumerate().flat_map(move |(sample_idx, row)| {
            (0..row.len()).map(move |j| FieldRow {
                run_id,
                sample_idx,
                f_id: j / per_f,
                epsilon: if j % per_f == 0 { 0.0 } else { eps[j % per_f - 1] },
                value: row[j],
            })
        })
    });
    ctx.write_csv("field.csv", &keys, details.clone(), rows)?;

    let mut table = Vec::new();
    let mut fits = Vec::new();
    let mut checks = Vec::new();
    for (r, eps) in &runs {
        let per_f = 1 + eps.len();
        for f_id in 0..r.records.width / per_f {
            let full = r.records.column(f_id * per_f);
            let mut gaps = Vec::new();
            for (j, &e) in eps.iter().enumerate() {
                let cut = r.records.column(f_id * per_f + 1 + j);
                let sq: Vec<f64> = full.iter().zip(&cut).map(|(a, b)| (a - b).powi(2)).collect();
                let (m, s) = mean_err(&sq)?;
                gaps.push((e, m, s));
                table.push(CutoffRow { box_side: r.box_side, f_id, epsilon: e, mean_sq_gap: m, stderr: s });
            }
            let increasing = gaps.windows(2).all(|w| w[1].1 >= w[0].1);
            checks.push(check(
                format!("cutoff-monotone-box{}-f{f_id}", r.box_side),
                increasing,
                "⟨|Φ - Φ_ε|^2⟩ nondecreasing in ε",
            ));
            let pts: Vec<(f64, f64, f64)> = gaps.iter().filter(|g| g.1 > 0.0).copied().collect();
            if let Ok(fit) = fit_power_law(&pts) {
                println!("box {}: ⟨|Φ - Φ_ε|^2⟩ ~ ε^{:.3} ± {:.3}", r.box_side, fit.exponent, fit.stderr);
                fits.push(PowerFitRow {
                    quantity: "mean_sq_gap",
                    label: format!("box={},f={f_id}", r.box_side),
                    exponent: fit.exponent,
                    stderr: fit.stderr,
                    amplitude: fit.amplitude,
                    r_squared: fit.r_squared,
                    x_lo: fit.window.0,
                    x_hi: fit.window.1,
                });
            }
        }
    }
    ctx.write_csv("cutoff.csv", &keys, details.clone(), &table)?;
    if !fits.is_empty() {
        ctx.write_csv("cutoff_fit.csv", &keys, details, &fits)?;
    }
    Ok(checks)
}

// Crossing clusters

#[derive(Serialize)]
struct CrossingRow {
    #[serde(rename = "L")]
    side: usize,
    k: u64,
    survival: f64,
    stderr: f64,
    count: usize,
}

#[derive(Serialize)]
struct GeometricFitRow {
    #[serde(rename = "L")]
    side: usize,
    lambda: f64,
    lambda_stderr: f64,
    r_squared: f64,
    k_max: u64,
}

fn crossings(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    let cfg = &ctx.config;
    let a = &cfg.analysis;
    let z = a.center.unwrap_or((0.5, 0.5));
    let (r1, r2) = (a.r1.unwrap_or(0.125), a.r2.unwrap_or(0.25));
    let results = each(exec, cfg.geometry.sides.iter().copied().enumerate().collect(), |(i, side)| {
        let g = unit_torus(side, Boundary::Torus)?;
        let spec = ChainSpec {
            key: format!("crossings-L{side}"),
            geom: &g,
            params: cfg.model.params(),
            chain: cfg.chain.chain(cfg.seed, i as u64, side, cfg.chain.samples),
            width: 1,
        };
        let mut uf = UnionFind::new(g.n_sites());
        let records = run_chain(ctx, &spec, |_, bonds, _, out| {
            out[0] = count_crossing_clusters(&label_with(&g, bonds, &mut uf), &g, z, r1, r2)? as f64;
            Ok(())
        })?;
        let counts: Vec<u64> = records.column(0).iter().map(|&c| c as u64).collect();
        Ok((spec.key, side, survival_tail(&counts)))
    })?;
    let keys: Vec<String> = results.iter().map(|r| r.0.clone()).collect();
    let details = json!({ "center": z, "r1": r1, "r2": r2 });
    let rows = results.iter().flat_map(|(_, side, t)| {
        t.table.iter().map(move |&(k, survival, stderr, count)| CrossingRow { side: *side, k, survival, stderr, count })
    });
    ctx.write_csv("crossings.csv", &keys, details.clone(), rows)?;
    let mut checks = Vec::new();
    let mut fits = Vec::new();
    for (key, side, t) in &results {
        match t.fit {
            Some(f) => {
                println!("L = {side}: P(N >= k) ~ {:.4}^k (R^2 {:.4})", f.lambda, f.r_squared);
                checks.push(check(format!("{key}-geometric"), f.lambda < 1.0, format!("λ = {:.4}", f.lambda)));
                fits.push(GeometricFitRow { side: *side, lambda: f.lambda, lambda_stderr: f.lambda_stderr, r_squared: f.r_squared, k_max: f.k_max });
            }
            None => checks.push(check(format!("{key}-geometric"), false, "too few tail events to fit")),
        }
    }
    if !fits.is_empty() {
        ctx.write_csv("crossing_fit.csv", &keys, details, &fits)?;
    }
    Ok(checks)
}

// Potts color fields

#[derive(Serialize)]
struct PottsRow {
    run_id: usize,
    sample_idx: usize,
    f_id: usize,
    color: u32,
    value: f64,
}

#[derive(Serialize)]
struct PottsSummaryRow {
    q: u32,
    #[serde(rename = "box")]
    box_side: usize,
    theta_inv_sq: f64,
    theta_inv_sq_stderr: f64,
    f_id: usize,
    max_abs_color_sum: f64,
    max_abs_numerator_sum: f64,
}

fn potts_field(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    let cfg = &ctx.config;
    let side = cfg.geometry.sides[0];
    if cfg.geometry.sides.len() > 1 {
        bail!("geometry.sides: potts-field uses a single box side");
    }
    let qs = cfg.analysis.potts_q.clone().unwrap_or_else(|| vec![2, 3, 4]);
    let bulk = bulk_box(ctx, side)?;
    let g = &bulk.geometry;
    let fs = weights(ctx, &bulk)?;
    let box_sites = g.sites_in_region(&bulk.observation);
    let runs = each(exec, qs.iter().copied().enumerate().collect(), |(i, q)| {
        let qn = q as usize;
        // Per sample: unscaled color fields, integer numerator sums, Σ|C ∩ box|^2.
        let width = fs.len() * (qn + 1) + 1;
        let stream = i as u64;
        let spec = ChainSpec {
            key: format!("potts-q{q}"),
            geom: g,
            params: ModelParams::critical(q),
            chain: cfg.chain.chain(cfg.seed, stream, g.side(), cfg.chain.samples),
            width,
        };
        let mut uf = UnionFind::new(g.n_sites());
        let mut scratch = Vec::new();
        let records = run_chain(ctx, &spec, |index, bonds, _, out| {
            let labels = label_with(g, bonds, &mut uf);
            let mut colors = sign_rng(cfg.seed, stream, index);
            for (k, f) in fs.iter().enumerate() {
                let p = potts_color_field(&labels, 1.0, f, q, &mut colors)?;
                out[k * (qn + 1)..k * (qn + 1) + qn].copy_from_slice(&p.values);
                out[k * (qn + 1) + qn] = p.numerators().iter().sum();
            }
            out[width - 1] = labels.sum_squared_restricted(&box_sites, &mut scratch) as f64;
            Ok(())
        })?;
        Ok((spec.key, q, records))
    })?;
    let keys: Vec<String> = runs.iter().map(|r| r.0.clone()).collect();
    let mut summary = Vec::new();
    let mut checks = Vec::new();
    let mut scaled = Vec::new();
    for (_, q, rec) in &runs {
        let qn = *q as usize;
        let (inv_sq, inv_sq_err) = mean_err(&rec.column(rec.width - 1))?;
        let theta = inv_sq.powf(-0.5);
        scaled.push(theta);
        for f_id in 0..fs.len() {
            let mut max_sum: f64 = 0.0;
            let mut max_rel: f64 = 0.0;
            let mut max_num: f64 = 0.0;
            for row in rec.rows() {
                let vals = &row[f_id * (qn + 1)..f_id * (qn + 1) + qn];
                let sum: f64 = vals.iter().sum();
                let scale: f64 = vals.iter().map(|v| v.abs()).sum();
                max_sum = max_sum.max(theta * sum.abs());
                if scale > 0.0 {
                    max_rel = max_rel.max(sum.abs() / scale);
                }
                max_num = max_num.max(row[f_id * (qn + 1) + qn].abs());
            }
            summary.push(PottsSummaryRow {
                q: *q,
                box_side: side,
                theta_inv_sq: inv_sq,
                theta_inv_sq_stderr: inv_sq_err,
                f_id,
                max_abs_color_sum: max_sum,
                max_abs_numerator_sum: max_num,
            });
            let exact = !fs[f_id].is_indicator() || max_num == 0.0;
            checks.push(check(
                format!("color-sum-q{q}-f{f_id}"),
                exact && max_rel <= 1e-12,
                format!("max |Σ_k Φ^(k)| / Σ_k |Φ^(k)| = {max_rel:.1e}, integer numerator sums max {max_num}"),
            ));
        }
    }
    let details = json!({ "box": box_details(&bulk), "potts_q": qs, "test_functions": cfg.test_functions(bulk.observation), "theta": "per q, from the same samples" });
    let rows = runs.iter().zip(&scaled).enumerate().flat_map(|(run_id, ((_, q, rec), theta))| {
        let qn = *q as usize;
        let n_f = fs.len();
        rec.rows().enumerate().flat_map(move |(sample_idx, row)| {
            (0..n_f).flat_map(move |f_id| {
                (0..qn).map(move |c| PottsRow {
                    run_id,
                    sample_idx,
                    f_id,
                    color: c as u32,
                    value: theta * row[f_id * (qn + 1) + c],
                })
            })
        })
    });
    ctx.write_csv("potts.csv", &keys, details.clone(), rows)?;
    ctx.write_csv("potts_summary.csv", &keys, details, &summary)?;
    Ok(checks)
}

// Near-critical

#[derive(Serialize)]
struct MagnetizationRow {
    h: f64,
    field: f64,
    m: f64,
    stderr: f64,
    m_spins: f64,
    m_spins_stderr: f64,
    n_samples: usize,
}

#[derive(Serialize)]
struct CorrelationRow {
    h: f64,
    r: usize,
    tau: f64,
    stderr: f64,
}

#[derive(Serialize)]
struct CorrelationFitRow {
    h: f64,
    field: f64,
    xi: f64,
    mass: f64,
    mass_stderr: f64,
    r_squared: f64,
    r_lo: f64,
    r_hi: f64,
}

fn near_critical(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    let cfg = &ctx.config;
    if cfg.geometry.sides.len() > 1 {
        bail!("geometry.sides: near-critical uses a single box side");
    }
    let bulk = bulk_box(ctx, cfg.geometry.sides[0])?;
    let g = &bulk.geometry;
    let theta = theta_for(ctx, &bulk, 0, 2)?;
    let th = theta.estimate.theta;
    let window = cfg.analysis.field_window;
    let window_sites = window.map(|w| g.sites_in_region(&w));
    let n_window = window_sites.as_ref().map_or(g.n_sites(), |s| s.len()) as f64;
    let r_max = cfg.analysis.r_max.unwrap_or(g.side() / 4).min(g.side() - 1);
    let fit_win = fit_window(ctx, r_max);
    let h_grid = cfg.analysis.h_grid.clone().expect("validated");
    let runs = each(exec, h_grid.iter().copied().enumerate().collect(), |(i, h)| {
        let model = GhostModel::new(h, th)?.with_window(window);
        let spec = ChainSpec {
            key: format!("near-critical-h{i}"),
            geom: g,
            params: model.params(),
            chain: cfg.chain.chain(cfg.seed, i as u64, g.side(), cfg.chain.samples),
            width: 2 + r_max + 1,
        };
        let mut acc = TwoPointAccumulator::new(g, r_max, true)?;
        let mut uf = UnionFind::new(g.n_sites());
        let records = run_chain(ctx, &spec, |_, bonds, spins, out| {
            let labels = label_with(g, bonds, &mut uf);
            out[0] = ghost_connected(&labels, window_sites.as_deref()) as f64 / n_window;
            out[1] = match &window_sites {
                Some(s) => s.iter().map(|&x| spins.spin(x) as f64).sum::<f64>(),
                None => spins.magnetization() as f64,
            } / n_window;
            acc.add(g, &labels);
            out[2..].copy_from_slice(&acc.last_row().expect("row just added"));
            Ok(())
        })?;
        let (m_spins, m_spins_stderr) = mean_err(&records.column(1))?;
        let (m, stderr) = if model.field() > 0.0 { mean_err(&records.column(0))? } else { (m_spins, m_spins_stderr) };
        let point = MagnetizationRow { h, field: model.field(), m, stderr, m_spins, m_spins_stderr, n_samples: records.len() };
        let rows = two_point_rows(&records, 2, r_max, true, g)?;
        let fit = fit_correlation_window(&rows, fit_win, false);
        Ok((spec.key, point, rows, fit))
    })?;
    let mut keys: Vec<String> = runs.iter().map(|r| r.0.clone()).collect();
    keys.extend(theta.key.clone());
    write_thetas(ctx, &[&theta])?;
    let details = json!({
        "box": box_details(&bulk),
        "theta": th,
        "field_window": window,
        "m_estimator": "ghost-connected fraction for h > 0, spin average at h = 0",
        "fit_window": fit_win,
    });
    ctx.write_csv("magnetization.csv", &keys, details.clone(), runs.iter().map(|r| &r.1))?;
    let corr = runs.iter().flat_map(|(_, p, rows, _)| {
        rows.iter().map(move |r| CorrelationRow { h: p.h, r: r.r, tau: r.tau, stderr: r.stderr })
    });
    ctx.write_csv("correlation.csv", &keys, details.clone(), corr)?;
    let fits: Vec<CorrelationFitRow> = runs
        .iter()
        .filter_map(|(_, p, _, f)| {
            f.map(|f| CorrelationFitRow {
                h: p.h,
                field: p.field,
                xi: f.correlation_length(),
                mass: f.mass,
                mass_stderr: f.mass_stderr,
                r_squared: f.r_squared,
                r_lo: f.window.0,
                r_hi: f.window.1,
            })
        })
        .collect();
    ctx.write_csv("correlation_fit.csv", &keys, details, &fits)?;

    let mut checks = Vec::new();
    let mut order: Vec<&MagnetizationRow> = runs.iter().map(|r| &r.1).collect();
    order.sort_by(|a, b| a.h.total_cmp(&b.h));
    let monotone = order.windows(2).all(|w| w[1].m >= w[0].m - 3.0 * w[0].stderr.hypot(w[1].stderr));
    checks.push(check("magnetization-monotone", monotone, "m(h) nondecreasing within 3σ"));
    for p in &order {
        let z = z_score((p.m, p.stderr), (p.m_spins, p.m_spins_stderr));
        checks.push(check(
            format!("ghost-vs-spins-h{}", p.h),
            z < 4.0,
            format!("ghost {:.5} vs spins {:.5}, |z| = {z:.2}", p.m, p.m_spins),
        ));
    }
    Ok(checks)
}

#[derive(Serialize)]
struct FreeEnergyRow {
    t: f64,
    field: f64,
    mean_field: f64,
    mean_field_stderr: f64,
    f_hat: f64,
    f_hat_stderr: f64,
    n_samples: usize,
}

fn free_energy(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    let cfg = &ctx.config;
    if cfg.geometry.sides.len() > 1 {
        bail!("geometry.sides: free-energy uses a single box side");
    }
    let bulk = bulk_box(ctx, cfg.geometry.sides[0])?;
    let g = &bulk.geometry;
    let theta = theta_for(ctx, &bulk, 0, 2)?;
    let th = theta.estimate.theta;
    let window = cfg.analysis.field_window;
    let window_sites = window.map(|w| g.sites_in_region(&w));
    let t_grid = match (&cfg.analysis.t_grid, cfg.analysis.h) {
        (Some(t), _) => t.clone(),
        (None, Some(h)) => default_free_energy_grid(h),
        (None, None) => unreachable!("validated"),
    };
    check_free_energy_grid(&t_grid)?;
    let points = each(exec, t_grid.iter().copied().enumerate().collect(), |(i, t)| {
        if t == 0.0 {
            return Ok((None, (0.0, 0.0), 0));
        }
        let model = GhostModel::new(t, th)?.with_window(window);
        let spec = ChainSpec {
            key: format!("free-energy-t{i}"),
            geom: g,
            params: model.params(),
            chain: cfg.chain.chain(cfg.seed, i as u64, g.side(), cfg.chain.samples),
            width: 1,
        };
        let mut uf = UnionFind::new(g.n_sites());
        let records = run_chain(ctx, &spec, |_, bonds, _, out| {
            out[0] = th * ghost_connected(&label_with(g, bonds, &mut uf), window_sites.as_deref()) as f64;
            Ok(())
        })?;
        Ok((Some(spec.key), mean_err(&records.column(0))?, records.len()))
    })?;
    let mut keys: Vec<String> = points.iter().filter_map(|p| p.0.clone()).collect();
    keys.extend(theta.key.clone());
    write_thetas(ctx, &[&theta])?;
    let est = integrate_free_energy(&t_grid, points.iter().map(|p| p.1).collect(), window_area(g, window_sites.as_deref()));
    let rows = t_grid.iter().enumerate().map(|(j, &t)| FreeEnergyRow {
        t,
        field: if t == 0.0 { 0.0 } else { GhostModel::new(t, th).map(|m| m.field()).unwrap_or(f64::NAN) },
        mean_field: est.mean_field[j].0,
        mean_field_stderr: est.mean_field[j].1,
        f_hat: est.f_hat[j].0,
        f_hat_stderr: est.f_hat[j].1,
        n_samples: points[j].2,
    });
    let details = json!({ "box": box_details(&bulk), "theta": th, "field_window": window, "area": est.area, "integration": "trapezoid over t_grid" });
    ctx.write_csv("free_energy.csv", &keys, details, rows)?;
    let increasing = est.f_hat.windows(2).all(|w| w[1].0 > w[0].0);
    let convex = est
        .mean_field
        .windows(2)
        .all(|w| w[1].0 >= w[0].0 - 2.0 * w[0].1.hypot(w[1].1));
    let mut checks = vec![
        check("free-energy-increasing", increasing, "f̂ strictly increasing on the grid"),
        check("free-energy-convex", convex, "mean field nondecreasing within 2σ"),
    ];
    if let Some(h) = cfg.analysis.h {
        if let (Some(a), Some(b)) = (est.at(h), est.at(2.0 * h)) {
            let ratio = b.0 / a.0;
            println!("f̂(2h)/f̂(h) = {ratio:.4} (2^(16/15) = {:.4})", 2f64.powf(16.0 / 15.0));
            checks.push(check("free-energy-ratio-finite", ratio.is_finite() && ratio > 1.0, format!("f̂(2h)/f̂(h) = {ratio:.4}")));
        }
    }
    Ok(checks)
}

// Loops

#[derive(Serialize)]
struct LoopCheckRow {
    #[serde(rename = "L")]
    side: usize,
    sample_idx: usize,
    loops: f64,
    wrapping: f64,
    coherence_failures: f64,
    winding_failures: f64,
    max_proxy_deviation: f64,
}

#[derive(Serialize)]
struct LoopExport {
    cluster: usize,
    size: usize,
    kind: &'static str,
    diameter: f64,
    polyline: Vec<(f64, f64)>,
}

fn loop_validate(ctx: &RunContext, exec: Execution) -> Result<Vec<Check>> {
    let cfg = &ctx.config;
    let boundary = cfg.boundary();
    let min_size = cfg.analysis.export_min_size.unwrap_or(4);
    let results = each(exec, cfg.geometry.sides.iter().copied().enumerate().collect(), |(i, side)| {
        let g = unit_torus(side, boundary)?;
        let a = g.spacing();
        let key = format!("loops-L{side}");
        let spec = ChainSpec {
            key: key.clone(),
            geom: &g,
            params: cfg.model.params(),
            chain: cfg.chain.chain(cfg.seed, i as u64, side, cfg.chain.samples),
            width: 5,
        };
        let records = run_chain(ctx, &spec, |index, bonds, _, out| {
            let dec = decompose(&g, bonds);
            let mut export = Vec::new();
            for c in 0..dec.n_clusters() {
                let cluster = dec.cluster(c);
                if cluster.wraps {
                    out[1] += 1.0;
                    continue;
                }
                let lp = trace_outer_loop(&dec, &g, c)?;
                out[0] += 1.0;
                let coherent = lp.kind == LoopKind::Type1SitesInside
                    && cluster.diameter <= lp.diameter + 1e-9
                    && lp.diameter <= cluster.diameter + 2.0 * a + 1e-9;
                out[2] += (!coherent) as u8 as f64;
                let sites = dec.sites(c);
                let probes = [sites[0], sites[sites.len() / 2], sites[sites.len() - 1]];
                out[3] += probes.iter().any(|&s| lp.winding_number(dec.unwrapped(s)) != 1) as u8 as f64;
                out[4] = out[4].max((dec.loop_diameter_proxy(c) - lp.diameter).abs() / a);
                if index == 0 && cluster.size >= min_size as usize {
                    export.push(LoopExport {
                        cluster: c,
                        size: cluster.size,
                        kind: "type1_sites_inside",
                        diameter: lp.diameter,
                        polyline: lp.polyline(),
                    });
                }
            }
            if index == 0 {
                ctx.write_json(
                    &format!("loops_L{side}.json"),
                    &[key.clone()],
                    json!({ "L": side, "spacing": a, "boundary": boundary, "sample_idx": 0, "min_size": min_size }),
                    &export,
                )?;
            }
            Ok(())
        })?;
        Ok((key, side, records))
    })?;
    let keys: Vec<String> = results.iter().map(|r| r.0.clone()).collect();
    let rows = results.iter().flat_map(|(_, side, rec)| {
        rec.rows().enumerate().map(move |(sample_idx, r)| LoopCheckRow {
            side: *side,
            sample_idx,
            loops: r[0],
            wrapping: r[1],
            coherence_failures: r[2],
            winding_failures: r[3],
            max_proxy_deviation: r[4],
        })
    });
    ctx.write_csv("loop_check.csv", &keys, json!({ "boundary": boundary, "proxy_deviation_units": "lattice spacings" }), rows)?;
    let mut checks = Vec::new();
    for (key, _, rec) in &results {
        let loops: f64 = rec.column(0).iter().sum();
        let incoherent: f64 = rec.column(2).iter().sum();
        let unwound: f64 = rec.column(3).iter().sum();
        let proxy = rec.column(4).iter().copied().fold(0.0, f64::max);
        checks.push(check(
            format!("{key}-coherence"),
            incoherent == 0.0,
            format!("{incoherent} of {loops} loops outside [cluster diameter, cluster diameter + 2a]"),
        ));
        checks.push(check(format!("{key}-winding"), unwound == 0.0, format!("{unwound} loops not winding once around their sites")));
        checks.push(check(format!("{key}-proxy"), proxy <= 1.0 + 1e-9, format!("max |proxy - traced| = {proxy:.3} a")));
    }
    Ok(checks)
}
