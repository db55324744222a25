//! Conditioning and projection formulas, canonical decompositions of base
//! martingales on both enlargements, and the bracket with the martingale
//! part of the survival process.

use crate::density_kernel::DensityKernel;
use crate::enlargement::{JointMeasure, ProductSpace};
use crate::error::Result;
use crate::finite_space::{
    doob_decomposition, is_martingale, martingale_defects, predictable_bracket, AdaptedProcess,
};
use crate::measure_change::girsanov_drift;
use crate::report::SuiteReport;

use super::{base_martingale, density_brackets, random_martingale, rng_for, CHAIN_TOL, STEP_TOL};

const MEASURES: [JointMeasure; 2] = [JointMeasure::Original, JointMeasure::Independent];

fn random_family(kernel: &DensityKernel, seed: u64, salt: u64) -> Result<Vec<AdaptedProcess>> {
    let mut rng = rng_for(seed, salt);
    (0..kernel.m())
        .map(|_| random_martingale(kernel.filtration(), kernel.measure(), &mut rng))
        .collect()
}

fn lagged(y: &AdaptedProcess) -> AdaptedProcess {
    AdaptedProcess::from_fn(y.steps(), y.n_atoms(), |k, a| y.get(k.saturating_sub(1), a))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Closed-form conditioning on both enlargements against brute force, for
/// every pair of steps and both joint laws.
pub fn conditioning(kernel: &DensityKernel, seed: u64) -> Result<SuiteReport> {
    let ps = ProductSpace::new(kernel)?;
    let mut rep = SuiteReport::new("conditioning", kernel.label(), CHAIN_TOL);
    let fam = random_family(kernel, seed, 401)?;
    let steps = kernel.steps();
    for which in MEASURES {
        for s in 0..=steps {
            for t in 0..=steps {
                let cf = ps.condexp_initial(&fam, s, t, which)?;
                let on_atoms: Vec<f64> = (0..ps.n_atoms())
                    .map(|idx| cf[ps.tau_index(idx)][ps.base_atom(idx)])
                    .collect();
                let d = max_diff(&on_atoms, &ps.oracle_initial(&fam, s, t, which)?);
                rep.record(|| format!("initial {which:?}, s={s}, t={t}"), d);

                let pv = ps.condexp_progressive(&fam, s, t, which)?;
                let d = max_diff(
                    &ps.progressive_on_atoms(s, &pv),
                    &ps.oracle_progressive(&fam, s, t, which)?,
                );
                rep.record(|| format!("progressive {which:?}, s={s}, t={t}"), d);
            }
        }
    }
    Ok(rep)
}

/// Band residual of the progressive projection formula, weighted by step
/// length and probability: `sum_k dt_k E[|formula - projection| 1_band]`.
pub fn projection_band_residual(
    ps: &ProductSpace<'_>,
    fam: &[AdaptedProcess],
    which: JointMeasure,
) -> Result<(f64, f64)> {
    let g = ps.pred_proj_progressive(fam, which)?;
    let o = ps.oracle_pred_proj_progressive(fam, which)?;
    let mu = ps.measure(which);
    let times = ps.kernel().space().times();
    let mut off_band = 0.0f64;
    let mut band = 0.0;
    for k in 0..=ps.steps() {
        let dt = if k == 0 { 0.0 } else { times[k] - times[k - 1] };
        for idx in 0..ps.n_atoms() {
            let d = (g.values.get(k, idx) - o.get(k, idx)).abs();
            if g.band[k][idx] {
                band += dt * mu.weight(idx) * d;
            } else {
                off_band = off_band.max(d);
            }
        }
    }
    Ok((off_band, band))
}

/// Predictable projection formulas on the base and progressive filtrations.
pub fn projections(kernel: &DensityKernel, seed: u64) -> Result<SuiteReport> {
    let ps = ProductSpace::new(kernel)?;
    let mut rep = SuiteReport::new("projections", kernel.label(), CHAIN_TOL);
    let (steps, n, m) = (kernel.steps(), kernel.n_atoms(), kernel.m());
    let times = kernel.space().times().to_vec();
    let grid = kernel.grid().clone();
    let random: Vec<AdaptedProcess> = random_family(kernel, seed, 402)?.iter().map(lagged).collect();
    let ones = vec![AdaptedProcess::constant(steps, n, 1.0); m];
    let default: Vec<AdaptedProcess> = (0..m)
        .map(|i| AdaptedProcess::from_fn(steps, n, |k, _| f64::from(u8::from(grid.u(i) <= times[k]))))
        .collect();
    for (name, fam) in [("random", &random), ("unit", &ones), ("default", &default)] {
        for which in MEASURES {
            let f = ps.pred_proj_base(fam, which)?;
            let o = ps.oracle_pred_proj_base(fam, which)?;
            rep.record(|| format!("{name} base {which:?}"), f.sub(&o).sup_norm());
            let (off, band) = projection_band_residual(&ps, fam, which)?;
            rep.record(|| format!("{name} progressive off-band {which:?}"), off);
            rep.metric(format!("{name}.{which:?}.band_residual"), band);
        }
    }
    let unit = ps.pred_proj_progressive(&ones, JointMeasure::Original)?;
    rep.record(|| "unit projection".into(), unit.values.map(|v| v - 1.0).sup_norm());
    Ok(rep)
}

/// Per-`u` drifts `sum_{j<=k} d<x, p(u_i)>_j / p_{j-1}(u_i)` as a family.
pub fn initial_drifts(kernel: &DensityKernel, x: &AdaptedProcess) -> Result<Vec<AdaptedProcess>> {
    let brackets = density_brackets(kernel, x)?;
    let (steps, n) = (kernel.steps(), kernel.n_atoms());
    Ok(brackets
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let inc: Vec<Vec<f64>> = (0..=steps)
                .map(|k| {
                    (0..n)
                        .map(|a| {
                            if k == 0 {
                                0.0
                            } else {
                                (b.get(k, a) - b.get(k - 1, a)) / kernel.p(k - 1, a, i)
                            }
                        })
                        .collect()
                })
                .collect();
            AdaptedProcess::cumulative(inc)
        })
        .collect())
}

pub fn decomposition_initial(kernel: &DensityKernel) -> Result<SuiteReport> {
    decomposition_initial_with(kernel, 0.0)
}

/// Initial-enlargement decomposition of the base martingale, optionally
/// perturbed by a deterministic drift `injected * k`.
pub fn decomposition_initial_with(kernel: &DensityKernel, injected: f64) -> Result<SuiteReport> {
    let ps = ProductSpace::new(kernel)?;
    let f = ps.filtrations();
    let p_hat = ps.measure(JointMeasure::Original);
    let x0 = base_martingale(kernel)?;
    let x = x0.zip_with(
        &AdaptedProcess::from_fn(kernel.steps(), kernel.n_atoms(), |k, _| k as f64),
        |v, k| v + injected * k,
    );
    let drifts = initial_drifts(kernel, &x)?;
    let lx = ps.lift_base(&x)?;
    let ld = ps.lift(&drifts)?;
    let xt = lx.sub(&ld);
    let mut rep = SuiteReport::new("decomposition_initial", kernel.label(), CHAIN_TOL);
    let chk = is_martingale(&xt, &f.initial, p_hat, CHAIN_TOL)?;
    rep.record(|| "compensated process on the initial enlargement".into(), chk.max_residual);

    let density = ps.lift(&(0..kernel.m()).map(|i| kernel.density_process(i)).collect::<Vec<_>>())?;
    let g = girsanov_drift(&lx, &density, &f.initial, ps.measure(JointMeasure::Independent))?;
    let route = g.sub(&ld).sup_norm();
    rep.metric("girsanov_route_residual", route);
    if route > STEP_TOL {
        rep.fail("Girsanov route differs", route);
    }
    for (i, d) in drifts.iter().enumerate() {
        let yp = x.sub(d).zip_with(&kernel.density_process(i), |a, b| a * b);
        let c = is_martingale(&yp, kernel.filtration(), kernel.measure(), CHAIN_TOL)?;
        rep.record(|| format!("per-u route, index {i}"), c.max_residual);
    }
    rep.metric("drift_sup", ld.sup_norm());
    rep.metric("defect", chk.max_residual);
    Ok(rep)
}

/// Drift of the progressive decomposition and the resulting martingale defects.
#[derive(Debug, Clone)]
pub struct ProgressiveDecomposition {
    pub drift: AdaptedProcess,
    pub defects: Vec<Vec<f64>>,
    /// Closed form of the defect on cells alive at `k - 1`:
    /// `sum_{band_k} nu_i d<x, p(u_i)>_k / G_{k-1}`, per base atom.
    pub band_defect: Vec<Vec<f64>>,
}

pub fn progressive_decomposition(
    ps: &ProductSpace<'_>,
    x: &AdaptedProcess,
) -> Result<ProgressiveDecomposition> {
    let kernel = ps.kernel();
    let (steps, n, m) = (kernel.steps(), kernel.n_atoms(), kernel.m());
    let grid = kernel.grid();
    let times = kernel.space().times();
    let g = kernel.survival().g;
    let bg = predictable_bracket(x, &g, kernel.filtration(), kernel.measure())?;
    let bp = density_brackets(kernel, x)?;
    let mut inc = vec![vec![0.0; n * m]];
    let mut band_defect = vec![vec![0.0; n]];
    for k in 1..=steps {
        let mut row = vec![0.0; n * m];
        for a in 0..n {
            let before = (bg.get(k, a) - bg.get(k - 1, a)) / g.get(k - 1, a);
            for i in 0..m {
                row[ps.atom(a, i)] = if grid.u(i) > times[k - 1] {
                    before
                } else {
                    (bp[i].get(k, a) - bp[i].get(k - 1, a)) / kernel.p(k - 1, a, i)
                };
            }
        }
        inc.push(row);
        band_defect.push(
            (0..n)
                .map(|a| {
                    grid.band(times[k - 1], times[k])
                        .map(|i| grid.nu(i) * (bp[i].get(k, a) - bp[i].get(k - 1, a)))
                        .sum::<f64>()
                        / g.get(k - 1, a)
                })
                .collect(),
        );
    }
    let drift = AdaptedProcess::cumulative(inc);
    let xp = ps.lift_base(x)?.sub(&drift);
    let defects = martingale_defects(&xp, &ps.filtrations().progressive, ps.measure(JointMeasure::Original))?;
    Ok(ProgressiveDecomposition {
        drift,
        defects,
        band_defect,
    })
}

pub fn decomposition_progressive(kernel: &DensityKernel) -> Result<SuiteReport> {
    let ps = ProductSpace::new(kernel)?;
    let x = base_martingale(kernel)?;
    let d = progressive_decomposition(&ps, &x)?;
    let times = kernel.space().times();
    let grid = kernel.grid();
    let mut rep = SuiteReport::new("decomposition_progressive", kernel.label(), CHAIN_TOL);
    let mut off_band = 0.0f64;
    let mut band_total = 0.0;
    for k in 1..=kernel.steps() {
        let has_band = !grid.band(times[k - 1], times[k]).is_empty();
        let mut step_max = 0.0f64;
        for idx in 0..ps.n_atoms() {
            let v = d.defects[k][idx];
            if ps.alive(k - 1, idx) {
                let expected = d.band_defect[k][ps.base_atom(idx)];
                rep.record(|| format!("band closed form, step {k}, atom {idx}"), v - expected);
                if has_band {
                    step_max = step_max.max(v.abs());
                } else {
                    off_band = off_band.max(v.abs());
                }
            } else {
                off_band = off_band.max(v.abs());
            }
        }
        band_total += step_max;
    }
    rep.record(|| "off-band defect".into(), off_band);
    rep.metric("off_band_defect", off_band);
    rep.metric("band_defect", band_total);
    rep.metric("drift_sup", d.drift.sup_norm());
    Ok(rep)
}

/// `d<x, p(u_i)>_k = k_k(u_i) p_{k-1}(u_i) dA_k` with `A_k = t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BracketDecomposition {
    pub clock: Vec<f64>,
    /// `(step, atom, u)` row-major; step 0 is zero.
    pub k_values: Vec<f64>,
    pub m: usize,
    pub n: usize,
}

impl BracketDecomposition {
    pub fn get(&self, k: usize, a: usize, i: usize) -> f64 {
        self.k_values[(k * self.n + a) * self.m + i]
    }
}

pub fn bracket_k(kernel: &DensityKernel, x: &AdaptedProcess) -> Result<(BracketDecomposition, f64)> {
    let bp = density_brackets(kernel, x)?;
    let (steps, n, m) = (kernel.steps(), kernel.n_atoms(), kernel.m());
    let clock = kernel.space().times().to_vec();
    let mut k_values = vec![0.0; (steps + 1) * n * m];
    let mut recon = 0.0f64;
    for k in 1..=steps {
        let da = clock[k] - clock[k - 1];
        for a in 0..n {
            for i in 0..m {
                let db = bp[i].get(k, a) - bp[i].get(k - 1, a);
                let v = db / (kernel.p(k - 1, a, i) * da);
                k_values[(k * n + a) * m + i] = v;
                recon = recon.max((v * kernel.p(k - 1, a, i) * da - db).abs());
            }
        }
    }
    Ok((BracketDecomposition { clock, k_values, m, n }, recon))
}

/// Martingale part of the survival process:
/// `mu_k = 1 - sum_i nu_i (p_k(u_i) - p_{k ^ kappa_i}(u_i))` with `kappa_i`
/// the last observation step before `u_i`.
pub fn survival_martingale(kernel: &DensityKernel) -> AdaptedProcess {
    let kappa = kernel.freeze_steps();
    let grid = kernel.grid();
    AdaptedProcess::from_fn(kernel.steps(), kernel.n_atoms(), |k, a| {
        1.0 - (0..kernel.m())
            .map(|i| grid.nu(i) * (kernel.p(k, a, i) - kernel.p(k.min(kappa[i]), a, i)))
            .sum::<f64>()
    })
}

/// The bracket of the base martingale with the survival martingale, exact
/// with right-endpoint tails and up to band terms with left-endpoint tails.
#[derive(Debug, Clone)]
pub struct BracketComparison {
    pub exact: AdaptedProcess,
    pub right_point: AdaptedProcess,
    pub left_point: AdaptedProcess,
}

pub fn bracket_comparison(kernel: &DensityKernel, x: &AdaptedProcess) -> Result<BracketComparison> {
    let mu_proc = survival_martingale(kernel);
    let exact = predictable_bracket(x, &mu_proc, kernel.filtration(), kernel.measure())?;
    let bp = density_brackets(kernel, x)?;
    let (kd, _) = bracket_k(kernel, x)?;
    let (steps, n) = (kernel.steps(), kernel.n_atoms());
    let grid = kernel.grid();
    let times = kernel.space().times();
    let mut right = vec![vec![0.0; n]];
    let mut left = vec![vec![0.0; n]];
    for k in 1..=steps {
        let da = kd.clock[k] - kd.clock[k - 1];
        right.push(
            (0..n)
                .map(|a| {
                    grid.band(times[k], f64::INFINITY)
                        .map(|i| grid.nu(i) * (bp[i].get(k, a) - bp[i].get(k - 1, a)))
                        .sum()
                })
                .collect(),
        );
        left.push(
            (0..n)
                .map(|a| {
                    da * grid
                        .band(times[k - 1], f64::INFINITY)
                        .map(|i| grid.nu(i) * kd.get(k, a, i) * kernel.p(k - 1, a, i))
                        .sum::<f64>()
                })
                .collect(),
        );
    }
    Ok(BracketComparison {
        exact,
        right_point: AdaptedProcess::cumulative(right),
        left_point: AdaptedProcess::cumulative(left),
    })
}

/// `sum_k max_a |step-k increment of a - b|`.
pub fn increment_gap(a: &AdaptedProcess, b: &AdaptedProcess) -> f64 {
    (1..=a.steps())
        .map(|k| {
            let da = a.increment(k);
            let db = b.increment(k);
            max_diff(&da, &db)
        })
        .sum()
}

/// `sum_k E_mu[|step-k increment of a - b|]`.
pub fn increment_gap_mean(a: &AdaptedProcess, b: &AdaptedProcess, mu: &crate::finite_space::Measure) -> f64 {
    (1..=a.steps())
        .map(|k| {
            let d: Vec<f64> = a.increment(k).iter().zip(b.increment(k)).map(|(x, y)| (x - y).abs()).collect();
            mu.expectation(&d)
        })
        .sum()
}

pub fn bracket_formula(kernel: &DensityKernel) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("bracket_formula", kernel.label(), CHAIN_TOL);
    let x = base_martingale(kernel)?;
    let g = kernel.survival().g;
    let doob = doob_decomposition(&g, kernel.filtration(), kernel.measure())?;
    let mu_proc = survival_martingale(kernel);
    let from_doob = doob.martingale.map(|v| v + 1.0);
    rep.record(|| "survival martingale formula".into(), from_doob.sub(&mu_proc).sup_norm());
    let rise = (1..=kernel.steps())
        .map(|k| {
            let inc = doob.compensator.increment(k);
            inc.iter().fold(0.0f64, |m, v| m.max(*v))
        })
        .fold(0.0f64, f64::max);
    rep.record(|| "compensator increase".into(), rise.max(0.0));
    let (_, recon) = bracket_k(kernel, &x)?;
    rep.record(|| "bracket density reconstruction".into(), recon);
    let cmp = bracket_comparison(kernel, &x)?;
    rep.record(|| "right-endpoint formula".into(), cmp.exact.sub(&cmp.right_point).sup_norm());
    let band = increment_gap(&cmp.exact, &cmp.left_point);
    rep.metric("left_endpoint_band_residual", band);
    rep.metric("bracket_sup", cmp.exact.sup_norm());
    Ok(rep)
}
