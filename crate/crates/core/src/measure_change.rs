//! The change to the law under which the random time is independent of the
//! base filtration, and a generic discrete Girsanov drift.

use crate::enlargement::{JointMeasure, ProductSpace};
use crate::error::{LabError, Result};
use crate::finite_space::{
    cond_exp, is_martingale, AdaptedProcess, Filtration, Measure,
};
use crate::report::SuiteReport;

pub const CHANGE_TOL: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct MeasureChange {
    /// `L_k = 1 / p_k(tau)` on the initial enlargement.
    pub density: AdaptedProcess,
    /// Its restriction to the progressive filtration.
    pub progressive_density: AdaptedProcess,
    /// Reciprocal of `progressive_density`.
    pub progressive_inverse: AdaptedProcess,
    /// `P_hat` reweighted by `L_N`.
    pub reweighted: Measure,
}

pub fn build_pstar(ps: &ProductSpace<'_>) -> Result<MeasureChange> {
    let kernel = ps.kernel();
    let m = kernel.m();
    let density = AdaptedProcess::from_fn(ps.steps(), ps.n_atoms(), |k, idx| {
        1.0 / kernel.p(k, idx / m, idx % m)
    });
    let surv = kernel.survival();
    let progressive_density = AdaptedProcess::from_fn(ps.steps(), ps.n_atoms(), |k, idx| {
        let a = idx / m;
        if ps.alive(k, idx) {
            surv.g_star[k] / surv.g.get(k, a)
        } else {
            1.0 / kernel.p(k, a, idx % m)
        }
    });
    let progressive_inverse = progressive_density.map(|v| 1.0 / v);
    let reweighted = ps
        .measure(JointMeasure::Original)
        .reweighted(density.at(ps.steps()))?;
    Ok(MeasureChange {
        density,
        progressive_density,
        progressive_inverse,
        reweighted,
    })
}

/// Checks every invariant of the measure change on a product space.
pub fn pstar_report(ps: &ProductSpace<'_>, mc: &MeasureChange) -> Result<SuiteReport> {
    let kernel = ps.kernel();
    let mut rep = SuiteReport::new("measure_change", kernel.label(), CHANGE_TOL);
    let f = ps.filtrations();
    let p_hat = ps.measure(JointMeasure::Original);
    let p_star = ps.measure(JointMeasure::Independent);

    let chk = is_martingale(&mc.density, &f.initial, p_hat, CHANGE_TOL)?;
    rep.record(|| "L martingale".into(), chk.max_residual);
    let l0 = mc.density.at(0).iter().fold(0.0f64, |a, v| a.max((v - 1.0).abs()));
    rep.record(|| "L_0 = 1".into(), l0);

    for k in 0..=ps.steps() {
        let ce = cond_exp(mc.density.at(k), p_hat, f.progressive.partition(k))?;
        let d = max_diff(&ce, mc.progressive_density.at(k));
        rep.record(|| format!("restricted density, step {k}"), d);
    }
    let rw = max_diff(mc.reweighted.weights(), p_star.weights());
    rep.record(|| "reweighted law".into(), rw);

    // Product factorization and agreement with the original law on base cells.
    let (n, mgrid) = (kernel.n_atoms(), kernel.m());
    let grid = kernel.grid();
    let pm = kernel.measure();
    for k in 0..=ps.steps() {
        let pi = kernel.filtration().partition(k);
        let base_mass = pm.cell_masses(pi);
        let mut joint = vec![vec![0.0; mgrid]; pi.n_cells()];
        let mut orig = vec![0.0; pi.n_cells()];
        for a in 0..n {
            let c = pi.cell(a);
            for i in 0..mgrid {
                joint[c][i] += mc.reweighted.weight(ps.atom(a, i));
                orig[c] += p_hat.weight(ps.atom(a, i));
            }
        }
        for c in 0..pi.n_cells() {
            for i in 0..mgrid {
                rep.record(
                    || format!("factorization, step {k}, cell {c}, index {i}"),
                    joint[c][i] - base_mass[c] * grid.nu(i),
                );
            }
            let star: f64 = joint[c].iter().sum();
            rep.record(|| format!("base agreement, step {k}, cell {c}"), star - orig[c]);
        }
    }
    let l1 = mc.density.map(|v| v - 1.0).sup_norm();
    let e1 = mc.progressive_density.map(|v| v - 1.0).sup_norm();
    rep.metric("density_minus_one", l1);
    rep.metric("progressive_density_minus_one", e1);
    Ok(rep)
}

/// Bayes formula on the initial enlargement: conditioning `z` under `P_hat`
/// equals the independent-law conditioning of `z p_k(tau)` normalized by that of `p_k(tau)`.
pub fn bayes_residual(ps: &ProductSpace<'_>, z: &[f64], k: usize) -> Result<f64> {
    let kernel = ps.kernel();
    let m = kernel.m();
    let pi = ps.filtrations().initial.partition(k);
    let p_star = ps.measure(JointMeasure::Independent);
    let dens: Vec<f64> = (0..ps.n_atoms())
        .map(|idx| kernel.p(k, idx / m, idx % m))
        .collect();
    // The terminal density covers variables that are not measurable at step k.
    let dens_n: Vec<f64> = (0..ps.n_atoms())
        .map(|idx| kernel.p(ps.steps(), idx / m, idx % m))
        .collect();
    let zd: Vec<f64> = z.iter().zip(&dens_n).map(|(a, b)| a * b).collect();
    let num = cond_exp(&zd, p_star, pi)?;
    let den = cond_exp(&dens, p_star, pi)?;
    let direct = cond_exp(z, ps.measure(JointMeasure::Original), pi)?;
    Ok((0..ps.n_atoms())
        .map(|idx| (num[idx] / den[idx] - direct[idx]).abs())
        .fold(0.0, f64::max))
}

/// `drift_k = sum_{j <= k} E[dX_j dD_j | pi_{j-1}] / D_{j-1}`, the drift that
/// turns a `mu1`-martingale `x` into a martingale under `mu2 = D_N mu1`.
pub fn girsanov_drift(
    x: &AdaptedProcess,
    d: &AdaptedProcess,
    filt: &Filtration,
    mu1: &Measure,
) -> Result<AdaptedProcess> {
    filt.check_adapted(x)?;
    let chk = is_martingale(d, filt, mu1, 1e-12)?;
    if !chk.holds {
        return Err(LabError::NotMartingale(format!(
            "density process residual {:e}",
            chk.max_residual
        )));
    }
    if d.values().iter().flatten().any(|v| !(*v > 0.0)) {
        return Err(LabError::InvalidMeasure("density process must be positive".into()));
    }
    let mut inc = vec![vec![0.0; x.n_atoms()]];
    for k in 1..=filt.steps() {
        let prod: Vec<f64> = x
            .increment(k)
            .iter()
            .zip(d.increment(k))
            .map(|(a, b)| a * b)
            .collect();
        let ce = cond_exp(&prod, mu1, filt.partition(k - 1))?;
        inc.push(ce.iter().zip(d.at(k - 1)).map(|(c, dd)| c / dd).collect());
    }
    Ok(AdaptedProcess::cumulative(inc))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density_kernel::{DensityKernel, TauGrid};
    use crate::finite_space::{doob_martingale, FiniteSpace};
    use crate::report::Status;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn space(steps: usize) -> Arc<FiniteSpace> {
        Arc::new(FiniteSpace::binomial_tree(steps, 1.0, 0.5).unwrap())
    }

    #[test]
    fn independent_kernel_change_is_identity() {
        let k = DensityKernel::independent(space(3), TauGrid::exponential(4, 1.0).unwrap()).unwrap();
        let ps = ProductSpace::new(&k).unwrap();
        let mc = build_pstar(&ps).unwrap();
        let r = pstar_report(&ps, &mc).unwrap();
        assert_eq!(r.status, Status::Pass);
        assert!(r.metrics["density_minus_one"] <= 1e-13);
        assert!(r.metrics["progressive_density_minus_one"] <= 1e-13);
    }

    #[test]
    fn factor_change_factorizes() {
        let k = DensityKernel::factor_model(space(4), TauGrid::exponential(6, 1.0).unwrap(), |u| {
            0.9 * (-u).exp()
        })
        .unwrap();
        let ps = ProductSpace::new(&k).unwrap();
        let mc = build_pstar(&ps).unwrap();
        let r = pstar_report(&ps, &mc).unwrap();
        assert_eq!(r.status, Status::Pass, "{:?}", r.offenders);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f64> = (0..ps.n_atoms()).map(|_| rng.random_range(-2.0..2.0)).collect();
        for step in 0..=4 {
            assert!(bayes_residual(&ps, &z, step).unwrap() < 1e-12);
        }
    }

    #[test]
    fn girsanov_basic_cases() {
        let s = space(4);
        let mu = s.measure();
        let f = s.filtration();
        let w = s.walk();
        let ones = AdaptedProcess::constant(4, s.n_atoms(), 1.0);
        assert_eq!(girsanov_drift(&w, &ones, f, mu).unwrap().sup_norm(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<f64> = (0..s.n_atoms()).map(|_| rng.random_range(0.5..1.5)).collect();
        let zsum: f64 = mu.expectation(&z);
        let d = doob_martingale(&z.iter().map(|v| v / zsum).collect::<Vec<_>>(), f, mu).unwrap();
        let drift = girsanov_drift(&d, &d, f, mu).unwrap();
        let mu2 = mu.reweighted(d.at(4)).unwrap();
        let chk = is_martingale(&d.sub(&drift), f, &mu2, 1e-12).unwrap();
        assert!(chk.holds, "{}", chk.max_residual);
        let drift_w = girsanov_drift(&w, &d, f, mu).unwrap();
        assert!(is_martingale(&w.sub(&drift_w), f, &mu2, 1e-12).unwrap().holds);

        let bad = AdaptedProcess::from_fn(4, s.n_atoms(), |k, _| 1.0 + k as f64);
        assert!(matches!(
            girsanov_drift(&w, &bad, f, mu),
            Err(LabError::NotMartingale(_))
        ));
    }
}
