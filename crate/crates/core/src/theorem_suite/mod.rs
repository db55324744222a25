//! One executable check per result about the enlarged filtrations.
//!
//! Checks on a single kernel are exact: they compare closed forms with
//! brute-force conditioning on the product space. Checks whose discrete
//! analog only holds up to terms carried by the step containing the random
//! time are run as refinement studies in [`refinement`].

pub mod characterization;
pub mod compensator;
pub mod decomposition;
pub mod immersion;
pub mod prp;
pub mod refinement;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density_kernel::DensityKernel;
use crate::enlargement::ProductSpace;
use crate::error::Result;
use crate::finite_space::{
    doob_decomposition, doob_martingale, predictable_bracket, AdaptedProcess, Filtration, Measure,
};
use crate::measure_change::{build_pstar, pstar_report};
use crate::report::{timed, Status, SuiteReport};

/// Tolerance for identities chained over several steps.
pub const CHAIN_TOL: f64 = 1e-12;
/// Tolerance for single-step identities.
pub const STEP_TOL: f64 = 1e-13;

/// Names of the exact single-kernel suites, in execution order.
pub const FINITE_SUITES: &[&str] = &[
    "kernel_validate",
    "survival",
    "product_structure",
    "measure_change",
    "conditioning",
    "projections",
    "char_initial",
    "char_progressive",
    "lifted_martingales",
    "non_uniqueness",
    "compensators",
    "decomposition_initial",
    "decomposition_progressive",
    "bracket_formula",
    "mstar_not_gtau",
    "prp_initial",
    "prp_progressive",
    "immersion",
    "fault_injection",
];

/// Runs a check, turning errors into a failed report and recording wall time.
pub fn guarded(name: &str, subject: &str, f: impl FnOnce() -> Result<SuiteReport>) -> SuiteReport {
    timed(|| {
        f().unwrap_or_else(|e| {
            let mut r = SuiteReport::new(name, subject, 0.0);
            r.fail(format!("error: {e}"), f64::NAN);
            r
        })
    })
}

/// Runs one named finite suite on a kernel; `None` for unknown names.
pub fn run_finite(name: &str, kernel: &DensityKernel, seed: u64) -> Option<SuiteReport> {
    let run = |f: &dyn Fn() -> Result<SuiteReport>| guarded(name, kernel.label(), f);
    let report = match name {
        "kernel_validate" => run(&|| Ok(kernel.validate())),
        "survival" => run(&|| kernel.survival_report()),
        "product_structure" => run(&|| Ok(ProductSpace::new(kernel)?.structure_report())),
        "measure_change" => run(&|| {
            let ps = ProductSpace::new(kernel)?;
            pstar_report(&ps, &build_pstar(&ps)?)
        }),
        "conditioning" => run(&|| decomposition::conditioning(kernel, seed)),
        "projections" => run(&|| decomposition::projections(kernel, seed)),
        "char_initial" => run(&|| characterization::char_initial(kernel, seed)),
        "char_progressive" => run(&|| characterization::char_progressive(kernel, seed)),
        "lifted_martingales" => run(&|| characterization::lifted_martingales(kernel, seed)),
        "non_uniqueness" => run(&|| characterization::non_uniqueness(kernel)),
        "compensators" => run(&|| compensator::compensators(kernel)),
        "decomposition_initial" => run(&|| decomposition::decomposition_initial(kernel)),
        "decomposition_progressive" => run(&|| decomposition::decomposition_progressive(kernel)),
        "bracket_formula" => run(&|| decomposition::bracket_formula(kernel)),
        "mstar_not_gtau" => run(&|| compensator::mstar_not_gtau(kernel)),
        "prp_initial" => run(&|| prp::prp_initial(kernel, seed)),
        "prp_progressive" => run(&|| prp::prp_progressive(kernel, seed)),
        "immersion" => run(&|| immersion::immersion_check(kernel, seed)),
        "fault_injection" => run(&|| fault_injection(kernel, seed)),
        _ => return None,
    };
    Some(report)
}

/// Martingale part, under the kernel's measure, of the tree walk scaled by `sqrt(dt)`.
pub fn base_martingale(kernel: &DensityKernel) -> Result<AdaptedProcess> {
    let space = kernel.space();
    let walk = space.walk();
    let scaled = AdaptedProcess::from_fn(space.steps(), space.n_atoms(), |k, a| {
        let dt = if k == 0 { 0.0 } else { space.time(k) / k as f64 };
        walk.get(k, a) * dt.sqrt()
    });
    Ok(doob_decomposition(&scaled, kernel.filtration(), kernel.measure())?.martingale)
}

/// Doob martingale of i.i.d. uniform terminal values.
pub fn random_martingale(
    filt: &Filtration,
    mu: &Measure,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptedProcess> {
    let z: Vec<f64> = (0..mu.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    doob_martingale(&z, filt, mu)
}

pub fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

/// Base brackets `<x, p(u_i)>` for every grid index.
pub fn density_brackets(kernel: &DensityKernel, x: &AdaptedProcess) -> Result<Vec<AdaptedProcess>> {
    (0..kernel.m())
        .map(|i| {
            predictable_bracket(x, &kernel.density_process(i), kernel.filtration(), kernel.measure())
        })
        .collect()
}

/// Largest absolute entry.
pub fn sup(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Weighted least-squares fit of `y` on the columns of `design`, solved by
/// an SVD of the row-scaled design so rank-deficient cells still get the
/// minimum-norm coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFit {
    pub coef: Vec<f64>,
    /// `sum_o w_o r_o^2` for the fitted residual.
    pub residual_sq: f64,
    pub total_sq: f64,
    pub rank_deficient: bool,
}

pub fn weighted_fit(design: &[Vec<f64>], y: &[f64], w: &[f64]) -> CellFit {
    let (rows, p) = (design.len(), design.first().map_or(0, Vec::len));
    let total_sq: f64 = y.iter().zip(w).map(|(v, wo)| wo * v * v).sum();
    if rows == 0 || p == 0 {
        return CellFit {
            coef: vec![0.0; p],
            residual_sq: total_sq,
            total_sq,
            rank_deficient: p > 0,
        };
    }
    let a = DMatrix::from_fn(rows, p, |r, c| w[r].sqrt() * design[r][c]);
    let b = DVector::from_fn(rows, |r, _| w[r].sqrt() * y[r]);
    let svd = a.svd(true, true);
    let top = svd.singular_values.iter().fold(0.0f64, |m, s| m.max(*s));
    let eps = 1e-10 * top.max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let coef = match svd.solve(&b, eps) {
        Ok(x) => x.iter().copied().collect(),
        Err(_) => vec![0.0; p],
    };
    let residual_sq = design
        .iter()
        .zip(y)
        .zip(w)
        .map(|((row, yo), wo)| {
            let fit: f64 = row.iter().zip(&coef).map(|(d, c)| d * c).sum();
            wo * (yo - fit) * (yo - fit)
        })
        .sum();
    CellFit {
        coef,
        residual_sq,
        total_sq,
        rank_deficient: rank < p,
    }
}

/// Adversarial variants that must all be detected.
pub fn fault_injection(kernel: &DensityKernel, seed: u64) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("fault_injection", kernel.label(), 0.0);
    let mut detected = 0usize;
    let mut total = 0usize;
    let mut expect_fail = |what: &str, r: &SuiteReport, rep: &mut SuiteReport| {
        total += 1;
        if r.status == Status::Fail {
            detected += 1;
        } else {
            rep.fail(format!("undetected fault: {what}"), r.max_residual);
        }
    };

    let zeroed = kernel.with_value(kernel.steps(), 0, 0, 0.0);
    expect_fail("zeroed density value", &zeroed.validate(), &mut rep);

    let bumped = kernel.with_value(kernel.steps(), 0, 0, kernel.p(kernel.steps(), 0, 0) * 1.01);
    expect_fail("perturbed density value", &bumped.validate(), &mut rep);

    let r = characterization::char_initial_case(kernel, seed, characterization::InitialCase::Drifted)?;
    expect_fail("drift injected into a per-u family", &r, &mut rep);

    let r = characterization::char_progressive_case(
        kernel,
        seed,
        characterization::ProgressiveCase::Drifted,
    )?;
    expect_fail("drift injected into a progressive martingale", &r, &mut rep);

    let r = characterization::char_progressive_case(
        kernel,
        seed,
        characterization::ProgressiveCase::Uncompensated,
    )?;
    expect_fail("uncompensated default indicator", &r, &mut rep);

    let r = decomposition::decomposition_initial_with(kernel, 0.05)?;
    expect_fail("drift injected into the base martingale", &r, &mut rep);

    rep.metric("faults", total as f64);
    rep.metric("detected", detected as f64);
    Ok(rep)
}
