//! Refinement studies for identities that hold only up to terms carried by
//! the step in which the random time falls.
//!
//! Each study halves the step several times and requires the residual to
//! shrink by [`REFINEMENT_FACTOR`](crate::report::REFINEMENT_FACTOR) per
//! halving. The lattice studies refine the grid of the random time together
//! with the step, holding at most one grid point per step.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::density_kernel::{DensityKernel, Loading, TauGrid};
use crate::enlargement::{JointMeasure, ProductSpace};
use crate::error::Result;
use crate::finite_space::{AdaptedProcess, FiniteSpace};
use crate::lattice::FactorLattice;
use crate::report::{RefinementPoint, SuiteReport};

use super::decomposition::projection_band_residual;
use super::{base_martingale, guarded, CHAIN_TOL, STEP_TOL};

pub const REFINEMENT_SUITES: &[&str] = &[
    "refine_projections",
    "refine_decomposition",
    "refine_bracket",
    "refine_intensity",
    "refine_prp",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    pub horizon: f64,
    pub loading: Loading,
    /// Step counts of the lattice studies, each double the previous.
    pub lattice_steps: Vec<usize>,
    /// Step counts of the path-tree projection study.
    pub tree_steps: Vec<usize>,
    /// Grid size of the path-tree study.
    pub tree_grid_points: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            loading: Loading::Exponential {
                scale: 0.3,
                decay: 1.0,
            },
            lattice_steps: vec![8, 16, 32, 64],
            tree_steps: vec![2, 4, 8, 16],
            tree_grid_points: 8,
        }
    }
}

impl RefinementConfig {
    /// Exponential grid on `(0, 2T]` with one cell per two steps.
    pub fn lattice(&self, steps: usize) -> Result<FactorLattice> {
        let grid = TauGrid::truncated_exponential(steps, 2.0 * self.horizon, 1.0)?;
        let loading = self.loading;
        FactorLattice::new(steps, self.horizon, grid, move |u| loading.eval(u))
    }

    pub fn tree_kernel(&self, steps: usize) -> Result<DensityKernel> {
        let space = Arc::new(FiniteSpace::binomial_tree(steps, self.horizon, 0.5)?);
        let grid = TauGrid::exponential(self.tree_grid_points, self.horizon)?;
        let loading = self.loading;
        DensityKernel::factor_model(space, grid, move |u| loading.eval(u))
    }

    fn subject(&self) -> String {
        format!("factor({:?})", self.loading)
    }
}

pub fn run_refinement(name: &str, cfg: &RefinementConfig) -> Option<SuiteReport> {
    let subject = cfg.subject();
    let f: fn(&RefinementConfig) -> Result<SuiteReport> = match name {
        "refine_projections" => refine_projections,
        "refine_decomposition" => refine_decomposition,
        "refine_bracket" => refine_bracket,
        "refine_intensity" => refine_intensity,
        "refine_prp" => refine_prp,
        _ => return None,
    };
    Some(guarded(name, &subject, || f(cfg)))
}

fn lattice_study(
    cfg: &RefinementConfig,
    metric: impl Fn(&FactorLattice) -> f64,
) -> Result<Vec<RefinementPoint>> {
    cfg.lattice_steps
        .iter()
        .map(|&n| {
            let l = cfg.lattice(n)?;
            Ok(RefinementPoint {
                dt: l.dt(),
                residual: metric(&l),
            })
        })
        .collect()
}

fn finish(mut rep: SuiteReport, points: Vec<RefinementPoint>) -> SuiteReport {
    rep.max_residual = points.last().map_or(0.0, |p| p.residual);
    rep.refine(points);
    rep
}

/// Progressive decomposition defect on cells alive before a step.
pub fn refine_decomposition(cfg: &RefinementConfig) -> Result<SuiteReport> {
    let rep = SuiteReport::new("refine_decomposition", cfg.subject(), f64::INFINITY);
    Ok(finish(rep, lattice_study(cfg, FactorLattice::progressive_band_defect)?))
}

/// Left-endpoint bracket formula against the exact bracket.
pub fn refine_bracket(cfg: &RefinementConfig) -> Result<SuiteReport> {
    let rep = SuiteReport::new("refine_bracket", cfg.subject(), f64::INFINITY);
    Ok(finish(rep, lattice_study(cfg, FactorLattice::bracket_left_residual)?))
}

/// Intensity-form compensators against the exact ones, in mean; under the
/// independent law the two coincide at every level.
///
/// The sup over nodes is reported but not tested: at extreme nodes the
/// slope of the density in `u` grows with the number of steps.
pub fn refine_intensity(cfg: &RefinementConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("refine_intensity", cfg.subject(), f64::INFINITY);
    for p in lattice_study(cfg, |l| l.intensity_gap(JointMeasure::Independent))? {
        rep.metric(format!("independent_gap_dt_{}", p.dt), p.residual);
        if p.residual > STEP_TOL {
            rep.fail(format!("independent-law intensity form at dt={}", p.dt), p.residual);
        }
    }
    for p in lattice_study(cfg, |l| l.intensity_gap(JointMeasure::Original))? {
        rep.metric(format!("sup_gap_dt_{}", p.dt), p.residual);
    }
    let points = lattice_study(cfg, |l| l.intensity_gap_mean(JointMeasure::Original))?;
    let failed = rep.failed();
    let mut rep = finish(rep, points);
    if failed {
        rep.status = crate::report::Status::Fail;
    }
    Ok(rep)
}

/// Terminal variable of the joint representation study.
pub fn joint_target(w: f64, u: f64) -> f64 {
    w * (-u).exp()
}

/// Residual share of the joint representation under both laws.
pub fn refine_prp(cfg: &RefinementConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("refine_prp", cfg.subject(), f64::INFINITY);
    let orig = lattice_study(cfg, |l| l.joint_representation(JointMeasure::Original, joint_target).ratio())?;
    let mut sub = finish(SuiteReport::new("original", cfg.subject(), f64::INFINITY), orig);
    sub.max_residual = 0.0;
    rep.absorb(sub);
    let star = lattice_study(cfg, |l| l.joint_representation(JointMeasure::Independent, joint_target).ratio())?;
    let failed = rep.failed();
    let mut rep = finish(rep, star);
    if failed {
        rep.status = crate::report::Status::Fail;
    }
    Ok(rep)
}

/// The predictable projection formula on path trees of the factor model:
/// exact off the band, with a band residual that vanishes with the step.
pub fn refine_projections(cfg: &RefinementConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("refine_projections", cfg.subject(), CHAIN_TOL);
    let mut points = Vec::new();
    for &n in &cfg.tree_steps {
        let kernel = cfg.tree_kernel(n)?;
        let ps = ProductSpace::new(&kernel)?;
        let x = base_martingale(&kernel)?;
        let grid = kernel.grid();
        let fam: Vec<AdaptedProcess> = (0..kernel.m())
            .map(|i| {
                let u = grid.u(i);
                AdaptedProcess::from_fn(n, kernel.n_atoms(), |k, a| {
                    u.cos() + x.get(k.saturating_sub(1), a) * u
                })
            })
            .collect();
        let (off, band) = projection_band_residual(&ps, &fam, JointMeasure::Original)?;
        rep.record(|| format!("off-band, {n} steps"), off);
        points.push(RefinementPoint {
            dt: cfg.horizon / n as f64,
            residual: band,
        });
    }
    let off = rep.max_residual;
    rep.metric("off_band_max", off);
    rep.refine(points);
    rep.max_residual = off;
    Ok(rep)
}
