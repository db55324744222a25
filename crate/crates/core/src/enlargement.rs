//! The product space `Omega x U` carrying the random time, its two joint
//! measures, and the initially and progressively enlarged filtrations.
//!
//! Product atoms are indexed `a * m + i` for base atom `a` and grid index `i`.
//! Every closed-form conditioning or projection formula here has a
//! brute-force counterpart computed with [`cond_exp`] on the product space.

use serde::{Deserialize, Serialize};

use crate::density_kernel::DensityKernel;
use crate::error::{LabError, Result};
use crate::finite_space::{
    cond_exp, predictable_projection, AdaptedProcess, Filtration, Measure, Partition,
};
use crate::report::SuiteReport;

/// Tolerance for the sum-to-one check of the joint weights.
pub const JOINT_WEIGHT_TOL: f64 = 1e-13;

/// Which joint law of `(omega, tau)` to condition under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMeasure {
    /// `P(a) p_N(a, u_i) nu_i`.
    Original,
    /// `P(a) nu_i`, under which the random time is independent of the base.
    Independent,
}

/// Partition sequences on the product space.
#[derive(Debug, Clone)]
pub struct EnlargedFiltrations {
    /// Base information only.
    pub lifted: Filtration,
    /// Base information plus the occurrence (and value) of the random time so far.
    pub progressive: Filtration,
    /// Base information plus the value of the random time from the start.
    pub initial: Filtration,
}

/// A process on the progressive filtration split into its part before the
/// random time and its family of parts after it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveParts {
    /// Base-adapted process used on `{t_k < tau}`.
    pub before: AdaptedProcess,
    /// `after[i]` is used on `{tau = u_i <= t_k}`; entries at steps with
    /// `u_i > t_k` are unconstrained and set to zero.
    pub after: Vec<AdaptedProcess>,
}

/// Conditional expectation on the progressive filtration at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveValue {
    pub before: Vec<f64>,
    /// `after[i][a]`, zero where `u_i > t_s`.
    pub after: Vec<Vec<f64>>,
}

/// The projection formula on the progressive filtration along with the
/// atoms whose random time falls strictly inside the preceding step.
#[derive(Debug, Clone)]
pub struct ProgressiveProjection {
    pub values: AdaptedProcess,
    pub band: Vec<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct ProductSpace<'a> {
    kernel: &'a DensityKernel,
    original: Measure,
    independent: Measure,
    filtrations: EnlargedFiltrations,
}

impl<'a> ProductSpace<'a> {
    pub fn new(kernel: &'a DensityKernel) -> Result<Self> {
        let (n, m, steps) = (kernel.n_atoms(), kernel.m(), kernel.steps());
        let grid = kernel.grid();
        let pw = kernel.measure().weights();
        let mut original = Vec::with_capacity(n * m);
        let mut independent = Vec::with_capacity(n * m);
        for a in 0..n {
            let row = kernel.row(steps, a);
            for i in 0..m {
                original.push(pw[a] * row[i] * grid.nu(i));
                independent.push(pw[a] * grid.nu(i));
            }
        }
        let original = Measure::with_tolerance(original, JOINT_WEIGHT_TOL)?;
        let independent = Measure::with_tolerance(independent, JOINT_WEIGHT_TOL)?;

        let base = kernel.filtration();
        let times = kernel.space().times();
        let mut lifted = Vec::with_capacity(steps + 1);
        let mut progressive = Vec::with_capacity(steps + 1);
        let mut initial = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let pi = base.partition(k);
            let cells = pi.n_cells();
            let mut lk = Vec::with_capacity(n * m);
            let mut gk = Vec::with_capacity(n * m);
            let mut tk = Vec::with_capacity(n * m);
            for a in 0..n {
                let c = pi.cell(a);
                for i in 0..m {
                    lk.push(c);
                    tk.push(c * m + i);
                    let slot = if grid.u(i) <= times[k] { i } else { m };
                    gk.push(c * (m + 1) + slot);
                }
            }
            lifted.push(Partition::from_keys(&lk, cells)?);
            progressive.push(Partition::from_keys(&gk, cells * (m + 1))?);
            initial.push(Partition::from_keys(&tk, cells * m)?);
        }
        Ok(Self {
            kernel,
            original,
            independent,
            filtrations: EnlargedFiltrations {
                lifted: Filtration::new(lifted)?,
                progressive: Filtration::new(progressive)?,
                initial: Filtration::new_unrooted(initial)?,
            },
        })
    }

    pub fn kernel(&self) -> &'a DensityKernel {
        self.kernel
    }

    pub fn filtrations(&self) -> &EnlargedFiltrations {
        &self.filtrations
    }

    pub fn measure(&self, which: JointMeasure) -> &Measure {
        match which {
            JointMeasure::Original => &self.original,
            JointMeasure::Independent => &self.independent,
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.original.len()
    }

    pub fn steps(&self) -> usize {
        self.kernel.steps()
    }

    #[inline]
    pub fn atom(&self, a: usize, i: usize) -> usize {
        a * self.kernel.m() + i
    }

    #[inline]
    pub fn base_atom(&self, idx: usize) -> usize {
        idx / self.kernel.m()
    }

    #[inline]
    pub fn tau_index(&self, idx: usize) -> usize {
        idx % self.kernel.m()
    }

    pub fn tau(&self, idx: usize) -> f64 {
        self.kernel.grid().u(self.tau_index(idx))
    }

    /// `t_k < tau` on product atom `idx`.
    #[inline]
    pub fn alive(&self, k: usize, idx: usize) -> bool {
        self.tau(idx) > self.kernel.space().time(k)
    }

    /// Step-`k` density of the chosen joint law against the independent one.
    #[inline]
    fn density(&self, which: JointMeasure, k: usize, a: usize, i: usize) -> f64 {
        match which {
            JointMeasure::Original => self.kernel.p(k, a, i),
            JointMeasure::Independent => 1.0,
        }
    }

    /// `sum_{u_i > t} nu_i d_r(a, u_i) y_i`, evaluated per base atom.
    fn tail_sum(&self, which: JointMeasure, t: f64, r: usize, a: usize, y: impl Fn(usize) -> f64) -> f64 {
        let grid = self.kernel.grid();
        grid.band(t, f64::INFINITY)
            .map(|i| grid.nu(i) * self.density(which, r, a, i) * y(i))
            .sum()
    }

    /// Base survival process of the chosen law (`G` or `G*`).
    pub fn survival(&self, which: JointMeasure) -> AdaptedProcess {
        let times = self.kernel.space().times();
        AdaptedProcess::from_fn(self.steps(), self.kernel.n_atoms(), |k, a| {
            self.tail_sum(which, times[k], k, a, |_| 1.0)
        })
    }

    /// `Y_k(a, u_i) = y_i(k, a)`.
    pub fn lift(&self, family: &[AdaptedProcess]) -> Result<AdaptedProcess> {
        self.check_family(family, false)?;
        let m = self.kernel.m();
        Ok(AdaptedProcess::from_fn(self.steps(), self.n_atoms(), |k, idx| {
            family[idx % m].get(k, idx / m)
        }))
    }

    /// A base process viewed on the product space.
    pub fn lift_base(&self, x: &AdaptedProcess) -> Result<AdaptedProcess> {
        self.kernel.filtration().check_adapted(x)?;
        let m = self.kernel.m();
        Ok(AdaptedProcess::from_fn(self.steps(), self.n_atoms(), |k, idx| {
            x.get(k, idx / m)
        }))
    }

    /// A function of the random time alone, constant in time.
    pub fn lift_tau(&self, f: impl Fn(f64) -> f64) -> AdaptedProcess {
        AdaptedProcess::from_fn(self.steps(), self.n_atoms(), |_, idx| f(self.tau(idx)))
    }

    /// Default indicator `H_k = 1_{tau <= t_k}`.
    pub fn default_indicator(&self) -> AdaptedProcess {
        AdaptedProcess::from_fn(self.steps(), self.n_atoms(), |k, idx| {
            if self.alive(k, idx) {
                0.0
            } else {
                1.0
            }
        })
    }

    fn check_family(&self, family: &[AdaptedProcess], predictable: bool) -> Result<()> {
        if family.len() != self.kernel.m() {
            return Err(LabError::Structure(format!(
                "family has {} members for {} grid points",
                family.len(),
                self.kernel.m()
            )));
        }
        let f = self.kernel.filtration();
        for y in family {
            if predictable {
                f.check_predictable(y)?;
            } else {
                f.check_adapted(y)?;
            }
        }
        Ok(())
    }

    /// Splits a progressively adapted process into its before/after parts.
    pub fn decompose(&self, y: &AdaptedProcess) -> Result<ProgressiveParts> {
        self.filtrations.progressive.check_adapted(y)?;
        let (n, m, steps) = (self.kernel.n_atoms(), self.kernel.m(), self.steps());
        let grid = self.kernel.grid();
        let times = self.kernel.space().times();
        let before = AdaptedProcess::from_fn(steps, n, |k, a| {
            // The largest grid point is beyond every observation time.
            let i = grid.band(times[k], f64::INFINITY).start.min(m - 1);
            y.get(k, self.atom(a, i))
        });
        let after = (0..m)
            .map(|i| {
                AdaptedProcess::from_fn(steps, n, |k, a| {
                    if grid.u(i) <= times[k] {
                        y.get(k, self.atom(a, i))
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Ok(ProgressiveParts { before, after })
    }

    pub fn reassemble(&self, parts: &ProgressiveParts) -> AdaptedProcess {
        let m = self.kernel.m();
        AdaptedProcess::from_fn(self.steps(), self.n_atoms(), |k, idx| {
            let (a, i) = (idx / m, idx % m);
            if self.alive(k, idx) {
                parts.before.get(k, a)
            } else {
                parts.after[i].get(k, a)
            }
        })
    }

    /// Closed form of `E[y_t(tau) | F_s v sigma(tau)]` as `result[i][a]`:
    /// `E[y_t(u) d_r(u) | F_s] / d_s(u)` at `u = u_i`, with `r = max(s, t)`
    /// and `d` the density of the chosen law (`p`, or `1` for the independent one).
    pub fn condexp_initial(
        &self,
        family: &[AdaptedProcess],
        s: usize,
        t: usize,
        which: JointMeasure,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_family(family, false)?;
        let r = s.max(t);
        let n = self.kernel.n_atoms();
        let mu = self.kernel.measure();
        let pi = self.kernel.filtration().partition(s);
        family
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let z: Vec<f64> = (0..n)
                    .map(|a| y.get(t, a) * self.density(which, r, a, i))
                    .collect();
                let ce = cond_exp(&z, mu, pi)?;
                Ok((0..n).map(|a| ce[a] / self.density(which, s, a, i)).collect())
            })
            .collect()
    }

    /// Brute-force `E[y_t(tau) | F_s v sigma(tau)]` on product atoms.
    pub fn oracle_initial(
        &self,
        family: &[AdaptedProcess],
        s: usize,
        t: usize,
        which: JointMeasure,
    ) -> Result<Vec<f64>> {
        let lifted = self.lift(family)?;
        cond_exp(lifted.at(t), self.measure(which), self.filtrations.initial.partition(s))
    }

    /// Closed form of `E[y_t(tau) | G_s]`: before the random time
    /// `E[sum_{u_i > t_s} y_t(u_i) d_r(u_i) nu_i | F_s] / D_s`, after it
    /// `E[y_t(u) d_r(u) | F_s] / d_s(u)`, with `r = max(s, t)` and `D` the
    /// survival process of the chosen law.
    pub fn condexp_progressive(
        &self,
        family: &[AdaptedProcess],
        s: usize,
        t: usize,
        which: JointMeasure,
    ) -> Result<ProgressiveValue> {
        self.check_family(family, false)?;
        let r = s.max(t);
        let n = self.kernel.n_atoms();
        let mu = self.kernel.measure();
        let pi = self.kernel.filtration().partition(s);
        let ts = self.kernel.space().time(s);
        let grid = self.kernel.grid();
        let numer: Vec<f64> = (0..n)
            .map(|a| self.tail_sum(which, ts, r, a, |i| family[i].get(t, a)))
            .collect();
        let numer = cond_exp(&numer, mu, pi)?;
        let surv = self.survival(which);
        let before = (0..n).map(|a| numer[a] / surv.get(s, a)).collect();
        let mut after = vec![vec![0.0; n]; grid.len()];
        for i in grid.band(f64::NEG_INFINITY, ts) {
            let z: Vec<f64> = (0..n)
                .map(|a| family[i].get(t, a) * self.density(which, r, a, i))
                .collect();
            let ce = cond_exp(&z, mu, pi)?;
            after[i] = (0..n).map(|a| ce[a] / self.density(which, s, a, i)).collect();
        }
        Ok(ProgressiveValue { before, after })
    }

    pub fn oracle_progressive(
        &self,
        family: &[AdaptedProcess],
        s: usize,
        t: usize,
        which: JointMeasure,
    ) -> Result<Vec<f64>> {
        let lifted = self.lift(family)?;
        cond_exp(
            lifted.at(t),
            self.measure(which),
            self.filtrations.progressive.partition(s),
        )
    }

    /// Evaluates a step-`s` progressive value on product atoms.
    pub fn progressive_on_atoms(&self, s: usize, v: &ProgressiveValue) -> Vec<f64> {
        let m = self.kernel.m();
        (0..self.n_atoms())
            .map(|idx| {
                let (a, i) = (idx / m, idx % m);
                if self.alive(s, idx) {
                    v.before[a]
                } else {
                    v.after[i][a]
                }
            })
            .collect()
    }

    /// Predictable projection of `y(tau)` on the base filtration:
    /// `sum_i y_k(u_i) d_{k-1}(u_i) nu_i` for a family predictable in each `u`.
    pub fn pred_proj_base(
        &self,
        family: &[AdaptedProcess],
        which: JointMeasure,
    ) -> Result<AdaptedProcess> {
        self.check_family(family, true)?;
        let grid = self.kernel.grid();
        Ok(AdaptedProcess::from_fn(self.steps(), self.kernel.n_atoms(), |k, a| {
            let prev = k.saturating_sub(1);
            (0..grid.len())
                .map(|i| family[i].get(k, a) * self.density(which, prev, a, i) * grid.nu(i))
                .sum()
        }))
    }

    /// Definition-based predictable projection of `y(tau)` on the base filtration,
    /// reported per base atom.
    pub fn oracle_pred_proj_base(
        &self,
        family: &[AdaptedProcess],
        which: JointMeasure,
    ) -> Result<AdaptedProcess> {
        let lifted = self.lift(family)?;
        let proj = predictable_projection(&lifted, &self.filtrations.lifted, self.measure(which))?;
        let m = self.kernel.m();
        Ok(AdaptedProcess::from_fn(self.steps(), self.kernel.n_atoms(), |k, a| {
            proj.get(k, a * m)
        }))
    }

    /// Predictable projection formula on the progressive filtration:
    /// on `{t_k <= tau}` the survival-weighted average
    /// `sum_{u_i > t_{k-1}} y_k(u_i) d_{k-1}(u_i) nu_i / D_{k-1}`, and `y_k(tau)` on `{tau < t_k}`.
    pub fn pred_proj_progressive(
        &self,
        family: &[AdaptedProcess],
        which: JointMeasure,
    ) -> Result<ProgressiveProjection> {
        self.check_family(family, true)?;
        let surv = self.survival(which);
        let times = self.kernel.space().times();
        let (n, m, steps) = (self.kernel.n_atoms(), self.kernel.m(), self.steps());
        let mut band = Vec::with_capacity(steps + 1);
        let mut values = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let prev = k.saturating_sub(1);
            let avg: Vec<f64> = (0..n)
                .map(|a| {
                    self.tail_sum(which, times[prev], prev, a, |i| family[i].get(k, a))
                        / surv.get(prev, a)
                })
                .collect();
            let mut vk = Vec::with_capacity(n * m);
            let mut bk = Vec::with_capacity(n * m);
            for a in 0..n {
                for i in 0..m {
                    let u = self.kernel.grid().u(i);
                    if u < times[k] {
                        vk.push(family[i].get(k, a));
                    } else {
                        vk.push(avg[a]);
                    }
                    bk.push(k > 0 && u > times[prev] && u < times[k]);
                }
            }
            values.push(vk);
            band.push(bk);
        }
        Ok(ProgressiveProjection {
            values: AdaptedProcess::new(values)?,
            band,
        })
    }

    pub fn oracle_pred_proj_progressive(
        &self,
        family: &[AdaptedProcess],
        which: JointMeasure,
    ) -> Result<AdaptedProcess> {
        let lifted = self.lift(family)?;
        predictable_projection(&lifted, &self.filtrations.progressive, self.measure(which))
    }

    /// Structural invariants: weights, marginals, the filtration chain and
    /// the stopping-time property of the random time.
    pub fn structure_report(&self) -> SuiteReport {
        let mut rep = SuiteReport::new("product_structure", self.kernel.label(), JOINT_WEIGHT_TOL);
        let (n, m) = (self.kernel.n_atoms(), self.kernel.m());
        let grid = self.kernel.grid();
        let pw = self.kernel.measure().weights();
        for a in 0..n {
            let s: f64 = (0..m).map(|i| self.original.weight(self.atom(a, i))).sum();
            rep.record(|| format!("base marginal, atom {a}"), s - pw[a]);
        }
        for i in 0..m {
            let s: f64 = (0..n).map(|a| self.original.weight(self.atom(a, i))).sum();
            rep.record(|| format!("time marginal, index {i}"), s - grid.nu(i));
        }
        let f = &self.filtrations;
        for k in 0..=self.steps() {
            if !f.progressive.partition(k).refines(f.lifted.partition(k)) {
                rep.fail(format!("progressive does not refine lifted at step {k}"), 1.0);
            }
            if !f.initial.partition(k).refines(f.progressive.partition(k)) {
                rep.fail(format!("initial does not refine progressive at step {k}"), 1.0);
            }
            let h = self.default_indicator();
            if f.progressive.check_adapted(&h).is_err() {
                rep.fail("random time is not a stopping time", 1.0);
            }
        }
        rep
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density_kernel::TauGrid;
    use crate::finite_space::{doob_martingale, FiniteSpace};
    use crate::report::Status;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn factor(steps: usize, m: usize) -> DensityKernel {
        let space = Arc::new(FiniteSpace::binomial_tree(steps, 1.0, 0.5).unwrap());
        DensityKernel::factor_model(space, TauGrid::exponential(m, 1.0).unwrap(), |u| {
            0.7 * (-u).exp()
        })
        .unwrap()
    }

    fn random_family(k: &DensityKernel, rng: &mut ChaCha8Rng) -> Vec<AdaptedProcess> {
        let filt = k.filtration();
        (0..k.m())
            .map(|_| {
                let z: Vec<f64> = (0..k.n_atoms()).map(|_| rng.random_range(-1.0..1.0)).collect();
                doob_martingale(&z, filt, k.measure()).unwrap()
            })
            .collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn structure_holds() {
        let k = factor(3, 4);
        let ps = ProductSpace::new(&k).unwrap();
        let r = ps.structure_report();
        assert_eq!(r.status, Status::Pass, "{:?}", r.offenders);
        assert_eq!(ps.filtrations().progressive.partition(0).n_cells(), 1);
        assert_eq!(ps.filtrations().initial.partition(0).n_cells(), 4);
    }

    #[test]
    fn independence_under_product_law() {
        let k = factor(3, 4);
        let ps = ProductSpace::new(&k).unwrap();
        let mu = ps.measure(JointMeasure::Independent);
        let x = k.space().walk();
        let f = |u: f64| (2.0 * u).sin();
        for step in 0..=3 {
            let lhs: f64 = (0..ps.n_atoms())
                .map(|idx| mu.weight(idx) * x.get(step, ps.base_atom(idx)) * f(ps.tau(idx)))
                .sum();
            let ex: f64 = k.measure().expectation(x.at(step));
            let ef: f64 = (0..k.m()).map(|i| k.grid().nu(i) * f(k.grid().u(i))).sum();
            assert!((lhs - ex * ef).abs() < 1e-13);
        }
    }

    #[test]
    fn decompose_round_trip_and_special_cases() {
        let k = factor(3, 4);
        let ps = ProductSpace::new(&k).unwrap();
        let h = ps.default_indicator();
        let parts = ps.decompose(&h).unwrap();
        assert_eq!(parts.before.sup_norm(), 0.0);
        for (i, a) in parts.after.iter().enumerate() {
            for step in 0..=3 {
                if k.grid().u(i) <= k.space().time(step) {
                    assert!(a.at(step).iter().all(|v| *v == 1.0));
                }
            }
        }
        let x = k.space().walk();
        let lx = ps.lift_base(&x).unwrap();
        let parts = ps.decompose(&lx).unwrap();
        assert_eq!(parts.before, x);
        assert_eq!(ps.reassemble(&parts), lx);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..ps.n_atoms()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = doob_martingale(
            &z,
            &ps.filtrations().progressive,
            ps.measure(JointMeasure::Original),
        )
        .unwrap();
        let back = ps.reassemble(&ps.decompose(&y).unwrap());
        assert!(back.sub(&y).sup_norm() < 1e-15);
    }

    #[test]
    fn conditioning_formulas_match_oracle() {
        let k = factor(4, 4);
        let ps = ProductSpace::new(&k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fam = random_family(&k, &mut rng);
        for which in [JointMeasure::Original, JointMeasure::Independent] {
            for s in 0..=4 {
                for t in 0..=4 {
                    let cf = ps.condexp_initial(&fam, s, t, which).unwrap();
                    let on_atoms: Vec<f64> = (0..ps.n_atoms())
                        .map(|idx| cf[ps.tau_index(idx)][ps.base_atom(idx)])
                        .collect();
                    let oracle = ps.oracle_initial(&fam, s, t, which).unwrap();
                    assert!(max_diff(&on_atoms, &oracle) < 1e-12);

                    let pv = ps.condexp_progressive(&fam, s, t, which).unwrap();
                    let oracle = ps.oracle_progressive(&fam, s, t, which).unwrap();
                    assert!(max_diff(&ps.progressive_on_atoms(s, &pv), &oracle) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_family_conditions_to_one() {
        let k = factor(3, 3);
        let ps = ProductSpace::new(&k).unwrap();
        let ones = vec![AdaptedProcess::constant(3, k.n_atoms(), 1.0); 3];
        let cf = ps.condexp_initial(&ones, 1, 3, JointMeasure::Original).unwrap();
        assert!(cf.iter().flatten().all(|v| (v - 1.0).abs() < 1e-13));
        let pv = ps.condexp_progressive(&ones, 1, 3, JointMeasure::Original).unwrap();
        assert!(pv.before.iter().all(|v| (v - 1.0).abs() < 1e-13));
    }

    #[test]
    fn projections_match_oracle() {
        let k = factor(4, 5);
        let ps = ProductSpace::new(&k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Lagging a martingale family by one step makes it predictable.
        let fam: Vec<AdaptedProcess> = random_family(&k, &mut rng)
            .into_iter()
            .map(|y| AdaptedProcess::from_fn(4, k.n_atoms(), |s, a| y.get(s.saturating_sub(1), a)))
            .collect();
        for which in [JointMeasure::Original, JointMeasure::Independent] {
            let f = ps.pred_proj_base(&fam, which).unwrap();
            let o = ps.oracle_pred_proj_base(&fam, which).unwrap();
            assert!(f.sub(&o).sup_norm() < 1e-12);

            let g = ps.pred_proj_progressive(&fam, which).unwrap();
            let o = ps.oracle_pred_proj_progressive(&fam, which).unwrap();
            for s in 0..=4 {
                for idx in 0..ps.n_atoms() {
                    if !g.band[s][idx] {
                        assert!((g.values.get(s, idx) - o.get(s, idx)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn non_predictable_family_rejected() {
        let k = factor(2, 2);
        let ps = ProductSpace::new(&k).unwrap();
        let w = k.space().walk();
        assert!(ps.pred_proj_base(&[w.clone(), w], JointMeasure::Original).is_err());
    }
}
