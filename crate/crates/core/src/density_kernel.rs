//! Conditional density families `p_k(a, u_i)` of a random time given the
//! base filtration, together with the survival and intensity processes they induce.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::finite_space::{
    cond_exp, doob_decomposition, is_martingale, transition_probs, AdaptedProcess, Filtration,
    FiniteSpace, Measure, Partition, SPACE_WEIGHT_TOL,
};
use crate::report::SuiteReport;

/// Tolerance for the sum-to-one check of grid weights.
pub const GRID_WEIGHT_TOL: f64 = 1e-14;
/// Tolerance of the pathwise normalization `sum_i nu_i p_k(a, u_i) = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-12;
/// Tolerance of the per-`u` martingale property.
pub const KERNEL_MARTINGALE_TOL: f64 = 1e-13;
/// Grid points closer than this to an observation time count as ties.
const TIE_TOL: f64 = 1e-12;
const MAX_RETRIES: usize = 32;

/// A finite discretization `u_1 < ... < u_m` of the law of the random time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid {
    u_values: Vec<f64>,
    nu_weights: Vec<f64>,
}

impl TauGrid {
    pub fn new(u_values: Vec<f64>, nu_weights: Vec<f64>) -> Result<Self> {
        if u_values.is_empty() || u_values.len() != nu_weights.len() {
            return Err(LabError::InvalidGrid(format!(
                "{} grid points with {} weights",
                u_values.len(),
                nu_weights.len()
            )));
        }
        if u_values[0] <= 0.0 || u_values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LabError::InvalidGrid(
                "grid points must be positive and strictly increasing".into(),
            ));
        }
        if nu_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(LabError::InvalidGrid("grid weights must be positive".into()));
        }
        let total: f64 = nu_weights.iter().sum();
        if (total - 1.0).abs() > GRID_WEIGHT_TOL {
            return Err(LabError::InvalidGrid(format!("grid weights sum to {total}")));
        }
        Ok(Self {
            u_values,
            nu_weights,
        })
    }

    /// Normalizes positive masses before building the grid.
    pub fn from_masses(u_values: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(LabError::InvalidGrid("total mass is not positive".into()));
        }
        Self::new(u_values, masses.iter().map(|m| m / total).collect())
    }

    /// Unit-rate exponential law truncated to `(0, 2 * horizon]`, split into
    /// `m` equal cells, each represented by its conditional mean.
    pub fn exponential(m: usize, horizon: f64) -> Result<Self> {
        Self::truncated_exponential(m, 2.0 * horizon, 1.0)
    }

    pub fn truncated_exponential(m: usize, upper: f64, rate: f64) -> Result<Self> {
        if m == 0 || !(upper > 0.0) || !(rate > 0.0) {
            return Err(LabError::InvalidGrid("need m >= 1, upper > 0, rate > 0".into()));
        }
        let width = upper / m as f64;
        let mut u = Vec::with_capacity(m);
        let mut mass = Vec::with_capacity(m);
        for j in 0..m {
            let a = j as f64 * width;
            let b = a + width;
            let (ea, eb) = ((-rate * a).exp(), (-rate * b).exp());
            let mean = ((a + 1.0 / rate) * ea - (b + 1.0 / rate) * eb) / (ea - eb);
            u.push(mean);
            mass.push(ea - eb);
        }
        Self::from_masses(u, mass)
    }

    pub fn len(&self) -> usize {
        self.u_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_values.is_empty()
    }

    #[inline]
    pub fn u(&self, i: usize) -> f64 {
        self.u_values[i]
    }

    #[inline]
    pub fn nu(&self, i: usize) -> f64 {
        self.nu_weights[i]
    }

    pub fn u_values(&self) -> &[f64] {
        &self.u_values
    }

    pub fn nu_weights(&self) -> &[f64] {
        &self.nu_weights
    }

    /// `sum_{u_i > t} nu_i`.
    pub fn tail_mass(&self, t: f64) -> f64 {
        self.u_values
            .iter()
            .zip(&self.nu_weights)
            .filter(|(u, _)| **u > t)
            .map(|(_, w)| w)
            .sum()
    }

    /// Indices `i` with `a < u_i <= b`.
    pub fn band(&self, a: f64, b: f64) -> std::ops::Range<usize> {
        let lo = self.u_values.partition_point(|u| *u <= a);
        let hi = self.u_values.partition_point(|u| *u <= b);
        lo..hi
    }

    /// Largest index with `u_i <= t`, falling back to the first point when
    /// every grid point lies above `t`.
    pub fn at_or_below(&self, t: f64) -> usize {
        self.u_values.partition_point(|u| *u <= t).saturating_sub(1)
    }

    /// Fails when some grid point coincides with an observation time.
    pub fn check_no_ties(&self, times: &[f64]) -> Result<()> {
        for &u in &self.u_values {
            if let Some(t) = times.iter().find(|t| (u - **t).abs() <= TIE_TOL * t.abs().max(1.0)) {
                return Err(LabError::InvalidGrid(format!(
                    "grid point {u} coincides with observation time {t}"
                )));
            }
        }
        Ok(())
    }

    /// Last observation step strictly before each grid point.
    pub fn freeze_steps(&self, times: &[f64]) -> Vec<usize> {
        self.u_values
            .iter()
            .map(|u| times.partition_point(|t| t < u) - 1)
            .collect()
    }
}

/// Loading functions `u -> sigma(u)` for the factor model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loading {
    Constant { value: f64 },
    Exponential { scale: f64, decay: f64 },
}

impl Loading {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Loading::Constant { value } => value,
            Loading::Exponential { scale, decay } => scale * (-decay * u).exp(),
        }
    }
}

/// The density family `p_k(a, u_i)` with the probability under which each
/// `p(u_i)` is a martingale.
#[derive(Debug, Clone)]
pub struct DensityKernel {
    space: Arc<FiniteSpace>,
    measure: Measure,
    grid: TauGrid,
    p: Vec<f64>,
    label: String,
}

/// `G_k = P(tau > t_k | F_k)` and its unconditional counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalProcess {
    pub g: AdaptedProcess,
    pub g_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityProcess {
    pub lambda: AdaptedProcess,
    pub lambda_star: Vec<f64>,
}

impl DensityKernel {
    /// Assembles a kernel from raw values in `(step, atom, u)` row-major order.
    /// Only shapes and the grid are checked; use [`DensityKernel::validate`]
    /// for the density invariants.
    pub fn from_parts(
        space: Arc<FiniteSpace>,
        measure: Measure,
        grid: TauGrid,
        p: Vec<f64>,
        label: impl Into<String>,
    ) -> Result<Self> {
        let expected = (space.steps() + 1) * space.n_atoms() * grid.len();
        if p.len() != expected || measure.len() != space.n_atoms() {
            return Err(LabError::InvalidKernel(format!(
                "shape mismatch: {} values for {expected} slots",
                p.len()
            )));
        }
        grid.check_no_ties(space.times())?;
        Ok(Self {
            space,
            measure,
            grid,
            p,
            label: label.into(),
        })
    }

    pub fn independent(space: Arc<FiniteSpace>, grid: TauGrid) -> Result<Self> {
        let n = (space.steps() + 1) * space.n_atoms() * grid.len();
        let measure = space.measure().clone();
        Self::from_parts(space, measure, grid, vec![1.0; n], "independent")
    }

    /// Multiplicative factor model on a tree with at most two children per node.
    ///
    /// Each `q(u_i)` is a positive martingale under the space's own weights,
    /// driven by the standardized step of the tree with volatility `sigma(u_i)`;
    /// the kernel is `q / n` with `n = sum_j nu_j q(u_j)`, and the returned
    /// measure has density `n_N` against the space's weights.
    pub fn factor_model(
        space: Arc<FiniteSpace>,
        grid: TauGrid,
        sigma: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        if space.max_branching() > 2 {
            return Err(LabError::InvalidModel(
                "factor model needs a tree with at most two children per node".into(),
            ));
        }
        let (steps, n, m) = (space.steps(), space.n_atoms(), grid.len());
        let sig: Vec<f64> = grid.u_values().iter().map(|u| sigma(*u)).collect();
        let mut q = vec![1.0; (steps + 1) * n * m];
        for k in 1..=steps {
            let dt_sqrt = (space.time(k) - space.time(k - 1)).sqrt();
            let pi = transition_probs(space.measure(), space.filtration(), k);
            for a in 0..n {
                let xi = standardized_step(pi[a], space.branch(k, a));
                for i in 0..m {
                    let factor = 1.0 + sig[i] * dt_sqrt * xi;
                    if !(factor > 0.0) {
                        return Err(LabError::Positivity {
                            step: k,
                            atom: a,
                            index: i,
                            value: factor,
                        });
                    }
                    q[(k * n + a) * m + i] = q[((k - 1) * n + a) * m + i] * factor;
                }
            }
        }
        let mut p = q;
        let mut n_terminal = vec![0.0; n];
        for k in 0..=steps {
            for a in 0..n {
                let row = &mut p[(k * n + a) * m..(k * n + a + 1) * m];
                let norm: f64 = row.iter().zip(grid.nu_weights()).map(|(q, w)| q * w).sum();
                row.iter_mut().for_each(|v| *v /= norm);
                if k == steps {
                    n_terminal[a] = norm;
                }
            }
        }
        let measure = space.measure().reweighted(&n_terminal)?;
        Self::from_parts(space, measure, grid, p, "factor")
    }

    /// Random kernel built forward in time: at every node, per-`u` increments
    /// are drawn and projected so that each `p(u_i)` stays a martingale and
    /// the normalization holds pathwise.
    pub fn randomized(space: Arc<FiniteSpace>, grid: TauGrid, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (steps, n, m) = (space.steps(), space.n_atoms(), grid.len());
        let measure = space.measure().clone();
        let mut p = vec![1.0; (steps + 1) * n * m];
        for k in 1..=steps {
            let filt = space.filtration();
            let fine = filt.partition(k);
            let coarse = filt.partition(k - 1);
            let parents = fine.parent_cells(coarse)?;
            let fine_mass = measure.cell_masses(fine);
            let coarse_mass = measure.cell_masses(coarse);
            let fine_rep: Vec<usize> = fine.cells().iter().map(|c| c[0]).collect();
            let mut children = vec![Vec::new(); coarse.n_cells()];
            for (c, &par) in parents.iter().enumerate() {
                children[par].push(c);
            }
            let mut fine_rows = vec![Vec::new(); fine.n_cells()];
            for (cc, kids) in children.iter().enumerate() {
                let rep = fine_rep[kids[0]];
                let prev: Vec<f64> = p[((k - 1) * n + rep) * m..((k - 1) * n + rep + 1) * m].to_vec();
                let w: Vec<f64> = kids.iter().map(|c| fine_mass[*c] / coarse_mass[cc]).collect();
                let r: Vec<f64> = prev.iter().zip(grid.nu_weights()).map(|(p, v)| p * v).collect();
                let gamma = projected_increments(&w, &r, &mut rng)?;
                for (j, c) in kids.iter().enumerate() {
                    fine_rows[*c] = prev
                        .iter()
                        .zip(&gamma[j])
                        .map(|(p, g)| p * (1.0 + g))
                        .collect();
                }
            }
            for a in 0..n {
                let row = &fine_rows[fine.cell(a)];
                p[(k * n + a) * m..(k * n + a + 1) * m].copy_from_slice(row);
            }
        }
        Self::from_parts(space, measure, grid, p, format!("randomized(seed={seed})"))
    }

    /// Kernel with the same base model in which `p(u_i)` is frozen from the
    /// last observation before `u_i` onwards.
    ///
    /// The random time is rebuilt from discrete hazards read off `source` at
    /// those freeze steps, and the grid weights become its law under the
    /// kernel's measure.
    pub fn frozen(source: &DensityKernel) -> Result<Self> {
        let space = source.space.clone();
        let (steps, n, m) = (space.steps(), space.n_atoms(), source.grid.len());
        let kappa = source.grid.freeze_steps(space.times());
        let nu = source.grid.nu_weights();
        // Per-atom terminal jump sizes dA_i of the hazard construction.
        let mut jumps = vec![vec![0.0; n]; m];
        for a in 0..n {
            let mut surv = 1.0;
            for i in 0..m {
                let row = source.row(kappa[i], a);
                let h = if i + 1 == m {
                    1.0
                } else {
                    let tail: f64 = (i..m).map(|j| nu[j] * row[j]).sum();
                    nu[i] * row[i] / tail
                };
                jumps[i][a] = surv * h;
                surv *= 1.0 - h;
            }
        }
        let mu = &source.measure;
        let law: Vec<f64> = jumps.iter().map(|j| mu.expectation(j)).collect();
        let grid = TauGrid::from_masses(source.grid.u_values.clone(), law.clone())?;
        let mut p = vec![0.0; (steps + 1) * n * m];
        for (i, j) in jumps.iter().enumerate() {
            for k in 0..=steps {
                let ce = cond_exp(j, mu, space.filtration().partition(k))?;
                for a in 0..n {
                    p[(k * n + a) * m + i] = ce[a] / grid.nu(i);
                }
            }
        }
        Self::from_parts(
            space,
            mu.clone(),
            grid,
            p,
            format!("frozen({})", source.label),
        )
    }

    /// Copy with a single value replaced, for fault injection.
    pub fn with_value(&self, step: usize, atom: usize, index: usize, value: f64) -> Self {
        let mut out = self.clone();
        let idx = out.index(step, atom, index);
        out.p[idx] = value;
        out.label = format!("{}+fault", self.label);
        out
    }

    #[inline]
    fn index(&self, k: usize, a: usize, i: usize) -> usize {
        (k * self.space.n_atoms() + a) * self.grid.len() + i
    }

    #[inline]
    pub fn p(&self, k: usize, a: usize, i: usize) -> f64 {
        self.p[self.index(k, a, i)]
    }

    /// All grid values at `(k, a)`.
    #[inline]
    pub fn row(&self, k: usize, a: usize) -> &[f64] {
        let m = self.grid.len();
        let start = (k * self.space.n_atoms() + a) * m;
        &self.p[start..start + m]
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn space(&self) -> &FiniteSpace {
        &self.space
    }

    pub fn space_arc(&self) -> Arc<FiniteSpace> {
        self.space.clone()
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    pub fn grid(&self) -> &TauGrid {
        &self.grid
    }

    pub fn filtration(&self) -> &Filtration {
        self.space.filtration()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn steps(&self) -> usize {
        self.space.steps()
    }

    pub fn n_atoms(&self) -> usize {
        self.space.n_atoms()
    }

    pub fn m(&self) -> usize {
        self.grid.len()
    }

    /// The process `(p_k(u_i))_k`.
    pub fn density_process(&self, i: usize) -> AdaptedProcess {
        AdaptedProcess::from_fn(self.steps(), self.n_atoms(), |k, a| self.p(k, a, i))
    }

    pub fn freeze_steps(&self) -> Vec<usize> {
        self.grid.freeze_steps(self.space.times())
    }

    /// Checks positivity, `p_0 = 1`, adaptedness, pathwise normalization and
    /// the per-`u` martingale property, listing every violation.
    pub fn validate(&self) -> SuiteReport {
        let mut rep = SuiteReport::new("kernel_validate", &self.label, NORMALIZATION_TOL);
        let (steps, n, m) = (self.steps(), self.n_atoms(), self.m());
        let mut positivity_ok = true;
        for k in 0..=steps {
            for a in 0..n {
                for i in 0..m {
                    let v = self.p(k, a, i);
                    if !(v > 0.0) || !v.is_finite() {
                        positivity_ok = false;
                        rep.fail(format!("positivity: step {k}, atom {a}, index {i}"), v);
                    }
                }
            }
        }
        let mut init = 0.0f64;
        let mut norm = 0.0f64;
        for a in 0..n {
            for i in 0..m {
                init = init.max((self.p(0, a, i) - 1.0).abs());
            }
            for k in 0..=steps {
                let s: f64 = self
                    .row(k, a)
                    .iter()
                    .zip(self.grid.nu_weights())
                    .map(|(p, w)| p * w)
                    .sum();
                let r = (s - 1.0).abs();
                norm = norm.max(r);
                rep.record(|| format!("normalization: step {k}, atom {a}"), r);
            }
        }
        for a in 0..n {
            for i in 0..m {
                let r = (self.p(0, a, i) - 1.0).abs();
                rep.record(|| format!("initial value: atom {a}, index {i}"), r);
            }
        }
        let mut mart = 0.0f64;
        for i in 0..m {
            let proc = self.density_process(i);
            match is_martingale(&proc, self.filtration(), &self.measure, KERNEL_MARTINGALE_TOL) {
                Ok(chk) => {
                    mart = mart.max(chk.max_residual);
                    if !chk.holds {
                        let (k, a) = chk.worst.unwrap_or((0, 0));
                        rep.fail(
                            format!("martingale: index {i}, step {k}, atom {a}"),
                            chk.max_residual,
                        );
                    }
                }
                Err(e) => rep.fail(format!("adaptedness: index {i}: {e}"), f64::NAN),
            }
        }
        rep.max_residual = rep.max_residual.max(mart);
        rep.metric("positivity", if positivity_ok { 1.0 } else { 0.0 });
        rep.metric("initial_residual", init);
        rep.metric("normalization_residual", norm);
        rep.metric("martingale_residual", mart);
        rep
    }

    pub fn survival(&self) -> SurvivalProcess {
        let times = self.space.times();
        let g = AdaptedProcess::from_fn(self.steps(), self.n_atoms(), |k, a| {
            let band = self.grid.band(times[k], f64::INFINITY);
            band.map(|i| self.grid.nu(i) * self.p(k, a, i)).sum()
        });
        let g_star = times.iter().map(|t| self.grid.tail_mass(*t)).collect();
        SurvivalProcess { g, g_star }
    }

    /// `lambda_k = p_k(u_below) / G_k` with `u_below` the grid point at or
    /// below `t_k` (the first point while none lies below).
    pub fn intensity(&self) -> IntensityProcess {
        let surv = self.survival();
        let times = self.space.times();
        let lambda = AdaptedProcess::from_fn(self.steps(), self.n_atoms(), |k, a| {
            self.p(k, a, self.grid.at_or_below(times[k])) / surv.g.get(k, a)
        });
        let lambda_star = surv.g_star.iter().map(|g| 1.0 / g).collect();
        IntensityProcess {
            lambda,
            lambda_star,
        }
    }

    /// Checks `0 < G <= 1`, the complement identity and that the Doob
    /// compensator of `G` is non-increasing.
    pub fn survival_report(&self) -> Result<SuiteReport> {
        let mut rep = SuiteReport::new("survival", &self.label, NORMALIZATION_TOL);
        let times = self.space.times();
        if self.grid.u(self.m() - 1) <= self.space.horizon() {
            return Err(LabError::InvalidGrid(
                "largest grid point must exceed the horizon".into(),
            ));
        }
        let surv = self.survival();
        for k in 0..=self.steps() {
            for a in 0..self.n_atoms() {
                let g = surv.g.get(k, a);
                if !(g > 0.0 && g <= 1.0 + NORMALIZATION_TOL) {
                    rep.fail(format!("G out of (0,1]: step {k}, atom {a}"), g);
                }
                let head: f64 = self
                    .grid
                    .band(f64::NEG_INFINITY, times[k])
                    .map(|i| self.grid.nu(i) * self.p(k, a, i))
                    .sum();
                rep.record(|| format!("complement: step {k}, atom {a}"), g + head - 1.0);
            }
        }
        let d = doob_decomposition(&surv.g, self.filtration(), &self.measure)?;
        let mut rise = 0.0f64;
        for k in 1..=self.steps() {
            for a in 0..self.n_atoms() {
                rise = rise.max(d.compensator.get(k, a) - d.compensator.get(k - 1, a));
            }
        }
        rep.record(|| "compensator increase".into(), rise.max(0.0));
        rep.metric("max_compensator_increase", rise);
        Ok(rep)
    }

    pub fn to_document(&self) -> KernelDocument {
        let filt = self.filtration();
        KernelDocument {
            label: self.label.clone(),
            times: self.space.times().to_vec(),
            partitions: filt.partitions().iter().map(|p| p.labels().to_vec()).collect(),
            base_weights: self.space.measure().weights().to_vec(),
            measure: self.measure.weights().to_vec(),
            u_values: self.grid.u_values.clone(),
            nu_weights: self.grid.nu_weights.clone(),
            p: self.p.clone(),
        }
    }

    pub fn from_document(doc: KernelDocument) -> Result<Self> {
        let partitions = doc
            .partitions
            .iter()
            .map(|l| Partition::from_labels(l))
            .collect::<Result<Vec<_>>>()?;
        let space = FiniteSpace::new(
            Measure::with_tolerance(doc.base_weights, SPACE_WEIGHT_TOL)?,
            doc.times,
            Filtration::new(partitions)?,
        )?;
        Self::from_parts(
            Arc::new(space),
            Measure::new(doc.measure)?,
            TauGrid::new(doc.u_values, doc.nu_weights)?,
            doc.p,
            doc.label,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }
}

/// Serialized kernel: base space, grid and values in `(step, atom, u)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDocument {
    pub label: String,
    pub times: Vec<f64>,
    pub partitions: Vec<Vec<u32>>,
    pub base_weights: Vec<f64>,
    pub measure: Vec<f64>,
    pub u_values: Vec<f64>,
    pub nu_weights: Vec<f64>,
    pub p: Vec<f64>,
}

/// Zero-mean, unit-variance step of a binary node with up-probability `pi`.
fn standardized_step(pi: f64, branch: u8) -> f64 {
    if pi >= 1.0 {
        return 0.0;
    }
    if branch == 0 {
        ((1.0 - pi) / pi).sqrt()
    } else {
        -(pi / (1.0 - pi)).sqrt()
    }
}

/// Random matrix `gamma[child][u]` with `sum_c w_c gamma[c][i] = 0` for every
/// `i` and `sum_i r_i gamma[c][i] = 0` for every `c`, scaled so `|gamma| <= 1/2`.
/// Both weight vectors must sum to one.
fn projected_increments<R: Rng>(w: &[f64], r: &[f64], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let (b, m) = (w.len(), r.len());
    if b < 2 || m < 2 {
        return Ok(vec![vec![0.0; m]; b]);
    }
    for _ in 0..MAX_RETRIES {
        let mut g: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let col: Vec<f64> = (0..m).map(|i| (0..b).map(|c| w[c] * g[c][i]).sum()).collect();
        let row: Vec<f64> = g
            .iter()
            .map(|gc| gc.iter().zip(r).map(|(x, ri)| x * ri).sum())
            .collect();
        let grand: f64 = (0..b).map(|c| w[c] * row[c]).sum();
        for c in 0..b {
            for i in 0..m {
                g[c][i] += grand - col[i] - row[c];
            }
        }
        let max = g.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        if max < 1e-6 {
            continue;
        }
        let scale = rng.random_range(0.2..0.5) / max;
        g.iter_mut().flatten().for_each(|v| *v *= scale);
        return Ok(g);
    }
    Err(LabError::Degenerate(MAX_RETRIES))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::Status;

    fn binomial(steps: usize) -> Arc<FiniteSpace> {
        Arc::new(FiniteSpace::binomial_tree(steps, 1.0, 0.5).unwrap())
    }

    fn random_space(steps: usize, seed: u64) -> Arc<FiniteSpace> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new(FiniteSpace::random_tree(steps, 1.0, 3, &mut rng).unwrap())
    }

    #[test]
    fn exponential_grid_is_valid() {
        let g = TauGrid::exponential(8, 1.0).unwrap();
        assert_eq!(g.len(), 8);
        assert!(g.u(7) > 1.0 && g.u(7) < 2.0);
        let s: f64 = g.nu_weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
        // Decreasing density puts each point left of its cell midpoint.
        assert!(g.u(0) < 0.125);
    }

    #[test]
    fn tie_with_observation_time_rejected() {
        let g = TauGrid::new(vec![0.5, 1.5], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            DensityKernel::independent(binomial(2), g),
            Err(LabError::InvalidGrid(_))
        ));
    }

    #[test]
    fn independent_kernel_is_trivial() {
        let k = DensityKernel::independent(binomial(3), TauGrid::exponential(3, 1.0).unwrap()).unwrap();
        let r = k.validate();
        assert_eq!(r.status, Status::Pass);
        assert!(r.max_residual <= 1e-15);
        let s = k.survival();
        for step in 0..=3 {
            assert!(s.g.at(step).iter().all(|g| (g - s.g_star[step]).abs() < 1e-15));
        }
        assert!((s.g_star[0] - 1.0).abs() < 1e-15);
        let l = k.intensity();
        for step in 0..=3 {
            assert!(l.lambda.at(step).iter().all(|v| (v - l.lambda_star[step]).abs() < 1e-14));
        }
    }

    #[test]
    fn one_step_factor_example() {
        let grid = TauGrid::new(vec![1.5, 2.5], vec![0.5, 0.5]).unwrap();
        let k = DensityKernel::factor_model(binomial(1), grid, |u| if u < 2.0 { 0.2 } else { 0.0 })
            .unwrap();
        // Atom 0 is the up move.
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(k.p(1, 0, 0), 1.2 / 1.1));
        assert!(close(k.p(1, 1, 0), 0.8 / 0.9));
        assert!(close(k.p(1, 0, 1), 1.0 / 1.1));
        assert!(close(k.p(1, 1, 1), 1.0 / 0.9));
        assert!(close(k.measure().weight(0), 0.55));
        assert_eq!(k.validate().status, Status::Pass);
    }

    #[test]
    fn zero_loading_reduces_to_independent() {
        let k = DensityKernel::factor_model(binomial(4), TauGrid::exponential(4, 1.0).unwrap(), |_| 0.0)
            .unwrap();
        assert!(k.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn factor_model_six_steps() {
        let k = DensityKernel::factor_model(
            binomial(6),
            TauGrid::exponential(8, 1.0).unwrap(),
            |u| 0.8 * (-u).exp(),
        )
        .unwrap();
        let r = k.validate();
        assert_eq!(r.status, Status::Pass, "{:?}", r.offenders);
        assert!(r.metrics["normalization_residual"] <= 1e-12);
        assert!(r.metrics["martingale_residual"] <= 1e-13);
        let s = k.survival_report().unwrap();
        assert_eq!(s.status, Status::Pass, "{:?}", s.offenders);
        assert!(k.survival().g.at(0).iter().all(|g| (g - 1.0).abs() < 1e-14));
    }

    #[test]
    fn oversized_loading_rejected() {
        let r = DensityKernel::factor_model(binomial(1), TauGrid::exponential(2, 1.0).unwrap(), |_| 2.0);
        assert!(matches!(r, Err(LabError::Positivity { .. })));
    }

    #[test]
    fn randomized_kernel_contract() {
        let space = random_space(4, 9);
        let grid = TauGrid::exponential(5, 1.0).unwrap();
        let a = DensityKernel::randomized(space.clone(), grid.clone(), 17).unwrap();
        let b = DensityKernel::randomized(space.clone(), grid.clone(), 17).unwrap();
        let c = DensityKernel::randomized(space, grid, 18).unwrap();
        assert_eq!(a.values(), b.values());
        let diff = a
            .values()
            .iter()
            .zip(c.values())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff > 0.0);
        let r = a.validate();
        assert_eq!(r.status, Status::Pass, "{:?}", r.offenders);
        assert_eq!(a.survival_report().unwrap().status, Status::Pass);
    }

    #[test]
    fn zeroed_value_reported_at_location() {
        let k = DensityKernel::independent(binomial(2), TauGrid::exponential(3, 1.0).unwrap()).unwrap();
        let bad = k.with_value(2, 1, 0, 0.0);
        let r = bad.validate();
        assert_eq!(r.status, Status::Fail);
        assert!(r
            .offenders
            .iter()
            .any(|o| o.location == "positivity: step 2, atom 1, index 0"));
    }

    #[test]
    fn frozen_kernel_freezes_after_last_observation() {
        let src = DensityKernel::factor_model(
            binomial(4),
            TauGrid::exponential(6, 1.0).unwrap(),
            |u| 0.9 * (-0.5 * u).exp(),
        )
        .unwrap();
        let f = DensityKernel::frozen(&src).unwrap();
        assert_eq!(f.validate().status, Status::Pass);
        let kappa = f.freeze_steps();
        for i in 0..f.m() {
            for k in kappa[i]..=f.steps() {
                for a in 0..f.n_atoms() {
                    assert!((f.p(k, a, i) - f.p(kappa[i], a, i)).abs() < 1e-13);
                }
            }
        }
        let ind = DensityKernel::independent(binomial(3), TauGrid::exponential(4, 1.0).unwrap()).unwrap();
        let fi = DensityKernel::frozen(&ind).unwrap();
        assert!(fi.values().iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn json_round_trip() {
        let k = DensityKernel::randomized(random_space(2, 1), TauGrid::exponential(3, 1.0).unwrap(), 5)
            .unwrap();
        let text = k.to_json().unwrap();
        let back = DensityKernel::from_json(&text).unwrap();
        assert_eq!(back.values(), k.values());
        assert_eq!(back.to_json().unwrap(), text);
    }
}
