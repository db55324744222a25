//! Finite probability spaces with filtrations given as refining partitions.
//!
//! Every object here is exact linear algebra over atom weights: conditional
//! expectations are cell-weighted averages, the Doob decomposition is built
//! from one-step conditional expectations, and predictable brackets and
//! projections condition on the previous partition. Discrete time stands in
//! for continuous time: the value "at t-" of a process is its value at the
//! previous grid step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Tolerance used for the sum-to-one check of base space weights.
pub const SPACE_WEIGHT_TOL: f64 = 1e-14;
/// Tolerance used for the sum-to-one check of an arbitrary measure.
pub const MEASURE_TOL: f64 = 1e-12;
/// Relative tolerance for "constant on cells" checks.
pub const ADAPTED_TOL: f64 = 1e-11;

/// A partition of `0..n_atoms` stored as one dense cell label per atom.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<u32>,
    n_cells: usize,
}

impl Partition {
    /// Builds a partition from arbitrary labels; labels are renumbered densely
    /// in order of first appearance.
    pub fn from_labels<L: Copy + Eq + std::hash::Hash>(labels: &[L]) -> Result<Self> {
        if labels.is_empty() {
            return Err(LabError::Structure("partition over zero atoms".into()));
        }
        let mut map = std::collections::HashMap::new();
        let mut dense = Vec::with_capacity(labels.len());
        for l in labels {
            let next = map.len() as u32;
            dense.push(*map.entry(*l).or_insert(next));
        }
        Ok(Self {
            n_cells: map.len(),
            labels: dense,
        })
    }

    /// Builds a partition from labels already dense in `0..n_cells`.
    ///
    /// Fails when some label in range is unused (an empty cell).
    pub fn from_dense(labels: Vec<u32>, n_cells: usize) -> Result<Self> {
        let mut seen = vec![false; n_cells];
        for &l in &labels {
            let l = l as usize;
            if l >= n_cells {
                return Err(LabError::Structure(format!(
                    "cell label {l} out of range {n_cells}"
                )));
            }
            seen[l] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(LabError::Structure(format!("cell {empty} is empty")));
        }
        Ok(Self { labels, n_cells })
    }

    /// Builds a partition from integer keys below `key_space`, renumbering
    /// them densely in order of first appearance.
    pub fn from_keys(keys: &[usize], key_space: usize) -> Result<Self> {
        if keys.is_empty() {
            return Err(LabError::Structure("partition over zero atoms".into()));
        }
        let mut map = vec![u32::MAX; key_space];
        let mut next = 0u32;
        let mut labels = Vec::with_capacity(keys.len());
        for &key in keys {
            let slot = map.get_mut(key).ok_or_else(|| {
                LabError::Structure(format!("key {key} outside key space {key_space}"))
            })?;
            if *slot == u32::MAX {
                *slot = next;
                next += 1;
            }
            labels.push(*slot);
        }
        Ok(Self {
            labels,
            n_cells: next as usize,
        })
    }

    pub fn trivial(n_atoms: usize) -> Self {
        Self {
            labels: vec![0; n_atoms],
            n_cells: 1,
        }
    }

    pub fn discrete(n_atoms: usize) -> Self {
        Self {
            labels: (0..n_atoms as u32).collect(),
            n_cells: n_atoms,
        }
    }

    #[inline]
    pub fn cell(&self, atom: usize) -> usize {
        self.labels[atom] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_atoms(&self) -> usize {
        self.labels.len()
    }

    /// Atoms grouped by cell.
    pub fn cells(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_cells];
        for (a, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(a);
        }
        out
    }

    /// True when every cell of `self` lies inside a single cell of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        if self.n_atoms() != coarser.n_atoms() {
            return false;
        }
        let mut parent = vec![u32::MAX; self.n_cells];
        for (a, &l) in self.labels.iter().enumerate() {
            let c = coarser.labels[a];
            let slot = &mut parent[l as usize];
            if *slot == u32::MAX {
                *slot = c;
            } else if *slot != c {
                return false;
            }
        }
        true
    }

    /// For a partition refining `coarser`, the coarse cell containing each fine cell.
    pub fn parent_cells(&self, coarser: &Partition) -> Result<Vec<usize>> {
        if !self.refines(coarser) {
            return Err(LabError::Structure("partition does not refine its parent".into()));
        }
        let mut parent = vec![0usize; self.n_cells];
        for (a, &l) in self.labels.iter().enumerate() {
            parent[l as usize] = coarser.cell(a);
        }
        Ok(parent)
    }
}

/// A filtration: `steps + 1` partitions, each refining its predecessor, the
/// first one trivial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filtration {
    partitions: Vec<Partition>,
}

impl Filtration {
    pub fn new(partitions: Vec<Partition>) -> Result<Self> {
        let first = partitions
            .first()
            .ok_or_else(|| LabError::Structure("filtration needs at least one partition".into()))?;
        if first.n_cells() != 1 {
            return Err(LabError::Structure("partition 0 must be trivial".into()));
        }
        let n = first.n_atoms();
        for (k, w) in partitions.windows(2).enumerate() {
            if w[1].n_atoms() != n {
                return Err(LabError::Structure(format!(
                    "partition {} covers {} atoms, expected {n}",
                    k + 1,
                    w[1].n_atoms()
                )));
            }
            if !w[1].refines(&w[0]) {
                return Err(LabError::Structure(format!(
                    "partition {} does not refine partition {k}",
                    k + 1
                )));
            }
        }
        Ok(Self { partitions })
    }

    /// Builds a filtration without the trivial-first check; used for
    /// filtrations on product spaces whose step-0 partition is not trivial
    /// (for instance `F_0 v sigma(tau)`).
    pub fn new_unrooted(partitions: Vec<Partition>) -> Result<Self> {
        if partitions.is_empty() {
            return Err(LabError::Structure("filtration needs at least one partition".into()));
        }
        for (k, w) in partitions.windows(2).enumerate() {
            if !w[1].refines(&w[0]) {
                return Err(LabError::Structure(format!(
                    "partition {} does not refine partition {k}",
                    k + 1
                )));
            }
        }
        Ok(Self { partitions })
    }

    pub fn steps(&self) -> usize {
        self.partitions.len() - 1
    }

    pub fn n_atoms(&self) -> usize {
        self.partitions[0].n_atoms()
    }

    pub fn partition(&self, k: usize) -> &Partition {
        &self.partitions[k]
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    /// The partition that conditions the step-`k` value of a predictable
    /// process: `k - 1`, with step 0 conditioned on itself.
    pub fn predictable_partition(&self, k: usize) -> &Partition {
        &self.partitions[k.saturating_sub(1)]
    }

    /// True when `self` is coarser than or equal to `finer` at every step.
    pub fn is_coarser_than(&self, finer: &Filtration) -> bool {
        self.partitions.len() == finer.partitions.len()
            && self
                .partitions
                .iter()
                .zip(&finer.partitions)
                .all(|(c, f)| f.refines(c))
    }

    pub fn check_adapted(&self, x: &AdaptedProcess) -> Result<()> {
        self.check_shape(x)?;
        for k in 0..=self.steps() {
            check_cell_constant(x.at(k), &self.partitions[k], k)?;
        }
        Ok(())
    }

    pub fn check_predictable(&self, x: &AdaptedProcess) -> Result<()> {
        self.check_shape(x)?;
        for k in 0..=self.steps() {
            check_cell_constant(x.at(k), self.predictable_partition(k), k)?;
        }
        Ok(())
    }

    fn check_shape(&self, x: &AdaptedProcess) -> Result<()> {
        if x.steps() != self.steps() || x.n_atoms() != self.n_atoms() {
            return Err(LabError::Structure(format!(
                "process shape {}x{} does not match filtration {}x{}",
                x.steps() + 1,
                x.n_atoms(),
                self.steps() + 1,
                self.n_atoms()
            )));
        }
        Ok(())
    }
}

fn check_cell_constant(values: &[f64], pi: &Partition, step: usize) -> Result<()> {
    let mut first = vec![f64::NAN; pi.n_cells()];
    for (a, &v) in values.iter().enumerate() {
        let c = pi.cell(a);
        if first[c].is_nan() {
            first[c] = v;
            continue;
        }
        let dev = (v - first[c]).abs();
        if dev > ADAPTED_TOL * v.abs().max(first[c].abs()).max(1.0) {
            return Err(LabError::NotAdapted {
                step,
                atom: a,
                deviation: dev,
            });
        }
    }
    Ok(())
}

/// A strictly positive probability on the atoms of some space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    weights: Vec<f64>,
}

/// Neumaier-compensated running sum, so totals over large product spaces
/// stay within the weight tolerances.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    sum: f64,
    carry: f64,
}

impl Accumulator {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        self.carry += if self.sum.abs() >= v.abs() {
            (self.sum - t) + v
        } else {
            (v - t) + self.sum
        };
        self.sum = t;
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut acc = Accumulator::default();
    values.iter().for_each(|v| acc.add(*v));
    acc.value()
}

impl Measure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(weights, MEASURE_TOL)
    }

    pub fn with_tolerance(weights: Vec<f64>, tol: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(LabError::InvalidMeasure("no atoms".into()));
        }
        if let Some((a, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w > 0.0) || !w.is_finite())
        {
            return Err(LabError::InvalidMeasure(format!(
                "weight {w:e} of atom {a} is not strictly positive"
            )));
        }
        let total = compensated_sum(&weights);
        if (total - 1.0).abs() > tol {
            return Err(LabError::InvalidMeasure(format!(
                "weights sum to {total}, off by {:e}",
                total - 1.0
            )));
        }
        Ok(Self { weights })
    }

    /// Normalizes positive masses to a probability.
    pub fn normalized(masses: Vec<f64>) -> Result<Self> {
        let total = compensated_sum(&masses);
        if !(total > 0.0) {
            return Err(LabError::InvalidMeasure("total mass is not positive".into()));
        }
        Self::new(masses.into_iter().map(|m| m / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    #[inline]
    pub fn weight(&self, atom: usize) -> f64 {
        self.weights[atom]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn expectation(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum()
    }

    /// Mass of each cell of `pi`.
    pub fn cell_masses(&self, pi: &Partition) -> Vec<f64> {
        let mut m = vec![0.0; pi.n_cells()];
        for (a, &w) in self.weights.iter().enumerate() {
            m[pi.cell(a)] += w;
        }
        m
    }

    /// The measure with density `density` (normalized to a probability).
    pub fn reweighted(&self, density: &[f64]) -> Result<Self> {
        Self::normalized(
            self.weights
                .iter()
                .zip(density)
                .map(|(w, d)| w * d)
                .collect(),
        )
    }
}

/// A real-valued process on a finite space: `values[k][atom]` for `k = 0..=steps`.
///
/// Adaptedness is a property checked against a particular filtration
/// ([`Filtration::check_adapted`]), so the same values can be tested
/// against several filtrations on one space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedProcess {
    values: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let n = values
            .first()
            .map(Vec::len)
            .ok_or_else(|| LabError::Structure("process with no steps".into()))?;
        if values.iter().any(|v| v.len() != n) {
            return Err(LabError::Structure("ragged process values".into()));
        }
        Ok(Self { values })
    }

    pub fn constant(steps: usize, n_atoms: usize, c: f64) -> Self {
        Self {
            values: vec![vec![c; n_atoms]; steps + 1],
        }
    }

    pub fn from_fn(steps: usize, n_atoms: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self {
            values: (0..=steps)
                .map(|k| (0..n_atoms).map(|a| f(k, a)).collect())
                .collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn n_atoms(&self) -> usize {
        self.values[0].len()
    }

    #[inline]
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    #[inline]
    pub fn get(&self, k: usize, atom: usize) -> f64 {
        self.values[k][atom]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Vec<f64>> {
        self.values
    }

    /// `X_k - X_{k-1}` at a given step `k >= 1`.
    pub fn increment(&self, k: usize) -> Vec<f64> {
        self.values[k]
            .iter()
            .zip(&self.values[k - 1])
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect())
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| f(*x)).collect())
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a * b)
    }

    /// Largest absolute value over all steps and atoms.
    pub fn sup_norm(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Running sum `S_k = sum_{j<=k} inc[j]`, with `inc[0]` ignored (`S_0 = 0`).
    pub fn cumulative(increments: Vec<Vec<f64>>) -> Self {
        let n = increments[0].len();
        let mut values = Vec::with_capacity(increments.len());
        let mut acc = vec![0.0; n];
        values.push(acc.clone());
        for inc in increments.iter().skip(1) {
            for (s, d) in acc.iter_mut().zip(inc) {
                *s += d;
            }
            values.push(acc.clone());
        }
        Self { values }
    }
}

/// A finite probability space `(Omega, P)` carrying its own filtration and
/// an increasing time grid `0 = t_0 < ... < t_N = T`.
///
/// Spaces built by the tree constructors have atoms equal to root-to-leaf
/// paths; `branch(k, a)` records which child the path of atom `a` enters at step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSpace {
    measure: Measure,
    times: Vec<f64>,
    filtration: Filtration,
    branches: Vec<Vec<u8>>,
}

impl FiniteSpace {
    pub fn new(measure: Measure, times: Vec<f64>, filtration: Filtration) -> Result<Self> {
        let n = measure.len();
        if filtration.n_atoms() != n {
            return Err(LabError::Structure("filtration and measure sizes differ".into()));
        }
        if times.len() != filtration.steps() + 1 {
            return Err(LabError::Structure("time grid length must be steps + 1".into()));
        }
        if times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LabError::Structure(
                "time grid must start at 0 and increase strictly".into(),
            ));
        }
        let total: f64 = measure.weights().iter().sum();
        if (total - 1.0).abs() > SPACE_WEIGHT_TOL {
            return Err(LabError::InvalidMeasure(format!(
                "space weights sum to {total}"
            )));
        }
        // Branch labels: position of each atom's step-k cell among its siblings.
        let mut branches = vec![vec![0u8; n]];
        for k in 1..=filtration.steps() {
            let fine = filtration.partition(k);
            let parent = fine.parent_cells(filtration.partition(k - 1))?;
            let mut rank = vec![0u8; fine.n_cells()];
            let mut count = vec![0u8; filtration.partition(k - 1).n_cells()];
            let mut assigned = vec![false; fine.n_cells()];
            for a in 0..n {
                let c = fine.cell(a);
                if !assigned[c] {
                    assigned[c] = true;
                    rank[c] = count[parent[c]];
                    count[parent[c]] += 1;
                }
            }
            branches.push((0..n).map(|a| rank[fine.cell(a)]).collect());
        }
        Ok(Self {
            measure,
            times,
            filtration,
            branches,
        })
    }

    /// Full (non-recombining in atoms) binomial path tree with up-probability `p_up`.
    /// Child 0 of every node is the up move.
    pub fn binomial_tree(steps: usize, horizon: f64, p_up: f64) -> Result<Self> {
        if !(p_up > 0.0 && p_up < 1.0) {
            return Err(LabError::InvalidMeasure(format!("up probability {p_up}")));
        }
        Self::from_conditionals(steps, horizon, |_, _| vec![p_up, 1.0 - p_up])
    }

    /// Path tree whose nodes have `branching` children with random
    /// conditional probabilities bounded away from zero.
    pub fn random_tree<R: Rng + ?Sized>(
        steps: usize,
        horizon: f64,
        branching: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if branching < 1 {
            return Err(LabError::Structure("branching must be at least 1".into()));
        }
        Self::from_conditionals(steps, horizon, |_, _| {
            let raw: Vec<f64> = (0..branching).map(|_| rng.random_range(0.25..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|r| r / s).collect()
        })
    }

    /// Builds a path tree level by level; `conditionals(k, node)` gives the
    /// child probabilities of node `node` at depth `k`.
    pub fn from_conditionals(
        steps: usize,
        horizon: f64,
        mut conditionals: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(LabError::Structure("horizon must be positive".into()));
        }
        // Each path: (node id per level, weight).
        let mut paths: Vec<(Vec<u32>, f64)> = vec![(vec![0], 1.0)];
        let mut level_nodes = 1usize;
        for k in 0..steps {
            let mut next = Vec::new();
            let mut node_counter = 0u32;
            // Paths are grouped by their current node in increasing order.
            let mut node_children: Vec<Vec<f64>> = Vec::with_capacity(level_nodes);
            for node in 0..level_nodes {
                let c = conditionals(k, node);
                if c.is_empty() || c.iter().any(|p| !(*p > 0.0)) {
                    return Err(LabError::InvalidMeasure(format!(
                        "conditional probabilities at depth {k}, node {node}"
                    )));
                }
                node_children.push(c);
            }
            let mut first_child = vec![0u32; level_nodes];
            for (node, c) in node_children.iter().enumerate() {
                first_child[node] = node_counter;
                node_counter += c.len() as u32;
            }
            for (ids, w) in &paths {
                let node = *ids.last().expect("non-empty path") as usize;
                for (b, p) in node_children[node].iter().enumerate() {
                    let mut ids2 = ids.clone();
                    ids2.push(first_child[node] + b as u32);
                    next.push((ids2, w * p));
                }
            }
            next.sort_by(|a, b| a.0.cmp(&b.0));
            paths = next;
            level_nodes = node_counter as usize;
        }
        let total: f64 = paths.iter().map(|p| p.1).sum();
        let weights: Vec<f64> = paths.iter().map(|p| p.1 / total).collect();
        let partitions = (0..=steps)
            .map(|k| {
                let labels: Vec<u32> = paths.iter().map(|p| p.0[k]).collect();
                Partition::from_labels(&labels)
            })
            .collect::<Result<Vec<_>>>()?;
        let times = (0..=steps)
            .map(|k| horizon * k as f64 / steps.max(1) as f64)
            .collect();
        let times = if steps == 0 { vec![0.0] } else { times };
        Self::new(
            Measure::with_tolerance(weights, SPACE_WEIGHT_TOL)?,
            times,
            Filtration::new(partitions)?,
        )
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    pub fn filtration(&self) -> &Filtration {
        &self.filtration
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }

    pub fn steps(&self) -> usize {
        self.filtration.steps()
    }

    pub fn n_atoms(&self) -> usize {
        self.measure.len()
    }

    /// Index of the child entered at step `k` by the path of `atom` (0 = up on binomial trees).
    pub fn branch(&self, k: usize, atom: usize) -> u8 {
        self.branches[k][atom]
    }

    /// Largest number of children of any node.
    pub fn max_branching(&self) -> usize {
        (1..=self.steps())
            .flat_map(|k| self.branches[k].iter().copied())
            .max()
            .map_or(1, |b| b as usize + 1)
    }

    /// The `+1/-1` walk driven by up/down moves of a binary tree.
    pub fn walk(&self) -> AdaptedProcess {
        let n = self.n_atoms();
        let mut values = vec![vec![0.0; n]];
        for k in 1..=self.steps() {
            let prev = values[k - 1].clone();
            values.push(
                (0..n)
                    .map(|a| prev[a] + if self.branch(k, a) == 0 { 1.0 } else { -1.0 })
                    .collect(),
            );
        }
        AdaptedProcess { values }
    }
}

/// Atom-indexed conditional probability under `mu` of the move made at step
/// `k >= 1`, i.e. `mu(cell_k(a)) / mu(cell_{k-1}(a))`.
pub fn transition_probs(mu: &Measure, filt: &Filtration, k: usize) -> Vec<f64> {
    let fine = filt.partition(k);
    let coarse = filt.partition(k - 1);
    let mf = mu.cell_masses(fine);
    let mc = mu.cell_masses(coarse);
    (0..mu.len())
        .map(|a| mf[fine.cell(a)] / mc[coarse.cell(a)])
        .collect()
}

/// Conditional expectation of atom-indexed values onto the cells of `pi`,
/// returned as atom-indexed (cell-constant) values.
pub fn cond_exp(x: &[f64], mu: &Measure, pi: &Partition) -> Result<Vec<f64>> {
    let cells = cond_exp_cells(x, mu, pi)?;
    Ok((0..x.len()).map(|a| cells[pi.cell(a)]).collect())
}

/// Conditional expectation returned as one value per cell of `pi`.
pub fn cond_exp_cells(x: &[f64], mu: &Measure, pi: &Partition) -> Result<Vec<f64>> {
    if x.len() != mu.len() || pi.n_atoms() != mu.len() {
        return Err(LabError::Structure(format!(
            "size mismatch: values {}, measure {}, partition {}",
            x.len(),
            mu.len(),
            pi.n_atoms()
        )));
    }
    let mut num = vec![Accumulator::default(); pi.n_cells()];
    let mut den = vec![Accumulator::default(); pi.n_cells()];
    for (a, (&v, &w)) in x.iter().zip(mu.weights()).enumerate() {
        if !(w > 0.0) {
            return Err(LabError::InvalidMeasure(format!("weight {w} at atom {a}")));
        }
        let c = pi.cell(a);
        num[c].add(w * v);
        den[c].add(w);
    }
    if let Some(c) = den.iter().position(|d| d.value() == 0.0) {
        return Err(LabError::Structure(format!("cell {c} is empty")));
    }
    Ok(num.iter().zip(&den).map(|(n, d)| n.value() / d.value()).collect())
}

/// Outcome of a martingale test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub holds: bool,
    pub max_residual: f64,
    /// `(step k, atom)` at which `|E[X_k | pi_{k-1}] - X_{k-1}|` is largest.
    pub worst: Option<(usize, usize)>,
}

/// One-step conditional drifts `E[X_k - X_{k-1} | pi_{k-1}]`, atom-indexed,
/// for `k = 1..=steps` (index 0 is all zeros).
pub fn martingale_defects(
    x: &AdaptedProcess,
    filt: &Filtration,
    mu: &Measure,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![vec![0.0; x.n_atoms()]];
    for k in 1..=filt.steps() {
        out.push(cond_exp(&x.increment(k), mu, filt.partition(k - 1))?);
    }
    Ok(out)
}

pub fn is_martingale(
    x: &AdaptedProcess,
    filt: &Filtration,
    mu: &Measure,
    tol: f64,
) -> Result<MartingaleCheck> {
    filt.check_adapted(x)?;
    let defects = martingale_defects(x, filt, mu)?;
    let mut max_residual = 0.0;
    let mut worst = None;
    for (k, d) in defects.iter().enumerate().skip(1) {
        for (a, v) in d.iter().enumerate() {
            if v.abs() > max_residual {
                max_residual = v.abs();
                worst = Some((k, a));
            }
        }
    }
    Ok(MartingaleCheck {
        holds: max_residual <= tol,
        max_residual,
        worst,
    })
}

/// `X = X_0 + martingale + compensator` with a predictable compensator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoobDecomposition {
    pub martingale: AdaptedProcess,
    pub compensator: AdaptedProcess,
}

pub fn doob_decomposition(
    x: &AdaptedProcess,
    filt: &Filtration,
    mu: &Measure,
) -> Result<DoobDecomposition> {
    filt.check_adapted(x)?;
    let compensator = AdaptedProcess::cumulative(martingale_defects(x, filt, mu)?);
    let x0 = x.at(0).to_vec();
    let martingale = AdaptedProcess::from_fn(x.steps(), x.n_atoms(), |k, a| {
        x.get(k, a) - x0[a] - compensator.get(k, a)
    });
    Ok(DoobDecomposition {
        martingale,
        compensator,
    })
}

/// `<X,Y>_k = sum_{j<=k} E[dX_j dY_j | pi_{j-1}]`.
pub fn predictable_bracket(
    x: &AdaptedProcess,
    y: &AdaptedProcess,
    filt: &Filtration,
    mu: &Measure,
) -> Result<AdaptedProcess> {
    filt.check_adapted(x)?;
    filt.check_adapted(y)?;
    let mut inc = vec![vec![0.0; x.n_atoms()]];
    for k in 1..=filt.steps() {
        let prod: Vec<f64> = x
            .increment(k)
            .iter()
            .zip(y.increment(k))
            .map(|(a, b)| a * b)
            .collect();
        inc.push(cond_exp(&prod, mu, filt.partition(k - 1))?);
    }
    Ok(AdaptedProcess::cumulative(inc))
}

/// Step-`k` value `E[Y_k | pi_{k-1}]` (step 0 conditions on `pi_0`).
pub fn predictable_projection(
    y: &AdaptedProcess,
    filt: &Filtration,
    mu: &Measure,
) -> Result<AdaptedProcess> {
    let values = (0..=filt.steps())
        .map(|k| cond_exp(y.at(k), mu, filt.predictable_partition(k)))
        .collect::<Result<Vec<_>>>()?;
    AdaptedProcess::new(values)
}

/// Doob martingale `E[Z | pi_k]` of a terminal variable.
pub fn doob_martingale(z: &[f64], filt: &Filtration, mu: &Measure) -> Result<AdaptedProcess> {
    let values = (0..=filt.steps())
        .map(|k| cond_exp(z, mu, filt.partition(k)))
        .collect::<Result<Vec<_>>>()?;
    AdaptedProcess::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compensated_sum_is_accurate() {
        let v = vec![0.1; 1_000_000];
        assert!((compensated_sum(&v) - 100_000.0).abs() < 1e-9);
        assert_eq!(compensated_sum(&[1.0, 1e100, 1.0, -1e100]), 2.0);
    }

    fn three_atom() -> (Measure, Partition) {
        (
            Measure::new(vec![0.2, 0.3, 0.5]).unwrap(),
            Partition::from_labels(&[0, 0, 1]).unwrap(),
        )
    }

    // Independent brute-force oracle: sum over atoms of each cell.
    fn brute_cond_exp(x: &[f64], w: &[f64], labels: &[usize]) -> Vec<f64> {
        labels
            .iter()
            .map(|&c| {
                let mut num = 0.0;
                let mut den = 0.0;
                for b in 0..x.len() {
                    if labels[b] == c {
                        num += w[b] * x[b];
                        den += w[b];
                    }
                }
                num / den
            })
            .collect()
    }

    #[test]
    fn coin_average() {
        let mu = Measure::uniform(2);
        let e = cond_exp(&[4.0, 2.0], &mu, &Partition::trivial(2)).unwrap();
        assert_eq!(e, vec![3.0, 3.0]);
    }

    #[test]
    fn constant_is_fixed_point() {
        let (mu, pi) = three_atom();
        let e = cond_exp(&[1.7; 3], &mu, &pi).unwrap();
        assert!(e.iter().all(|v| (v - 1.7).abs() < 1e-15));
    }

    #[test]
    fn three_atom_example_matches_oracle() {
        let (mu, pi) = three_atom();
        let x = [1.0, 2.0, 3.0];
        let oracle = brute_cond_exp(&x, &[0.2, 0.3, 0.5], &[0, 0, 1]);
        assert!((oracle[0] - 1.6).abs() < 1e-15);
        assert!((oracle[2] - 3.0).abs() < 1e-15);
        let e = cond_exp(&x, &mu, &pi).unwrap();
        for (a, b) in e.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_positive_weight_rejected() {
        assert!(matches!(
            Measure::new(vec![0.5, 0.5, 0.0]),
            Err(LabError::InvalidMeasure(_))
        ));
        assert!(Measure::new(vec![0.6, 0.6]).is_err());
    }

    #[test]
    fn empty_cell_rejected() {
        assert!(matches!(
            Partition::from_dense(vec![0, 0, 2], 3),
            Err(LabError::Structure(_))
        ));
    }

    #[test]
    fn binomial_tree_structure() {
        let s = FiniteSpace::binomial_tree(3, 1.0, 0.5).unwrap();
        assert_eq!(s.n_atoms(), 8);
        assert_eq!(s.filtration().partition(3).n_cells(), 8);
        assert_eq!(s.filtration().partition(1).n_cells(), 2);
        assert_eq!(s.max_branching(), 2);
        let w = s.walk();
        assert_eq!(w.get(3, 0), 3.0);
        assert_eq!(w.get(3, 7), -3.0);
    }

    #[test]
    fn tower_martingale_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = FiniteSpace::random_tree(4, 1.0, 2, &mut rng).unwrap();
        let z: Vec<f64> = (0..s.n_atoms()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = doob_martingale(&z, s.filtration(), s.measure()).unwrap();
        let chk = is_martingale(&x, s.filtration(), s.measure(), 1e-14).unwrap();
        assert!(chk.holds, "residual {}", chk.max_residual);
    }

    #[test]
    fn deterministic_drift_is_not_martingale() {
        let s = FiniteSpace::binomial_tree(3, 1.0, 0.5).unwrap();
        let x = AdaptedProcess::from_fn(3, s.n_atoms(), |k, _| k as f64);
        let chk = is_martingale(&x, s.filtration(), s.measure(), 1e-12).unwrap();
        assert!(!chk.holds);
        assert!((chk.max_residual - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_adapted_rejected() {
        let s = FiniteSpace::binomial_tree(2, 1.0, 0.5).unwrap();
        let x = AdaptedProcess::from_fn(2, 4, |k, a| if k == 1 { a as f64 } else { 0.0 });
        assert!(matches!(
            is_martingale(&x, s.filtration(), s.measure(), 1e-12),
            Err(LabError::NotAdapted { step: 1, .. })
        ));
    }

    #[test]
    fn doob_of_martingale_and_drift() {
        let s = FiniteSpace::binomial_tree(3, 1.0, 0.4).unwrap();
        let walk = s.walk();
        // Under p_up = 0.4 the walk drifts by -0.2 per step.
        let d = doob_decomposition(&walk, s.filtration(), s.measure()).unwrap();
        for k in 0..=3 {
            for a in 0..8 {
                assert!((d.compensator.get(k, a) + 0.2 * k as f64).abs() < 1e-14);
            }
        }
        let drift = AdaptedProcess::from_fn(3, 8, |k, _| 0.5 * k as f64);
        let d = doob_decomposition(&drift, s.filtration(), s.measure()).unwrap();
        assert!(d.martingale.sup_norm() < 1e-15);
        let m = doob_decomposition(&d.martingale, s.filtration(), s.measure()).unwrap();
        assert!(m.compensator.sup_norm() < 1e-15);
    }

    #[test]
    fn fair_walk_bracket_is_time() {
        let s = FiniteSpace::binomial_tree(4, 1.0, 0.5).unwrap();
        let w = s.walk();
        let b = predictable_bracket(&w, &w, s.filtration(), s.measure()).unwrap();
        for k in 0..=4 {
            assert!(b.at(k).iter().all(|v| (v - k as f64).abs() < 1e-14));
        }
        let c = AdaptedProcess::constant(4, s.n_atoms(), 2.0);
        let b = predictable_bracket(&w, &c, s.filtration(), s.measure()).unwrap();
        assert_eq!(b.sup_norm(), 0.0);
    }

    #[test]
    fn projection_of_predictable_and_increments() {
        let s = FiniteSpace::binomial_tree(3, 1.0, 0.5).unwrap();
        let f = s.filtration();
        let w = s.walk();
        // w_{k-1} is predictable.
        let lagged = AdaptedProcess::from_fn(3, 8, |k, a| w.get(k.saturating_sub(1), a));
        let p = predictable_projection(&lagged, f, s.measure()).unwrap();
        assert!(p.sub(&lagged).sup_norm() < 1e-15);
        // Martingale increments project to zero.
        let inc = AdaptedProcess::from_fn(3, 8, |k, a| {
            if k == 0 {
                0.0
            } else {
                w.get(k, a) - w.get(k - 1, a)
            }
        });
        let p = predictable_projection(&inc, f, s.measure()).unwrap();
        assert!(p.sup_norm() < 1e-15);
        f.check_predictable(&p).unwrap();
    }
}
