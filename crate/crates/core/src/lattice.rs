//! Recombining binomial version of the factor model, for step counts whose
//! path trees are too large to enumerate.
//!
//! Every quantity of the factor model depends on a path only through its
//! node `(k, j)`, `j` the number of up moves, so expectations over cells of
//! the path tree reduce to sums over nodes weighted by node probabilities.

use crate::density_kernel::TauGrid;
use crate::enlargement::JointMeasure;
use crate::error::{LabError, Result};
use crate::theorem_suite::prp::Representation;
use crate::theorem_suite::weighted_fit;

#[derive(Debug, Clone)]
pub struct FactorLattice {
    steps: usize,
    times: Vec<f64>,
    grid: TauGrid,
    /// `p_k(j, u_i)` at `node(k, j) * m + i`.
    p: Vec<f64>,
    /// Probability of an up move out of each node (last layer unused).
    up: Vec<f64>,
    /// Node probabilities under the kernel's measure.
    prob: Vec<f64>,
}

#[inline]
fn node(k: usize, j: usize) -> usize {
    k * (k + 1) / 2 + j
}

impl FactorLattice {
    /// Fair binomial walk over `steps` equal steps on `[0, horizon]`,
    /// loadings `sigma(u_i)`, reweighted by the terminal normalizer.
    pub fn new(steps: usize, horizon: f64, grid: TauGrid, sigma: impl Fn(f64) -> f64) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) {
            return Err(LabError::InvalidModel("need at least one step and a positive horizon".into()));
        }
        let dt = horizon / steps as f64;
        let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        grid.check_no_ties(&times)?;
        let m = grid.len();
        let root = dt.sqrt();
        let sig: Vec<f64> = grid.u_values().iter().map(|u| sigma(*u)).collect();
        if let Some(i) = sig.iter().position(|s| !(1.0 - s.abs() * root > 0.0)) {
            return Err(LabError::Positivity {
                step: 1,
                atom: 0,
                index: i,
                value: 1.0 - sig[i].abs() * root,
            });
        }
        let n_nodes = node(steps + 1, 0);
        let mut p = vec![0.0; n_nodes * m];
        let mut norm = vec![0.0; n_nodes];
        for k in 0..=steps {
            for j in 0..=k {
                let base = node(k, j) * m;
                for (i, s) in sig.iter().enumerate() {
                    p[base + i] = (1.0 + s * root).powi(j as i32) * (1.0 - s * root).powi((k - j) as i32);
                }
                let n: f64 = (0..m).map(|i| grid.nu(i) * p[base + i]).sum();
                p[base..base + m].iter_mut().for_each(|v| *v /= n);
                norm[node(k, j)] = n;
            }
        }
        let mut up = vec![0.0; n_nodes];
        let mut prob = vec![0.0; n_nodes];
        prob[0] = 1.0;
        for k in 0..steps {
            for j in 0..=k {
                let nd = node(k, j);
                let pu = 0.5 * norm[node(k + 1, j + 1)] / norm[nd];
                up[nd] = pu;
                prob[node(k + 1, j + 1)] += prob[nd] * pu;
                prob[node(k + 1, j)] += prob[nd] * (1.0 - pu);
            }
        }
        Ok(Self {
            steps,
            times,
            grid,
            p,
            up,
            prob,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.times[1]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn grid(&self) -> &TauGrid {
        &self.grid
    }

    #[inline]
    pub fn p(&self, k: usize, j: usize, i: usize) -> f64 {
        self.p[node(k, j) * self.grid.len() + i]
    }

    pub fn up_prob(&self, k: usize, j: usize) -> f64 {
        self.up[node(k, j)]
    }

    pub fn node_prob(&self, k: usize, j: usize) -> f64 {
        self.prob[node(k, j)]
    }

    /// Value of the scaled walk `sqrt(dt) * (2j - k)`.
    pub fn walk(&self, k: usize, j: usize) -> f64 {
        self.dt().sqrt() * (2.0 * j as f64 - k as f64)
    }

    /// Increments of the base martingale out of `(k, j)`, `(up, down)`.
    pub fn dx(&self, k: usize, j: usize) -> (f64, f64) {
        let pu = self.up_prob(k, j);
        let r = self.dt().sqrt();
        (2.0 * (1.0 - pu) * r, -2.0 * pu * r)
    }

    /// `G_k(j) = sum_{u_i > t_k} nu_i p_k(j, u_i)`.
    pub fn survival(&self, k: usize, j: usize) -> f64 {
        self.grid
            .band(self.times[k], f64::INFINITY)
            .map(|i| self.grid.nu(i) * self.p(k, j, i))
            .sum()
    }

    /// `E[dx dp(u_i) | node]` for the step out of `(k, j)`.
    pub fn density_bracket(&self, k: usize, j: usize, i: usize) -> f64 {
        let pu = self.up_prob(k, j);
        let (du, dd) = self.dx(k, j);
        let p0 = self.p(k, j, i);
        pu * du * (self.p(k + 1, j + 1, i) - p0) + (1.0 - pu) * dd * (self.p(k + 1, j, i) - p0)
    }

    fn band(&self, k: usize) -> std::ops::Range<usize> {
        self.grid.band(self.times[k - 1], self.times[k])
    }

    /// `sum_k max_j |sum_{band_k} nu_i d<x, p(u_i)>_k / G_{k-1}|` over steps
    /// whose band is not empty: the defect of the progressive decomposition
    /// on cells alive before the step.
    pub fn progressive_band_defect(&self) -> f64 {
        (1..=self.steps)
            .filter(|&k| !self.band(k).is_empty())
            .map(|k| {
                (0..k)
                    .map(|j| {
                        let s: f64 = self
                            .band(k)
                            .map(|i| self.grid.nu(i) * self.density_bracket(k - 1, j, i))
                            .sum();
                        (s / self.survival(k - 1, j)).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .sum()
    }

    /// `sum_k max_j |sum_{band_k} nu_i d<x, p(u_i)>_k|`: the gap between the
    /// bracket with the survival martingale and its left-endpoint formula.
    pub fn bracket_left_residual(&self) -> f64 {
        (1..=self.steps)
            .map(|k| {
                (0..k)
                    .map(|j| {
                        self.band(k)
                            .map(|i| self.grid.nu(i) * self.density_bracket(k - 1, j, i))
                            .sum::<f64>()
                            .abs()
                    })
                    .fold(0.0, f64::max)
            })
            .sum()
    }

    /// Per node at `k - 1`: `|exact - intensity form|` compensator increment
    /// on the alive cell, and that cell's conditional mass `D_{k-1}(j)`.
    fn intensity_terms(&self, which: JointMeasure, k: usize) -> Vec<(f64, f64)> {
        let grid = &self.grid;
        let band_mass: f64 = self.band(k).map(|i| grid.nu(i)).sum();
        let below = grid.at_or_below(self.times[k - 1]);
        let g_star = grid.tail_mass(self.times[k - 1]);
        (0..k)
            .map(|j| match which {
                JointMeasure::Original => {
                    let g = self.survival(k - 1, j);
                    let e: f64 = self.band(k).map(|i| grid.nu(i) * self.p(k - 1, j, i)).sum();
                    ((e / g - self.p(k - 1, j, below) / g * band_mass).abs(), g)
                }
                JointMeasure::Independent => {
                    let lambda_star = 1.0 / g_star;
                    ((band_mass / g_star - lambda_star * band_mass).abs(), g_star)
                }
            })
            .collect()
    }

    /// `sum_k max_j |exact - intensity form|` for the compensator increments
    /// of the default indicator under the chosen law.
    pub fn intensity_gap(&self, which: JointMeasure) -> f64 {
        (1..=self.steps)
            .map(|k| self.intensity_terms(which, k).iter().fold(0.0f64, |m, t| m.max(t.0)))
            .sum()
    }

    /// `sum_k E[|exact - intensity form| 1_{tau > t_{k-1}}]`, the same gap in mean.
    pub fn intensity_gap_mean(&self, which: JointMeasure) -> f64 {
        (1..=self.steps)
            .map(|k| {
                self.intensity_terms(which, k)
                    .iter()
                    .enumerate()
                    .map(|(j, (gap, alive))| self.node_prob(k - 1, j) * alive * gap)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Density of the chosen law against the independent one.
    fn d(&self, which: JointMeasure, k: usize, j: usize, i: usize) -> f64 {
        match which {
            JointMeasure::Original => self.p(k, j, i),
            JointMeasure::Independent => 1.0,
        }
    }

    /// `D_k(j) = sum_{u_i > t_k} nu_i d_k(j, u_i)`.
    fn tail(&self, which: JointMeasure, k: usize, j: usize) -> f64 {
        self.grid
            .band(self.times[k], f64::INFINITY)
            .map(|i| self.grid.nu(i) * self.d(which, k, j, i))
            .sum()
    }

    /// Per-cell least-squares representation of `X = E[f(W_N, tau) | G]` on
    /// the progressive enlargement against the compensated base martingale
    /// and the compensated default indicator.
    pub fn joint_representation(&self, which: JointMeasure, f: impl Fn(f64, f64) -> f64) -> Representation {
        let (n, m) = (self.steps, self.grid.len());
        let grid = &self.grid;
        // v[k][j * m + i] = E[f(W_N, u_i) d_N(u_i) | node (k, j)].
        let mut v: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
        v[n] = (0..=n)
            .flat_map(|j| (0..m).map(move |i| (j, i)))
            .map(|(j, i)| f(self.walk(n, j), grid.u(i)) * self.d(which, n, j, i))
            .collect();
        for k in (0..n).rev() {
            let next = &v[k + 1];
            v[k] = (0..=k)
                .flat_map(|j| (0..m).map(move |i| (j, i)))
                .map(|(j, i)| {
                    let pu = self.up_prob(k, j);
                    pu * next[(j + 1) * m + i] + (1.0 - pu) * next[j * m + i]
                })
                .collect();
        }
        let dead_value = |k: usize, j: usize, i: usize| v[k][j * m + i] / self.d(which, k, j, i);
        let alive_value = |k: usize, j: usize| {
            grid.band(self.times[k], f64::INFINITY)
                .map(|i| grid.nu(i) * v[k][j * m + i])
                .sum::<f64>()
                / self.tail(which, k, j)
        };

        let mut out = Representation::default();
        let mut fit_cell = |mass: f64, rows: Vec<(f64, f64, bool, f64)>| {
            // rows: (probability, dx, died in this step, dX)
            let mean_dx: f64 = rows.iter().map(|r| r.0 * r.1).sum();
            let p_die: f64 = rows.iter().filter(|r| r.2).map(|r| r.0).sum();
            let design: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| vec![r.1 - mean_dx, f64::from(u8::from(r.2)) - p_die])
                .collect();
            let y: Vec<f64> = rows.iter().map(|r| r.3).collect();
            let w: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let fit = weighted_fit(&design, &y, &w);
            out.residual_sq += mass * fit.residual_sq;
            out.total_sq += mass * fit.total_sq;
            out.max_cell_residual = out.max_cell_residual.max(fit.residual_sq.sqrt());
            out.cells += 1;
            out.rank_deficient += usize::from(fit.rank_deficient);
        };

        for k in 1..=n {
            for j in 0..k {
                let pn = self.node_prob(k - 1, j);
                let pu = self.up_prob(k - 1, j);
                let (du, dd) = self.dx(k - 1, j);
                let moves = [(pu, du, j + 1), (1.0 - pu, dd, j)];
                // Alive before the step.
                let d_prev = self.tail(which, k - 1, j);
                let x_prev = alive_value(k - 1, j);
                let mut rows = Vec::new();
                for &(ps, dx, c) in &moves {
                    rows.push((ps * self.tail(which, k, c) / d_prev, dx, false, alive_value(k, c) - x_prev));
                    for i in self.band(k) {
                        let w = ps * grid.nu(i) * self.d(which, k, c, i) / d_prev;
                        rows.push((w, dx, true, dead_value(k, c, i) - x_prev));
                    }
                }
                fit_cell(pn * d_prev, rows);
                // Already dead, one cell per grid point.
                for i in grid.band(f64::NEG_INFINITY, self.times[k - 1]) {
                    let d0 = self.d(which, k - 1, j, i);
                    let x0 = dead_value(k - 1, j, i);
                    let rows = moves
                        .iter()
                        .map(|&(ps, dx, c)| (ps * self.d(which, k, c, i) / d0, dx, false, dead_value(k, c, i) - x0))
                        .collect();
                    fit_cell(pn * grid.nu(i) * d0, rows);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(steps: usize) -> FactorLattice {
        let grid = TauGrid::truncated_exponential(steps, 2.0, 1.0).unwrap();
        FactorLattice::new(steps, 1.0, grid, |u| 0.3 * (-u).exp()).unwrap()
    }

    #[test]
    fn node_probabilities_and_normalization() {
        let l = lattice(12);
        for k in 0..=12 {
            let total: f64 = (0..=k).map(|j| l.node_prob(k, j)).sum();
            assert!((total - 1.0).abs() < 1e-13);
            for j in 0..=k {
                let s: f64 = (0..12).map(|i| l.grid().nu(i) * l.p(k, j, i)).sum();
                assert!((s - 1.0).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn densities_are_martingales() {
        let l = lattice(10);
        for k in 0..10 {
            for j in 0..=k {
                let pu = l.up_prob(k, j);
                let (du, dd) = l.dx(k, j);
                assert!((pu * du + (1.0 - pu) * dd).abs() < 1e-15);
                for i in 0..10 {
                    let e = pu * l.p(k + 1, j + 1, i) + (1.0 - pu) * l.p(k + 1, j, i);
                    assert!((e - l.p(k, j, i)).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn zero_loading_has_no_band_terms() {
        let grid = TauGrid::truncated_exponential(16, 2.0, 1.0).unwrap();
        let l = FactorLattice::new(16, 1.0, grid, |_| 0.0).unwrap();
        assert!(l.progressive_band_defect() < 1e-15);
        assert!(l.bracket_left_residual() < 1e-15);
        assert!(l.intensity_gap(JointMeasure::Independent) < 1e-15);
    }

    #[test]
    fn base_or_time_only_targets_are_exact() {
        let l = lattice(8);
        for which in [JointMeasure::Independent, JointMeasure::Original] {
            let r = l.joint_representation(which, |w, _| w.sin());
            if which == JointMeasure::Independent {
                assert!(r.max_cell_residual < 1e-12, "{r:?}");
            }
            assert!(r.total_sq > 0.0);
        }
        let r = l.joint_representation(JointMeasure::Independent, |_, u| f64::from(u8::from(u <= 0.5)));
        assert!(r.max_cell_residual < 1e-12, "{r:?}");
    }

    #[test]
    fn rejects_nonpositive_factors() {
        let grid = TauGrid::truncated_exponential(4, 2.0, 1.0).unwrap();
        assert!(matches!(
            FactorLattice::new(4, 1.0, grid, |_| 3.0),
            Err(LabError::Positivity { .. })
        ));
    }
}
