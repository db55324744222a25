//! Continuous-time Monte Carlo for the factor density model.
//!
//! Paths are drawn from a reference law under which `W` is a Brownian motion
//! and the random time is an independent exponential. Every other law is
//! reached by a weight on the path:
//!
//! * base law and the independent product: `n_T`;
//! * original joint law: `q_T(tau) = p_T(tau) n_T`.
//!
//! Here `q_t(u) = exp(s(u) W_t - s(u)^2 t / 2)` for the loading `s`, and
//! `n_t` is the integral of `q_t` against the law of the random time, taken
//! by a fixed Gauss-Legendre rule on `(0, u_max]`.

pub mod quadrature;
pub mod stats;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density_kernel::Loading;
use crate::error::{LabError, Result};
use crate::report::{SeriesRow, SuiteReport};

use quadrature::Rule;
use stats::{mean_se, wls, Estimate, FitFailure};

pub const MC_SUITES: &[&str] = &[
    "mc_weights",
    "mc_martingales",
    "mc_drift",
    "mc_survival",
    "mc_antithetic",
    "mc_prp",
];

/// Largest mass of the random time allowed beyond the quadrature range.
pub const TAIL_LIMIT: f64 = 1e-10;
/// Bound on `|z|` for martingale and drift tests.
pub const Z_LIMIT: f64 = 3.0;
/// Bound in standard errors for means and survival checks.
pub const MEAN_LIMIT: f64 = 4.0;
/// The antithetic estimate must lie within this many plain standard errors.
pub const ANTITHETIC_LIMIT: f64 = 1.0;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McModel {
    pub horizon: f64,
    pub steps: usize,
    pub loading: Loading,
    /// Rate of the exponential law of the random time.
    pub rate: f64,
    pub paths: usize,
    pub seed: u64,
    /// Equal intervals between the times at which paths are tested.
    pub test_intervals: usize,
    pub quadrature_panels: usize,
    pub quadrature_points: usize,
    /// Quadrature range as a multiple of the mean of the random time.
    pub tail_factor: f64,
    /// Nodes of the rule for integrals over `[0, t]`.
    pub head_points: usize,
    /// Values of `u` at which the density martingales are checked.
    pub probes: Vec<f64>,
    /// Value of `u` whose density drives the representation target.
    pub anchor: f64,
    /// Step strides of the representation study, coarse to fine.
    pub strides: Vec<usize>,
}

impl Default for McModel {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 250,
            loading: Loading::Exponential {
                scale: 0.3,
                decay: 1.0,
            },
            rate: 1.0,
            paths: 200_000,
            seed: 7,
            test_intervals: 2,
            quadrature_panels: 1,
            quadrature_points: 64,
            tail_factor: 24.0,
            head_points: 16,
            probes: vec![0.25, 1.0, 3.0],
            anchor: 0.5,
            strides: vec![10, 5, 2, 1],
        }
    }
}

impl McModel {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn u_max(&self) -> f64 {
        self.tail_factor / self.rate
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidModel(msg));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon {}", self.horizon));
        }
        if self.steps == 0 || self.paths < 2 {
            return bad(format!("{} steps, {} paths", self.steps, self.paths));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return bad(format!("rate {}", self.rate));
        }
        let bounded = match self.loading {
            Loading::Constant { value } => value.is_finite(),
            Loading::Exponential { scale, decay } => scale.is_finite() && decay >= 0.0 && decay.is_finite(),
        };
        if !bounded {
            return bad(format!("unbounded loading {:?}", self.loading));
        }
        if self.test_intervals == 0 || !self.steps.is_multiple_of(self.test_intervals) {
            return bad(format!("{} test intervals do not divide {} steps", self.test_intervals, self.steps));
        }
        if let Some(s) = self.strides.iter().find(|&&s| s == 0 || !self.steps.is_multiple_of(s)) {
            return bad(format!("stride {s} does not divide {} steps", self.steps));
        }
        if self.probes.iter().chain([&self.anchor]).any(|u| !(*u > 0.0 && u.is_finite())) {
            return bad("probe values must be positive".into());
        }
        if self.head_points < 2 {
            return bad("head rule needs at least 2 points".into());
        }
        let tail = (-self.tail_factor).exp();
        if !(tail <= TAIL_LIMIT) {
            return Err(LabError::TailMass(tail));
        }
        if self.u_max() < self.horizon {
            return bad(format!("quadrature range {} ends before the horizon", self.u_max()));
        }
        Ok(())
    }

    fn subject(&self) -> String {
        format!(
            "mc({:?}, rate {}, {} paths, {} steps)",
            self.loading, self.rate, self.paths, self.steps
        )
    }
}

/// Loading, its half square and the density-weighted quadrature weight at a node.
#[derive(Debug, Clone, Copy)]
struct Node {
    load: f64,
    half_sq: f64,
    weight: f64,
}

/// Integrals of the model at one time and Brownian value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelState {
    /// `n_t`.
    pub total: f64,
    /// `n_t` times the mean loading under the conditional law.
    pub loaded: f64,
    /// `n_t P(tau > t | F_t)`, when requested.
    pub beyond: f64,
    /// Loaded counterpart of `beyond`.
    pub beyond_loaded: f64,
}

impl ModelState {
    pub fn mean_load(&self) -> f64 {
        self.loaded / self.total
    }

    pub fn survival(&self) -> f64 {
        self.beyond / self.total
    }
}

/// Precomputed quadrature and per-step tables.
#[derive(Debug, Clone)]
pub struct Engine {
    model: McModel,
    dt: f64,
    full: Vec<Node>,
    /// Per step, the rule on `[0, t_k]`.
    head: Vec<Vec<Node>>,
    /// Loading and density at the grid times themselves.
    at_time: Vec<(f64, f64)>,
}

impl Engine {
    pub fn new(model: &McModel) -> Result<Self> {
        model.validate()?;
        let rate = model.rate;
        let loading = model.loading;
        let node = |u: f64, w: f64| {
            let s = loading.eval(u);
            Node {
                load: s,
                half_sq: 0.5 * s * s,
                weight: w * rate * (-rate * u).exp(),
            }
        };
        let rule = Rule::composite(0.0, model.u_max(), model.quadrature_panels, model.quadrature_points)?;
        let full = rule.nodes.iter().zip(&rule.weights).map(|(&u, &w)| node(u, w)).collect();
        let dt = model.dt();
        let mut head = vec![Vec::new()];
        let mut at_time = vec![(loading.eval(0.0), rate)];
        for k in 1..=model.steps {
            let t = k as f64 * dt;
            let r = Rule::composite(0.0, t, 1, model.head_points)?;
            head.push(r.nodes.iter().zip(&r.weights).map(|(&u, &w)| node(u, w)).collect());
            at_time.push((loading.eval(t), rate * (-rate * t).exp()));
        }
        Ok(Self {
            model: model.clone(),
            dt,
            full,
            head,
            at_time,
        })
    }

    pub fn model(&self) -> &McModel {
        &self.model
    }

    /// Model integrals at step `k` for Brownian value `w`; the integrals
    /// beyond `t_k` only when `beyond` is set.
    pub fn state(&self, k: usize, w: f64, beyond: bool) -> ModelState {
        let t = k as f64 * self.dt;
        let sums = |nodes: &[Node]| {
            nodes.iter().fold((0.0, 0.0), |(a, b), nd| {
                let q = nd.weight * (nd.load * w - nd.half_sq * t).exp();
                (a + q, b + q * nd.load)
            })
        };
        let (total, loaded) = sums(&self.full);
        let (beyond, beyond_loaded) = if beyond {
            let (h0, h1) = sums(&self.head[k]);
            (total - h0, loaded - h1)
        } else {
            (f64::NAN, f64::NAN)
        };
        ModelState {
            total,
            loaded,
            beyond,
            beyond_loaded,
        }
    }

    /// `q_t(u)` at step `k`.
    pub fn q(&self, k: usize, u: f64, w: f64) -> f64 {
        let s = self.model.loading.eval(u);
        (s * w - 0.5 * s * s * k as f64 * self.dt).exp()
    }

    fn is_checkpoint(&self, k: usize) -> bool {
        k.is_multiple_of(self.model.steps / self.model.test_intervals)
    }

    /// Terminal variable `h(tau) = exp(-tau)` of the representation study
    /// and its conditional mean given survival to `t`.
    fn tau_target(&self, t: f64, tau: f64) -> f64 {
        if tau <= t {
            (-tau).exp()
        } else {
            self.model.rate / (1.0 + self.model.rate) * (-t).exp()
        }
    }

    fn path(&self, idx: usize, buf: &mut PrpBuffer) -> PathRecord {
        let m = &self.model;
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
        rng.set_stream(idx as u64);
        let tau = Exp::new(m.rate).expect("validated rate").sample(&mut rng);
        let s_tau = m.loading.eval(tau);
        let s_anchor = m.loading.eval(m.anchor);
        let (dt, sq) = (self.dt, self.dt.sqrt());
        let mut w = 0.0f64;
        let (mut avg, mut init, mut prog, mut comp) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        // (time, mean load, drift before the default, intensity) at the previous step
        let mut prev = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut checkpoints = Vec::with_capacity(m.test_intervals + 1);
        let mut total = 1.0;
        for k in 0..=m.steps {
            let t = k as f64 * dt;
            let checkpoint = self.is_checkpoint(k);
            let need = checkpoint || k == 0 || tau > prev.0;
            let st = self.state(k, w, need);
            let bar = st.mean_load();
            let (before, intensity) = if need {
                let (s_t, f_t) = self.at_time[k];
                let q_tt = (s_t * w - 0.5 * s_t * s_t * t).exp();
                (st.beyond_loaded / st.beyond - bar, q_tt * f_t / st.beyond)
            } else {
                (f64::NAN, f64::NAN)
            };
            if k > 0 {
                let (t0, bar0, before0, int0) = prev;
                let mid_bar = 0.5 * dt * (bar0 + bar);
                avg += mid_bar;
                init += dt * s_tau - mid_bar;
                if tau > t {
                    prog += 0.5 * dt * (before0 + before);
                    comp += 0.5 * dt * (int0 + intensity);
                } else if tau > t0 {
                    let (a, b) = (tau - t0, t - tau);
                    let th = a / dt;
                    let bar_tau = bar0 + th * (bar - bar0);
                    let before_tau = before0 + th * (before - before0);
                    let int_tau = int0 + th * (intensity - int0);
                    prog += 0.5 * a * (before0 + before_tau)
                        + 0.5 * b * ((s_tau - bar_tau) + (s_tau - bar));
                    comp += 0.5 * a * (int0 + int_tau);
                } else {
                    prog += dt * s_tau - mid_bar;
                }
            }
            let p_tau = (s_tau * w - 0.5 * s_tau * s_tau * t).exp() / st.total;
            let p_anchor = (s_anchor * w - 0.5 * s_anchor * s_anchor * t).exp() / st.total;
            let alive = tau > t;
            let cond = self.tau_target(t, tau);
            buf.x[k] = w - avg;
            buf.target[k] = p_anchor * cond;
            buf.mstar[k] = f64::from(u8::from(!alive)) - m.rate * t.min(tau);
            buf.phi[k] = cond * p_anchor * (s_anchor - bar);
            buf.psi[k] = if alive { p_anchor * ((-t).exp() - cond) } else { 0.0 };
            if checkpoint {
                checkpoints.push(Checkpoint {
                    w,
                    total: st.total,
                    p_tau,
                    survival: st.survival(),
                    mean_load_integral: avg,
                    initial_drift: init,
                    progressive_drift: prog,
                    compensator: comp,
                });
            }
            total = st.total;
            prev = (t, bar, before, intensity);
            if k < m.steps {
                let z: f64 = StandardNormal.sample(&mut rng);
                w += sq * z;
            }
        }
        let joint = checkpoints.last().map_or(f64::NAN, |c| c.p_tau) * total;
        PathRecord {
            tau,
            base_weight: total,
            joint_weight: joint,
            checkpoints,
        }
    }
}

/// Values at one test time of one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub w: f64,
    /// `n_t`.
    pub total: f64,
    /// `p_t(tau)`.
    pub p_tau: f64,
    /// `P(tau > t | F_t)` under the original law.
    pub survival: f64,
    /// Integral of the conditional mean loading; `x = W - this`.
    pub mean_load_integral: f64,
    /// Drift of `x` on the initial enlargement.
    pub initial_drift: f64,
    /// Drift of `x` on the progressive enlargement.
    pub progressive_drift: f64,
    /// Compensator of the default indicator under the original law.
    pub compensator: f64,
}

impl Checkpoint {
    pub fn x(&self) -> f64 {
        self.w - self.mean_load_integral
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub tau: f64,
    /// `n_T`: weight of the base law and of the independent product.
    pub base_weight: f64,
    /// `q_T(tau)`: weight of the original joint law.
    pub joint_weight: f64,
    pub checkpoints: Vec<Checkpoint>,
}

/// Per-step values of one path for the representation study.
struct PrpBuffer {
    x: Vec<f64>,
    target: Vec<f64>,
    mstar: Vec<f64>,
    phi: Vec<f64>,
    psi: Vec<f64>,
}

impl PrpBuffer {
    fn new(steps: usize) -> Self {
        let v = || vec![0.0; steps + 1];
        Self {
            x: v(),
            target: v(),
            mstar: v(),
            phi: v(),
            psi: v(),
        }
    }
}

/// Weighted normal-equation sums of the representation fit, one entry per
/// interval: `[g11, g12, g22, c1, c2, yy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrideSums {
    pub stride: usize,
    pub intervals: Vec<[f64; 6]>,
}

impl StrideSums {
    fn add_path(&mut self, buf: &PrpBuffer, weight: f64) {
        let s = self.stride;
        for (j, acc) in self.intervals.iter_mut().enumerate() {
            let (a, b) = (j * s, (j + 1) * s);
            let d1 = buf.phi[a] * (buf.x[b] - buf.x[a]);
            let d2 = buf.psi[a] * (buf.mstar[b] - buf.mstar[a]);
            let y = buf.target[b] - buf.target[a];
            for (slot, v) in acc.iter_mut().zip([d1 * d1, d1 * d2, d2 * d2, d1 * y, d2 * y, y * y]) {
                *slot += weight * v;
            }
        }
    }

    fn merge(&mut self, other: &StrideSums) {
        for (a, b) in self.intervals.iter_mut().zip(&other.intervals) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Share of the target's increment variance left unexplained by the
    /// drivers, fitting one pair of coefficients per interval.
    pub fn unexplained_share(&self) -> f64 {
        let (mut res, mut tot) = (0.0, 0.0);
        for &[g11, g12, g22, c1, c2, yy] in &self.intervals {
            let det = g11 * g22 - g12 * g12;
            let explained = if det > 1e-14 * (g11 * g22).max(f64::MIN_POSITIVE) {
                (c1 * (g22 * c1 - g12 * c2) + c2 * (g11 * c2 - g12 * c1)) / det
            } else if g11 > 0.0 {
                c1 * c1 / g11
            } else {
                0.0
            };
            res += (yy - explained).max(0.0);
            tot += yy;
        }
        if tot > 0.0 {
            res / tot
        } else {
            0.0
        }
    }
}

/// All simulated paths plus the representation sums.
#[derive(Debug, Clone)]
pub struct PathBundle {
    engine: Engine,
    pub checkpoint_times: Vec<f64>,
    pub paths: Vec<PathRecord>,
    pub prp: Vec<StrideSums>,
}

/// Simulates `model.paths` paths. Path `i` uses its own stream of the seeded
/// generator, so results do not depend on the thread count.
pub fn simulate(model: &McModel) -> Result<PathBundle> {
    let engine = Engine::new(model)?;
    let fresh = || -> Vec<StrideSums> {
        model
            .strides
            .iter()
            .map(|&s| StrideSums {
                stride: s,
                intervals: vec![[0.0; 6]; model.steps / s],
            })
            .collect()
    };
    let chunks: Vec<(Vec<PathRecord>, Vec<StrideSums>)> = (0..model.paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut buf = PrpBuffer::new(model.steps);
            let mut sums = fresh();
            let range = c * CHUNK..((c + 1) * CHUNK).min(model.paths);
            let recs = range
                .map(|i| {
                    let r = engine.path(i, &mut buf);
                    sums.iter_mut().for_each(|s| s.add_path(&buf, r.base_weight));
                    r
                })
                .collect();
            (recs, sums)
        })
        .collect();
    let mut paths = Vec::with_capacity(model.paths);
    let mut prp = fresh();
    for (recs, sums) in chunks {
        paths.extend(recs);
        prp.iter_mut().zip(&sums).for_each(|(a, b)| a.merge(b));
    }
    let every = model.steps / model.test_intervals;
    let checkpoint_times = (0..=model.test_intervals)
        .map(|j| (j * every) as f64 * engine.dt)
        .collect();
    Ok(PathBundle {
        engine,
        checkpoint_times,
        paths,
        prp,
    })
}

impl PathBundle {
    pub fn model(&self) -> &McModel {
        &self.engine.model
    }

    pub fn evaluate(&self, name: &str) -> Option<SuiteReport> {
        let rep = match name {
            "mc_weights" => self.weights(),
            "mc_martingales" => self.martingales(),
            "mc_drift" => self.drift(),
            "mc_survival" => self.survival(),
            "mc_antithetic" => self.antithetic(),
            "mc_prp" => self.representation(),
            _ => return None,
        };
        Some(rep)
    }

    fn report(&self, name: &str, tolerance: f64) -> SuiteReport {
        let mut r = SuiteReport::new(name, self.model().subject(), tolerance);
        r.metric("paths", self.paths.len() as f64);
        r
    }

    fn step_of(&self, c: usize) -> usize {
        c * self.model().steps / self.model().test_intervals
    }

    /// Records a mean against its target in standard errors.
    fn mean_check(&self, rep: &mut SuiteReport, check: String, t: f64, target: f64, est: Estimate) {
        let z = est.z(target);
        rep.series.push(row(&check, t, est.value, est.se, z));
        rep.record(|| format!("{check} at t={t}"), z);
    }

    /// Regresses `y` on `[1, features]` and records every coefficient's `|z|`.
    fn z_test(
        &self,
        rep: &mut SuiteReport,
        check: &str,
        t: f64,
        columns: &[&str],
        obs: impl Fn(&PathRecord, &mut [f64]) -> (f64, f64),
    ) {
        let p = columns.len() + 1;
        let fit = wls(self.paths.len(), p, |i, x| {
            x[0] = 1.0;
            obs(&self.paths[i], &mut x[1..])
        });
        match fit {
            Ok(fit) => {
                for (j, c) in fit.coef.iter().enumerate() {
                    let label = if j == 0 { "intercept" } else { columns[j - 1] };
                    match c {
                        Some(e) => {
                            let z = e.z(0.0);
                            rep.series.push(row(&format!("{check}.{label}"), t, e.value, e.se, z));
                            rep.record(|| format!("{check}, {label} at t={t}"), z);
                        }
                        None => rep.note(format!("{check} at t={t}: constant column {label} dropped")),
                    }
                }
            }
            Err(FitFailure::Singular) => rep.note(format!("{check} at t={t}: singular design, skipped")),
            Err(FitFailure::TooFewObservations) => rep.note(format!("{check} at t={t}: too few paths, skipped")),
        }
    }

    /// Means of the weights and of the density martingales.
    fn weights(&self) -> SuiteReport {
        let mut rep = self.report("mc_weights", MEAN_LIMIT);
        let horizon = self.model().horizon;
        let bad = self
            .paths
            .iter()
            .filter(|r| !(r.base_weight > 0.0 && r.joint_weight > 0.0 && r.base_weight.is_finite() && r.joint_weight.is_finite()))
            .count();
        if bad > 0 {
            rep.fail("non-positive or non-finite weights", bad as f64);
        }
        self.mean_check(&mut rep, "base_weight".into(), horizon, 1.0, mean_se(self.paths.iter().map(|r| r.base_weight)));
        self.mean_check(&mut rep, "joint_weight".into(), horizon, 1.0, mean_se(self.paths.iter().map(|r| r.joint_weight)));
        for (c, &t) in self.checkpoint_times.iter().enumerate().skip(1) {
            let k = self.step_of(c);
            let est = mean_se(self.paths.iter().map(|r| r.checkpoints[c].total));
            self.mean_check(&mut rep, "density_total".into(), t, 1.0, est);
            for &u in &self.model().probes {
                let est = mean_se(self.paths.iter().map(|r| {
                    let cp = &r.checkpoints[c];
                    r.base_weight * self.engine.q(k, u, cp.w) / cp.total
                }));
                self.mean_check(&mut rep, format!("density(u={u})"), t, 1.0, est);
            }
        }
        rep
    }

    /// Martingale z-tests on every test interval.
    fn martingales(&self) -> SuiteReport {
        let mut rep = self.report("mc_martingales", Z_LIMIT);
        let rate = self.model().rate;
        let times = &self.checkpoint_times;
        let dead = |r: &PathRecord, t: f64| f64::from(u8::from(r.tau <= t));
        for c in 1..times.len() {
            let (s, t) = (times[c - 1], times[c]);
            let (a, b) = (c - 1, c);
            self.z_test(&mut rep, "brownian", t, &["W_s"], |r, x| {
                x[0] = r.checkpoints[a].w;
                (r.checkpoints[b].w - r.checkpoints[a].w, 1.0)
            });
            self.z_test(&mut rep, "base_martingale", t, &["W_s", "H_s"], |r, x| {
                x[0] = r.checkpoints[a].w;
                x[1] = dead(r, s);
                (r.checkpoints[b].x() - r.checkpoints[a].x(), r.base_weight)
            });
            self.z_test(&mut rep, "initial_decomposition", t, &["W_s", "load(tau)"], |r, x| {
                let (p, q) = (&r.checkpoints[a], &r.checkpoints[b]);
                x[0] = p.w;
                x[1] = self.model().loading.eval(r.tau);
                ((q.x() - p.x()) - (q.initial_drift - p.initial_drift), r.joint_weight)
            });
            self.z_test(&mut rep, "progressive_decomposition", t, &["W_s", "H_s"], |r, x| {
                let (p, q) = (&r.checkpoints[a], &r.checkpoints[b]);
                x[0] = p.w;
                x[1] = dead(r, s);
                ((q.x() - p.x()) - (q.progressive_drift - p.progressive_drift), r.joint_weight)
            });
            self.z_test(&mut rep, "default_compensated", t, &["W_s", "H_s"], |r, x| {
                let (p, q) = (&r.checkpoints[a], &r.checkpoints[b]);
                x[0] = p.w;
                x[1] = dead(r, s);
                ((dead(r, t) - q.compensator) - (dead(r, s) - p.compensator), r.joint_weight)
            });
            self.z_test(&mut rep, "default_compensated_independent", t, &["W_s", "H_s"], |r, x| {
                x[0] = r.checkpoints[a].w;
                x[1] = dead(r, s);
                let m = |u: f64| dead(r, u) - rate * u.min(r.tau);
                (m(t) - m(s), r.base_weight)
            });
        }
        rep
    }

    /// Under the original law the base martingale must show its drift, and
    /// the drift must have the predicted slope in the loading at the default time.
    fn drift(&self) -> SuiteReport {
        let mut rep = self.report("mc_drift", Z_LIMIT);
        let times = &self.checkpoint_times;
        let loading = self.model().loading;
        let mut detected = 0.0f64;
        for c in 1..times.len() {
            let (s, t) = (times[c - 1], times[c]);
            let (a, b) = (c - 1, c);
            let fit = wls(self.paths.len(), 2, |i, x| {
                let r = &self.paths[i];
                x[0] = 1.0;
                x[1] = loading.eval(r.tau);
                (r.checkpoints[b].x() - r.checkpoints[a].x(), r.joint_weight)
            });
            if let Ok(Some(e)) = fit.map(|f| f.coef[1]) {
                let z = e.z(0.0);
                detected = detected.max(z.abs());
                rep.series.push(row("uncorrected_increment.load(tau)", t, e.value, e.se, z));
            }
            // Predicted drift over the interval, from the left endpoint.
            let dt = t - s;
            let fit = wls(self.paths.len(), 2, |i, x| {
                let r = &self.paths[i];
                let p = &r.checkpoints[a];
                let bar = self.engine.state(self.step_of(a), p.w, false).mean_load();
                x[0] = 1.0;
                x[1] = (loading.eval(r.tau) - bar) * dt;
                (r.checkpoints[b].x() - p.x(), r.joint_weight)
            });
            match fit.map(|f| f.coef[1]) {
                Ok(Some(e)) => {
                    let z = e.z(1.0);
                    rep.series.push(row("drift_slope", t, e.value, e.se, z));
                    rep.record(|| format!("drift slope at t={t}"), z);
                }
                _ => rep.note(format!("drift slope at t={t}: degenerate design, skipped")),
            }
        }
        rep.metric("negative_control_max_abs_z", detected);
        if detected <= Z_LIMIT {
            rep.fail("negative control: drift not detected", detected);
        }
        rep
    }

    /// The quadrature survival probability against the reweighted indicator.
    fn survival(&self) -> SuiteReport {
        let mut rep = self.report("mc_survival", MEAN_LIMIT);
        for (c, &t) in self.checkpoint_times.iter().enumerate().skip(1) {
            self.z_test(&mut rep, "survival", t, &["W_t"], |r, x| {
                let cp = &r.checkpoints[c];
                x[0] = cp.w;
                (f64::from(u8::from(r.tau > t)) - cp.survival, r.joint_weight)
            });
        }
        rep
    }

    /// Mirrored paths must leave estimator means within one plain standard error.
    fn antithetic(&self) -> SuiteReport {
        let mut rep = self.report("mc_antithetic", ANTITHETIC_LIMIT);
        let last = self.checkpoint_times.len() - 1;
        let kt = self.step_of(last);
        let mut targets: Vec<(String, f64, Mirrored<'_>)> = vec![
            (
                "base_weight".into(),
                self.model().horizon,
                Box::new(move |r: &PathRecord, sign: f64| {
                    self.engine.state(kt, sign * r.checkpoints[last].w, false).total
                }),
            ),
            (
                "joint_weight".into(),
                self.model().horizon,
                Box::new(move |r: &PathRecord, sign: f64| {
                    self.engine.q(kt, r.tau, sign * r.checkpoints[last].w)
                }),
            ),
        ];
        for (c, &t) in self.checkpoint_times.iter().enumerate().skip(1) {
            let k = self.step_of(c);
            for &u in &self.model().probes {
                targets.push((
                    format!("q(u={u})"),
                    t,
                    Box::new(move |r: &PathRecord, sign: f64| self.engine.q(k, u, sign * r.checkpoints[c].w)),
                ));
            }
        }
        for (name, t, f) in &targets {
            let plain = mean_se(self.paths.iter().map(|r| f(r, 1.0)));
            let anti = mean_se(self.paths.iter().map(|r| 0.5 * (f(r, 1.0) + f(r, -1.0))));
            let dev = (anti.value - 1.0) / plain.se;
            rep.series.push(row(&format!("antithetic.{name}"), *t, anti.value, anti.se, dev));
            rep.metric(format!("{name}.t={t}.variance_ratio"), (anti.se / plain.se).powi(2));
            rep.record(|| format!("{name} at t={t}"), dev);
        }
        rep
    }

    /// Unexplained share of the representation of `p_t(anchor) E[h(tau) | H_t]`
    /// by the base and default martingales, per stride.
    fn representation(&self) -> SuiteReport {
        let mut rep = self.report("mc_prp", f64::INFINITY);
        let dt = self.engine.dt;
        let mut last = f64::INFINITY;
        for s in &self.prp {
            let share = s.unexplained_share();
            rep.metric(format!("unexplained_share.stride_{}", s.stride), share);
            rep.series.push(row("prp.unexplained_share", s.stride as f64 * dt, share, 0.0, 0.0));
            if !share.is_finite() {
                rep.fail(format!("stride {}", s.stride), share);
            }
            if share > last {
                rep.note(format!("share rises at stride {}", s.stride));
            }
            last = share;
        }
        rep.note("unexplained shares are reported, not thresholded");
        rep
    }
}

/// A path functional evaluated on the path (`1.0`) or its mirror (`-1.0`).
type Mirrored<'a> = Box<dyn Fn(&PathRecord, f64) -> f64 + 'a>;

fn row(check: &str, t: f64, estimate: f64, se: f64, zscore: f64) -> SeriesRow {
    SeriesRow {
        check: check.to_string(),
        t,
        estimate,
        se,
        zscore,
    }
}

/// Simulates once and evaluates the named checks, or all of them when
/// `names` is empty. Unknown names are an error.
pub fn run_mc(model: &McModel, names: &[&str]) -> Result<Vec<SuiteReport>> {
    let wanted: Vec<&str> = if names.is_empty() { MC_SUITES.to_vec() } else { names.to_vec() };
    if let Some(bad) = wanted.iter().find(|n| !MC_SUITES.contains(n)) {
        return Err(LabError::InvalidModel(format!("unknown Monte Carlo check {bad}")));
    }
    let start = std::time::Instant::now();
    let bundle = simulate(model)?;
    let shared = start.elapsed().as_secs_f64() / wanted.len() as f64;
    Ok(wanted
        .iter()
        .map(|n| {
            let mut r = crate::report::timed(|| bundle.evaluate(n).expect("known check"));
            r.wall_time += shared;
            r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::Status;

    fn small(paths: usize) -> McModel {
        McModel {
            steps: 50,
            paths,
            strides: vec![10, 5, 1],
            ..McModel::default()
        }
    }

    #[test]
    fn zero_loading_is_trivial() {
        let m = McModel {
            loading: Loading::Constant { value: 0.0 },
            ..small(64)
        };
        let b = simulate(&m).unwrap();
        for r in &b.paths {
            assert!((r.base_weight - 1.0).abs() < 1e-10 && (r.joint_weight - 1.0).abs() < 1e-10);
            for c in &r.checkpoints {
                assert!((c.p_tau - 1.0).abs() < 1e-10);
                assert_eq!(c.initial_drift, 0.0);
                assert_eq!(c.progressive_drift, 0.0);
                assert_eq!(c.mean_load_integral, 0.0);
            }
        }
    }

    #[test]
    fn log_density_slope_is_the_drift_integrand() {
        let m = small(2);
        let e = Engine::new(&m).unwrap();
        let (k, w, h) = (30, 0.4, 1e-5);
        let logp = |u: f64, w: f64| (e.q(k, u, w) / e.state(k, w, false).total).ln();
        let bar = e.state(k, w, false).mean_load();
        for u in [0.1, 0.7, 2.5] {
            let fd = (logp(u, w + h) - logp(u, w - h)) / (2.0 * h);
            assert!((fd - (m.loading.eval(u) - bar)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn quadrature_matches_closed_forms() {
        let m = McModel {
            loading: Loading::Constant { value: 0.3 },
            ..small(2)
        };
        let e = Engine::new(&m).unwrap();
        let k = 25;
        let t = k as f64 * m.dt();
        let st = e.state(k, 0.2, true);
        let q = (0.3 * 0.2 - 0.045 * t).exp();
        assert!((st.total - q).abs() < 1e-10);
        assert!((st.survival() - (-t).exp()).abs() < 1e-10);
        assert!((st.mean_load() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn tail_mass_is_enforced() {
        let m = McModel {
            tail_factor: 12.0,
            ..small(2)
        };
        assert!(matches!(simulate(&m), Err(LabError::TailMass(_))));
        let m = McModel {
            test_intervals: 3,
            ..small(2)
        };
        assert!(matches!(simulate(&m), Err(LabError::InvalidModel(_))));
    }

    #[test]
    fn paths_do_not_depend_on_chunking() {
        let m = small(CHUNK + 5);
        let a = simulate(&m).unwrap();
        let e = Engine::new(&m).unwrap();
        let mut buf = PrpBuffer::new(m.steps);
        assert_eq!(e.path(CHUNK + 3, &mut buf), a.paths[CHUNK + 3]);
        let b = simulate(&m).unwrap();
        assert_eq!(a.paths, b.paths);
        assert_eq!(a.prp, b.prp);
    }

    #[test]
    fn checks_pass_on_a_small_run() {
        let reps = run_mc(&small(20_000), &[]).unwrap();
        assert_eq!(reps.len(), MC_SUITES.len());
        for r in &reps {
            assert_eq!(r.status, Status::Pass, "{}: {:?} {:?}", r.name, r.offenders, r.notes);
        }
        let prp = &reps[5];
        assert!(prp.metrics["unexplained_share.stride_1"] < prp.metrics["unexplained_share.stride_10"]);
        assert!(run_mc(&small(10), &["mc_nope"]).is_err());
    }
}
