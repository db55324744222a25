//! Randomized invariants of conditional expectation, Doob decomposition,
//! brackets and the enlarged conditioning formulas.

use std::sync::Arc;

use filtration_lab::density_kernel::{DensityKernel, TauGrid};
use filtration_lab::enlargement::{JointMeasure, ProductSpace};
use filtration_lab::finite_space::{
    cond_exp, doob_decomposition, doob_martingale, is_martingale, predictable_bracket, AdaptedProcess,
    FiniteSpace,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-12;

fn tree(seed: u64, steps: usize, branching: usize) -> FiniteSpace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FiniteSpace::random_tree(steps, 1.0, branching, &mut rng).unwrap()
}

fn values(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn close(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn shapes() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..=4, 2usize..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tower_property((seed, steps, b) in shapes(), j in 0usize..4, k in 0usize..5) {
        let s = tree(seed, steps, b);
        let (j, k) = (j.min(steps), k.min(steps).max(j.min(steps)));
        let x = values(seed, s.n_atoms());
        let f = s.filtration();
        let inner = cond_exp(&x, s.measure(), f.partition(k)).unwrap();
        let lhs = cond_exp(&inner, s.measure(), f.partition(j)).unwrap();
        let rhs = cond_exp(&x, s.measure(), f.partition(j)).unwrap();
        prop_assert!(close(&lhs, &rhs) < TOL);
    }

    #[test]
    fn conditional_expectation_is_linear((seed, steps, b) in shapes(), a in -3.0f64..3.0, c in -3.0f64..3.0) {
        let s = tree(seed, steps, b);
        let pi = s.filtration().partition(steps / 2);
        let (x, y) = (values(seed, s.n_atoms()), values(seed.wrapping_add(1), s.n_atoms()));
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + c * v).collect();
        let ex = cond_exp(&x, s.measure(), pi).unwrap();
        let ey = cond_exp(&y, s.measure(), pi).unwrap();
        let expect: Vec<f64> = ex.iter().zip(&ey).map(|(u, v)| a * u + c * v).collect();
        prop_assert!(close(&cond_exp(&mix, s.measure(), pi).unwrap(), &expect) < 1e-11);
        // Measurable factors pull out.
        let g = cond_exp(&y, s.measure(), pi).unwrap();
        let gx: Vec<f64> = g.iter().zip(&x).map(|(u, v)| u * v).collect();
        let pulled: Vec<f64> = g.iter().zip(&ex).map(|(u, v)| u * v).collect();
        prop_assert!(close(&cond_exp(&gx, s.measure(), pi).unwrap(), &pulled) < 1e-11);
    }

    #[test]
    fn conditional_expectation_is_positive_and_bounded((seed, steps, b) in shapes()) {
        let s = tree(seed, steps, b);
        let x: Vec<f64> = values(seed, s.n_atoms()).iter().map(|v| v.abs()).collect();
        let hi = x.iter().cloned().fold(0.0, f64::max);
        for k in 0..=steps {
            for v in cond_exp(&x, s.measure(), s.filtration().partition(k)).unwrap() {
                prop_assert!(v >= 0.0 && v <= hi + TOL);
            }
        }
    }

    #[test]
    fn randomized_kernels_are_densities(seed in any::<u64>(), steps in 1usize..=4, m in 2usize..=8) {
        let space = Arc::new(tree(seed, steps, 2));
        let k = DensityKernel::randomized(space, TauGrid::exponential(m, 1.0).unwrap(), seed).unwrap();
        for step in 0..=steps {
            for a in 0..k.n_atoms() {
                let row = k.row(step, a);
                prop_assert!(row.iter().all(|&p| p > 0.0));
                let mass: f64 = row.iter().zip(k.grid().nu_weights()).map(|(p, w)| p * w).sum();
                prop_assert!((mass - 1.0).abs() < TOL);
            }
        }
        for i in 0..m {
            let chk = is_martingale(&k.density_process(i), k.filtration(), k.measure(), TOL).unwrap();
            prop_assert!(chk.holds, "u index {i}: {}", chk.max_residual);
        }
    }

    /// A martingale plus a predictable process decomposes back into its parts.
    #[test]
    fn doob_decomposition_is_unique((seed, steps, b) in shapes()) {
        let s = tree(seed, steps, b);
        let (f, mu) = (s.filtration(), s.measure());
        let m = doob_martingale(&values(seed, s.n_atoms()), f, mu).unwrap();
        let raw = values(seed.wrapping_add(7), s.n_atoms());
        let a = AdaptedProcess::from_fn(steps, s.n_atoms(), |k, atom| {
            if k == 0 {
                0.0
            } else {
                cond_exp(&raw, mu, f.predictable_partition(k)).unwrap()[atom] * k as f64
            }
        });
        let d = doob_decomposition(&m.add(&a), f, mu).unwrap();
        prop_assert!(d.compensator.sub(&a).sup_norm() < 1e-11);
        // The martingale part starts at zero.
        let m0 = m.at(0).to_vec();
        let centered = AdaptedProcess::from_fn(steps, s.n_atoms(), |k, atom| m.get(k, atom) - m0[atom]);
        prop_assert!(d.martingale.sub(&centered).sup_norm() < 1e-11);
    }

    /// `X Y - <X, Y>` is a martingale for martingales `X`, `Y`.
    #[test]
    fn bracket_compensates_the_product((seed, steps, b) in shapes()) {
        let s = tree(seed, steps, b);
        let (f, mu) = (s.filtration(), s.measure());
        let x = doob_martingale(&values(seed, s.n_atoms()), f, mu).unwrap();
        let y = doob_martingale(&values(seed.wrapping_add(3), s.n_atoms()), f, mu).unwrap();
        let br = predictable_bracket(&x, &y, f, mu).unwrap();
        let shifted = x.mul(&y).sub(&br);
        let chk = is_martingale(&shifted, f, mu, 1e-11).unwrap();
        prop_assert!(chk.holds, "{}", chk.max_residual);
        let xx = predictable_bracket(&x, &x, f, mu).unwrap();
        for k in 1..=steps {
            for atom in 0..s.n_atoms() {
                prop_assert!(xx.get(k, atom) >= xx.get(k - 1, atom) - TOL);
            }
        }
    }

    /// The closed-form progressive conditional expectation against brute force.
    #[test]
    fn progressive_formula_matches_oracle(seed in any::<u64>(), steps in 1usize..=3, m in 2usize..=5, s in 0usize..4, t in 0usize..4) {
        let space = Arc::new(tree(seed, steps, 2));
        let kernel = DensityKernel::randomized(space, TauGrid::exponential(m, 1.0).unwrap(), seed).unwrap();
        let ps = ProductSpace::new(&kernel).unwrap();
        let (s, t) = (s.min(steps), t.min(steps));
        let n = kernel.n_atoms();
        let fam: Vec<AdaptedProcess> = (0..m)
            .map(|i| {
                let z = values(seed.wrapping_add(i as u64), n);
                doob_martingale(&z, kernel.filtration(), kernel.measure()).unwrap()
            })
            .collect();
        for which in [JointMeasure::Original, JointMeasure::Independent] {
            let v = ps.condexp_progressive(&fam, s, t, which).unwrap();
            let got = ps.progressive_on_atoms(s, &v);
            let want = ps.oracle_progressive(&fam, s, t, which).unwrap();
            prop_assert!(close(&got, &want) < TOL, "{which:?} s={s} t={t}");
        }
    }
}
