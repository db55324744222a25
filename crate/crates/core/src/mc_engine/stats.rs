//! Sample means and weighted least squares with heteroskedasticity-robust
//! (HC0) standard errors.

use nalgebra::{DMatrix, DVector};

use crate::finite_space::Accumulator;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// Standardized distance from `target`.
    pub fn z(&self, target: f64) -> f64 {
        let d = self.value - target;
        if self.se > 0.0 {
            d / self.se
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(d)
        }
    }
}

/// Sample mean with its standard error.
pub fn mean_se(values: impl IntoIterator<Item = f64>) -> Estimate {
    let (mut n, mut s, mut s2) = (0usize, Accumulator::default(), Accumulator::default());
    for v in values {
        n += 1;
        s.add(v);
        s2.add(v * v);
    }
    if n < 2 {
        return Estimate {
            value: if n == 1 { s.value() } else { f64::NAN },
            se: f64::NAN,
        };
    }
    let nf = n as f64;
    let mean = s.value() / nf;
    let var = ((s2.value() - nf * mean * mean) / (nf - 1.0)).max(0.0);
    Estimate {
        value: mean,
        se: (var / nf).sqrt(),
    }
}

/// Coefficients of a weighted regression; `None` for a column dropped as
/// constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression {
    pub coef: Vec<Option<Estimate>>,
    pub observations: usize,
}

impl Regression {
    /// Largest `|z|` against zero over the fitted coefficients.
    pub fn max_abs_z(&self) -> f64 {
        self.coef.iter().flatten().map(|e| e.z(0.0).abs()).fold(0.0, f64::max)
    }
}

/// Why a regression produced no estimate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FitFailure {
    TooFewObservations,
    Singular,
}

/// Weighted least squares of `y` on the features returned by `row`, whose
/// first entry must be the intercept. Non-intercept columns that are
/// constant across observations are dropped.
///
/// `row(i, x)` fills the `p` features of observation `i` and returns
/// `(y, weight)`.
pub fn wls(
    n: usize,
    p: usize,
    row: impl Fn(usize, &mut [f64]) -> (f64, f64),
) -> Result<Regression, FitFailure> {
    let mut x = vec![0.0; p];
    let (mut lo, mut hi) = (vec![f64::INFINITY; p], vec![f64::NEG_INFINITY; p]);
    for i in 0..n {
        row(i, &mut x);
        for j in 0..p {
            lo[j] = lo[j].min(x[j]);
            hi[j] = hi[j].max(x[j]);
        }
    }
    let keep: Vec<usize> = (0..p)
        .filter(|&j| j == 0 || hi[j] - lo[j] > 1e-12 * hi[j].abs().max(lo[j].abs()).max(1.0))
        .collect();
    let q = keep.len();
    if n <= q {
        return Err(FitFailure::TooFewObservations);
    }
    let mut bread = DMatrix::<f64>::zeros(q, q);
    let mut xty = DVector::<f64>::zeros(q);
    for i in 0..n {
        let (y, w) = row(i, &mut x);
        for (a, &ja) in keep.iter().enumerate() {
            xty[a] += w * x[ja] * y;
            for (b, &jb) in keep.iter().enumerate().take(a + 1) {
                bread[(a, b)] += w * x[ja] * x[jb];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            bread[(b, a)] = bread[(a, b)];
        }
    }
    let chol = bread.clone().cholesky().ok_or(FitFailure::Singular)?;
    let beta = chol.solve(&xty);
    let inv = chol.inverse();
    // Relative conditioning guard: Cholesky accepts nearly collinear designs.
    let scale = bread.diagonal().max();
    if inv.diagonal().max() * scale > 1e12 {
        return Err(FitFailure::Singular);
    }
    let mut meat = DMatrix::<f64>::zeros(q, q);
    for i in 0..n {
        let (y, w) = row(i, &mut x);
        let fitted: f64 = keep.iter().enumerate().map(|(a, &j)| beta[a] * x[j]).sum();
        let s = w * (y - fitted);
        let s2 = s * s;
        for (a, &ja) in keep.iter().enumerate() {
            for (b, &jb) in keep.iter().enumerate() {
                meat[(a, b)] += s2 * x[ja] * x[jb];
            }
        }
    }
    let cov = &inv * meat * &inv;
    let mut coef = vec![None; p];
    for (a, &j) in keep.iter().enumerate() {
        coef[j] = Some(Estimate {
            value: beta[a],
            se: cov[(a, a)].max(0.0).sqrt(),
        });
    }
    Ok(Regression {
        coef,
        observations: n,
    })
}
