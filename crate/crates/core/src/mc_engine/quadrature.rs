//! Fixed Gauss-Legendre rules on bounded intervals.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{LabError, Result};

/// Nodes and weights of a composite rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    /// `panels` equal panels on `[a, b]` with `points` nodes each.
    pub fn composite(a: f64, b: f64, panels: usize, points: usize) -> Result<Self> {
        let n = NonZeroUsize::new(points)
            .filter(|n| n.get() >= 2)
            .ok_or_else(|| LabError::InvalidModel("quadrature needs at least 2 points".into()))?;
        if panels == 0 || !(b > a) {
            return Err(LabError::InvalidModel(format!("bad quadrature range [{a}, {b}] x {panels}")));
        }
        let base = GaussLegendre::new(n);
        let h = (b - a) / panels as f64;
        let mut rule = Rule {
            nodes: Vec::with_capacity(panels * points),
            weights: Vec::with_capacity(panels * points),
        };
        for j in 0..panels {
            let lo = a + h * j as f64;
            for &(x, w) in base.as_node_weight_pairs() {
                rule.nodes.push(lo + 0.5 * h * (x + 1.0));
                rule.weights.push(0.5 * h * w);
            }
        }
        Ok(rule)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&u, &w)| w * f(u)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_moments() {
        let r = Rule::composite(0.0, 24.0, 1, 64).unwrap();
        let mass = r.integrate(|u| (-u).exp());
        assert!((mass - (1.0 - (-24.0f64).exp())).abs() < 1e-13);
        let mean = r.integrate(|u| u * (-u).exp());
        assert!((mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn panels_are_exact_for_polynomials() {
        let r = Rule::composite(-1.0, 3.0, 3, 4).unwrap();
        assert_eq!(r.len(), 12);
        let v = r.integrate(|u| u.powi(7));
        assert!((v - (3f64.powi(8) - 1.0) / 8.0).abs() < 1e-9);
    }

    #[test]
    fn bad_rules_are_rejected() {
        assert!(Rule::composite(0.0, 1.0, 1, 1).is_err());
        assert!(Rule::composite(1.0, 1.0, 1, 8).is_err());
        assert!(Rule::composite(0.0, 1.0, 0, 8).is_err());
    }
}
