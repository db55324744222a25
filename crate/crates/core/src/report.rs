//! Machine-readable outcome of a single check.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Minimum reduction factor per step-size halving for refinement checks.
pub const REFINEMENT_FACTOR: f64 = 1.2;
/// Residuals at or below this level count as already exact in a refinement study.
pub const EXACT_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offender {
    pub location: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementPoint {
    pub dt: f64,
    pub residual: f64,
}

/// One row of tabular output (`check, t, estimate, se, zscore`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub check: String,
    pub t: f64,
    pub estimate: f64,
    pub se: f64,
    pub zscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub subject: String,
    pub status: Status,
    pub max_residual: f64,
    pub tolerance: f64,
    pub offenders: Vec<Offender>,
    pub refinement: Vec<RefinementPoint>,
    pub metrics: BTreeMap<String, f64>,
    pub series: Vec<SeriesRow>,
    pub notes: Vec<String>,
    pub wall_time: f64,
}

const MAX_OFFENDERS: usize = 8;

impl SuiteReport {
    pub fn new(name: impl Into<String>, subject: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            subject: subject.into(),
            status: Status::Pass,
            max_residual: 0.0,
            tolerance,
            offenders: Vec::new(),
            refinement: Vec::new(),
            metrics: BTreeMap::new(),
            series: Vec::new(),
            notes: Vec::new(),
            wall_time: 0.0,
        }
    }

    /// Records a residual; anything above tolerance fails the report and is kept as an offender.
    pub fn record(&mut self, location: impl FnOnce() -> String, residual: f64) {
        let r = if residual.is_nan() { f64::INFINITY } else { residual.abs() };
        if r > self.max_residual {
            self.max_residual = r;
        }
        if r > self.tolerance {
            self.status = Status::Fail;
            if self.offenders.len() < MAX_OFFENDERS {
                self.offenders.push(Offender {
                    location: location(),
                    value: r,
                });
            } else {
                let worst = self
                    .offenders
                    .iter_mut()
                    .min_by(|a, b| a.value.total_cmp(&b.value))
                    .expect("non-empty");
                if r > worst.value {
                    *worst = Offender {
                        location: location(),
                        value: r,
                    };
                }
            }
        }
    }

    /// Marks a failure that is not tied to a numeric residual.
    pub fn fail(&mut self, location: impl Into<String>, value: f64) {
        self.status = Status::Fail;
        self.offenders.push(Offender {
            location: location.into(),
            value,
        });
    }

    pub fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn skip(&mut self, reason: impl Into<String>) {
        self.status = Status::Skipped;
        self.notes.push(reason.into());
    }

    /// Attaches a refinement study and fails the report unless it converges.
    pub fn refine(&mut self, points: Vec<RefinementPoint>) {
        if let Err(msg) = check_refinement(&points) {
            self.status = Status::Fail;
            self.notes.push(msg);
        }
        for (j, p) in points.iter().enumerate() {
            self.metric(format!("refinement_{j}_residual"), p.residual);
        }
        self.refinement = points;
    }

    /// Merges a sub-check into this report.
    pub fn absorb(&mut self, other: SuiteReport) {
        let prefix = other.name.clone();
        if other.max_residual > self.max_residual {
            self.max_residual = other.max_residual;
        }
        if other.status == Status::Fail {
            self.status = Status::Fail;
        }
        for o in other.offenders {
            self.offenders.push(Offender {
                location: format!("{prefix}: {}", o.location),
                value: o.value,
            });
        }
        for (k, v) in other.metrics {
            self.metrics.insert(format!("{prefix}.{k}"), v);
        }
        for n in other.notes {
            self.notes.push(format!("{prefix}: {n}"));
        }
        self.series.extend(other.series);
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    pub fn failed(&self) -> bool {
        self.status == Status::Fail
    }
}

/// Every consecutive pair must shrink by [`REFINEMENT_FACTOR`] unless it is
/// already below [`EXACT_FLOOR`].
pub fn check_refinement(points: &[RefinementPoint]) -> Result<(), String> {
    if points.len() < 2 {
        return Err("refinement study needs at least two levels".into());
    }
    for w in points.windows(2) {
        let (a, b) = (w[0].residual, w[1].residual);
        if !b.is_finite() || !a.is_finite() {
            return Err(format!("non-finite residual at dt={}", w[1].dt));
        }
        if b <= EXACT_FLOOR {
            continue;
        }
        if b > a / REFINEMENT_FACTOR {
            return Err(format!(
                "residual {b:e} at dt={} is not {REFINEMENT_FACTOR}x below {a:e} at dt={}",
                w[1].dt, w[0].dt
            ));
        }
    }
    Ok(())
}

/// Runs `f` and stores its wall time in the returned report.
pub fn timed(f: impl FnOnce() -> SuiteReport) -> SuiteReport {
    let start = Instant::now();
    let mut r = f();
    r.wall_time = start.elapsed().as_secs_f64();
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(r: &[f64]) -> Vec<RefinementPoint> {
        r.iter()
            .enumerate()
            .map(|(j, &residual)| RefinementPoint {
                dt: 0.5f64.powi(j as i32),
                residual,
            })
            .collect()
    }

    #[test]
    fn refinement_rules() {
        assert!(check_refinement(&pts(&[1.0, 0.5, 0.25])).is_ok());
        assert!(check_refinement(&pts(&[1.0, 0.9])).is_err());
        assert!(check_refinement(&pts(&[0.0, 0.0, 1e-15])).is_ok());
        assert!(check_refinement(&pts(&[1.0])).is_err());
    }

    #[test]
    fn record_tracks_worst() {
        let mut r = SuiteReport::new("x", "k", 1e-3);
        r.record(|| "a".into(), 1e-4);
        assert!(r.passed());
        r.record(|| "b".into(), 2e-3);
        assert!(r.failed());
        assert_eq!(r.max_residual, 2e-3);
        r.record(|| "c".into(), f64::NAN);
        assert!(r.max_residual.is_infinite());
    }
}
