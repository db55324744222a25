//! Run configuration: which checks to run on which kernels and models.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use filtration_lab::density_kernel::{DensityKernel, Loading, TauGrid};
use filtration_lab::finite_space::FiniteSpace;
use filtration_lab::mc_engine::{McModel, MC_SUITES};
use filtration_lab::theorem_suite::refinement::{RefinementConfig, REFINEMENT_SUITES};
use filtration_lab::theorem_suite::FINITE_SUITES;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown check {0:?}; run with --list-suites")]
    UnknownSuite(String),
    #[error("finite checks requested but no kernels configured")]
    NoKernels,
    #[error("kernel {index}: {message}")]
    Kernel { index: usize, message: String },
}

/// Binomial path tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSpec {
    pub steps: usize,
    pub horizon: f64,
    pub p_up: f64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self {
            steps: 4,
            horizon: 1.0,
            p_up: 0.5,
        }
    }
}

/// Exponential grid of the random time with this many points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { points: 8 }
    }
}

fn default_loading() -> Loading {
    Loading::Exponential {
        scale: 0.3,
        decay: 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Independent {
        #[serde(default)]
        tree: TreeSpec,
        #[serde(default)]
        grid: GridSpec,
    },
    Factor {
        #[serde(default)]
        tree: TreeSpec,
        #[serde(default)]
        grid: GridSpec,
        #[serde(default = "default_loading")]
        loading: Loading,
    },
    Randomized {
        #[serde(default)]
        tree: TreeSpec,
        #[serde(default)]
        grid: GridSpec,
        seed: u64,
    },
    /// The factor kernel frozen after the last observation before each grid point.
    FrozenFactor {
        #[serde(default)]
        tree: TreeSpec,
        #[serde(default)]
        grid: GridSpec,
        #[serde(default = "default_loading")]
        loading: Loading,
    },
    /// A kernel stored as JSON, relative paths resolved against the config file.
    Document { path: PathBuf },
}

impl KernelSpec {
    pub fn build(&self, base: &Path) -> filtration_lab::Result<DensityKernel> {
        let parts = |tree: &TreeSpec, grid: &GridSpec| -> filtration_lab::Result<_> {
            let space = Arc::new(FiniteSpace::binomial_tree(tree.steps, tree.horizon, tree.p_up)?);
            Ok((space, TauGrid::exponential(grid.points, tree.horizon)?))
        };
        match self {
            KernelSpec::Independent { tree, grid } => {
                let (s, g) = parts(tree, grid)?;
                DensityKernel::independent(s, g)
            }
            KernelSpec::Factor { tree, grid, loading } => {
                let (s, g) = parts(tree, grid)?;
                let l = *loading;
                DensityKernel::factor_model(s, g, move |u| l.eval(u))
            }
            KernelSpec::Randomized { tree, grid, seed } => {
                let (s, g) = parts(tree, grid)?;
                DensityKernel::randomized(s, g, *seed)
            }
            KernelSpec::FrozenFactor { tree, grid, loading } => {
                let (s, g) = parts(tree, grid)?;
                let l = *loading;
                DensityKernel::frozen(&DensityKernel::factor_model(s, g, move |u| l.eval(u))?)
            }
            KernelSpec::Document { path } => {
                let full = if path.is_absolute() { path.clone() } else { base.join(path) };
                DensityKernel::from_json(&std::fs::read_to_string(full)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Check names, or the groups `all`, `finite`, `refinement` and `mc`.
    pub suites: Vec<String>,
    pub kernels: Vec<KernelSpec>,
    pub refinement: Option<RefinementConfig>,
    pub mc: Option<McModel>,
    pub output_dir: PathBuf,
    /// Seed of the random test processes drawn by the finite checks.
    pub seed: u64,
    /// Per-check tolerances; a check passes only if it also meets its override.
    pub tolerances: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            suites: vec!["finite".into()],
            kernels: vec![KernelSpec::Independent {
                tree: TreeSpec::default(),
                grid: GridSpec::default(),
            }],
            refinement: None,
            mc: None,
            output_dir: PathBuf::from("lab-out"),
            seed: 1,
            tolerances: BTreeMap::new(),
        }
    }
}

/// Every runnable check in run order.
pub fn all_suites() -> impl Iterator<Item = &'static str> {
    FINITE_SUITES
        .iter()
        .chain(REFINEMENT_SUITES)
        .chain(MC_SUITES)
        .copied()
}

/// Which checks of each family a config selects.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    pub finite: Vec<&'static str>,
    pub refinement: Vec<&'static str>,
    pub mc: Vec<&'static str>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn selection(&self) -> Result<Selection, ConfigError> {
        let mut sel = Selection::default();
        let mut push = |name: &'static str| {
            let bucket = if FINITE_SUITES.contains(&name) {
                &mut sel.finite
            } else if REFINEMENT_SUITES.contains(&name) {
                &mut sel.refinement
            } else {
                &mut sel.mc
            };
            if !bucket.contains(&name) {
                bucket.push(name);
            }
        };
        for s in &self.suites {
            let group: Vec<&'static str> = match s.as_str() {
                "all" => all_suites().collect(),
                "finite" => FINITE_SUITES.to_vec(),
                "refinement" => REFINEMENT_SUITES.to_vec(),
                "mc" => MC_SUITES.to_vec(),
                name => vec![all_suites()
                    .find(|n| *n == name)
                    .ok_or_else(|| ConfigError::UnknownSuite(name.to_string()))?],
            };
            group.into_iter().for_each(&mut push);
        }
        for name in self.tolerances.keys() {
            if !all_suites().any(|n| n == name) {
                return Err(ConfigError::UnknownSuite(name.clone()));
            }
        }
        if !sel.finite.is_empty() && self.kernels.is_empty() {
            return Err(ConfigError::NoKernels);
        }
        // Keep the canonical order regardless of how the names were listed.
        let order = |v: &mut Vec<&'static str>| v.sort_by_key(|n| all_suites().position(|m| m == *n));
        order(&mut sel.finite);
        order(&mut sel.refinement);
        order(&mut sel.mc);
        Ok(sel)
    }

    pub fn kernels(&self, base: &Path) -> Result<Vec<DensityKernel>, ConfigError> {
        self.kernels
            .iter()
            .enumerate()
            .map(|(index, k)| {
                k.build(base).map_err(|e| ConfigError::Kernel {
                    index,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    #[test]
    fn groups_expand_in_canonical_order() {
        let c = parse(r#"{"suites": ["immersion", "survival", "refine_prp", "mc_drift", "survival"]}"#).unwrap();
        let s = c.selection().unwrap();
        assert_eq!(s.finite, vec!["survival", "immersion"]);
        assert_eq!(s.refinement, vec!["refine_prp"]);
        assert_eq!(s.mc, vec!["mc_drift"]);
        let all = parse(r#"{"suites": ["all"]}"#).unwrap().selection().unwrap();
        assert_eq!(all.finite.len() + all.refinement.len() + all.mc.len(), all_suites().count());
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(
            parse(r#"{"suites": ["nope"]}"#).unwrap().selection(),
            Err(ConfigError::UnknownSuite(_))
        ));
        assert!(matches!(
            parse(r#"{"tolerances": {"nope": 1.0}}"#).unwrap().selection(),
            Err(ConfigError::UnknownSuite(_))
        ));
        assert!(matches!(
            parse(r#"{"kernels": []}"#).unwrap().selection(),
            Err(ConfigError::NoKernels)
        ));
        // Randomized kernels need a seed.
        assert!(parse(r#"{"kernels": [{"kind": "randomized"}]}"#).is_err());
        assert!(parse(r#"{"colour": 1}"#).is_err());
    }

    #[test]
    fn kernel_specs_build() {
        let c = parse(
            r#"{"kernels": [
                {"kind": "independent", "tree": {"steps": 2}},
                {"kind": "factor", "loading": {"kind": "constant", "value": 0.2}},
                {"kind": "randomized", "seed": 4, "grid": {"points": 3}},
                {"kind": "frozen_factor"}
            ]}"#,
        )
        .unwrap();
        let ks = c.kernels(Path::new(".")).unwrap();
        assert_eq!(ks.len(), 4);
        assert_eq!(ks[0].steps(), 2);
        assert_eq!(ks[2].m(), 3);
        let bad = parse(r#"{"kernels": [{"kind": "independent", "grid": {"points": 0}}]}"#).unwrap();
        assert!(matches!(bad.kernels(Path::new(".")), Err(ConfigError::Kernel { index: 0, .. })));
    }
}
