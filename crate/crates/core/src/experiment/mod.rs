//! Seeded batch experiments emitting CSV tables.
//!
//! Every kind expands its grid into cells, runs each cell over `n_seeds`
//! seeds in parallel and gathers results in a fixed order, so a config
//! always produces the same bytes (unless `timing` is on).

mod runners;
pub mod table;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discrepancy::DiscrepancyConfig;
use crate::error::{invalid, Error, Result};
use crate::matrix_estimation::SolverConfig;
use crate::mdp::FactorizationForm;
use crate::ope::{SlackConfig, SlackRule};

pub use runners::slope;
pub use table::{median, ExperimentTable, Row, COLUMNS};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    DisjointSupport,
    Bandit,
    BoundCheck,
    RateCheck,
    PolicyOptDemo,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::DisjointSupport,
        ExperimentKind::Bandit,
        ExperimentKind::BoundCheck,
        ExperimentKind::RateCheck,
        ExperimentKind::PolicyOptDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DisjointSupport => "disjoint_support",
            ExperimentKind::Bandit => "bandit",
            ExperimentKind::BoundCheck => "bound_check",
            ExperimentKind::RateCheck => "rate_check",
            ExperimentKind::PolicyOptDemo => "policy_opt_demo",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentKind::DisjointSupport => {
                "uniform-kernel MDPs with S = A = n and random m-action supports for behavior and target"
            }
            ExperimentKind::Bandit => "one-step instances; distribution- and policy-level discrepancy bounds",
            ExperimentKind::BoundCheck => "random low-rank MDPs checked against the infinite- and finite-sample bounds",
            ExperimentKind::RateCheck => "behavior-policy evaluation error as the number of trajectories grows",
            ExperimentKind::PolicyOptDemo => "one-step policy selection over a budgeted candidate set",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown experiment kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Infinite,
    Finite,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Infinite => "infinite",
            Mode::Finite => "finite",
        }
    }
}

/// Grid axes; every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub n: Vec<usize>,
    pub m: Vec<usize>,
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    #[serde(rename = "H")]
    pub h: Vec<usize>,
    pub d: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            n: vec![8],
            m: vec![2],
            k: vec![1000],
            h: vec![2],
            d: vec![2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub grid: Grid,
    /// Empty means the kind's default modes.
    pub modes: Vec<Mode>,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub delta: f64,
    /// Constant of the finite-sample bounds; calibrated on held-out seeds when
    /// absent.
    #[serde(rename = "C")]
    pub constant: Option<f64>,
    pub calibration_seeds: usize,
    /// Kernel form for `bound_check` and `rate_check`.
    pub form: FactorizationForm,
    pub solver: SolverConfig,
    pub discrepancy: DiscrepancyConfig,
    pub slack: SlackConfig,
    /// Solve for `Dis` (the slowest part of a row); `NaN` otherwise.
    pub compute_dis: bool,
    /// Fill `runtime_ms`; breaks byte-for-byte reproducibility.
    pub timing: bool,
    pub n_candidates: usize,
    /// Per-step budget `B_t` for `policy_opt_demo`.
    pub budget: f64,
    #[serde(skip_serializing)]
    pub output: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::DisjointSupport,
            grid: Grid::default(),
            modes: Vec::new(),
            n_seeds: 50,
            base_seed: 0,
            delta: 0.05,
            constant: None,
            calibration_seeds: 20,
            form: FactorizationForm::ActionSeparable,
            solver: SolverConfig::default(),
            discrepancy: DiscrepancyConfig::default(),
            slack: SlackConfig {
                rule: SlackRule::Oracle,
                ..SlackConfig::default()
            },
            compute_dis: true,
            timing: false,
            n_candidates: 10,
            budget: 0.05,
            output: None,
        }
    }
}

impl ExperimentConfig {
    /// Defaults with a kind-appropriate grid.
    pub fn for_kind(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            ..Self::default()
        };
        let grid = match kind {
            ExperimentKind::DisjointSupport => Grid {
                n: vec![20],
                m: vec![2, 5, 10, 20],
                k: vec![1000],
                h: vec![2],
                d: vec![2],
            },
            ExperimentKind::Bandit => Grid {
                n: vec![8],
                m: vec![2],
                k: vec![1000],
                h: vec![1],
                d: vec![2],
            },
            ExperimentKind::BoundCheck => Grid {
                n: vec![6],
                m: vec![2],
                k: vec![1000],
                h: vec![3],
                d: vec![2],
            },
            ExperimentKind::RateCheck => Grid {
                n: vec![4],
                m: vec![4],
                k: vec![1000, 10_000, 100_000],
                h: vec![3],
                d: vec![2],
            },
            ExperimentKind::PolicyOptDemo => Grid {
                n: vec![4],
                m: vec![4],
                k: vec![100_000],
                h: vec![1],
                d: vec![2],
            },
        };
        Self { grid, ..base }
    }

    pub fn effective_modes(&self) -> Vec<Mode> {
        if !self.modes.is_empty() {
            return self.modes.clone();
        }
        match self.kind {
            ExperimentKind::RateCheck | ExperimentKind::PolicyOptDemo => vec![Mode::Finite],
            _ => vec![Mode::Infinite],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        for (name, axis) in [("n", &g.n), ("m", &g.m), ("K", &g.k), ("H", &g.h), ("d", &g.d)] {
            if axis.is_empty() || axis.contains(&0) {
                return Err(invalid(format!("grid axis {name} must be nonempty and positive")));
            }
        }
        if self.n_seeds == 0 {
            return Err(invalid("n_seeds must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta must lie in (0, 1)"));
        }
        if let Some(c) = self.constant {
            if !(c >= 0.0) {
                return Err(invalid("C must be nonnegative"));
            }
        }
        let max_n = *g.n.iter().max().unwrap();
        let min_n = *g.n.iter().min().unwrap();
        match self.kind {
            ExperimentKind::DisjointSupport | ExperimentKind::Bandit | ExperimentKind::BoundCheck => {
                if g.m.iter().any(|&m| m > min_n) {
                    return Err(invalid("m must not exceed n"));
                }
            }
            _ => {}
        }
        if g.d.iter().any(|&d| d < 2 || d > 2 * min_n) {
            return Err(invalid(format!("d must lie in [2, 2n] (n up to {max_n})")));
        }
        match self.kind {
            ExperimentKind::Bandit | ExperimentKind::PolicyOptDemo if g.h != [1] => {
                return Err(invalid("one-step experiments require H = [1]"));
            }
            ExperimentKind::RateCheck | ExperimentKind::PolicyOptDemo if self.effective_modes() != [Mode::Finite] => {
                return Err(invalid("this experiment runs in finite mode only"));
            }
            ExperimentKind::Bandit if self.effective_modes() != [Mode::Infinite] => {
                return Err(invalid("bandit runs in infinite mode only"));
            }
            ExperimentKind::PolicyOptDemo if self.n_candidates == 0 || !(self.budget >= 0.0) => {
                return Err(invalid("policy_opt_demo needs n_candidates ≥ 1 and budget ≥ 0"));
            }
            _ => {}
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..16].to_string()
    }
}

/// Runs the configured experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentTable> {
    config.validate()?;
    match config.kind {
        ExperimentKind::DisjointSupport => runners::run_disjoint_support(config),
        ExperimentKind::Bandit => runners::run_bandit(config),
        ExperimentKind::BoundCheck => runners::run_bound_check(config),
        ExperimentKind::RateCheck => runners::run_rate_check(config),
        ExperimentKind::PolicyOptDemo => runners::run_policy_opt_demo(config),
    }
}

pub use runners::{run_bandit, run_bound_check, run_disjoint_support, run_policy_opt_demo, run_rate_check};
