//! Operator discrepancy between distributions (and between policies), its
//! empirical counterpart, and the concentrability coefficient for comparison.
//!
//! `Dis(p, q) = min { ‖g − q‖_op : g a distribution with supp(g) ⊆ supp(p) }`
//! is a convex program over a face of the simplex. It is solved by projected
//! subgradient descent with best-iterate tracking and several restarts. The
//! running average of subgradients `Z̄` (nuclear norm ≤ 1) yields the dual
//! lower bound `min_{g feasible} ⟨Z̄, g⟩ − ⟨Z̄, q⟩`, reported through
//! `certificate_gap`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matrix_estimation::norms::{operator_norm, top_singular_triples};
use crate::mdp::{Mat, SUPPORT_TOL};
use crate::simplex::project_masked_simplex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscrepancyConfig {
    pub max_iters: usize,
    /// Initial step `η₀`; the step at iteration `k` is `η₀/√k`.
    pub initial_step: f64,
    /// Random feasible starting points in addition to the two fixed ones.
    pub random_restarts: usize,
    /// Stop once the best value improves by less than `stall_tol` over
    /// `stall_window` iterations.
    pub stall_window: usize,
    pub stall_tol: f64,
    pub seed: u64,
}

impl Default for DiscrepancyConfig {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            initial_step: 0.5,
            random_restarts: 3,
            stall_window: 200,
            stall_tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyResult {
    pub value: f64,
    pub minimizer: Mat,
    pub iterations: usize,
    pub converged: bool,
    /// `value` minus the best dual lower bound found (≥ 0 up to rounding).
    pub certificate_gap: f64,
}

/// Feasible region: either one simplex over the masked entries or one simplex
/// per row over that row's masked entries.
#[derive(Clone, Copy, PartialEq)]
enum Region {
    Joint,
    Rowwise,
}

struct Problem<'a> {
    mask: Vec<bool>,
    target: &'a Mat,
    region: Region,
}

impl Problem<'_> {
    fn rows(&self) -> usize {
        self.target.nrows()
    }
    fn cols(&self) -> usize {
        self.target.ncols()
    }

    fn project(&self, g: &mut Mat) {
        let (r, c) = (self.rows(), self.cols());
        match self.region {
            Region::Joint => {
                // row-major flattening keeps the mask aligned with (s, a)
                let mut flat: Vec<f64> = (0..r * c).map(|k| g[(k / c, k % c)]).collect();
                project_masked_simplex(&mut flat, &self.mask);
                for k in 0..r * c {
                    g[(k / c, k % c)] = flat[k];
                }
            }
            Region::Rowwise => {
                for i in 0..r {
                    let mut row: Vec<f64> = (0..c).map(|j| g[(i, j)]).collect();
                    project_masked_simplex(&mut row, &self.mask[i * c..(i + 1) * c]);
                    for j in 0..c {
                        g[(i, j)] = row[j];
                    }
                }
            }
        }
    }

    /// `min_{g feasible} ⟨Z, g⟩ − ⟨Z, q⟩`, a lower bound on the optimum
    /// whenever `‖Z‖_* ≤ 1`.
    fn dual_bound(&self, z: &Mat) -> f64 {
        let (r, c) = (self.rows(), self.cols());
        let support_min = match self.region {
            Region::Joint => (0..r * c)
                .filter(|&k| self.mask[k])
                .map(|k| z[(k / c, k % c)])
                .fold(f64::INFINITY, f64::min),
            Region::Rowwise => (0..r)
                .map(|i| {
                    (0..c)
                        .filter(|&j| self.mask[i * c + j])
                        .map(|j| z[(i, j)])
                        .fold(f64::INFINITY, f64::min)
                })
                .sum(),
        };
        support_min - z.dot(self.target)
    }

    /// Subgradient of `g ↦ ‖g − q‖_op`, averaging the two leading pairs when
    /// the top singular value is (numerically) repeated.
    fn subgradient(&self, diff: &Mat) -> Option<(f64, Mat)> {
        let triples = top_singular_triples(diff, 2);
        let first = triples.first()?;
        let mut g = &first.u * first.v.transpose();
        if let Some(second) = triples.get(1) {
            if first.sigma - second.sigma < 1e-8 {
                g = (g + &second.u * second.v.transpose()) * 0.5;
            }
        }
        Some((first.sigma, g))
    }

    fn solve(&self, starts: Vec<Mat>, config: &DiscrepancyConfig) -> DiscrepancyResult {
        let mut state = Descent {
            best: Mat::zeros(self.rows(), self.cols()),
            best_value: f64::INFINITY,
            best_lower: f64::NEG_INFINITY,
            iterations: 0,
        };
        let mut all_converged = true;
        for g in starts {
            all_converged &= self.descend(g, config.initial_step, config, &mut state);
            if state.best_value == 0.0 {
                break;
            }
        }
        // refinement rounds from the incumbent with shrinking steps
        let mut step = config.initial_step;
        for _ in 0..4 {
            if state.best_value == 0.0 || state.best_value - state.best_lower < 1e-10 {
                break;
            }
            step *= 0.1;
            all_converged &= self.descend(state.best.clone(), step, config, &mut state);
        }
        if state.best_value == 0.0 {
            state.best_lower = 0.0;
        }
        DiscrepancyResult {
            value: state.best_value,
            minimizer: state.best,
            iterations: state.iterations,
            converged: all_converged || state.best_value == 0.0,
            certificate_gap: (state.best_value - state.best_lower).max(0.0),
        }
    }

    /// One projected subgradient run from `g`; returns whether it stopped on
    /// the stall criterion rather than the iteration cap.
    fn descend(&self, mut g: Mat, initial_step: f64, config: &DiscrepancyConfig, state: &mut Descent) -> bool {
        self.project(&mut g);
        let v0 = operator_norm(&(&g - self.target));
        if v0 < state.best_value {
            state.best_value = v0;
            state.best = g.clone();
        }
        if state.best_value == 0.0 {
            return true;
        }
        let mut avg = Mat::zeros(self.rows(), self.cols());
        let mut weight = 0.0;
        let mut window_best = state.best_value;
        for k in 1..=config.max_iters {
            state.iterations += 1;
            let diff = &g - self.target;
            let Some((value, sub)) = self.subgradient(&diff) else {
                // g == q on a feasible point
                state.best_value = 0.0;
                state.best = g;
                return true;
            };
            if value < state.best_value {
                state.best_value = value;
                state.best = g.clone();
            }
            state.best_lower = state.best_lower.max(self.dual_bound(&sub));
            let step = initial_step / (k as f64).sqrt();
            avg += &sub * step;
            weight += step;
            g -= &sub * step;
            self.project(&mut g);

            if k % config.stall_window.max(1) == 0 {
                state.best_lower = state.best_lower.max(self.dual_bound(&(&avg / weight)));
                if window_best - state.best_value < config.stall_tol
                    || state.best_value - state.best_lower < 1e-10
                {
                    return true;
                }
                window_best = state.best_value;
            }
        }
        false
    }
}

struct Descent {
    best: Mat,
    best_value: f64,
    best_lower: f64,
    iterations: usize,
}

fn check_distribution(m: &Mat, name: &str) -> Result<()> {
    if m.iter().any(|&x| x < 0.0 || !x.is_finite()) || (m.sum() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("{name} is not a probability distribution")));
    }
    Ok(())
}

fn random_start(mask: &[bool], rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for k in 0..rows * cols {
        if mask[k] {
            m[(k / cols, k % cols)] = rng.random::<f64>();
        }
    }
    m
}

/// `Dis(p, q)` by projected subgradient descent; starts from `p`, from `q`
/// restricted to `supp(p)` and from random feasible points.
pub fn operator_discrepancy(p: &Mat, q: &Mat, config: &DiscrepancyConfig) -> Result<DiscrepancyResult> {
    if p.shape() != q.shape() {
        return Err(invalid("p and q must have the same shape"));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let (r, c) = p.shape();
    let mask: Vec<bool> = (0..r * c).map(|k| p[(k / c, k % c)] > SUPPORT_TOL).collect();
    if !mask.iter().any(|&b| b) {
        return Err(invalid("supp(p) is empty"));
    }
    let mut starts = vec![p.clone()];
    let masked_q = Mat::from_fn(r, c, |i, j| if mask[i * c + j] { q[(i, j)] } else { 0.0 });
    let mass = masked_q.sum();
    if mass > 0.0 {
        starts.push(masked_q / mass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.random_restarts {
        let mut g = random_start(&mask, r, c, &mut rng);
        let s = g.sum();
        g /= s;
        starts.push(g);
    }
    let problem = Problem {
        mask,
        target: q,
        region: Region::Joint,
    };
    Ok(problem.solve(starts, config))
}

/// `‖p − q‖_op`.
pub fn empirical_operator_discrepancy(p: &Mat, q: &Mat) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(invalid("p and q must have the same shape"));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(operator_norm(&(p - q)))
}

/// Discrepancy between one step of two policies: minimum `‖π − π^θ‖_op`
/// over row-stochastic `π` with `supp(π) ⊆ supp(π^β)` row by row.
pub fn policy_operator_discrepancy(
    pi_beta: &Mat,
    pi_theta: &Mat,
    config: &DiscrepancyConfig,
) -> Result<DiscrepancyResult> {
    if pi_beta.shape() != pi_theta.shape() {
        return Err(invalid("policies must have the same shape"));
    }
    let (r, c) = pi_beta.shape();
    for (name, m) in [("behavior", pi_beta), ("target", pi_theta)] {
        for (i, row) in m.row_iter().enumerate() {
            if row.iter().any(|&x| x < 0.0) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("{name} policy row {i} is not a distribution")));
            }
        }
    }
    let mask: Vec<bool> = (0..r * c).map(|k| pi_beta[(k / c, k % c)] > SUPPORT_TOL).collect();
    for i in 0..r {
        if !mask[i * c..(i + 1) * c].iter().any(|&b| b) {
            return Err(invalid(format!("behavior policy row {i} has empty support")));
        }
    }
    let mut starts = vec![pi_beta.clone()];
    let mut masked = Mat::zeros(r, c);
    for i in 0..r {
        let mass: f64 = (0..c).filter(|&j| mask[i * c + j]).map(|j| pi_theta[(i, j)]).sum();
        let support = mask[i * c..(i + 1) * c].iter().filter(|&&b| b).count() as f64;
        for j in 0..c {
            if mask[i * c + j] {
                masked[(i, j)] = if mass > 0.0 { pi_theta[(i, j)] / mass } else { 1.0 / support };
            }
        }
    }
    starts.push(masked);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.random_restarts {
        let mut g = random_start(&mask, r, c, &mut rng);
        for i in 0..r {
            let s: f64 = g.row(i).sum();
            g.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        starts.push(g);
    }
    let problem = Problem {
        mask,
        target: pi_theta,
        region: Region::Rowwise,
    };
    Ok(problem.solve(starts, config))
}

/// `max_{s,a} target(s,a)/reference(s,a)`; infinite when the target charges a
/// pair the reference never visits.
pub fn concentrability_coefficient(target: &Mat, reference: &Mat) -> f64 {
    target
        .iter()
        .zip(reference.iter())
        .filter(|(&t, _)| t > SUPPORT_TOL)
        .map(|(&t, &r)| if r > SUPPORT_TOL { t / r } else { f64::INFINITY })
        .fold(0.0, f64::max)
}
