//! Max-norm minimization under either entrywise-equality or inner-product
//! constraints, solved by bisection on the max-norm budget with a factored
//! projected-gradient feasibility search at each budget.
//!
//! For a budget `τ` the iterate is `M = U Vᵀ` with every row of `U` and `V`
//! kept in the ℓ₂ ball of radius `√τ`, so `‖M‖_max ≤ τ` holds by
//! construction. The final iterate is polished (constrained entries moved
//! onto the constraint set, everything clipped into the ℓ∞ box) and the
//! polish correction `E` is charged to the certificate through its trivial
//! factorization, so the reported value is always a true upper bound on
//! `‖M‖_max`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::norms::{factor_product_bound, max_abs, trivial_max_norm_bound};
use crate::error::{invalid, Error, Result};
use crate::mdp::{Mat, PartialMatrix, SUPPORT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ConstraintMode {
    /// `1_ρ ∘ M = 1_ρ ∘ Y`.
    Equality,
    /// `|⟨ρ, M − Z⟩| ≤ slack`.
    InnerProduct { slack: f64 },
}

/// One matrix-estimation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MEProblem {
    pub weights: Mat,
    pub observed: PartialMatrix,
    pub entry_bound: f64,
    pub rank_param: usize,
    pub mode: ConstraintMode,
}

impl MEProblem {
    pub fn new(
        weights: Mat,
        observed: PartialMatrix,
        entry_bound: f64,
        rank_param: usize,
        mode: ConstraintMode,
    ) -> Result<Self> {
        if weights.shape() != observed.values.shape() || weights.shape() != observed.defined.shape() {
            return Err(Error::DimensionMismatch("weights vs observed".into()));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) || (weights.sum() - 1.0).abs() > 1e-9 {
            return Err(invalid("weights must be a distribution over S×A"));
        }
        if !(entry_bound > 0.0) {
            return Err(invalid("entry bound must be positive"));
        }
        if let ConstraintMode::InnerProduct { slack } = mode {
            if !(slack >= 0.0) {
                return Err(invalid("slack must be nonnegative"));
            }
        }
        for ((&w, &def), &v) in weights.iter().zip(observed.defined.iter()).zip(observed.values.iter()) {
            if w > SUPPORT_TOL && (!def || !v.is_finite()) {
                return Err(invalid("observed matrix must be defined on the support of the weights"));
            }
        }
        Ok(Self {
            weights,
            observed,
            entry_bound,
            rank_param,
            mode,
        })
    }

    pub fn support(&self) -> DMatrix<bool> {
        self.weights.map(|w| w > SUPPORT_TOL)
    }

    fn weighted_observed(&self) -> f64 {
        self.weights
            .iter()
            .zip(self.observed.values.iter())
            .filter(|(&w, _)| w > SUPPORT_TOL)
            .map(|(w, v)| w * v)
            .sum()
    }

    /// Constraint violation of `m`: max support deviation in equality mode,
    /// excess over the slack in inner-product mode.
    pub fn residual(&self, m: &Mat) -> f64 {
        match self.mode {
            ConstraintMode::Equality => self
                .weights
                .iter()
                .zip(m.iter().zip(self.observed.values.iter()))
                .filter(|(&w, _)| w > SUPPORT_TOL)
                .map(|(_, (x, y))| (x - y).abs())
                .fold(0.0, f64::max),
            ConstraintMode::InnerProduct { slack } => {
                (self.inner_gap(m).abs() - slack).max(0.0)
            }
        }
    }

    /// `⟨ρ, M − Z⟩` over the support.
    fn inner_gap(&self, m: &Mat) -> f64 {
        self.weights
            .iter()
            .zip(m.iter())
            .filter(|(&w, _)| w > SUPPORT_TOL)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            - self.weighted_observed()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Projected-gradient iterations per feasibility attempt.
    pub max_iters: usize,
    /// Feasibility tolerance `ε_feas`.
    pub tol: f64,
    /// Bisection tolerance; `None` means `1e-4·L`.
    pub bisect_tol: Option<f64>,
    pub restarts: usize,
    /// Factor width; `None` means `min(S, A)`.
    pub factor_rank: Option<usize>,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 3000,
            tol: 1e-7,
            bisect_tol: None,
            restarts: 3,
            factor_rank: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MESolution {
    pub estimate: Mat,
    /// Certified upper bound on `‖estimate‖_max`.
    pub max_norm_value: f64,
    pub constraint_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

const BOX_PENALTY: f64 = 10.0;

/// Accepted point at some budget.
struct Candidate {
    m: Mat,
    certificate: f64,
    residual: f64,
    u: Mat,
    v: Mat,
}

struct Attempt {
    candidate: Option<Candidate>,
    best_residual: f64,
    iterations: usize,
}

pub fn solve_me(problem: &MEProblem, config: &SolverConfig) -> Result<MESolution> {
    let l = problem.entry_bound;
    let (rows, cols) = problem.weights.shape();
    let support = problem.support();
    let cap = (problem.rank_param as f64).sqrt() * l;
    let bisect_tol = config.bisect_tol.unwrap_or(1e-4 * l);

    if let ConstraintMode::InnerProduct { slack } = problem.mode {
        // |⟨ρ,M⟩| ≤ ‖M‖_∞ ≤ ‖M‖_max with Σρ = 1, so the constant matrix at the
        // nearest admissible level attains the lower bound and is optimal.
        let level = problem.weighted_observed();
        let magnitude = (level.abs() - slack).max(0.0).min(l);
        let c = level.signum() * magnitude;
        let estimate = Mat::from_element(rows, cols, c);
        let residual = problem.residual(&estimate);
        return Ok(MESolution {
            estimate,
            max_norm_value: magnitude,
            constraint_residual: residual,
            iterations: 0,
            converged: residual <= config.tol,
        });
    }

    let observed_max = problem
        .observed
        .values
        .iter()
        .zip(support.iter())
        .filter(|(_, &s)| s)
        .map(|(v, _)| v.abs())
        .fold(0.0, f64::max);
    if observed_max > l + config.tol {
        return Err(Error::SolverFailure {
            step: None,
            reason: format!("observed entries exceed the entry bound {l}"),
            best_residual: observed_max - l,
        });
    }

    // Constant observations are completed by the constant matrix, which
    // attains the ‖M‖_∞ lower bound.
    let on_support: Vec<f64> = problem
        .observed
        .values
        .iter()
        .zip(support.iter())
        .filter(|(_, &s)| s)
        .map(|(v, _)| *v)
        .collect();
    if on_support.iter().all(|&v| v == on_support[0]) {
        let c = on_support[0].clamp(-l, l);
        let estimate = Mat::from_element(rows, cols, c);
        return Ok(MESolution {
            constraint_residual: problem.residual(&estimate),
            estimate,
            max_norm_value: c.abs(),
            iterations: 0,
            converged: true,
        });
    }

    if support.iter().all(|&s| s) {
        // every entry is pinned; the observed matrix is the only feasible point
        let estimate = problem.observed.values.map(|v| v.clamp(-l, l));
        let certificate = super::norms::max_norm_bound(&estimate, problem.rank_param);
        return Ok(MESolution {
            constraint_residual: problem.residual(&estimate),
            estimate,
            max_norm_value: certificate.upper.min(super::norms::nuclear_norm(&problem.observed.values)),
            iterations: 0,
            converged: true,
        });
    }

    let width = config.factor_rank.unwrap_or(rows.min(cols)).max(1);
    let mut search = Search {
        problem,
        support: &support,
        config,
        width,
        accept: bisect_tol / 4.0,
        iterations: 0,
        best_residual: f64::INFINITY,
    };

    let mut lo = observed_max;
    let mut hi = cap;
    let mut best = match search.attempt(cap, None, 0) {
        Some(c) => c,
        None => {
            return Err(Error::SolverFailure {
                step: None,
                reason: format!("no feasible point found at the max-norm cap {cap:.6}"),
                best_residual: search.best_residual,
            })
        }
    };
    hi = hi.min(best.certificate);
    let mut round = 1;
    while hi - lo > bisect_tol {
        let mid = 0.5 * (lo + hi);
        match search.attempt(mid, Some((&best.u, &best.v)), round) {
            Some(c) => {
                hi = mid.min(c.certificate);
                if c.certificate <= best.certificate {
                    best = c;
                }
            }
            None => lo = mid,
        }
        round += 1;
    }

    Ok(MESolution {
        estimate: best.m,
        max_norm_value: best.certificate,
        constraint_residual: best.residual,
        iterations: search.iterations,
        converged: best.residual <= config.tol,
    })
}

struct Search<'a> {
    problem: &'a MEProblem,
    support: &'a DMatrix<bool>,
    config: &'a SolverConfig,
    width: usize,
    accept: f64,
    iterations: usize,
    best_residual: f64,
}

impl Search<'_> {
    /// Runs up to `restarts` projected-gradient searches at budget `tau`.
    fn attempt(&mut self, tau: f64, warm: Option<(&Mat, &Mat)>, round: u64) -> Option<Candidate> {
        let restarts = self.config.restarts.max(1);
        for r in 0..restarts {
            let (u0, v0) = self.initial_factors(tau, if r == 0 { warm } else { None }, round, r as u64);
            let out = self.projected_gradient(tau, u0, v0);
            self.iterations += out.iterations;
            self.best_residual = self.best_residual.min(out.best_residual);
            if out.candidate.is_some() {
                return out.candidate;
            }
        }
        None
    }

    fn initial_factors(&self, tau: f64, warm: Option<(&Mat, &Mat)>, round: u64, restart: u64) -> (Mat, Mat) {
        let (rows, cols) = self.problem.weights.shape();
        let radius = tau.sqrt();
        if let Some((u, v)) = warm {
            let mut u = u.clone();
            let mut v = v.clone();
            project_rows(&mut u, radius);
            project_rows(&mut v, radius);
            return (u, v);
        }
        if restart == 0 {
            // balanced SVD factors of the zero-filled observation
            let y = Mat::from_fn(rows, cols, |i, j| {
                if self.support[(i, j)] {
                    self.problem.observed.values[(i, j)]
                } else {
                    0.0
                }
            });
            let svd = y.svd(true, true);
            if let (Some(uu), Some(vt)) = (svd.u, svd.v_t) {
                let k = self.width.min(svd.singular_values.len());
                let mut u = Mat::zeros(rows, self.width);
                let mut v = Mat::zeros(cols, self.width);
                for j in 0..k {
                    let s = svd.singular_values[j].sqrt();
                    u.set_column(j, &(uu.column(j) * s));
                    v.set_column(j, &(vt.row(j).transpose() * s));
                }
                project_rows(&mut u, radius);
                project_rows(&mut v, radius);
                return (u, v);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(round * 64 + restart);
        let scale = radius / (self.width as f64).sqrt();
        let u = Mat::from_fn(rows, self.width, |_, _| rng.random_range(-1.0..1.0) * scale);
        let v = Mat::from_fn(cols, self.width, |_, _| rng.random_range(-1.0..1.0) * scale);
        (u, v)
    }

    /// Penalized objective and its gradient with respect to `M`.
    fn objective(&self, m: &Mat) -> (f64, Mat) {
        let l = self.problem.entry_bound;
        let norm = 1.0 / (l * l);
        let mut grad = Mat::zeros(m.nrows(), m.ncols());
        let mut value = 0.0;
        match self.problem.mode {
            ConstraintMode::Equality => {
                for (idx, (&x, &y)) in m.iter().zip(self.problem.observed.values.iter()).enumerate() {
                    if self.support.as_slice()[idx] {
                        let r = x - y;
                        value += 0.5 * norm * r * r;
                        grad.as_mut_slice()[idx] += norm * r;
                    }
                }
            }
            ConstraintMode::InnerProduct { slack } => {
                let gap = self.problem.inner_gap(m);
                let excess = gap.abs() - slack;
                if excess > 0.0 {
                    value += 0.5 * norm * excess * excess;
                    let g = norm * excess * gap.signum();
                    for (idx, &w) in self.problem.weights.iter().enumerate() {
                        if w > SUPPORT_TOL {
                            grad.as_mut_slice()[idx] += g * w;
                        }
                    }
                }
            }
        }
        for (idx, &x) in m.iter().enumerate() {
            let over = x.abs() - l;
            if over > 0.0 {
                value += 0.5 * BOX_PENALTY * norm * over * over;
                grad.as_mut_slice()[idx] += BOX_PENALTY * norm * over * x.signum();
            }
        }
        (value, grad)
    }

    /// Moves the constrained part onto the constraint set and clips into the
    /// box. Returns the polished matrix.
    fn polish(&self, m: &Mat) -> Mat {
        let l = self.problem.entry_bound;
        let mut out = m.map(|x| x.clamp(-l, l));
        match self.problem.mode {
            ConstraintMode::Equality => {
                for idx in 0..out.len() {
                    if self.support.as_slice()[idx] {
                        out.as_mut_slice()[idx] = self.problem.observed.values.as_slice()[idx].clamp(-l, l);
                    }
                }
            }
            ConstraintMode::InnerProduct { slack } => {
                // slide supported entries toward the (box-feasible) observation
                let gap = self.problem.inner_gap(&out);
                if gap.abs() > slack {
                    let lambda = (gap.abs() - slack) / gap.abs();
                    for idx in 0..out.len() {
                        if self.support.as_slice()[idx] {
                            let z = self.problem.observed.values.as_slice()[idx].clamp(-l, l);
                            let x = &mut out.as_mut_slice()[idx];
                            *x += lambda * (z - *x);
                        }
                    }
                }
            }
        }
        out
    }

    fn try_accept(&self, u: &Mat, v: &Mat) -> (Option<Candidate>, f64) {
        let raw = u * v.transpose();
        let raw_residual = self.problem.residual(&raw);
        let box_excess = (max_abs(&raw) - self.problem.entry_bound).max(0.0);
        let polished = self.polish(&raw);
        let correction = trivial_max_norm_bound(&(&polished - &raw));
        let score = raw_residual.max(box_excess);
        if correction > self.accept {
            return (None, score);
        }
        let residual = self.problem.residual(&polished);
        let certificate = factor_product_bound(u, v) + correction;
        (
            Some(Candidate {
                m: polished,
                certificate,
                residual,
                u: u.clone(),
                v: v.clone(),
            }),
            score,
        )
    }

    fn projected_gradient(&self, tau: f64, mut u: Mat, mut v: Mat) -> Attempt {
        let radius = tau.sqrt();
        let mut best_residual = f64::INFINITY;
        let (mut value, _) = self.objective(&(&u * v.transpose()));
        let mut step = 1.0 / (tau * (1.0 + BOX_PENALTY)).max(1e-12) * self.problem.entry_bound.powi(2);
        let (mut u_prev, mut v_prev) = (u.clone(), v.clone());
        let mut momentum = 1.0_f64;
        let mut window_start = value;

        for iter in 1..=self.config.max_iters {
            // Nesterov extrapolation, restarted whenever the objective rises
            let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / next_momentum;
            let yu = &u + (&u - &u_prev) * beta;
            let yv = &v + (&v - &v_prev) * beta;
            let (fy, g) = self.objective(&(&yu * yv.transpose()));
            let gu = &g * &yv;
            let gv = g.transpose() * &yu;

            let mut accepted = None;
            for _ in 0..30 {
                let mut nu = &yu - &gu * step;
                let mut nv = &yv - &gv * step;
                project_rows(&mut nu, radius);
                project_rows(&mut nv, radius);
                let du = &nu - &yu;
                let dv = &nv - &yv;
                let (fx, _) = self.objective(&(&nu * nv.transpose()));
                let model = fy + gu.dot(&du) + gv.dot(&dv) + (du.norm_squared() + dv.norm_squared()) / (2.0 * step);
                if fx <= model + 1e-15 {
                    accepted = Some((nu, nv, fx));
                    break;
                }
                step *= 0.5;
            }
            let (nu, nv, fx) = match accepted {
                Some(x) => x,
                None => break,
            };
            if fx > value {
                momentum = 1.0;
            } else {
                momentum = next_momentum;
            }
            u_prev = std::mem::replace(&mut u, nu);
            v_prev = std::mem::replace(&mut v, nv);
            value = fx;
            step *= 1.2;

            if iter % 20 == 0 || iter == self.config.max_iters {
                let (cand, score) = self.try_accept(&u, &v);
                best_residual = best_residual.min(score);
                if cand.is_some() {
                    return Attempt {
                        candidate: cand,
                        best_residual,
                        iterations: iter,
                    };
                }
            }
            if iter % 200 == 0 {
                // stalled well above zero: this budget is (numerically) infeasible
                if value > 1e-3 * window_start && window_start - value < 1e-4 * window_start {
                    return Attempt {
                        candidate: None,
                        best_residual,
                        iterations: iter,
                    };
                }
                window_start = value;
            }
        }
        let (cand, score) = self.try_accept(&u, &v);
        Attempt {
            candidate: cand,
            best_residual: best_residual.min(score),
            iterations: self.config.max_iters,
        }
    }
}

fn project_rows(m: &mut Mat, radius: f64) {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n > radius {
            row *= radius / n;
        }
    }
}
