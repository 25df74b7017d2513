//! Finite-horizon tabular MDPs whose transition kernels carry an explicit
//! low-rank factorization, plus exact dynamic-programming oracles.
//!
//! Matrices indexed by `(s, a)` are `S×A`. A transition slice `P_t` is stored
//! as an `S×(S·A)` matrix whose column `s·A + a` is the next-state
//! distribution `P_t(·|s,a)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix_estimation::norms::singular_values;

pub type Mat = DMatrix<f64>;

/// Entries with occupancy above this value count as supported.
pub const SUPPORT_TOL: f64 = 1e-12;

/// Which low-rank decomposition a kernel is declared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorizationForm {
    /// `P(s'|s,a) = Σ_i u_i(s',s) w_i(a)`.
    #[serde(rename = "i")]
    ActionSeparable,
    /// `P(s'|s,a) = Σ_i u_i(s) w_i(s',a)`.
    #[serde(rename = "ii")]
    StateSeparable,
    /// `P(s'|s,a) = Σ_i u_i(s') v_i(s) w_i(a)`.
    #[serde(rename = "fully_factorized")]
    FullyFactorized,
    /// `P(s'|s,a) = 1/S`.
    #[serde(rename = "uniform")]
    Uniform,
}

impl std::str::FromStr for FactorizationForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i" | "form_i" => Ok(Self::ActionSeparable),
            "ii" | "form_ii" => Ok(Self::StateSeparable),
            "fully_factorized" => Ok(Self::FullyFactorized),
            "uniform" => Ok(Self::Uniform),
            other => Err(invalid(format!("unknown factorization form `{other}`"))),
        }
    }
}

/// Declared factors of one transition slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form")]
pub enum KernelFactors {
    /// `state[i]` is `S'×S` (`u_i(s',s)`), `action[i]` has length `A`.
    #[serde(rename = "i")]
    ActionSeparable {
        state: Vec<Vec<Vec<f64>>>,
        action: Vec<Vec<f64>>,
    },
    /// `state[i]` has length `S`, `next_action[i]` is `S'×A` (`w_i(s',a)`).
    #[serde(rename = "ii")]
    StateSeparable {
        state: Vec<Vec<f64>>,
        next_action: Vec<Vec<Vec<f64>>>,
    },
    #[serde(rename = "fully_factorized")]
    FullyFactorized {
        next: Vec<Vec<f64>>,
        state: Vec<Vec<f64>>,
        action: Vec<Vec<f64>>,
    },
    #[serde(rename = "uniform")]
    Uniform,
}

impl KernelFactors {
    fn num_terms(&self) -> usize {
        match self {
            Self::ActionSeparable { action, .. } => action.len(),
            Self::StateSeparable { state, .. } => state.len(),
            Self::FullyFactorized { next, .. } => next.len(),
            Self::Uniform => 1,
        }
    }

    fn form(&self) -> FactorizationForm {
        match self {
            Self::ActionSeparable { .. } => FactorizationForm::ActionSeparable,
            Self::StateSeparable { .. } => FactorizationForm::StateSeparable,
            Self::FullyFactorized { .. } => FactorizationForm::FullyFactorized,
            Self::Uniform => FactorizationForm::Uniform,
        }
    }

    /// Dense `S×(S·A)` kernel assembled from the factors.
    pub fn reconstruct(&self, s: usize, a: usize) -> Result<Mat> {
        let mut k = Mat::zeros(s, s * a);
        let bad = || Error::DimensionMismatch("kernel factor shape".into());
        match self {
            Self::Uniform => k.fill(1.0 / s as f64),
            Self::ActionSeparable { state, action } => {
                if state.len() != action.len() {
                    return Err(bad());
                }
                for (u, w) in state.iter().zip(action) {
                    if u.len() != s || w.len() != a || u.iter().any(|r| r.len() != s) {
                        return Err(bad());
                    }
                    for sn in 0..s {
                        for sc in 0..s {
                            for ac in 0..a {
                                k[(sn, sc * a + ac)] += u[sn][sc] * w[ac];
                            }
                        }
                    }
                }
            }
            Self::StateSeparable { state, next_action } => {
                if state.len() != next_action.len() {
                    return Err(bad());
                }
                for (u, w) in state.iter().zip(next_action) {
                    if u.len() != s || w.len() != s || w.iter().any(|r| r.len() != a) {
                        return Err(bad());
                    }
                    for sn in 0..s {
                        for sc in 0..s {
                            for ac in 0..a {
                                k[(sn, sc * a + ac)] += u[sc] * w[sn][ac];
                            }
                        }
                    }
                }
            }
            Self::FullyFactorized { next, state, action } => {
                if next.len() != state.len() || next.len() != action.len() {
                    return Err(bad());
                }
                for i in 0..next.len() {
                    let (x, y, z) = (&next[i], &state[i], &action[i]);
                    if x.len() != s || y.len() != s || z.len() != a {
                        return Err(bad());
                    }
                    for sn in 0..s {
                        for sc in 0..s {
                            for ac in 0..a {
                                k[(sn, sc * a + ac)] += x[sn] * y[sc] * z[ac];
                            }
                        }
                    }
                }
            }
        }
        Ok(k)
    }
}

/// Finite-horizon MDP with low-rank rewards and factorized kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankMDP {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rank_param: usize,
    form: FactorizationForm,
    rewards: Vec<Mat>,
    factors: Vec<KernelFactors>,
    kernels: Vec<Mat>,
    initial_dist: DVector<f64>,
}

impl LowRankMDP {
    /// Builds and validates an MDP from factors. Kernels are reconstructed from
    /// the factors and checked against the distribution and rank invariants.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        rank_param: usize,
        rewards: Vec<Mat>,
        factors: Vec<KernelFactors>,
        initial_dist: DVector<f64>,
    ) -> Result<Self> {
        let (s, a) = (num_states, num_actions);
        if s == 0 || a == 0 || rewards.is_empty() {
            return Err(invalid("S, A and H must be positive"));
        }
        if rank_param < 2 {
            return Err(invalid("rank parameter d must be at least 2"));
        }
        let horizon = rewards.len();
        if factors.len() != horizon {
            return Err(Error::DimensionMismatch(format!(
                "{} reward matrices but {} kernel factorizations",
                horizon,
                factors.len()
            )));
        }
        let form = factors[0].form();
        let half = rank_param / 2;
        let mut kernels = Vec::with_capacity(horizon);
        for (t, f) in factors.iter().enumerate() {
            if f.form() != form {
                return Err(invalid("all steps must share one factorization form"));
            }
            if f.num_terms() > half {
                return Err(invalid(format!(
                    "step {t}: {} factor terms exceed floor(d/2) = {half}",
                    f.num_terms()
                )));
            }
            let k = f.reconstruct(s, a)?;
            for col in 0..s * a {
                let c = k.column(col);
                if c.iter().any(|&x| x < -1e-12) || (c.sum() - 1.0).abs() > 1e-9 {
                    return Err(invalid(format!(
                        "step {t}: P(.|s={},a={}) is not a distribution",
                        col / a,
                        col % a
                    )));
                }
            }
            kernels.push(k);
        }
        for (t, r) in rewards.iter().enumerate() {
            if r.shape() != (s, a) {
                return Err(Error::DimensionMismatch(format!("reward at step {t}")));
            }
            if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(invalid(format!("step {t}: rewards must lie in [0,1]")));
            }
            let sv = singular_values(r);
            if let Some(&s1) = sv.first() {
                if sv.iter().skip(half).any(|&x| x > 1e-8 * s1) {
                    return Err(invalid(format!(
                        "step {t}: reward rank exceeds floor(d/2) = {half}"
                    )));
                }
            }
        }
        if initial_dist.len() != s
            || initial_dist.iter().any(|&x| x < 0.0)
            || (initial_dist.sum() - 1.0).abs() > 1e-12
        {
            return Err(invalid("initial distribution must be a distribution over S"));
        }
        Ok(Self {
            num_states: s,
            num_actions: a,
            horizon,
            rank_param,
            form,
            rewards,
            factors,
            kernels,
            initial_dist,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn rank_param(&self) -> usize {
        self.rank_param
    }
    pub fn form(&self) -> FactorizationForm {
        self.form
    }
    /// Reward matrix `r_t`, zero-indexed step.
    pub fn reward(&self, t: usize) -> &Mat {
        &self.rewards[t]
    }
    pub fn rewards(&self) -> &[Mat] {
        &self.rewards
    }
    /// Dense kernel `P_t`, zero-indexed step.
    pub fn kernel(&self, t: usize) -> &Mat {
        &self.kernels[t]
    }
    pub fn factors(&self, t: usize) -> &KernelFactors {
        &self.factors[t]
    }
    pub fn initial_dist(&self) -> &DVector<f64> {
        &self.initial_dist
    }

    /// `P_t(s'|·,·)` viewed as an `S×A` matrix.
    pub fn next_state_slice(&self, t: usize, next: usize) -> Mat {
        let a = self.num_actions;
        Mat::from_fn(self.num_states, a, |s, ac| self.kernels[t][(next, s * a + ac)])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MdpDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

pub(crate) fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(n, k, |i, j| rows[i][j]))
}

/// On-disk JSON form of an MDP. Kernels are not stored; they are rebuilt from
/// the factors, which serde_json writes with round-trip-exact precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpDocument {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rank_param: usize,
    factorization_form: FactorizationForm,
    rewards: Vec<Vec<Vec<f64>>>,
    factors: Vec<KernelFactors>,
    initial_dist: Vec<f64>,
}

impl From<&LowRankMDP> for MdpDocument {
    fn from(m: &LowRankMDP) -> Self {
        Self {
            num_states: m.num_states,
            num_actions: m.num_actions,
            horizon: m.horizon,
            rank_param: m.rank_param,
            factorization_form: m.form,
            rewards: m.rewards.iter().map(rows_of).collect(),
            factors: m.factors.clone(),
            initial_dist: m.initial_dist.iter().cloned().collect(),
        }
    }
}

impl TryFrom<MdpDocument> for LowRankMDP {
    type Error = Error;
    fn try_from(doc: MdpDocument) -> Result<Self> {
        if doc.rewards.len() != doc.horizon {
            return Err(Error::DimensionMismatch("horizon vs reward count".into()));
        }
        let rewards = doc
            .rewards
            .iter()
            .map(|r| mat_from_rows(r))
            .collect::<Result<Vec<_>>>()?;
        let mdp = LowRankMDP::new(
            doc.num_states,
            doc.num_actions,
            doc.rank_param,
            rewards,
            doc.factors,
            DVector::from_vec(doc.initial_dist),
        )?;
        if mdp.form != doc.factorization_form {
            return Err(invalid("declared form does not match factors"));
        }
        Ok(mdp)
    }
}

/// Horizon-indexed row-stochastic `S×A` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    steps: Vec<Mat>,
}

#[derive(Serialize, Deserialize)]
struct PolicyDocument {
    per_step: Vec<Vec<Vec<f64>>>,
}

impl Policy {
    pub fn new(steps: Vec<Mat>) -> Result<Self> {
        if steps.is_empty() {
            return Err(invalid("policy needs at least one step"));
        }
        let shape = steps[0].shape();
        for (t, m) in steps.iter().enumerate() {
            if m.shape() != shape {
                return Err(Error::DimensionMismatch(format!("policy step {t}")));
            }
            for (s, row) in m.row_iter().enumerate() {
                if row.iter().any(|&x| x < 0.0 || !x.is_finite()) || (row.sum() - 1.0).abs() > 1e-12 {
                    return Err(invalid(format!("policy step {t}, state {s}: row not in simplex")));
                }
            }
        }
        Ok(Self { steps })
    }

    /// Uniform over all actions at every step.
    pub fn uniform(s: usize, a: usize, h: usize) -> Self {
        Self {
            steps: vec![Mat::from_element(s, a, 1.0 / a as f64); h],
        }
    }

    /// Deterministic policy from per-step action choices `actions[t][s]`.
    pub fn deterministic(actions: &[Vec<usize>], num_actions: usize) -> Result<Self> {
        let steps = actions
            .iter()
            .map(|row| {
                let mut m = Mat::zeros(row.len(), num_actions);
                for (s, &a) in row.iter().enumerate() {
                    if a >= num_actions {
                        return Err(invalid("action index out of range"));
                    }
                    m[(s, a)] = 1.0;
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
    pub fn num_states(&self) -> usize {
        self.steps[0].nrows()
    }
    pub fn num_actions(&self) -> usize {
        self.steps[0].ncols()
    }
    pub fn step(&self, t: usize) -> &Mat {
        &self.steps[t]
    }
    pub fn steps(&self) -> &[Mat] {
        &self.steps
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PolicyDocument {
            per_step: self.steps.iter().map(rows_of).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyDocument = serde_json::from_str(text)?;
        let steps = doc
            .per_step
            .iter()
            .map(|m| mat_from_rows(m))
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }

    fn check_against(&self, mdp: &LowRankMDP) -> Result<()> {
        if self.horizon() != mdp.horizon
            || self.num_states() != mdp.num_states
            || self.num_actions() != mdp.num_actions
        {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}x{}, MDP is {}x{}x{}",
                self.num_states(),
                self.num_actions(),
                self.horizon(),
                mdp.num_states,
                mdp.num_actions,
                mdp.horizon
            )));
        }
        Ok(())
    }
}

/// State-action and state occupancy measures for every step.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub state_action: Vec<Mat>,
    pub state_only: Vec<DVector<f64>>,
}

impl OccupancyMeasure {
    /// `d_t(s,a) > SUPPORT_TOL`.
    pub fn support(&self, t: usize) -> DMatrix<bool> {
        self.state_action[t].map(|x| x > SUPPORT_TOL)
    }
}

/// Forward recursion `μ_{t+1}(s') = Σ d_t(s,a) P_t(s'|s,a)`,
/// `d_t = (μ_t 1ᵀ) ∘ π_t`.
pub fn occupancy_measures(mdp: &LowRankMDP, policy: &Policy) -> Result<OccupancyMeasure> {
    policy.check_against(mdp)?;
    let (s, a) = (mdp.num_states, mdp.num_actions);
    let mut mu = mdp.initial_dist.clone();
    let mut state_action = Vec::with_capacity(mdp.horizon);
    let mut state_only = Vec::with_capacity(mdp.horizon);
    for t in 0..mdp.horizon {
        let pi = policy.step(t);
        let d = Mat::from_fn(s, a, |i, j| mu[i] * pi[(i, j)]);
        if t + 1 < mdp.horizon {
            let flat = DVector::from_fn(s * a, |k, _| d[(k / a, k % a)]);
            mu = mdp.kernel(t) * flat;
        }
        state_only.push(DVector::from_fn(s, |i, _| d.row(i).sum()));
        state_action.push(d);
    }
    Ok(OccupancyMeasure {
        state_action,
        state_only,
    })
}

/// Dense `S×A` matrix with an explicit definedness mask. Undefined entries
/// hold NaN so accidental use poisons downstream arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialMatrix {
    pub values: Mat,
    pub defined: DMatrix<bool>,
}

impl PartialMatrix {
    pub fn get(&self, s: usize, a: usize) -> Option<f64> {
        self.defined[(s, a)].then(|| self.values[(s, a)])
    }

    pub fn full(values: Mat) -> Self {
        let defined = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self { values, defined }
    }
}

/// Read access to a (possibly partial) transition slice.
pub trait TransitionKernel {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// `P(·|s,a)` or `None` where the kernel is undefined.
    fn next_state_dist(&self, s: usize, a: usize) -> Option<nalgebra::DVectorView<'_, f64>>;
    /// Step index used in error reports.
    fn step(&self) -> usize {
        0
    }
}

/// A dense, everywhere-defined kernel borrowed from an MDP.
pub struct DenseKernel<'a> {
    pub kernel: &'a Mat,
    pub num_actions: usize,
    pub step: usize,
}

impl<'a> DenseKernel<'a> {
    pub fn of(mdp: &'a LowRankMDP, t: usize) -> Self {
        Self {
            kernel: mdp.kernel(t),
            num_actions: mdp.num_actions,
            step: t,
        }
    }
}

impl TransitionKernel for DenseKernel<'_> {
    fn num_states(&self) -> usize {
        self.kernel.nrows()
    }
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn next_state_dist(&self, s: usize, a: usize) -> Option<nalgebra::DVectorView<'_, f64>> {
        Some(self.kernel.column(s * self.num_actions + a))
    }
    fn step(&self) -> usize {
        self.step
    }
}

/// One Bellman backup `(Bf)(s,a) = r(s,a) + Σ_{s',a'} P(s'|s,a) π(a'|s') f(s',a')`.
///
/// `next_policy = None` means there is no continuation (the last step), in
/// which case the result is `r`. When `support` is given only those entries
/// are computed; the rest are marked undefined. Requesting an entry where the
/// kernel is undefined is an [`Error::OffSupport`].
pub fn bellman_apply(
    kernel: &dyn TransitionKernel,
    reward: &Mat,
    next_policy: Option<&Mat>,
    f: &Mat,
    support: Option<&DMatrix<bool>>,
) -> Result<PartialMatrix> {
    let (s, a) = (kernel.num_states(), kernel.num_actions());
    if reward.shape() != (s, a) || f.shape() != (s, a) {
        return Err(Error::DimensionMismatch("bellman_apply operand shapes".into()));
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err(invalid("bellman_apply: f has non-finite entries"));
    }
    let continuation: Option<DVector<f64>> = match next_policy {
        Some(pi) => {
            if pi.shape() != (s, a) {
                return Err(Error::DimensionMismatch("next policy shape".into()));
            }
            Some(DVector::from_fn(s, |sn, _| pi.row(sn).dot(&f.row(sn))))
        }
        None => None,
    };
    let mut values = Mat::from_element(s, a, f64::NAN);
    let mut defined = DMatrix::from_element(s, a, false);
    for si in 0..s {
        for ai in 0..a {
            if let Some(mask) = support {
                if !mask[(si, ai)] {
                    continue;
                }
            }
            let cont = match &continuation {
                Some(c) => match kernel.next_state_dist(si, ai) {
                    Some(p) => p.dot(c),
                    None => {
                        return Err(Error::OffSupport {
                            step: kernel.step(),
                            state: si,
                            action: ai,
                        })
                    }
                },
                None => 0.0,
            };
            values[(si, ai)] = reward[(si, ai)] + cont;
            defined[(si, ai)] = true;
        }
    }
    Ok(PartialMatrix { values, defined })
}

/// `Q_t^π` for every step by backward induction with the true kernel.
pub fn exact_q_values(mdp: &LowRankMDP, policy: &Policy) -> Result<Vec<Mat>> {
    policy.check_against(mdp)?;
    let (s, a, h) = (mdp.num_states, mdp.num_actions, mdp.horizon);
    let mut q = vec![Mat::zeros(s, a); h];
    let zero = Mat::zeros(s, a);
    for t in (0..h).rev() {
        let (next_pi, f) = if t + 1 < h {
            (Some(policy.step(t + 1)), &q[t + 1])
        } else {
            (None, &zero)
        };
        q[t] = bellman_apply(&DenseKernel::of(mdp, t), mdp.reward(t), next_pi, f, None)?.values;
    }
    Ok(q)
}

/// `Σ_{s,a} μ₁(s) π₁(a|s) M(s,a)`.
pub fn initial_value(mu1: &DVector<f64>, pi1: &Mat, m: &Mat) -> f64 {
    let mut total = 0.0;
    for s in 0..m.nrows() {
        total += mu1[s] * pi1.row(s).dot(&m.row(s));
    }
    total
}

/// Expected return, computed both from `Q₁` and from occupancy-weighted
/// rewards.
///
/// # Panics
/// If the two routes disagree by more than `1e-10`.
pub fn exact_return(mdp: &LowRankMDP, policy: &Policy) -> Result<f64> {
    let q = exact_q_values(mdp, policy)?;
    let via_q = initial_value(&mdp.initial_dist, policy.step(0), &q[0]);
    let occ = occupancy_measures(mdp, policy)?;
    let via_occ: f64 = occ
        .state_action
        .iter()
        .zip(&mdp.rewards)
        .map(|(d, r)| d.dot(r))
        .sum();
    assert!(
        (via_q - via_occ).abs() <= 1e-10,
        "return identity violated: {via_q} vs {via_occ}"
    );
    Ok(via_q)
}

/// Seeded generator of valid low-rank MDPs.
///
/// Rewards are `X Yᵀ` with uniform `[0,1]` factors of width `⌊d/2⌋`, rescaled
/// so the largest entry is 1. Kernels are drawn in the requested form with
/// uniform factors normalized so each `P_t(·|s,a)` sums to one.
pub fn random_low_rank_mdp(
    s: usize,
    a: usize,
    h: usize,
    d: usize,
    seed: u64,
    form: FactorizationForm,
) -> Result<LowRankMDP> {
    if s == 0 || a == 0 || h == 0 {
        return Err(invalid("S, A and H must be at least 1"));
    }
    if d < 2 || d > 2 * s.min(a) {
        return Err(invalid(format!(
            "rank parameter d = {d} must lie in [2, 2·min(S,A)] = [2, {}]",
            2 * s.min(a)
        )));
    }
    let half = d / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unif = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>()).collect() };

    let mut rewards = Vec::with_capacity(h);
    let mut factors = Vec::with_capacity(h);
    for _ in 0..h {
        let x = Mat::from_vec(s, half, unif(s * half));
        let y = Mat::from_vec(a, half, unif(a * half));
        let mut r = &x * y.transpose();
        let top = r.max();
        if top > 0.0 {
            r /= top;
        }
        rewards.push(r);

        let f = match form {
            FactorizationForm::Uniform => KernelFactors::Uniform,
            FactorizationForm::ActionSeparable => {
                // w(a) is a distribution over terms, u_i(·,s) a distribution over s'
                let mut action: Vec<Vec<f64>> = vec![vec![0.0; a]; half];
                for ac in 0..a {
                    let w = normalized(unif(half));
                    for i in 0..half {
                        action[i][ac] = w[i];
                    }
                }
                let state = (0..half)
                    .map(|_| {
                        let cols: Vec<Vec<f64>> = (0..s).map(|_| normalized(unif(s))).collect();
                        (0..s).map(|sn| (0..s).map(|sc| cols[sc][sn]).collect()).collect()
                    })
                    .collect();
                KernelFactors::ActionSeparable { state, action }
            }
            FactorizationForm::StateSeparable => {
                let mut state: Vec<Vec<f64>> = vec![vec![0.0; s]; half];
                for sc in 0..s {
                    let u = normalized(unif(half));
                    for i in 0..half {
                        state[i][sc] = u[i];
                    }
                }
                let next_action = (0..half)
                    .map(|_| {
                        let cols: Vec<Vec<f64>> = (0..a).map(|_| normalized(unif(s))).collect();
                        (0..s).map(|sn| (0..a).map(|ac| cols[ac][sn]).collect()).collect()
                    })
                    .collect();
                KernelFactors::StateSeparable { state, next_action }
            }
            FactorizationForm::FullyFactorized => {
                // convex mixture (1 − Σλ_i) u_0 + Σ λ_i u_i with product weights
                // λ_i(s,a) = v_i(s) w_i(a) / (d'−1), written as d' product terms
                let base = normalized(unif(s));
                let mut next = vec![base.clone()];
                let mut state = vec![vec![1.0; s]];
                let mut action = vec![vec![1.0; a]];
                let scale = 1.0 / (half.max(2) - 1) as f64;
                for _ in 1..half {
                    let u = normalized(unif(s));
                    next.push(u.iter().zip(&base).map(|(x, b)| x - b).collect());
                    state.push(unif(s));
                    action.push(unif(a).into_iter().map(|w| w * scale).collect());
                }
                KernelFactors::FullyFactorized { next, state, action }
            }
        };
        factors.push(f);
    }
    let mu1 = DVector::from_vec(normalized(unif(s)));
    LowRankMDP::new(s, a, d, rewards, factors, mu1)
}

pub(crate) fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        let n = v.len() as f64;
        v.iter_mut().for_each(|x| *x = 1.0 / n);
    } else {
        v.iter_mut().for_each(|x| *x /= total);
    }
    v
}

/// Random policy whose rows are uniform `[0,1]` draws normalized to the
/// simplex.
pub fn random_policy(s: usize, a: usize, h: usize, seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (0..h)
        .map(|_| {
            let mut m = Mat::zeros(s, a);
            for si in 0..s {
                let row = normalized((0..a).map(|_| rng.random::<f64>()).collect());
                for ai in 0..a {
                    m[(si, ai)] = row[ai];
                }
            }
            m
        })
        .collect();
    Policy { steps }
}

/// Policy that, at each step and state, randomizes uniformly over a random
/// subset of `m` actions.
pub fn random_subset_policy(s: usize, a: usize, h: usize, m: usize, seed: u64) -> Result<Policy> {
    if m == 0 || m > a {
        return Err(invalid(format!("support size {m} must lie in [1, {a}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (0..h)
        .map(|_| {
            let mut mat = Mat::zeros(s, a);
            for si in 0..s {
                for ai in rand::seq::index::sample(&mut rng, a, m) {
                    mat[(si, ai)] = 1.0 / m as f64;
                }
            }
            mat
        })
        .collect();
    Ok(Policy { steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_mdp() -> LowRankMDP {
        // S=2, A=1: state 0 always moves to state 1 and stays there
        let u = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let f = KernelFactors::ActionSeparable {
            state: vec![u],
            action: vec![vec![1.0]],
        };
        LowRankMDP::new(
            2,
            1,
            2,
            vec![Mat::from_element(2, 1, 0.5), Mat::from_element(2, 1, 1.0)],
            vec![f.clone(), f],
            DVector::from_vec(vec![1.0, 0.0]),
        )
        .unwrap()
    }

    #[test]
    fn uniform_kernel_entries() {
        let m = random_low_rank_mdp(3, 3, 2, 2, 7, FactorizationForm::Uniform).unwrap();
        for t in 0..2 {
            assert!(m.kernel(t).iter().all(|&x| x == 1.0 / 3.0));
        }
    }

    #[test]
    fn form_i_reconstruction() {
        let m = random_low_rank_mdp(5, 4, 3, 4, 1, FactorizationForm::ActionSeparable).unwrap();
        for t in 0..3 {
            let rec = m.factors(t).reconstruct(5, 4).unwrap();
            assert!((rec - m.kernel(t)).amax() < 1e-9);
        }
    }

    #[test]
    fn fully_factorized_slices_are_rank_one() {
        let m = random_low_rank_mdp(6, 6, 2, 2, 3, FactorizationForm::FullyFactorized).unwrap();
        for t in 0..2 {
            for sn in 0..6 {
                let sv = singular_values(&m.next_state_slice(t, sn));
                assert!(sv[1] / sv[0] < 1e-8, "{sv:?}");
            }
        }
    }

    #[test]
    fn every_form_satisfies_invariants() {
        for form in [
            FactorizationForm::ActionSeparable,
            FactorizationForm::StateSeparable,
            FactorizationForm::FullyFactorized,
            FactorizationForm::Uniform,
        ] {
            for d in [2, 4, 6] {
                let m = random_low_rank_mdp(5, 4, 3, d, 11, form).unwrap();
                for t in 0..3 {
                    for sn in 0..5 {
                        let sv = singular_values(&m.next_state_slice(t, sn));
                        let big = sv.iter().filter(|&&x| x > 1e-8 * sv[0]).count();
                        assert!(big <= d / 2, "{form:?} d={d}");
                    }
                }
            }
        }
    }

    #[test]
    fn rank_param_limits() {
        assert!(matches!(
            random_low_rank_mdp(3, 2, 1, 6, 0, FactorizationForm::Uniform),
            Err(Error::InvalidArgument(_))
        ));
        assert!(random_low_rank_mdp(3, 2, 1, 1, 0, FactorizationForm::Uniform).is_err());
        assert!(random_low_rank_mdp(3, 2, 1, 4, 0, FactorizationForm::Uniform).is_ok());
    }

    #[test]
    fn uniform_kernel_makes_state_occupancy_uniform() {
        let m = random_low_rank_mdp(4, 3, 4, 2, 5, FactorizationForm::Uniform).unwrap();
        let pi = random_policy(4, 3, 4, 9);
        let occ = occupancy_measures(&m, &pi).unwrap();
        for t in 1..4 {
            assert!(occ.state_only[t].iter().all(|&x| (x - 0.25).abs() < 1e-12));
        }
        for t in 0..4 {
            assert!((occ.state_action[t].sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_step_occupancy_is_product() {
        let m = random_low_rank_mdp(3, 4, 1, 2, 2, FactorizationForm::StateSeparable).unwrap();
        let pi = random_policy(3, 4, 1, 4);
        let occ = occupancy_measures(&m, &pi).unwrap();
        for s in 0..3 {
            for a in 0..4 {
                assert_eq!(occ.state_action[0][(s, a)], m.initial_dist()[s] * pi.step(0)[(s, a)]);
            }
        }
    }

    #[test]
    fn deterministic_chain_point_mass() {
        let m = chain_mdp();
        let pi = Policy::uniform(2, 1, 2);
        let occ = occupancy_measures(&m, &pi).unwrap();
        assert_eq!(occ.state_action[1][(1, 0)], 1.0);
        assert_eq!(occ.state_action[1][(0, 0)], 0.0);
        assert!((exact_return(&m, &pi).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn terminal_q_is_reward_and_constant_rewards_telescope() {
        let base = random_low_rank_mdp(3, 3, 3, 2, 1, FactorizationForm::Uniform).unwrap();
        let pi = random_policy(3, 3, 3, 2);
        let q = exact_q_values(&base, &pi).unwrap();
        assert_eq!(&q[2], base.reward(2));

        let ones = LowRankMDP::new(
            3,
            3,
            2,
            vec![Mat::from_element(3, 3, 1.0); 3],
            vec![KernelFactors::Uniform; 3],
            DVector::from_element(3, 1.0 / 3.0),
        )
        .unwrap();
        let q = exact_q_values(&ones, &pi).unwrap();
        for t in 0..3 {
            assert!(q[t].iter().all(|&x| (x - (3 - t) as f64).abs() < 1e-12));
        }
        assert!((exact_return(&ones, &pi).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rewards_give_zero_return() {
        let m = LowRankMDP::new(
            2,
            2,
            2,
            vec![Mat::zeros(2, 2); 2],
            vec![KernelFactors::Uniform; 2],
            DVector::from_vec(vec![0.5, 0.5]),
        )
        .unwrap();
        assert_eq!(exact_return(&m, &Policy::uniform(2, 2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn bellman_zero_f_returns_reward() {
        let m = random_low_rank_mdp(4, 3, 2, 4, 3, FactorizationForm::ActionSeparable).unwrap();
        let pi = random_policy(4, 3, 2, 1);
        let zero = Mat::zeros(4, 3);
        let out = bellman_apply(&DenseKernel::of(&m, 0), m.reward(0), Some(pi.step(1)), &zero, None).unwrap();
        assert_eq!(&out.values, m.reward(0));
        let last = bellman_apply(&DenseKernel::of(&m, 1), m.reward(1), None, &zero, None).unwrap();
        assert_eq!(&last.values, m.reward(1));
    }

    #[test]
    fn bellman_support_marks_undefined() {
        let m = random_low_rank_mdp(3, 2, 2, 2, 3, FactorizationForm::Uniform).unwrap();
        let mut mask = DMatrix::from_element(3, 2, false);
        mask[(1, 0)] = true;
        let out = bellman_apply(&DenseKernel::of(&m, 0), m.reward(0), None, &Mat::zeros(3, 2), Some(&mask)).unwrap();
        assert!(out.get(1, 0).is_some());
        assert!(out.get(0, 0).is_none());
        assert!(out.values[(0, 0)].is_nan());
    }

    #[test]
    fn json_round_trip_is_exact() {
        for form in [
            FactorizationForm::ActionSeparable,
            FactorizationForm::StateSeparable,
            FactorizationForm::FullyFactorized,
            FactorizationForm::Uniform,
        ] {
            let m = random_low_rank_mdp(4, 3, 2, 4, 17, form).unwrap();
            let text = m.to_json().unwrap();
            let back = LowRankMDP::from_json(&text).unwrap();
            assert_eq!(m, back);
            assert_eq!(text, back.to_json().unwrap());
        }
    }

    #[test]
    fn invalid_kernel_is_rejected() {
        let f = KernelFactors::ActionSeparable {
            state: vec![vec![vec![0.5, 0.5], vec![0.6, 0.5]]],
            action: vec![vec![1.0]],
        };
        let err = LowRankMDP::new(2, 1, 2, vec![Mat::zeros(2, 1)], vec![f], DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
