//! Offline datasets sampled from a behavior policy and the empirical model
//! built from them.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::{LowRankMDP, Mat, PartialMatrix, Policy, TransitionKernel};

/// One observed `(s_t, a_t, r_t)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// `K` trajectories of length `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub seed: u64,
    pub trajectories: Vec<Vec<Transition>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    seed: u64,
    num_trajectories: usize,
}

fn draw(dist: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in dist.enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    last
}

/// Draws `K` independent trajectories. Trajectory `k` uses its own ChaCha
/// stream `k` under the common seed, so the output does not depend on how the
/// work is scheduled across threads.
pub fn sample_trajectories(mdp: &LowRankMDP, behavior: &Policy, k: usize, seed: u64) -> Result<OfflineDataset> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if behavior.horizon() != mdp.horizon()
        || behavior.num_states() != mdp.num_states()
        || behavior.num_actions() != mdp.num_actions()
    {
        return Err(Error::DimensionMismatch("behavior policy vs MDP".into()));
    }
    let (na, h) = (mdp.num_actions(), mdp.horizon());
    let trajectories = (0..k)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let mut traj = Vec::with_capacity(h);
            let mut s = draw(mdp.initial_dist().iter().cloned(), rng.random());
            for t in 0..h {
                let a = draw(behavior.step(t).row(s).iter().cloned(), rng.random());
                traj.push(Transition {
                    state: s,
                    action: a,
                    reward: mdp.reward(t)[(s, a)],
                });
                if t + 1 < h {
                    s = draw(mdp.kernel(t).column(s * na + a).iter().cloned(), rng.random());
                }
            }
            traj
        })
        .collect();
    Ok(OfflineDataset {
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        horizon: h,
        seed,
        trajectories,
    })
}

impl OfflineDataset {
    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    /// Writes a `#`-prefixed JSON header line followed by `k,t,s,a,r` rows
    /// (all indices zero-based).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DatasetHeader {
            num_states: self.num_states,
            num_actions: self.num_actions,
            horizon: self.horizon,
            seed: self.seed,
            num_trajectories: self.trajectories.len(),
        };
        writeln!(w, "# {}", serde_json::to_string(&header)?)?;
        writeln!(w, "k,t,s,a,r")?;
        for (k, traj) in self.trajectories.iter().enumerate() {
            for (t, x) in traj.iter().enumerate() {
                writeln!(w, "{k},{t},{},{},{}", x.state, x.action, x.reward)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))??;
        let json = first
            .strip_prefix('#')
            .ok_or_else(|| Error::Parse("missing `#` JSON header line".into()))?;
        let header: DatasetHeader = serde_json::from_str(json.trim())?;
        let cols = lines.next().ok_or_else(|| Error::Parse("missing column header".into()))??;
        if cols.trim() != "k,t,s,a,r" {
            return Err(Error::Parse(format!("unexpected columns `{cols}`")));
        }
        let blank = Transition {
            state: usize::MAX,
            action: usize::MAX,
            reward: f64::NAN,
        };
        let mut trajectories = vec![vec![blank; header.horizon]; header.num_trajectories];
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = || Error::Parse(format!("dataset row {}: `{line}`", lineno + 3));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(parse_err());
            }
            let idx = |i: usize| f[i].trim().parse::<usize>().map_err(|_| parse_err());
            let (k, t, s, a) = (idx(0)?, idx(1)?, idx(2)?, idx(3)?);
            let reward: f64 = f[4].trim().parse().map_err(|_| parse_err())?;
            if k >= header.num_trajectories || t >= header.horizon || s >= header.num_states || a >= header.num_actions {
                return Err(parse_err());
            }
            trajectories[k][t] = Transition { state: s, action: a, reward };
        }
        if trajectories.iter().flatten().any(|x| x.state == usize::MAX) {
            return Err(Error::Parse("dataset is missing (k, t) rows".into()));
        }
        Ok(Self {
            num_states: header.num_states,
            num_actions: header.num_actions,
            horizon: header.horizon,
            seed: header.seed,
            trajectories,
        })
    }
}

/// Empirical transition kernel, defined only at pairs with `n_t(s,a) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalKernel {
    /// `S×(S·A)`; undefined columns hold NaN.
    probs: Mat,
    defined: Vec<bool>,
    num_actions: usize,
    step: usize,
}

impl EmpiricalKernel {
    pub fn is_defined(&self, s: usize, a: usize) -> bool {
        self.defined[s * self.num_actions + a]
    }
}

impl TransitionKernel for EmpiricalKernel {
    fn num_states(&self) -> usize {
        self.probs.nrows()
    }
    fn num_actions(&self) -> usize {
        self.num_actions
    }
    fn next_state_dist(&self, s: usize, a: usize) -> Option<nalgebra::DVectorView<'_, f64>> {
        let col = s * self.num_actions + a;
        self.defined[col].then(|| self.probs.column(col))
    }
    fn step(&self) -> usize {
        self.step
    }
}

/// Visitation counts, empirical occupancy and empirical kernels.
///
/// The kernel at the last step is undefined everywhere: trajectories end
/// there and no successor is observed.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalModel {
    pub num_trajectories: usize,
    pub counts: Vec<DMatrix<u64>>,
    pub empirical_occupancy: Vec<Mat>,
    pub empirical_kernel: Vec<EmpiricalKernel>,
    /// Rewards as observed in the data; defined where `n_t(s,a) > 0`.
    pub observed_reward: Vec<PartialMatrix>,
}

pub fn empirical_model(dataset: &OfflineDataset) -> Result<EmpiricalModel> {
    let k = dataset.num_trajectories();
    if k == 0 {
        return Err(invalid("empty dataset"));
    }
    let (s, a, h) = (dataset.num_states, dataset.num_actions, dataset.horizon);
    let mut counts = vec![DMatrix::<u64>::zeros(s, a); h];
    let mut next_counts = vec![DMatrix::<u64>::zeros(s, s * a); h];
    let mut reward = vec![Mat::from_element(s, a, f64::NAN); h];
    for traj in &dataset.trajectories {
        if traj.len() != h {
            return Err(Error::DimensionMismatch("trajectory length".into()));
        }
        for t in 0..h {
            let x = traj[t];
            counts[t][(x.state, x.action)] += 1;
            reward[t][(x.state, x.action)] = x.reward;
            if t + 1 < h {
                next_counts[t][(traj[t + 1].state, x.state * a + x.action)] += 1;
            }
        }
    }
    let empirical_occupancy = counts.iter().map(|n| n.map(|c| c as f64 / k as f64)).collect();
    let empirical_kernel = (0..h)
        .map(|t| {
            let mut probs = Mat::from_element(s, s * a, f64::NAN);
            let mut defined = vec![false; s * a];
            if t + 1 < h {
                for col in 0..s * a {
                    let n = counts[t][(col / a, col % a)];
                    if n > 0 {
                        defined[col] = true;
                        for sn in 0..s {
                            probs[(sn, col)] = next_counts[t][(sn, col)] as f64 / n as f64;
                        }
                    }
                }
            }
            EmpiricalKernel {
                probs,
                defined,
                num_actions: a,
                step: t,
            }
        })
        .collect();
    let observed_reward = reward
        .into_iter()
        .zip(&counts)
        .map(|(values, n)| PartialMatrix {
            values,
            defined: n.map(|c| c > 0),
        })
        .collect();
    Ok(EmpiricalModel {
        num_trajectories: k,
        counts,
        empirical_occupancy,
        empirical_kernel,
        observed_reward,
    })
}

/// Empirical state frequencies `μ̂_t`.
pub fn state_frequencies(model: &EmpiricalModel, t: usize) -> DVector<f64> {
    let d = &model.empirical_occupancy[t];
    DVector::from_fn(d.nrows(), |s, _| d.row(s).sum())
}
