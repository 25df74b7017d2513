use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lowrank_ope::data::{sample_trajectories, state_frequencies, empirical_model, OfflineDataset};
use lowrank_ope::discrepancy::{
    empirical_operator_discrepancy, operator_discrepancy, policy_operator_discrepancy, DiscrepancyConfig,
};
use lowrank_ope::experiment::{run_experiment, ExperimentConfig, ExperimentKind};
use lowrank_ope::matrix_estimation::SolverConfig;
use lowrank_ope::mdp::{exact_return, random_low_rank_mdp, random_policy, random_subset_policy, FactorizationForm};
use lowrank_ope::ope::{
    bound_finite, bound_infinite, evaluate_policy_finite, evaluate_policy_infinite, SlackConfig, SlackRule,
};
use lowrank_ope::policy_opt::{build_candidate_set, optimize_policy, suboptimality_bound};
use lowrank_ope::{LowRankMDP, Mat, Policy};

#[derive(Parser)]
#[command(name = "lowrank-ope", version, about = "Off-policy evaluation for low-rank tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the value of a target policy.
    Evaluate(EvaluateArgs),
    /// Pick the best policy from a budgeted candidate set.
    Optimize(OptimizeArgs),
    /// Operator discrepancy between two distributions or two policy steps.
    Discrepancy(DiscrepancyArgs),
    /// Run a batch experiment and write a CSV table.
    Experiment(ExperimentArgs),
    /// Write a random low-rank MDP as JSON.
    GenerateMdp(GenerateMdpArgs),
    /// Write a random policy as JSON.
    GeneratePolicy(GeneratePolicyArgs),
    /// Sample an offline dataset from an MDP and a behavior policy.
    Sample(SampleArgs),
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// Feasibility tolerance of the matrix-estimation solver.
    #[arg(long, default_value_t = 1e-7)]
    me_tol: f64,
    #[arg(long, default_value_t = 3000)]
    me_max_iters: usize,
    #[arg(long, default_value_t = 3)]
    me_restarts: usize,
    /// Factor width (default min(S, A)).
    #[arg(long)]
    me_factor_rank: Option<usize>,
    /// Bisection tolerance (default 1e-4·L).
    #[arg(long)]
    me_bisect_tol: Option<f64>,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            max_iters: self.me_max_iters,
            tol: self.me_tol,
            bisect_tol: self.me_bisect_tol,
            restarts: self.me_restarts,
            factor_rank: self.me_factor_rank,
            ..SolverConfig::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Infinite,
    Finite,
}

#[derive(Clone, Copy, ValueEnum)]
enum SlackArg {
    Oracle,
    Plugin,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// MDP JSON; required in infinite mode and for oracle slack.
    #[arg(long)]
    mdp: Option<PathBuf>,
    /// Behavior policy JSON; required in infinite mode.
    #[arg(long)]
    behavior: Option<PathBuf>,
    /// Dataset CSV; required in finite mode.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_enum, default_value = "plugin")]
    slack: SlackArg,
    /// Multiplier of the plug-in slack.
    #[arg(long, default_value_t = 1.0)]
    slack_c: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Constant of the finite-sample bound.
    #[arg(long = "bound-c", default_value_t = 1.0)]
    bound_c: f64,
    /// Rank parameter d when no MDP is given (default min(S, A)).
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    behavior: PathBuf,
    /// Comma-separated budgets B_1,...,B_H.
    #[arg(long, value_delimiter = ',', required = true)]
    budget: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    n_candidates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Oracle MDP: enables oracle slack and reports true values.
    #[arg(long)]
    mdp: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "plugin")]
    slack: SlackArg,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long = "bound-c", default_value_t = 1.0)]
    bound_c: f64,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct DiscrepancyArgs {
    /// JSON matrix (array of rows) for p, or the behavior policy step.
    #[arg(long)]
    p: PathBuf,
    /// JSON matrix for q, or the target policy step.
    #[arg(long)]
    q: PathBuf,
    /// Treat the inputs as policy steps (row-stochastic).
    #[arg(long)]
    policy: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, required_unless_present = "list")]
    config: Option<PathBuf>,
    /// Output CSV (defaults to the config's `output`, else stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// List experiment kinds and exit.
    #[arg(long)]
    list: bool,
    /// Exit nonzero when the experiment reports violations.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct GenerateMdpArgs {
    #[arg(long = "states", short = 'S')]
    states: usize,
    #[arg(long = "actions", short = 'A')]
    actions: usize,
    #[arg(long = "horizon", short = 'H')]
    horizon: usize,
    #[arg(long, short = 'd', default_value_t = 2)]
    d: usize,
    #[arg(long, default_value = "i")]
    form: FactorizationForm,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GeneratePolicyArgs {
    #[arg(long = "states", short = 'S')]
    states: usize,
    #[arg(long = "actions", short = 'A')]
    actions: usize,
    #[arg(long = "horizon", short = 'H')]
    horizon: usize,
    /// Uniform over a random subset of this many actions per state; full
    /// random support otherwise.
    #[arg(long)]
    support: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    behavior: PathBuf,
    #[arg(long = "trajectories", short = 'K')]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn read_mdp(path: &Path) -> Result<LowRankMDP> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(LowRankMDP::from_json(&text)?)
}

fn read_policy(path: &Path) -> Result<Policy> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Policy::from_json(&text)?)
}

fn read_dataset(path: &Path) -> Result<OfflineDataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(OfflineDataset::read_csv(BufReader::new(file))?)
}

fn read_matrix(path: &Path) -> Result<Mat> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text)?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        bail!("{} is not a nonempty rectangular matrix", path.display());
    }
    Ok(Mat::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}

fn emit(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => print_stdout(&(text + "\n"))?,
    }
    Ok(())
}

/// Writes to stdout, treating a closed pipe (e.g. `| head`) as success.
fn print_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn slack_config(rule: SlackArg, c: f64, delta: f64) -> SlackConfig {
    SlackConfig {
        rule: match rule {
            SlackArg::Oracle => SlackRule::Oracle,
            SlackArg::Plugin => SlackRule::PlugIn,
        },
        c,
        delta,
    }
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let target = read_policy(&args.target)?;
    let mdp = args.mdp.as_deref().map(read_mdp).transpose()?;
    let behavior = args.behavior.as_deref().map(read_policy).transpose()?;
    let solver = args.solver.config();
    let (mode, run, k) = match args.mode {
        ModeArg::Infinite => {
            let (Some(mdp), Some(beta)) = (&mdp, &behavior) else {
                bail!("infinite mode needs --mdp and --behavior");
            };
            ("infinite", evaluate_policy_infinite(mdp, beta, &target, &solver)?, None)
        }
        ModeArg::Finite => {
            let Some(path) = &args.dataset else {
                bail!("finite mode needs --dataset");
            };
            let data = read_dataset(path)?;
            let slack = slack_config(args.slack, args.slack_c, args.delta);
            let rank = match (&mdp, args.rank) {
                (_, Some(r)) => r,
                (Some(m), None) => m.rank_param(),
                (None, None) => data.num_states.min(data.num_actions),
            };
            let mu1 = match &mdp {
                Some(m) => m.initial_dist().clone(),
                None => state_frequencies(&empirical_model(&data)?, 0),
            };
            let run = evaluate_policy_finite(&data, &target, &mu1, rank, &solver, &slack, mdp.as_ref())?;
            ("finite", run, Some(data.num_trajectories()))
        }
    };
    let mut report = json!({
        "mode": mode,
        "estimate": run.estimate,
        "diagnostics": run.diagnostics,
    });
    if let Some(mdp) = &mdp {
        let truth = exact_return(mdp, &target)?;
        report["true_value"] = json!(truth);
        report["error"] = json!((run.estimate - truth).abs());
        if let Some(beta) = &behavior {
            report["bound_infinite"] = json!(bound_infinite(mdp, beta, &target, &DiscrepancyConfig::default())?);
            if let Some(k) = k {
                report["bound_finite"] = json!(bound_finite(mdp, beta, &target, k, args.delta, args.bound_c)?);
            }
        }
    }
    emit(args.out.as_deref(), &report)
}

fn optimize(args: OptimizeArgs) -> Result<()> {
    let data = read_dataset(&args.dataset)?;
    let behavior = read_policy(&args.behavior)?;
    let mdp = args.mdp.as_deref().map(read_mdp).transpose()?;
    let rank = match (&mdp, args.rank) {
        (_, Some(r)) => r,
        (Some(m), None) => m.rank_param(),
        (None, None) => data.num_states.min(data.num_actions),
    };
    let set = build_candidate_set(&behavior, &args.budget, rank, args.n_candidates, args.seed)?;
    let mu1 = match &mdp {
        Some(m) => m.initial_dist().clone(),
        None => state_frequencies(&empirical_model(&data)?, 0),
    };
    let slack = slack_config(args.slack, 1.0, args.delta);
    let result = optimize_policy(&data, &set, &mu1, &args.solver.config(), &slack, mdp.as_ref())?;
    let bound = suboptimality_bound(&set, data.num_trajectories(), args.delta, args.bound_c);
    let selected: serde_json::Value = serde_json::from_str(&result.best.to_json()?)?;
    let mut report = json!({
        "selected_index": result.best_index,
        "selected_policy": selected,
        "estimates": result.estimates,
        "n_candidates": set.len(),
        "budget_too_tight": set.budget_too_tight,
        "suboptimality_bound": bound,
    });
    if let Some(mdp) = &mdp {
        let values = set
            .policies
            .iter()
            .map(|p| exact_return(mdp, p))
            .collect::<lowrank_ope::Result<Vec<f64>>>()?;
        report["true_values"] = json!(values);
    }
    emit(args.out.as_deref(), &report)
}

fn discrepancy(args: DiscrepancyArgs) -> Result<()> {
    let p = read_matrix(&args.p)?;
    let q = read_matrix(&args.q)?;
    let config = DiscrepancyConfig {
        seed: args.seed,
        ..DiscrepancyConfig::default()
    };
    let report = if args.policy {
        let r = policy_operator_discrepancy(&p, &q, &config)?;
        json!({
            "value": r.value,
            "certificate_gap": r.certificate_gap,
            "converged": r.converged,
            "iterations": r.iterations,
            "minimizer": r.minimizer.row_iter().map(|row| row.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    } else {
        let r = operator_discrepancy(&p, &q, &config)?;
        json!({
            "value": r.value,
            "empirical": empirical_operator_discrepancy(&p, &q)?,
            "certificate_gap": r.certificate_gap,
            "converged": r.converged,
            "iterations": r.iterations,
            "minimizer": r.minimizer.row_iter().map(|row| row.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    };
    emit(args.out.as_deref(), &report)
}

fn experiment(args: ExperimentArgs) -> Result<ExitCode> {
    if args.list {
        for k in ExperimentKind::ALL {
            print_stdout(&format!("{:<18} {}\n", k.name(), k.description()))?;
        }
        return Ok(ExitCode::SUCCESS);
    }
    let path = args.config.expect("clap enforces --config");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let config = ExperimentConfig::from_json(&text)?;
    let table = run_experiment(&config)?;
    let out = args.out.or_else(|| config.output.as_ref().map(PathBuf::from));
    match out {
        Some(p) => {
            let file = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
            let mut w = BufWriter::new(file);
            table.write_csv(&mut w)?;
            w.flush()?;
        }
        None => print_stdout(&table.to_csv_string())?,
    }
    for v in &table.violations {
        eprintln!("violation: {v}");
    }
    if args.check && !table.violations.is_empty() {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn generate_mdp(args: GenerateMdpArgs) -> Result<()> {
    let mdp = random_low_rank_mdp(args.states, args.actions, args.horizon, args.d, args.seed, args.form)?;
    fs::write(&args.out, mdp.to_json()?)?;
    Ok(())
}

fn generate_policy(args: GeneratePolicyArgs) -> Result<()> {
    let policy = match args.support {
        Some(m) => random_subset_policy(args.states, args.actions, args.horizon, m, args.seed)?,
        None => random_policy(args.states, args.actions, args.horizon, args.seed),
    };
    fs::write(&args.out, policy.to_json()?)?;
    Ok(())
}

fn sample(args: SampleArgs) -> Result<()> {
    let mdp = read_mdp(&args.mdp)?;
    let behavior = read_policy(&args.behavior)?;
    let data = sample_trajectories(&mdp, &behavior, args.k, args.seed)?;
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = BufWriter::new(file);
    data.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Evaluate(a) => evaluate(a).map(|_| ExitCode::SUCCESS),
        Command::Optimize(a) => optimize(a).map(|_| ExitCode::SUCCESS),
        Command::Discrepancy(a) => discrepancy(a).map(|_| ExitCode::SUCCESS),
        Command::Experiment(a) => experiment(a),
        Command::GenerateMdp(a) => generate_mdp(a).map(|_| ExitCode::SUCCESS),
        Command::GeneratePolicy(a) => generate_policy(a).map(|_| ExitCode::SUCCESS),
        Command::Sample(a) => sample(a).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
