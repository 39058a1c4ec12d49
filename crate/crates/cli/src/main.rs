//! `dplan`: runs the planning pipeline stage by stage or end to end.
//!
//! Exit status is 0 on success, 2 when a budget cannot be met and 1 for any
//! other error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dplan_core::calibration::TierSignal;
use dplan_core::pipeline::{run_all, run_dir, run_stage, RunConfig, Stage, CONFIG_FILE, RUN_ROOT_ENV};
use dplan_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dplan", version, about = "Joint precision, activation and step planning for a toy diffusion transformer")]
struct Cli {
    /// Run configuration (JSON); flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory holding run directories [default: $DPLAN_RUN_ROOT or ./runs]
    #[arg(long, global = true, env = RUN_ROOT_ENV)]
    root: Option<PathBuf>,

    /// Run directory name under the root [default: run]
    #[arg(long, global = true)]
    run_name: Option<String>,

    /// Master seed [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel evaluation [default: all cores]
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the teacher, collect layer statistics and derive the seed plan
    Calibrate(CalibrateArgs),
    /// Evolve the seed plan into the refined plan
    Refine(RefineArgs),
    /// Write the activation policy and a per-layer clip-threshold trace
    DaqProfile(DaqArgs),
    /// Measure per-step drift and select the kept steps
    Prune(PruneArgs),
    /// Fit precisions and steps to the budgets, then tune activation bits
    Plan(PlanArgs),
    /// Build the student, sample, and run the ablations
    Deploy(DeployArgs),
    /// Assemble report.json and the figure tables
    Report,
    /// Every stage in order
    All(AllArgs),
}

#[derive(Args, Debug, Default)]
struct CalibrateArgs {
    /// Denoising steps T [default: 100]
    #[arg(long)]
    num_steps: Option<usize>,
    /// Calibration samples [default: 512]
    #[arg(long)]
    n_samples: Option<usize>,
    /// Distinct timesteps the samples cover [default: 16]
    #[arg(long)]
    n_timesteps: Option<usize>,
    /// PCA/curvature blend weight α [default: 0.5]
    #[arg(long)]
    alpha: Option<f64>,
    /// Fraction of most sensitive layers frozen [default: 0.1]
    #[arg(long)]
    freeze_fraction: Option<f64>,
    /// Score used for tiering: composite or score [default: composite]
    #[arg(long, value_parser = parse_tier)]
    tier_by: Option<TierSignal>,
    /// Start from the uniform W4/g288 seed instead of tiers
    #[arg(long)]
    uniform_seed: bool,
}

#[derive(Args, Debug, Default)]
struct RefineArgs {
    /// Population size [default: 12]
    #[arg(long)]
    population: Option<usize>,
    /// Elites kept per generation [default: 4]
    #[arg(long)]
    elites: Option<usize>,
    /// Generations [default: 6]
    #[arg(long)]
    generations: Option<usize>,
    /// Per-layer mutation probability [default: 0.1]
    #[arg(long)]
    mutation_rate: Option<f64>,
    /// Latency penalty weight λ [default: 0.5]
    #[arg(long)]
    lambda: Option<f64>,
    /// BitOps penalty weight μ [default: 0.5]
    #[arg(long)]
    mu: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct DaqArgs {
    /// Activation bits in the early bin [default: 8]
    #[arg(long)]
    early_bits: Option<u8>,
    /// Activation bits in the mid bin [default: 8]
    #[arg(long)]
    mid_bits: Option<u8>,
    /// Activation bits in the late bin [default: 8]
    #[arg(long)]
    late_bits: Option<u8>,
    /// Clipping percentile p [default: 99.9]
    #[arg(long)]
    percentile: Option<f64>,
    /// Activation group size [default: 128]
    #[arg(long)]
    act_group: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct PruneArgs {
    /// Kept steps [default: T/2]
    #[arg(long)]
    k: Option<usize>,
    /// Protected tail fraction ρ [default: 0.2]
    #[arg(long)]
    rho: Option<f64>,
    /// Samples per timestep for drift [default: 8]
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct PlanArgs {
    /// Latency budget in cost units [default: lat-fraction of the refined plan]
    #[arg(long)]
    b_lat: Option<f64>,
    /// Memory budget in bytes [default: mem-fraction of the refined plan]
    #[arg(long)]
    b_mem: Option<f64>,
    /// Latency budget as a fraction of the refined plan on all steps [default: 0.5]
    #[arg(long)]
    lat_fraction: Option<f64>,
    /// Memory budget as a fraction of the refined plan's size [default: 1.0]
    #[arg(long)]
    mem_fraction: Option<f64>,
    /// Planner ε [default: 1e-8]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Skip the local-search pass after the greedy planner
    #[arg(long)]
    no_reclaim: bool,
    /// Skip the activation-bit/step-count search
    #[arg(long)]
    no_joint_search: bool,
    /// Rounds of the activation-bit/step-count search [default: 3]
    #[arg(long)]
    joint_rounds: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct DeployArgs {
    /// Held-out images sampled [default: 4]
    #[arg(long)]
    n_images: Option<usize>,
    /// Also time the sampling loop (non-deterministic)
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args, Debug, Default)]
struct AllArgs {
    #[command(flatten)]
    calibrate: CalibrateArgs,
    #[command(flatten)]
    refine: RefineArgs,
    #[command(flatten)]
    daq: DaqArgs,
    #[command(flatten)]
    prune: PruneArgs,
    #[command(flatten)]
    plan: PlanArgs,
    #[command(flatten)]
    deploy: DeployArgs,
}

fn parse_tier(s: &str) -> Result<TierSignal, String> {
    match s {
        "composite" => Ok(TierSignal::Composite),
        "score" => Ok(TierSignal::Score),
        _ => Err(format!("expected `composite` or `score`, got `{s}`")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl CalibrateArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.model.num_steps, self.num_steps);
        set(&mut c.calibration.n_samples, self.n_samples);
        set(&mut c.calibration.n_timesteps, self.n_timesteps);
        set(&mut c.calibration.alpha, self.alpha);
        set(&mut c.calibration.freeze_fraction, self.freeze_fraction);
        set(&mut c.calibration.tier_by, self.tier_by);
        c.calibration.uniform_seed |= self.uniform_seed;
    }
}

impl RefineArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.search.population, self.population);
        set(&mut c.search.elites, self.elites);
        set(&mut c.search.generations, self.generations);
        set(&mut c.search.mutation_rate, self.mutation_rate);
        set(&mut c.search.lambda, self.lambda);
        set(&mut c.search.mu, self.mu);
    }
}

impl DaqArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.daq.bits.early, self.early_bits);
        set(&mut c.daq.bits.mid, self.mid_bits);
        set(&mut c.daq.bits.late, self.late_bits);
        set(&mut c.daq.percentile, self.percentile);
        set(&mut c.daq.group_size, self.act_group);
    }
}

impl PruneArgs {
    fn apply(&self, c: &mut RunConfig) {
        if self.k.is_some() {
            c.prune.k = self.k;
        }
        set(&mut c.prune.rho, self.rho);
        set(&mut c.prune.batch, self.batch);
    }
}

impl PlanArgs {
    fn apply(&self, c: &mut RunConfig) {
        if self.b_lat.is_some() {
            c.budgets.latency = self.b_lat;
        }
        if self.b_mem.is_some() {
            c.budgets.mem_bytes = self.b_mem;
        }
        set(&mut c.budgets.lat_fraction, self.lat_fraction);
        set(&mut c.budgets.mem_fraction, self.mem_fraction);
        set(&mut c.planner.epsilon, self.epsilon);
        c.planner.reclaim &= !self.no_reclaim;
        c.planner.joint_search &= !self.no_joint_search;
        set(&mut c.joint.rounds, self.joint_rounds);
    }
}

impl DeployArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.deploy.n_images, self.n_images);
        c.deploy.wall_clock |= self.wall_clock;
    }
}

/// Base config: `--config`, else the run directory's stored config, else
/// defaults. Global flags apply on top.
fn base_config(cli: &Cli) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.run_name, cli.run_name.clone());
    let dir = run_dir(cli.root.as_deref(), &cfg);
    if cli.config.is_none() {
        let stored = dir.join(CONFIG_FILE);
        if stored.exists() {
            cfg = RunConfig::load(&stored)?;
            set(&mut cfg.run_name, cli.run_name.clone());
        }
    }
    set(&mut cfg.seed, cli.seed);
    Ok((cfg, dir))
}

fn run(cli: &Cli) -> Result<PathBuf, Error> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::InvalidArgument("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    }
    let (mut cfg, dir) = base_config(cli)?;
    let stage = match &cli.command {
        Command::Calibrate(a) => {
            a.apply(&mut cfg);
            Some(Stage::Calibrate)
        }
        Command::Refine(a) => {
            a.apply(&mut cfg);
            Some(Stage::Refine)
        }
        Command::DaqProfile(a) => {
            a.apply(&mut cfg);
            Some(Stage::DaqProfile)
        }
        Command::Prune(a) => {
            a.apply(&mut cfg);
            Some(Stage::Prune)
        }
        Command::Plan(a) => {
            a.apply(&mut cfg);
            Some(Stage::Plan)
        }
        Command::Deploy(a) => {
            a.apply(&mut cfg);
            Some(Stage::Deploy)
        }
        Command::Report => Some(Stage::Report),
        Command::All(a) => {
            a.calibrate.apply(&mut cfg);
            a.refine.apply(&mut cfg);
            a.daq.apply(&mut cfg);
            a.prune.apply(&mut cfg);
            a.plan.apply(&mut cfg);
            a.deploy.apply(&mut cfg);
            None
        }
    };
    match stage {
        Some(s) => run_stage(s, &cfg, &dir)?,
        None => run_all(&cfg, &dir)?,
    }
    Ok(dir)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_budget_infeasible() {
        2
    } else {
        1
    }
}

fn report_dir(dir: &Path) {
    println!("{}", dir.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            report_dir(&dir);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dplan: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
