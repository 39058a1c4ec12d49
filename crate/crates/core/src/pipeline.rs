//! Run configuration and the stage runners behind the CLI.
//!
//! Every stage reads its predecessors' artifacts from the run directory,
//! writes its own, and rewrites `config.json` with the effective config.
//! Stage outputs depend only on the config and those inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, calibration_captures, CalibConfig, StatsDoc};
use crate::daq::DaqPolicy;
use crate::deploy::{
    build_report, read_ablation_csv, sample, write_ablation_csv, write_bits_heatmap, write_deploy_log,
    BaselineRun, DeployContext, DeployReport, ReportInputs, StepLog, WallClock,
};
use crate::model::{
    calibration_set, cosine_schedule, layer_table, load_checkpoint, save_checkpoint, FloatExec, ForwardObserver,
    LatentPool, TinyDiT, BLOCKS, HEADS, HIDDEN, PATCH,
};
use crate::pruning::{measure_drift, select_schedule, write_drift_csv, DriftProfile, Schedule};
use crate::quant::{save_packed, ActBits, BitPlan, CostModel, Precision};
use crate::search::{
    evolve, joint_budget_plan, joint_search, plan_fingerprint, score, write_evolution_csv, write_pareto_csv, Budgets,
    DriftObjective, JointConfig, JointProblem, ModelPlannerCost, Move, PlannerInput, ScoreBreakdown, ScoreParts,
    SearchConfig, DEFAULT_EXACT_LIMIT,
};
use crate::student::{static_taus, ActivationMode, PackCache};
use crate::{EvalSet, Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const STATS_FILE: &str = "stats.json";
pub const SEED_PLAN_FILE: &str = "seedplan.json";
pub const REFINED_FILE: &str = "refined.json";
pub const EVOLUTION_FILE: &str = "evolution.csv";
pub const DAQ_FILE: &str = "daq.json";
pub const DAQ_TRACE_FILE: &str = "daq_trace.csv";
pub const DRIFT_FILE: &str = "drift.csv";
pub const DRIFT_PROFILE_FILE: &str = "drift.json";
pub const SCHEDULE_FILE: &str = "schedule.json";
pub const PLAN_FILE: &str = "plan.json";
pub const PARETO_FILE: &str = "pareto.csv";
pub const STUDENT_FILE: &str = "student.pack";
pub const DEPLOY_LOG_FILE: &str = "deploy_log.csv";
pub const DEPLOY_SUMMARY_FILE: &str = "deploy.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const HEATMAP_FILE: &str = "bits_heatmap.csv";
pub const REPORT_FILE: &str = "report.json";

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "DPLAN_RUN_ROOT";

/// Stage seeds are the run seed mixed with a per-stage constant.
const SEED_REFINE: u64 = 0x7EF1_0E;
const SEED_EVAL: u64 = 0xE7A1;
const SEED_PRUNE: u64 = 0x9A0E;
const SEED_JOINT: u64 = 0x101E7;

/// Model shape. Only `num_steps` is free; the dimensions are recorded so
/// the config describes the network, and must match the built-in ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_steps: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_steps: 100,
            hidden: HIDDEN,
            heads: HEADS,
            blocks: BLOCKS,
            patch: PATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Clean latents the drift evaluation set is noised from.
    pub pool_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pool_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Kept steps; `None` keeps half of T.
    pub k: Option<usize>,
    pub rho: f64,
    /// Samples per timestep in the drift measurement.
    pub batch: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            k: None,
            rho: 0.2,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    /// Latency budget as a fraction of the refined plan on the full schedule.
    pub lat_fraction: f64,
    /// Memory budget as a fraction of the refined plan's model size.
    pub mem_fraction: f64,
    /// Absolute latency budget in cost units; overrides the fraction.
    pub latency: Option<f64>,
    /// Absolute memory budget in bytes; overrides the fraction.
    pub mem_bytes: Option<f64>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            lat_fraction: 0.5,
            mem_fraction: 1.0,
            latency: None,
            mem_bytes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub epsilon: f64,
    pub reclaim: bool,
    pub exact_limit: u64,
    /// Run the activation-bit/step-count search after the planner.
    pub joint_search: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            reclaim: true,
            exact_limit: DEFAULT_EXACT_LIMIT,
            joint_search: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeployConfig {
    pub n_images: usize,
    /// Time the sampling loop (mean of 10 runs after 2 warm-ups). The
    /// result varies between runs.
    pub wall_clock: bool,
}

impl Default for DeployConfig {
    fn default() -> Self {
        Self {
            n_images: 4,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory name under the run root.
    pub run_name: String,
    pub model: ModelConfig,
    pub calibration: CalibConfig,
    pub eval: EvalConfig,
    pub search: SearchConfig,
    pub daq: DaqPolicy,
    pub prune: PruneConfig,
    pub budgets: BudgetConfig,
    pub planner: PlannerConfig,
    pub joint: JointConfig,
    pub deploy: DeployConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_name: "run".into(),
            model: ModelConfig::default(),
            calibration: CalibConfig::default(),
            eval: EvalConfig::default(),
            search: SearchConfig::default(),
            daq: DaqPolicy::default(),
            prune: PruneConfig::default(),
            budgets: BudgetConfig::default(),
            planner: PlannerConfig::default(),
            joint: JointConfig::default(),
            deploy: DeployConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let want = ModelConfig {
            num_steps: m.num_steps,
            ..ModelConfig::default()
        };
        if *m != want {
            return Err(Error::invalid(format!(
                "model dimensions are fixed at hidden={}, heads={}, blocks={}, patch={}",
                want.hidden, want.heads, want.blocks, want.patch
            )));
        }
        if m.num_steps < 2 {
            return Err(Error::invalid("T must be at least 2"));
        }
        if !(self.prune.rho > 0.0 && self.prune.rho < 1.0) {
            return Err(Error::invalid(format!("ρ = {} outside (0, 1)", self.prune.rho)));
        }
        if self.prune.batch == 0 {
            return Err(Error::invalid("drift batch size is 0"));
        }
        if self.deploy.n_images == 0 {
            return Err(Error::invalid("deploy needs at least one image"));
        }
        let b = &self.budgets;
        if !(b.lat_fraction > 0.0 && b.mem_fraction > 0.0) {
            return Err(Error::invalid("budget fractions must be positive"));
        }
        self.search.validate()?;
        self.daq.validate()
    }

    pub fn k(&self) -> usize {
        self.prune.k.unwrap_or(self.model.num_steps.div_ceil(2))
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Run directory for `cfg` under `root`, or under `$DPLAN_RUN_ROOT`, or
/// under `runs/`.
pub fn run_dir(root: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    let root = root
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(&cfg.run_name)
}

fn artifact(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact(name.to_string()))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn read_artifact<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    read_json(&artifact(dir, name)?)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Calibrate,
    Refine,
    DaqProfile,
    Prune,
    Plan,
    Deploy,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Calibrate,
        Stage::Refine,
        Stage::DaqProfile,
        Stage::Prune,
        Stage::Plan,
        Stage::Deploy,
        Stage::Report,
    ];
}

/// Runs one stage in `dir`, creating it if needed.
pub fn run_stage(stage: Stage, cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    match stage {
        Stage::Calibrate => stage_calibrate(cfg, dir),
        Stage::Refine => stage_refine(cfg, dir),
        Stage::DaqProfile => stage_daq_profile(cfg, dir),
        Stage::Prune => stage_prune(cfg, dir),
        Stage::Plan => stage_plan(cfg, dir),
        Stage::Deploy => stage_deploy(cfg, dir),
        Stage::Report => stage_report(cfg, dir),
    }?;
    // Saved after success so a failed override does not stick.
    write_json(dir, CONFIG_FILE, cfg)
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<()> {
    for stage in Stage::ALL {
        run_stage(stage, cfg, dir)?;
    }
    Ok(())
}

fn load_teacher(cfg: &RunConfig, dir: &Path) -> Result<TinyDiT> {
    let model = load_checkpoint(&artifact(dir, TEACHER_FILE)?)?;
    if model.num_steps != cfg.model.num_steps {
        return Err(Error::invalid(format!(
            "{TEACHER_FILE} has T={} but the config asks for T={}",
            model.num_steps, cfg.model.num_steps
        )));
    }
    Ok(model)
}

/// GPTQ inputs, recomputed from the calibration config.
fn pack_cache(model: &TinyDiT, cfg: &RunConfig) -> Result<PackCache> {
    let captures = calibration_captures(model, &cfg.calibration, cfg.seed)?;
    Ok(PackCache::from_captures(&captures))
}

fn full_schedule(cfg: &RunConfig) -> Vec<usize> {
    (0..cfg.model.num_steps).collect()
}

fn stage_calibrate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = TinyDiT::new(cfg.seed, cfg.model.num_steps);
    save_checkpoint(&model, &dir.join(TEACHER_FILE))?;
    let cal = calibrate(&model, &cfg.calibration, cfg.seed)?;
    write_json(dir, STATS_FILE, &cal.stats)?;
    write_json(dir, SEED_PLAN_FILE, &cal.seed_plan)
}

/// The evaluation set shared by refinement objectives, sized for the
/// largest halving stage.
fn eval_set(model: &TinyDiT, cfg: &RunConfig) -> Result<EvalSet> {
    let steps = cfg.search.stages.iter().map(|f| f.steps).max().unwrap_or(1);
    let per_step = cfg.search.stages.iter().map(|f| f.samples_per_step).max().unwrap_or(1);
    let sched = cosine_schedule(model.num_steps)?;
    let pool = LatentPool::generate(cfg.seed ^ SEED_EVAL, cfg.eval.pool_size);
    EvalSet::build(model, &pool, &sched, steps, per_step, cfg.seed ^ SEED_EVAL)
}

fn stage_refine(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_teacher(cfg, dir)?;
    let seed_plan: BitPlan = read_artifact(dir, SEED_PLAN_FILE)?;
    let cache = pack_cache(&model, cfg)?;
    let cost = CostModel::new(&model);
    let evalset = eval_set(&model, cfg)?;
    let schedule = full_schedule(cfg);
    let act = ActBits::Daq(&cfg.daq);
    let budgets = Budgets {
        latency: cost.latency(&seed_plan, act, &schedule),
        bitops: cost.bitops(&seed_plan, act, &schedule) as f64,
        mem_bytes: cost.model_size_bytes(&seed_plan)? as f64,
    };
    let objective = DriftObjective {
        model: &model,
        cache: &cache,
        evalset: &evalset,
        cost: &cost,
        mode: ActivationMode::Dynamic(cfg.daq.clone()),
        schedule,
        budgets,
        lambda: cfg.search.lambda,
        mu: cfg.search.mu,
    };
    let res = evolve(&seed_plan, &cfg.search, &objective, cfg.seed ^ SEED_REFINE)?;
    write_evolution_csv(&dir.join(EVOLUTION_FILE), &res.history)?;
    write_json(dir, REFINED_FILE, &res.best)
}

/// Per-layer mean clip threshold of every forward.
#[derive(Default)]
struct LayerTaus(Vec<(usize, f64)>);

impl ForwardObserver for LayerTaus {
    fn on_activation_scale(&mut self, index: usize, mean_tau: f64) {
        self.0.push((index, mean_tau));
    }
}

#[derive(Serialize)]
struct TraceRow<'a> {
    t: usize,
    bin: &'static str,
    a_bits: u8,
    layer_id: &'a str,
    mean_tau: f64,
}

fn stage_daq_profile(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_teacher(cfg, dir)?;
    let refined: BitPlan = read_artifact(dir, REFINED_FILE)?;
    let cache = pack_cache(&model, cfg)?;
    let student = crate::deploy::build_student(&model, &refined, &cache, &cfg.daq)?;
    let sched = cosine_schedule(model.num_steps)?;
    let table = layer_table();

    // One image along the full trajectory, recording every layer's τ.
    let mut x = crate::model::initial_noise(cfg.seed, 0);
    let mut w = csv::Writer::from_path(dir.join(DAQ_TRACE_FILE)).map_err(crate::pruning::csv_err)?;
    for t in (0..model.num_steps).rev() {
        let mut obs = LayerTaus::default();
        let eps = model.forward_with(&student, &x, t, 0, &mut obs)?;
        for (index, mean_tau) in obs.0 {
            w.serialize(TraceRow {
                t,
                bin: cfg.daq.bin(t, model.num_steps).name(),
                a_bits: cfg.daq.bits_at(t, model.num_steps),
                layer_id: &table[index].id,
                mean_tau,
            })
            .map_err(crate::pruning::csv_err)?;
        }
        x = crate::model::ddim_step(&x, &eps, t, t.checked_sub(1), &sched)?;
    }
    w.flush()?;
    write_json(dir, DAQ_FILE, &cfg.daq)
}

fn stage_prune(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_teacher(cfg, dir)?;
    let refined: BitPlan = read_artifact(dir, REFINED_FILE)?;
    let policy: DaqPolicy = read_artifact(dir, DAQ_FILE)?;
    let cache = pack_cache(&model, cfg)?;
    let student = crate::deploy::build_student(&model, &refined, &cache, &policy)?;
    let sched = cosine_schedule(model.num_steps)?;
    let pool = LatentPool::generate(cfg.seed ^ SEED_PRUNE, cfg.eval.pool_size);
    let samples = calibration_set(&pool, &sched, &full_schedule(cfg), cfg.prune.batch, cfg.seed ^ SEED_PRUNE)?;
    let profile = measure_drift(&model, &FloatExec, &student, &samples)?;
    let schedule = select_schedule(&profile, cfg.k(), cfg.prune.rho)?;
    write_drift_csv(&dir.join(DRIFT_FILE), &profile, &schedule)?;
    write_json(dir, DRIFT_PROFILE_FILE, &profile)?;
    write_json(dir, SCHEDULE_FILE, &schedule)
}

/// Layer sensitivity for the planner: composite score scaled to max 1.
fn sensitivity(stats: &StatsDoc) -> Vec<f64> {
    let max = stats.layers.iter().map(|l| l.composite).fold(0.0, f64::max);
    stats
        .layers
        .iter()
        .map(|l| if max > 0.0 { l.composite / max } else { 0.0 })
        .collect()
}

/// Search bit set capped at the refined precision; frozen layers are pinned.
fn ladders(plan: &BitPlan, space: &[Precision]) -> Vec<Vec<Precision>> {
    plan.layers
        .iter()
        .map(|a| {
            if a.frozen {
                return vec![a.precision];
            }
            let mut l: Vec<Precision> = space.iter().copied().filter(|&p| p < a.precision).collect();
            l.sort();
            l.dedup();
            l.push(a.precision);
            l
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerSummary {
    pub kept: Vec<usize>,
    pub latency: f64,
    pub memory: f64,
    pub moves: Vec<Move>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub evaluated: usize,
    pub best_fingerprint: String,
}

/// `plan.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDoc {
    pub schema_version: u32,
    pub fingerprint: String,
    pub bitplan: BitPlan,
    pub schedule: Schedule,
    pub daq: DaqPolicy,
    pub budgets: Budgets,
    pub parts: ScoreParts,
    pub score: ScoreBreakdown,
    pub planner: PlannerSummary,
    pub joint: Option<JointSummary>,
}

/// Budgets for the plan stage from the refined plan's costs.
pub fn plan_budgets(cfg: &RunConfig, cost: &CostModel, refined: &BitPlan, policy: &DaqPolicy) -> Result<(f64, f64)> {
    let full = full_schedule(cfg);
    let lat = match cfg.budgets.latency {
        Some(b) => b,
        None => cfg.budgets.lat_fraction * cost.latency(refined, ActBits::Daq(policy), &full),
    };
    let mem = match cfg.budgets.mem_bytes {
        Some(b) => b,
        None => cfg.budgets.mem_fraction * cost.model_size_bytes(refined)? as f64,
    };
    Ok((lat, mem))
}

fn stage_plan(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_teacher(cfg, dir)?;
    let stats: StatsDoc = read_artifact(dir, STATS_FILE)?;
    let refined: BitPlan = read_artifact(dir, REFINED_FILE)?;
    let policy: DaqPolicy = read_artifact(dir, DAQ_FILE)?;
    let profile: DriftProfile = read_artifact(dir, DRIFT_PROFILE_FILE)?;
    let cost = CostModel::new(&model);
    let (lat_budget, mem_budget) = plan_budgets(cfg, &cost, &refined, &policy)?;

    let input = PlannerInput {
        ladders: ladders(&refined, &cfg.search.space.bits),
        sensitivity: sensitivity(&stats),
        profile: &profile,
        rho: cfg.prune.rho,
        lat_budget,
        mem_budget,
        epsilon: cfg.planner.epsilon,
        reclaim: cfg.planner.reclaim,
        exact_limit: cfg.planner.exact_limit,
    };
    let planner_cost = ModelPlannerCost::new(&cost, &refined, policy.clone());
    let res = joint_budget_plan(&input, &planner_cost)?;
    let mut plan = refined.clone();
    for (a, &p) in plan.layers.iter_mut().zip(&res.precisions) {
        a.precision = p;
    }

    let planned_act = ActBits::Daq(&policy);
    let budgets = Budgets {
        latency: lat_budget,
        bitops: cost.bitops(&plan, planned_act, &res.kept) as f64,
        mem_bytes: mem_budget,
    };
    let cache = pack_cache(&model, cfg)?;
    let problem = JointProblem {
        model: &model,
        plan: &plan,
        cache: &cache,
        cost: &cost,
        profile: &profile,
        rho: cfg.prune.rho,
        base_policy: policy.clone(),
        budgets,
        lambda: cfg.search.lambda,
        mu: cfg.search.mu,
        seed: cfg.seed ^ SEED_JOINT,
    };
    let (final_policy, schedule, parts, joint) = if cfg.planner.joint_search {
        let j = joint_search(&problem, &cfg.joint, policy.bits, res.kept.len())?;
        write_pareto_csv(&dir.join(PARETO_FILE), &j.evaluated)?;
        let summary = JointSummary {
            evaluated: j.evaluated.len(),
            best_fingerprint: j.best.fingerprint.clone(),
        };
        (j.policy, j.schedule, j.best.parts, Some(summary))
    } else {
        let schedule = select_schedule(&profile, res.kept.len(), cfg.prune.rho)?;
        let refs = crate::search::teacher_references(&model, cfg.joint.n_images, problem.seed)?;
        let student = crate::deploy::build_student(&model, &plan, &cache, &policy)?;
        let parts = ScoreParts {
            drift_mse: crate::search::final_latent_mse(&model, &student, &schedule.kept, &refs, problem.seed)?,
            latency: cost.latency(&plan, planned_act, &schedule.kept),
            bitops: cost.bitops(&plan, planned_act, &schedule.kept) as f64,
            mem_bytes: cost.model_size_bytes(&plan)? as f64,
        };
        write_pareto_csv(&dir.join(PARETO_FILE), &[])?;
        (policy.clone(), schedule, parts, None)
    };
    let doc = PlanDoc {
        schema_version: 1,
        fingerprint: crate::search::candidate_fingerprint(&plan, &schedule.kept, Some(&final_policy)),
        score: score(&parts, &budgets, cfg.search.lambda, cfg.search.mu),
        bitplan: plan,
        schedule,
        daq: final_policy,
        budgets,
        parts,
        planner: PlannerSummary {
            kept: res.kept,
            latency: res.latency,
            memory: res.memory,
            moves: res.moves,
        },
        joint,
    };
    write_json(dir, PLAN_FILE, &doc)
}

/// `deploy.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploySummary {
    pub student_fingerprint: String,
    pub plan_fingerprint: String,
    pub n_images: usize,
    pub forwards: usize,
    pub drift_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock: Option<WallClock>,
}

fn stage_deploy(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_teacher(cfg, dir)?;
    let doc: PlanDoc = read_artifact(dir, PLAN_FILE)?;
    let cache = pack_cache(&model, cfg)?;
    let cost = CostModel::new(&model);
    let captures = calibration_captures(&model, &cfg.calibration, cfg.seed)?;
    let taus = static_taus(&captures);
    let ctx = DeployContext {
        model: &model,
        cache: &cache,
        cost: &cost,
        plan: &doc.bitplan,
        policy: &doc.daq,
        kept: &doc.schedule.kept,
        static_taus: &taus,
        n_images: cfg.deploy.n_images,
        seed: cfg.seed,
    };
    let student = ctx.student()?;
    save_packed(&student.packed_layers(), &dir.join(STUDENT_FILE))?;

    let refs = ctx.references()?;
    let held_out = cfg.seed.wrapping_add(crate::deploy::HELD_OUT_SEED_OFFSET);
    let out = match sample(&model, &student, ctx.kept, ctx.n_images, held_out) {
        Ok(out) => out,
        Err(failure) => {
            write_deploy_log(&dir.join(DEPLOY_LOG_FILE), &failure.partial_log)?;
            return Err(failure.error);
        }
    };
    write_deploy_log(&dir.join(DEPLOY_LOG_FILE), &out.log)?;
    let drift_mse = crate::deploy::latent_mse(&out.latents, &refs)?;

    let ablation = ctx.ablations(&refs)?;
    write_ablation_csv(&dir.join(ABLATION_FILE), &ablation)?;
    write_json(dir, BASELINE_FILE, &BaselineRun::teacher(&cost))?;

    let wall_clock = if cfg.deploy.wall_clock {
        Some(crate::deploy::measure_wall_clock(&model, &student, ctx.kept, cfg.seed, 2, 10)?)
    } else {
        None
    };
    write_json(
        dir,
        DEPLOY_SUMMARY_FILE,
        &DeploySummary {
            student_fingerprint: student.fingerprint(),
            plan_fingerprint: plan_fingerprint(&doc.bitplan),
            n_images: ctx.n_images,
            forwards: out.log.len(),
            drift_mse,
            wall_clock,
        },
    )
}

fn read_deploy_log(path: &Path) -> Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_path(path).map_err(crate::pruning::csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(crate::pruning::csv_err)?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse = |i: usize| -> Result<usize> {
            field(i)
                .parse()
                .map_err(|_| Error::Format(format!("{DEPLOY_LOG_FILE}: bad integer `{}`", field(i))))
        };
        let bin = crate::daq::PhaseBin::ALL
            .into_iter()
            .find(|b| b.name() == field(3))
            .ok_or_else(|| Error::Format(format!("{DEPLOY_LOG_FILE}: bad bin `{}`", field(3))))?;
        let a_bits = match field(4) {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::Format(format!("{DEPLOY_LOG_FILE}: bad bits `{s}`")))?),
        };
        let mean_tau = match field(5) {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::Format(format!("{DEPLOY_LOG_FILE}: bad tau `{s}`")))?),
        };
        out.push(StepLog {
            image: parse(0)?,
            step: parse(1)?,
            t: parse(2)?,
            bin,
            a_bits,
            mean_tau,
        });
    }
    Ok(out)
}

fn stage_report(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_teacher(cfg, dir)?;
    let doc: PlanDoc = read_artifact(dir, PLAN_FILE)?;
    let summary: DeploySummary = read_artifact(dir, DEPLOY_SUMMARY_FILE)?;
    let log = read_deploy_log(&artifact(dir, DEPLOY_LOG_FILE)?)?;
    let cost = CostModel::new(&model);
    let baseline: Option<BaselineRun> = match dir.join(BASELINE_FILE).exists() {
        true => Some(read_artifact(dir, BASELINE_FILE)?),
        false => None,
    };
    let ablation = match dir.join(ABLATION_FILE).exists() {
        true => read_ablation_csv(&dir.join(ABLATION_FILE))?,
        false => Vec::new(),
    };
    write_bits_heatmap(&dir.join(HEATMAP_FILE), &doc.bitplan, &doc.daq)?;
    let files = [
        DRIFT_FILE,
        EVOLUTION_FILE,
        PARETO_FILE,
        HEATMAP_FILE,
        ABLATION_FILE,
        DAQ_TRACE_FILE,
        DEPLOY_LOG_FILE,
    ]
    .into_iter()
    .filter(|f| dir.join(f).exists())
    .map(String::from)
    .collect();
    let report: DeployReport = build_report(ReportInputs {
        cost: &cost,
        plan: &doc.bitplan,
        policy: &doc.daq,
        kept: &doc.schedule.kept,
        drift_mse: summary.drift_mse,
        n_images: summary.n_images,
        log: &log,
        baseline,
        ablation,
        wall_clock: summary.wall_clock,
        files,
    })?;
    write_json(dir, REPORT_FILE, &report)
}
