//! Student deployment: build the quantized student from a plan, sample on
//! the pruned schedule with per-step logging, run ablations and assemble the
//! report.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::daq::{phase_bin, DaqPolicy, PhaseBin};
use crate::model::{
    cosine_schedule, ddim_step, initial_noise, layer_table, ForwardObserver, Latent, TinyDiT,
    LATENT_LEN, NUM_CLASSES,
};
use crate::pruning::csv_err;
use crate::quant::{ActBits, BitPlan, CostModel, Precision};
use crate::search::{final_latent_mse, teacher_references};
use crate::student::{ActivationMode, PackCache, Student};
use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Published full-precision and mixed-plan sizes of the large reference
/// model, in MB. Listed for context only.
pub const REFERENCE_FP_MB: f64 = 2575.42;
pub const REFERENCE_PLAN_MB: f64 = 397.24;

/// Offset applied to the run seed for held-out sampling noise.
pub const HELD_OUT_SEED_OFFSET: u64 = 0x5EED_0FF5;

/// Lists every position where the plan's layer ids differ from the model's.
fn layer_diff(plan: &BitPlan, model: &TinyDiT) -> Option<String> {
    let want = model.layer_ids();
    let have: Vec<&str> = plan.layers.iter().map(|l| l.layer_id.as_str()).collect();
    let mut diffs = Vec::new();
    for i in 0..want.len().max(have.len()) {
        match (want.get(i), have.get(i)) {
            (Some(w), Some(h)) if w == h => {}
            (Some(w), Some(h)) => diffs.push(format!("#{i}: plan `{h}`, model `{w}`")),
            (Some(w), None) => diffs.push(format!("#{i}: model `{w}` missing from plan")),
            (None, Some(h)) => diffs.push(format!("#{i}: plan `{h}` not in model")),
            (None, None) => unreachable!(),
        }
    }
    (!diffs.is_empty()).then(|| diffs.join("; "))
}

/// Quantized student per `plan` with dynamic activation quantization under
/// `policy`. Integer layers use the cache's packed codes; FP layers pass
/// through.
pub fn build_student(model: &TinyDiT, plan: &BitPlan, cache: &PackCache, policy: &DaqPolicy) -> Result<Student> {
    if let Some(diff) = layer_diff(plan, model) {
        return Err(Error::invalid(format!("plan does not match model layers: {diff}")));
    }
    Student::build(model, plan, cache, ActivationMode::Dynamic(policy.clone()))
}

/// One denoiser forward of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub image: usize,
    /// Position in the sampling order, 0 for the first forward.
    pub step: usize,
    pub t: usize,
    pub bin: PhaseBin,
    /// Activation width of integer layers; empty when nothing is quantized.
    pub a_bits: Option<u8>,
    /// Mean clip threshold over the integer layers' inputs.
    pub mean_tau: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latents: Vec<Latent>,
    /// Ordered by image, then step.
    pub log: Vec<StepLog>,
}

/// A failed sampling run with every step logged before the failure.
#[derive(Debug)]
pub struct SampleFailure {
    pub error: Error,
    pub partial_log: Vec<StepLog>,
}

impl From<SampleFailure> for Error {
    fn from(f: SampleFailure) -> Self {
        f.error
    }
}

#[derive(Default)]
struct TauMean {
    sum: f64,
    count: usize,
}

impl ForwardObserver for TauMean {
    fn on_activation_scale(&mut self, _index: usize, mean_tau: f64) {
        self.sum += mean_tau;
        self.count += 1;
    }
}

const DEFAULT_BOUNDARIES: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];

fn step_activation(student: &Student, t: usize, num_steps: usize) -> (PhaseBin, Option<u8>, Option<f64>) {
    let any_int = student.plan().layers.iter().any(|a| a.precision.is_int());
    match student.mode() {
        ActivationMode::Float => (phase_bin(t, num_steps, DEFAULT_BOUNDARIES), None, None),
        ActivationMode::Dynamic(p) => {
            let bin = p.bin(t, num_steps);
            (bin, any_int.then(|| p.bits.get(bin)), None)
        }
        ActivationMode::Static {
            taus,
            bits,
            boundaries,
        } => {
            let bin = phase_bin(t, num_steps, *boundaries);
            let int_taus: Vec<f64> = student
                .plan()
                .layers
                .iter()
                .zip(taus)
                .filter(|(a, _)| a.precision.is_int())
                .map(|(_, &tau)| tau)
                .collect();
            let mean = (!int_taus.is_empty()).then(|| int_taus.iter().sum::<f64>() / int_taus.len() as f64);
            (bin, any_int.then(|| bits.get(bin)), mean)
        }
    }
}

fn sample_one(
    model: &TinyDiT,
    student: &Student,
    kept: &[usize],
    image: usize,
    seed: u64,
    log: &mut Vec<StepLog>,
) -> Result<Latent> {
    let sched = cosine_schedule(model.num_steps)?;
    let label = image % NUM_CLASSES;
    let mut x = initial_noise(seed, image);
    for (step, (pos, &t)) in kept.iter().enumerate().rev().enumerate() {
        let mut taus = TauMean::default();
        let eps = model.forward_with(student, &x, t, label, &mut taus).map_err(|e| match e {
            Error::NumericFailure { layer, detail } => Error::NumericFailure {
                layer,
                detail: format!("at t={t}, image {image}: {detail}"),
            },
            e => e,
        })?;
        let (bin, a_bits, static_tau) = step_activation(student, t, model.num_steps);
        let mean_tau = if taus.count > 0 {
            Some(taus.sum / taus.count as f64)
        } else {
            static_tau
        };
        log.push(StepLog {
            image,
            step,
            t,
            bin,
            a_bits,
            mean_tau,
        });
        let prev = pos.checked_sub(1).map(|p| kept[p]);
        x = ddim_step(&x, &eps, t, prev, &sched)?;
    }
    Ok(x)
}

/// DDIM with `student` over `kept` (ascending, original grid), iterated from
/// the largest step down. Image `i` starts from `initial_noise(seed, i)`
/// with label `i mod 10`. Images run in parallel; logs merge by image.
pub fn sample(
    model: &TinyDiT,
    student: &Student,
    kept: &[usize],
    n_images: usize,
    seed: u64,
) -> std::result::Result<SampleOutput, SampleFailure> {
    let fail = |error: Error| SampleFailure {
        error,
        partial_log: Vec::new(),
    };
    if kept.is_empty() {
        return Err(fail(Error::invalid("sampling schedule is empty")));
    }
    if kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err(fail(Error::invalid("sampling schedule must be strictly ascending")));
    }
    if let Some(&t) = kept.iter().find(|&&t| t >= model.num_steps) {
        return Err(fail(Error::invalid(format!("step {t} outside T={}", model.num_steps))));
    }
    let runs: Vec<(Result<Latent>, Vec<StepLog>)> = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let mut log = Vec::with_capacity(kept.len());
            let x = sample_one(model, student, kept, i, seed, &mut log);
            (x, log)
        })
        .collect();
    let mut latents = Vec::with_capacity(n_images);
    let mut log = Vec::with_capacity(n_images * kept.len());
    let mut first_error = None;
    for (x, l) in runs {
        log.extend(l);
        match x {
            Ok(x) => latents.push(x),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(error) => Err(SampleFailure {
            error,
            partial_log: log,
        }),
        None => Ok(SampleOutput { latents, log }),
    }
}

/// `deploy_log.csv`: `image,step,t,bin,a_bits,mean_tau`.
pub fn write_deploy_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["image", "step", "t", "bin", "a_bits", "mean_tau"])
        .map_err(csv_err)?;
    for r in log {
        w.write_record([
            r.image.to_string(),
            r.step.to_string(),
            r.t.to_string(),
            r.bin.name().to_string(),
            r.a_bits.map(|b| b.to_string()).unwrap_or_default(),
            r.mean_tau.map(|v| format!("{v:e}")).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean per-element squared error between paired latents.
pub fn latent_mse(a: &[Latent], b: &[Latent]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "latent sets differ in size ({} vs {}) or are empty",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.dist_sq(y)).sum::<f64>() / (a.len() * LATENT_LEN) as f64)
}

/// Latency units with every integer layer at its bin's width and no dynamic
/// scaling overhead.
fn static_latency(cost: &CostModel, plan: &BitPlan, policy: &DaqPolicy, kept: &[usize]) -> f64 {
    kept.iter()
        .map(|&t| {
            let a = policy.bits_at(t, cost.num_steps());
            plan.layers
                .iter()
                .enumerate()
                .map(|(i, l)| cost.layer_latency(i, l.precision, ActBits::Static(a), t))
                .sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The deployed plan: refined bits, dynamic activations, pruned schedule.
    Full,
    /// Same bits and schedule with calibrated static activation thresholds.
    NoDaq,
    /// Every layer at W4, g=288, same schedule and activation policy.
    UniformW4G288,
    /// Same bits and activations on the full schedule.
    NoPrune,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoDaq, Variant::UniformW4G288, Variant::NoPrune];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDaq => "no_daq",
            Variant::UniformW4G288 => "uniform_w4_g288",
            Variant::NoPrune => "no_prune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub drift_mse: f64,
    pub bitops: u64,
    pub latency: f64,
    pub model_size_bytes: u64,
    pub kept_steps: usize,
}

/// Everything needed to instantiate and score a deployment.
pub struct DeployContext<'a> {
    pub model: &'a TinyDiT,
    pub cache: &'a PackCache,
    pub cost: &'a CostModel,
    pub plan: &'a BitPlan,
    pub policy: &'a DaqPolicy,
    pub kept: &'a [usize],
    /// Per-layer static thresholds for the no-DAQ variant.
    pub static_taus: &'a [f64],
    pub n_images: usize,
    pub seed: u64,
}

impl DeployContext<'_> {
    fn held_out_seed(&self) -> u64 {
        self.seed.wrapping_add(HELD_OUT_SEED_OFFSET)
    }

    pub fn student(&self) -> Result<Student> {
        build_student(self.model, self.plan, self.cache, self.policy)
    }

    /// Teacher latents over the full schedule on the held-out noise.
    pub fn references(&self) -> Result<Vec<Latent>> {
        teacher_references(self.model, self.n_images, self.held_out_seed())
    }

    pub fn variant(&self, v: Variant, references: &[Latent]) -> Result<AblationRow> {
        let all: Vec<usize> = (0..self.model.num_steps).collect();
        let uniform = BitPlan::uniform(Precision::W4, 288);
        let (plan, kept) = match v {
            Variant::UniformW4G288 => (&uniform, self.kept),
            Variant::NoPrune => (self.plan, all.as_slice()),
            Variant::Full | Variant::NoDaq => (self.plan, self.kept),
        };
        let act = ActBits::Daq(self.policy);
        let (student, latency) = match v {
            Variant::NoDaq => {
                let mode = ActivationMode::Static {
                    taus: self.static_taus.to_vec(),
                    bits: self.policy.bits,
                    boundaries: self.policy.boundaries,
                };
                (
                    Student::build(self.model, plan, self.cache, mode)?,
                    static_latency(self.cost, plan, self.policy, kept),
                )
            }
            _ => (
                build_student(self.model, plan, self.cache, self.policy)?,
                self.cost.latency(plan, act, kept),
            ),
        };
        Ok(AblationRow {
            variant: v,
            drift_mse: final_latent_mse(self.model, &student, kept, references, self.held_out_seed())?,
            bitops: self.cost.bitops(plan, act, kept),
            latency,
            model_size_bytes: self.cost.model_size_bytes(plan)?,
            kept_steps: kept.len(),
        })
    }

    pub fn ablations(&self, references: &[Latent]) -> Result<Vec<AblationRow>> {
        Variant::ALL.iter().map(|&v| self.variant(v, references)).collect()
    }
}

/// `ablation.csv`: `variant,drift_mse,bitops,latency,model_size_bytes,kept_steps`.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// `bits_heatmap.csv`: one row per layer with weight bits, group size and
/// the activation width it computes with in each phase bin.
pub fn write_bits_heatmap(path: &Path, plan: &BitPlan, policy: &DaqPolicy) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["layer", "layer_id", "w_bits", "group_size", "early", "mid", "late"])
        .map_err(csv_err)?;
    for (i, a) in plan.layers.iter().enumerate() {
        let act = |bin: PhaseBin| match a.precision.is_int() {
            true => policy.bits.get(bin) as u32,
            false => a.precision.bits(),
        };
        w.write_record([
            i.to_string(),
            a.layer_id.clone(),
            a.precision.bits().to_string(),
            a.group_size.to_string(),
            act(PhaseBin::Early).to_string(),
            act(PhaseBin::Mid).to_string(),
            act(PhaseBin::Late).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock of the sampling loop: mean over `runs` after `warmups`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub mean_ms: f64,
    pub runs: usize,
    pub warmups: usize,
}

pub fn measure_wall_clock(
    model: &TinyDiT,
    student: &Student,
    kept: &[usize],
    seed: u64,
    warmups: usize,
    runs: usize,
) -> Result<WallClock> {
    if runs == 0 {
        return Err(Error::invalid("wall-clock needs at least one timed run"));
    }
    for _ in 0..warmups {
        sample(model, student, kept, 1, seed)?;
    }
    let start = Instant::now();
    for _ in 0..runs {
        sample(model, student, kept, 1, seed)?;
    }
    Ok(WallClock {
        mean_ms: start.elapsed().as_secs_f64() * 1e3 / runs as f64,
        runs,
        warmups,
    })
}

/// Costs of the full-precision teacher on every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub model_size_bytes: u64,
    pub bitops: u64,
    pub latency: f64,
    pub steps: usize,
}

impl BaselineRun {
    pub fn teacher(cost: &CostModel) -> Self {
        let plan = BitPlan::uniform(Precision::Fp32, 1);
        let all: Vec<usize> = (0..cost.num_steps()).collect();
        let act = ActBits::Static(32);
        Self {
            model_size_bytes: cost.fp32_size_bytes(),
            bitops: cost.bitops(&plan, act, &all),
            latency: cost.latency(&plan, act, &all),
            steps: all.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSizes {
    pub fp_mb: f64,
    pub plan_mb: f64,
    pub ratio: f64,
    pub note: String,
}

impl Default for ReferenceSizes {
    fn default() -> Self {
        Self {
            fp_mb: REFERENCE_FP_MB,
            plan_mb: REFERENCE_PLAN_MB,
            ratio: REFERENCE_FP_MB / REFERENCE_PLAN_MB,
            note: "published large-model sizes, listed for context; not reproduced here".into(),
        }
    }
}

/// Per-step mean over images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub t: usize,
    pub bin: PhaseBin,
    pub a_bits: Option<u8>,
    pub mean_tau: Option<f64>,
}

pub fn tau_trace(log: &[StepLog]) -> Vec<TauPoint> {
    let mut ts: Vec<usize> = log.iter().map(|r| r.t).collect();
    ts.sort_unstable();
    ts.dedup();
    ts.into_iter()
        .rev()
        .map(|t| {
            let rows: Vec<&StepLog> = log.iter().filter(|r| r.t == t).collect();
            let taus: Vec<f64> = rows.iter().filter_map(|r| r.mean_tau).collect();
            TauPoint {
                t,
                bin: rows[0].bin,
                a_bits: rows[0].a_bits,
                mean_tau: (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployReport {
    pub schema_version: u32,
    /// Metrics standing in for ones that need hardware or real images.
    pub substitutions: Vec<String>,
    pub model_size_bytes: u64,
    pub baseline_model_size_bytes: Option<u64>,
    pub compression_ratio: Option<f64>,
    pub kept_steps: usize,
    pub total_steps: usize,
    pub kept_fraction: f64,
    pub schedule: Vec<usize>,
    pub bitops: u64,
    pub baseline_bitops: Option<u64>,
    pub bitops_ratio: Option<f64>,
    pub latency_units: f64,
    pub baseline_latency_units: Option<f64>,
    pub speedup: Option<f64>,
    pub drift_mse: f64,
    pub n_images: usize,
    pub tau_trace: Vec<TauPoint>,
    pub ablation: Vec<AblationRow>,
    pub reference: ReferenceSizes,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock: Option<WallClock>,
    pub warnings: Vec<String>,
    /// Figure and table files this report refers to, relative to the run
    /// directory.
    pub files: Vec<String>,
}

pub struct ReportInputs<'a> {
    pub cost: &'a CostModel,
    pub plan: &'a BitPlan,
    pub policy: &'a DaqPolicy,
    pub kept: &'a [usize],
    pub drift_mse: f64,
    pub n_images: usize,
    pub log: &'a [StepLog],
    pub baseline: Option<BaselineRun>,
    pub ablation: Vec<AblationRow>,
    pub wall_clock: Option<WallClock>,
    pub files: Vec<String>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0 && num > 0.0).then(|| num / den)
}

pub fn build_report(inp: ReportInputs<'_>) -> Result<DeployReport> {
    let act = ActBits::Daq(inp.policy);
    let size = inp.cost.model_size_bytes(inp.plan)?;
    let bitops = inp.cost.bitops(inp.plan, act, inp.kept);
    let latency = inp.cost.latency(inp.plan, act, inp.kept);
    let mut warnings = Vec::new();
    if inp.baseline.is_none() {
        warnings.push("baseline run missing: baseline fields are null".to_string());
    }
    if inp.ablation.is_empty() {
        warnings.push("ablation rows missing".to_string());
    }
    let b = inp.baseline;
    let total = inp.cost.num_steps();
    Ok(DeployReport {
        schema_version: REPORT_SCHEMA_VERSION,
        substitutions: vec![
            "drift_mse (final-latent MSE against the full-schedule teacher) replaces FID".into(),
            "latency is in analytic cost units, not seconds".into(),
            "energy is not reported".into(),
        ],
        model_size_bytes: size,
        baseline_model_size_bytes: b.map(|b| b.model_size_bytes),
        compression_ratio: b.and_then(|b| ratio(b.model_size_bytes as f64, size as f64)),
        kept_steps: inp.kept.len(),
        total_steps: total,
        kept_fraction: inp.kept.len() as f64 / total as f64,
        schedule: inp.kept.to_vec(),
        bitops,
        baseline_bitops: b.map(|b| b.bitops),
        bitops_ratio: b.and_then(|b| ratio(b.bitops as f64, bitops as f64)),
        latency_units: latency,
        baseline_latency_units: b.map(|b| b.latency),
        speedup: b.and_then(|b| ratio(b.latency, latency)),
        drift_mse: inp.drift_mse,
        n_images: inp.n_images,
        tau_trace: tau_trace(inp.log),
        ablation: inp.ablation,
        reference: ReferenceSizes::default(),
        wall_clock: inp.wall_clock,
        warnings,
        files: inp.files,
    })
}

/// Layer count of the deployed model, for callers that only hold a plan.
pub fn num_layers() -> usize {
    layer_table().len()
}
