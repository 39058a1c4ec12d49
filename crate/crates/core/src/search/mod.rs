//! Bit-plan search: mutation, fingerprints, the penalized score, the drift
//! objective, evolutionary refinement, the budgeted greedy planner and the
//! joint activation-bits/step-count search.

mod evolve;
mod joint;
mod planner;

pub use evolve::{evolve, successive_halving, write_evolution_csv, EvolveResult, GenerationStats, HalvingResult};
pub use joint::{
    final_latent_mse, joint_search, teacher_references, write_pareto_csv, JointCandidate, JointConfig,
    JointProblem, JointResult,
};
pub use planner::{
    joint_budget_plan, ModelPlannerCost, DEFAULT_EXACT_LIMIT, Move, PlannerCost, PlannerInput, PlannerResult,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::daq::DaqPolicy;
use crate::eval::{EvalSet, Fidelity};
use crate::model::TinyDiT;
use crate::quant::{ActBits, BitPlan, CostModel, Precision};
use crate::student::{ActivationMode, PackCache, Student};
use crate::{Error, Result};

/// Ordered weight-precision and group-size choices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub bits: Vec<Precision>,
    pub groups: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            bits: vec![Precision::W4, Precision::W6, Precision::W8, Precision::Fp16],
            groups: vec![32, 64, 128, 192, 288],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.bits.is_empty() || self.groups.is_empty() {
            return Err(Error::invalid("search space needs at least one precision and group"));
        }
        if self.bits.windows(2).any(|w| w[0] >= w[1]) || self.groups.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("search space choices must be strictly ascending"));
        }
        if self.groups.contains(&0) {
            return Err(Error::invalid("group size 0 in search space"));
        }
        Ok(())
    }

    /// Position of `p` in the bit set, or of the closest choice below it.
    fn bit_pos(&self, p: Precision) -> usize {
        self.bits.iter().rposition(|&b| b <= p).unwrap_or(0)
    }

    fn group_pos(&self, g: usize) -> usize {
        self.groups.iter().rposition(|&x| x <= g).unwrap_or(0)
    }
}

/// One step up or down an ordered list, reflecting at the ends.
fn step_index(pos: usize, len: usize, up: bool) -> usize {
    match (up, pos) {
        _ if len <= 1 => 0,
        (true, p) if p + 1 < len => p + 1,
        (true, p) => p - 1,
        (false, 0) => 1,
        (false, p) => p - 1,
    }
}

/// Each non-frozen layer mutates with probability `rate`: its precision or
/// its group moves one step within the space (uniform choice).
pub fn mutate(plan: &BitPlan, space: &SearchSpace, rate: f64, rng: &mut impl Rng) -> BitPlan {
    let mut out = plan.clone();
    for layer in out.layers.iter_mut().filter(|l| !l.frozen) {
        if !rng.random_bool(rate.clamp(0.0, 1.0)) {
            continue;
        }
        let move_bits = match (space.bits.len() > 1, space.groups.len() > 1) {
            (true, true) => rng.random_bool(0.5),
            (can_bits, _) => can_bits,
        };
        let up = rng.random_bool(0.5);
        if move_bits {
            let pos = space.bit_pos(layer.precision);
            layer.precision = space.bits[step_index(pos, space.bits.len(), up)];
        } else {
            let pos = space.group_pos(layer.group_size);
            layer.group_size = space.groups[step_index(pos, space.groups.len(), up)];
        }
    }
    out
}

fn digest64(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// 64-bit hex digest of a bit plan.
pub fn plan_fingerprint(plan: &BitPlan) -> String {
    digest64(&[&serde_json::to_vec(plan).expect("plan serializes")])
}

/// 64-bit hex digest of a full candidate.
pub fn candidate_fingerprint(plan: &BitPlan, schedule: &[usize], daq: Option<&DaqPolicy>) -> String {
    digest64(&[
        &serde_json::to_vec(plan).expect("plan serializes"),
        &serde_json::to_vec(schedule).expect("schedule serializes"),
        &serde_json::to_vec(&daq).expect("policy serializes"),
    ])
}

/// Cost side of one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub drift_mse: f64,
    pub latency: f64,
    pub bitops: f64,
    pub mem_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    pub latency: f64,
    pub bitops: f64,
    pub mem_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub drift_mse: f64,
    pub latency_penalty: f64,
    pub bitops_penalty: f64,
    pub total: f64,
}

/// `max(0, cost/budget − 1)`.
pub fn hinge(cost: f64, budget: f64) -> f64 {
    if budget > 0.0 {
        (cost / budget - 1.0).max(0.0)
    } else if cost > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// `drift + λ·lat_penalty + μ·bitops_penalty`.
pub fn score(parts: &ScoreParts, budgets: &Budgets, lambda: f64, mu: f64) -> ScoreBreakdown {
    let latency_penalty = hinge(parts.latency, budgets.latency);
    let bitops_penalty = hinge(parts.bitops, budgets.bitops);
    let total = parts.drift_mse
        + if lambda == 0.0 { 0.0 } else { lambda * latency_penalty }
        + if mu == 0.0 { 0.0 } else { mu * bitops_penalty };
    ScoreBreakdown {
        drift_mse: parts.drift_mse,
        latency_penalty,
        bitops_penalty,
        total,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCandidate {
    pub bitplan: BitPlan,
    pub schedule: Vec<usize>,
    pub daq: Option<DaqPolicy>,
    pub fingerprint: String,
    pub parts: ScoreParts,
    pub score: ScoreBreakdown,
}

impl PlanCandidate {
    pub fn new(
        bitplan: BitPlan,
        schedule: Vec<usize>,
        daq: Option<DaqPolicy>,
        parts: ScoreParts,
        score: ScoreBreakdown,
    ) -> Self {
        let fingerprint = candidate_fingerprint(&bitplan, &schedule, daq.as_ref());
        Self {
            bitplan,
            schedule,
            daq,
            fingerprint,
            parts,
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub population: usize,
    pub elites: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    /// Successive-halving fidelities, cheapest first; the last one is the
    /// full-fidelity score.
    pub stages: Vec<Fidelity>,
    pub lambda: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub space: SearchSpace,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 12,
            elites: 4,
            generations: 6,
            mutation_rate: 0.10,
            stages: vec![Fidelity::new(2, 6), Fidelity::new(6, 12)],
            lambda: 0.5,
            mu: 0.5,
            epsilon: 1e-8,
            space: SearchSpace::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.elites == 0 || self.elites >= self.population {
            return Err(Error::invalid(format!(
                "need 0 < elites ({}) < population ({})",
                self.elites, self.population
            )));
        }
        if !(self.mutation_rate > 0.0 && self.mutation_rate < 1.0) {
            return Err(Error::invalid(format!("mutation rate {} outside (0, 1)", self.mutation_rate)));
        }
        if self.stages.is_empty() {
            return Err(Error::invalid("at least one halving stage is required"));
        }
        if self.lambda < 0.0 || self.mu < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::invalid("λ, μ must be nonnegative and ε positive"));
        }
        self.space.validate()
    }
}

/// Anything that can score a bit plan at a given fidelity (lower is better).
pub trait Objective: Sync {
    fn evaluate(&self, plan: &BitPlan, fid: Fidelity) -> Result<f64>;
}

impl<F> Objective for F
where
    F: Fn(&BitPlan, Fidelity) -> Result<f64> + Sync,
{
    fn evaluate(&self, plan: &BitPlan, fid: Fidelity) -> Result<f64> {
        self(plan, fid)
    }
}

/// Drift of the student built from a plan on the cached evaluation set,
/// plus penalties against fixed budgets.
pub struct DriftObjective<'a> {
    pub model: &'a TinyDiT,
    pub cache: &'a PackCache,
    pub evalset: &'a EvalSet,
    pub cost: &'a CostModel,
    pub mode: ActivationMode,
    pub schedule: Vec<usize>,
    pub budgets: Budgets,
    pub lambda: f64,
    pub mu: f64,
}

impl DriftObjective<'_> {
    fn act(&self) -> ActBits<'_> {
        match &self.mode {
            ActivationMode::Dynamic(p) => ActBits::Daq(p),
            _ => ActBits::Static(8),
        }
    }

    pub fn drift(&self, plan: &BitPlan, fid: Fidelity) -> Result<f64> {
        let student = Student::build(self.model, plan, self.cache, self.mode.clone())?;
        self.evalset.drift(self.model, &student, fid).map_err(|e| match e {
            Error::NumericFailure { layer, detail } => Error::NumericFailure {
                layer,
                detail: format!("{detail} (candidate {})", plan_fingerprint(plan)),
            },
            other => other,
        })
    }

    pub fn parts(&self, plan: &BitPlan, fid: Fidelity) -> Result<ScoreParts> {
        Ok(ScoreParts {
            drift_mse: self.drift(plan, fid)?,
            latency: self.cost.latency(plan, self.act(), &self.schedule),
            bitops: self.cost.bitops(plan, self.act(), &self.schedule) as f64,
            mem_bytes: self.cost.model_size_bytes(plan)? as f64,
        })
    }
}

impl Objective for DriftObjective<'_> {
    fn evaluate(&self, plan: &BitPlan, fid: Fidelity) -> Result<f64> {
        let parts = self.parts(plan, fid)?;
        Ok(score(&parts, &self.budgets, self.lambda, self.mu).total)
    }
}

/// Sort key shared by every ranking: score, then fingerprint.
pub(crate) fn rank_cmp(a: &(f64, String), b: &(f64, String)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
}
