//! Local search over per-bin activation bits and the kept-step count with
//! the weight plan held fixed.
//!
//! A candidate is scored by the final-latent MSE of sampling with it against
//! the teacher sampled on the full schedule from the same noise, plus the
//! usual latency/bitops penalties. Latency and memory budgets are hard
//! filters. Neighbours of `(bits, k)`:
//!
//! * one bin's bits one step along the choice list, with `k` refitted to the
//!   largest count the latency budget allows;
//! * `k` scaled by `1 ± k_step` with the bits unchanged.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{candidate_fingerprint, rank_cmp, score, Budgets, ScoreBreakdown, ScoreParts};
use crate::daq::{BinBits, DaqPolicy, PhaseBin};
use crate::model::{cosine_schedule, ddim_sample, initial_noise, FloatExec, Latent, TinyDiT, LATENT_LEN, NUM_CLASSES};
use crate::pruning::{csv_err, select_schedule, select_schedule_for_budget, DriftProfile, Schedule};
use crate::quant::{ActBits, BitPlan, CostModel};
use crate::student::{ActivationMode, PackCache, Student};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub rounds: usize,
    pub n_images: usize,
    pub bit_choices: Vec<u8>,
    pub k_step: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            n_images: 2,
            bit_choices: vec![4, 6, 8],
            k_step: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCandidate {
    pub fingerprint: String,
    pub round: usize,
    pub bits: BinBits,
    pub k: usize,
    pub parts: ScoreParts,
    pub feasible: bool,
    pub score: ScoreBreakdown,
}

#[derive(Debug, Clone)]
pub struct JointResult {
    pub best: JointCandidate,
    pub policy: DaqPolicy,
    pub schedule: Schedule,
    pub evaluated: Vec<JointCandidate>,
}

/// Teacher DDIM over every step from seeded noise, one latent per image.
pub fn teacher_references(model: &TinyDiT, n_images: usize, seed: u64) -> Result<Vec<Latent>> {
    let sched = cosine_schedule(model.num_steps)?;
    let all: Vec<usize> = (0..model.num_steps).collect();
    (0..n_images)
        .into_par_iter()
        .map(|i| ddim_sample(model, &FloatExec, &sched, &all, initial_noise(seed, i), i % NUM_CLASSES))
        .collect()
}

/// Mean per-element MSE of final latents sampled with `student` on `kept`
/// against `references`.
pub fn final_latent_mse(
    model: &TinyDiT,
    student: &Student,
    kept: &[usize],
    references: &[Latent],
    seed: u64,
) -> Result<f64> {
    let sched = cosine_schedule(model.num_steps)?;
    let errs: Vec<f64> = references
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let x = ddim_sample(model, student, &sched, kept, initial_noise(seed, i), i % NUM_CLASSES)?;
            Ok(x.dist_sq(r) / LATENT_LEN as f64)
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

pub struct JointProblem<'a> {
    pub model: &'a TinyDiT,
    pub plan: &'a BitPlan,
    pub cache: &'a PackCache,
    pub cost: &'a CostModel,
    pub profile: &'a DriftProfile,
    pub rho: f64,
    /// Percentile, group and boundaries come from here; bits are searched.
    pub base_policy: DaqPolicy,
    pub budgets: Budgets,
    pub lambda: f64,
    pub mu: f64,
    pub seed: u64,
}

impl JointProblem<'_> {
    fn policy(&self, bits: BinBits) -> DaqPolicy {
        DaqPolicy {
            bits,
            ..self.base_policy.clone()
        }
    }

    fn tail_len(&self) -> usize {
        self.profile.tail(self.rho).len()
    }

    /// Largest `k` whose schedule fits the latency budget under `bits`.
    fn refit_k(&self, bits: BinBits) -> Option<usize> {
        let policy = self.policy(bits);
        let act = ActBits::Daq(&policy);
        select_schedule_for_budget(self.profile, self.rho, self.budgets.latency, |t| {
            self.cost.step_cost(self.plan, act, t)
        })
        .ok()
        .map(|s| s.k)
    }

    fn evaluate(&self, bits: BinBits, k: usize, round: usize, refs: &[Latent]) -> Result<JointCandidate> {
        let schedule = select_schedule(self.profile, k, self.rho)?;
        let policy = self.policy(bits);
        let act = ActBits::Daq(&policy);
        let student = Student::build(self.model, self.plan, self.cache, ActivationMode::Dynamic(policy.clone()))?;
        let parts = ScoreParts {
            drift_mse: final_latent_mse(self.model, &student, &schedule.kept, refs, self.seed)?,
            latency: self.cost.latency(self.plan, act, &schedule.kept),
            bitops: self.cost.bitops(self.plan, act, &schedule.kept) as f64,
            mem_bytes: self.cost.model_size_bytes(self.plan)? as f64,
        };
        let feasible = parts.latency <= self.budgets.latency && parts.mem_bytes <= self.budgets.mem_bytes;
        Ok(JointCandidate {
            fingerprint: candidate_fingerprint(self.plan, &schedule.kept, Some(&policy)),
            round,
            bits,
            k,
            score: score(&parts, &self.budgets, self.lambda, self.mu),
            parts,
            feasible,
        })
    }

    fn neighbours(&self, bits: BinBits, k: usize, cfg: &JointConfig) -> Vec<(BinBits, usize)> {
        let mut out = Vec::new();
        for bin in PhaseBin::ALL {
            let Some(pos) = cfg.bit_choices.iter().position(|&b| b == bits.get(bin)) else {
                continue;
            };
            for next in [pos.checked_sub(1), Some(pos + 1)].into_iter().flatten() {
                if let Some(&b) = cfg.bit_choices.get(next) {
                    let mut nb = bits;
                    *nb.get_mut(bin) = b;
                    if let Some(nk) = self.refit_k(nb) {
                        out.push((nb, nk));
                    }
                }
            }
        }
        let delta = ((k as f64 * cfg.k_step).round() as usize).max(1);
        let lo = self.tail_len();
        let hi = self.profile.len();
        for nk in [k.saturating_sub(delta), k + delta] {
            let nk = nk.clamp(lo, hi);
            if nk != k {
                out.push((bits, nk));
            }
        }
        out
    }
}

fn better(a: &JointCandidate, b: &JointCandidate) -> bool {
    rank_cmp(&(a.score.total, a.fingerprint.clone()), &(b.score.total, b.fingerprint.clone()))
        == std::cmp::Ordering::Less
}

/// Hill-climb from `(start_bits, start_k)`; returns the best feasible
/// candidate seen and every evaluated candidate in evaluation order.
pub fn joint_search(
    problem: &JointProblem<'_>,
    cfg: &JointConfig,
    start_bits: BinBits,
    start_k: usize,
) -> Result<JointResult> {
    let refs = teacher_references(problem.model, cfg.n_images, problem.seed)?;
    let mut seen: HashSet<(BinBits, usize)> = HashSet::from([(start_bits, start_k)]);
    let mut current = problem.evaluate(start_bits, start_k, 0, &refs)?;
    let mut evaluated = vec![current.clone()];
    let mut best: Option<JointCandidate> = current.feasible.then(|| current.clone());

    for round in 1..=cfg.rounds {
        let todo: Vec<(BinBits, usize)> = problem
            .neighbours(current.bits, current.k, cfg)
            .into_iter()
            .filter(|n| seen.insert(*n))
            .collect();
        if todo.is_empty() {
            break;
        }
        let scored: Vec<JointCandidate> = todo
            .iter()
            .map(|&(b, k)| problem.evaluate(b, k, round, &refs))
            .collect::<Result<_>>()?;
        evaluated.extend(scored.iter().cloned());
        let Some(step) = scored
            .into_iter()
            .filter(|c| c.feasible)
            .min_by(|a, b| rank_cmp(&(a.score.total, a.fingerprint.clone()), &(b.score.total, b.fingerprint.clone())))
        else {
            break;
        };
        if best.as_ref().is_none_or(|b| better(&step, b)) {
            best = Some(step.clone());
        }
        if !current.feasible || better(&step, &current) {
            current = step;
        } else {
            break;
        }
    }

    let best = best.ok_or_else(|| {
        Error::infeasible(
            "latency",
            "no activation-bit/step-count candidate meets the latency and memory budgets",
        )
    })?;
    Ok(JointResult {
        policy: problem.policy(best.bits),
        schedule: select_schedule(problem.profile, best.k, problem.rho)?,
        best,
        evaluated,
    })
}

#[derive(Serialize)]
struct ParetoRow<'a> {
    fingerprint: &'a str,
    round: usize,
    early_bits: u8,
    mid_bits: u8,
    late_bits: u8,
    k: usize,
    drift_mse: f64,
    latency: f64,
    bitops: f64,
    mem_bytes: f64,
    feasible: u8,
    score: f64,
    pareto: u8,
}

/// Feasible candidates not dominated in (drift, latency).
fn pareto_flags(cands: &[JointCandidate]) -> Vec<bool> {
    cands
        .iter()
        .map(|c| {
            c.feasible
                && !cands.iter().any(|o| {
                    o.feasible
                        && o.parts.drift_mse <= c.parts.drift_mse
                        && o.parts.latency <= c.parts.latency
                        && (o.parts.drift_mse < c.parts.drift_mse || o.parts.latency < c.parts.latency)
                })
        })
        .collect()
}

/// `pareto.csv`: one row per evaluated candidate.
pub fn write_pareto_csv(path: &Path, cands: &[JointCandidate]) -> Result<()> {
    let flags = pareto_flags(cands);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (c, on_front) in cands.iter().zip(flags) {
        w.serialize(ParetoRow {
            fingerprint: &c.fingerprint,
            round: c.round,
            early_bits: c.bits.early,
            mid_bits: c.bits.mid,
            late_bits: c.bits.late,
            k: c.k,
            drift_mse: c.parts.drift_mse,
            latency: c.parts.latency,
            bitops: c.parts.bitops,
            mem_bytes: c.parts.mem_bytes,
            feasible: c.feasible as u8,
            score: c.score.total,
            pareto: on_front as u8,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Precision;

    #[test]
    fn search_stays_feasible_and_logs_candidates() {
        let model = TinyDiT::new(6, 40);
        let plan = BitPlan::uniform(Precision::W8, 64);
        let cache = PackCache::rtn();
        let cost = CostModel::new(&model);
        let n = model.num_steps;
        let profile = DriftProfile::new(n, 1, (0..n).collect(), (0..n).map(|t| 1.0 / (1.0 + t as f64)).collect()).unwrap();
        let policy = DaqPolicy::default();
        let k0 = 20;
        let s0 = select_schedule(&profile, k0, 0.2).unwrap();
        let lat = cost.latency(&plan, ActBits::Daq(&policy), &s0.kept);
        let problem = JointProblem {
            model: &model,
            plan: &plan,
            cache: &cache,
            cost: &cost,
            profile: &profile,
            rho: 0.2,
            base_policy: policy,
            budgets: Budgets {
                latency: lat,
                bitops: cost.bitops(&plan, ActBits::Daq(&DaqPolicy::default()), &s0.kept) as f64,
                mem_bytes: f64::INFINITY,
            },
            lambda: 0.5,
            mu: 0.5,
            seed: 1,
        };
        let cfg = JointConfig {
            rounds: 1,
            n_images: 1,
            ..JointConfig::default()
        };
        let res = joint_search(&problem, &cfg, BinBits::uniform(8), k0).unwrap();
        assert!(res.best.feasible && res.best.parts.latency <= lat);
        assert!(res.evaluated.len() > 1);
        assert_eq!(res.schedule.k, res.best.k);
        let flags = pareto_flags(&res.evaluated);
        assert!(flags.iter().any(|&f| f));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pareto.csv");
        write_pareto_csv(&path, &res.evaluated).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("fingerprint,round,early_bits"));
        assert_eq!(text.lines().count(), res.evaluated.len() + 1);
    }
}
