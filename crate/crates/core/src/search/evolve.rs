//! Elitist evolution over bit plans with successive-halving evaluation.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mutate, plan_fingerprint, rank_cmp, Objective, SearchConfig};
use crate::eval::Fidelity;
use crate::pruning::csv_err;
use crate::quant::BitPlan;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct HalvingResult {
    /// Survivors of the last stage with their last-stage scores.
    pub survivors: Vec<(BitPlan, f64)>,
    /// Every candidate scored at the final stage, best first.
    pub final_scores: Vec<(BitPlan, f64)>,
    pub evaluations: usize,
    /// Candidates evaluated at each stage.
    pub stage_counts: Vec<usize>,
}

fn score_all(plans: &[BitPlan], fid: Fidelity, objective: &dyn Objective) -> Result<Vec<(BitPlan, f64)>> {
    let scores: Vec<f64> = plans
        .par_iter()
        .map(|p| objective.evaluate(p, fid))
        .collect::<Result<_>>()?;
    let mut out: Vec<(BitPlan, f64, String)> = plans
        .iter()
        .cloned()
        .zip(scores)
        .map(|(p, s)| {
            let fp = plan_fingerprint(&p);
            (p, s, fp)
        })
        .collect();
    out.sort_by(|a, b| rank_cmp(&(a.1, a.2.clone()), &(b.1, b.2.clone())));
    Ok(out.into_iter().map(|(p, s, _)| (p, s)).collect())
}

/// Scores all candidates at each fidelity in turn and keeps the better half
/// (at least one) after every stage. A lone candidate skips intermediate
/// stages and is scored only at the final one.
pub fn successive_halving(
    candidates: Vec<BitPlan>,
    stages: &[Fidelity],
    objective: &dyn Objective,
) -> Result<HalvingResult> {
    if candidates.is_empty() {
        return Err(Error::invalid("successive halving needs at least one candidate"));
    }
    if stages.is_empty() {
        return Err(Error::invalid("successive halving needs at least one stage"));
    }
    let mut pool = candidates;
    let mut evaluations = 0;
    let mut stage_counts = Vec::with_capacity(stages.len());
    let mut scored = Vec::new();
    for (i, &fid) in stages.iter().enumerate() {
        let last = i + 1 == stages.len();
        if pool.len() == 1 && !last {
            stage_counts.push(0);
            continue;
        }
        scored = score_all(&pool, fid, objective)?;
        evaluations += pool.len();
        stage_counts.push(pool.len());
        if !last {
            let keep = (pool.len() / 2).max(1);
            pool = scored.iter().take(keep).map(|(p, _)| p.clone()).collect();
        }
    }
    let keep = (scored.len() / 2).max(1);
    Ok(HalvingResult {
        survivors: scored.iter().take(keep).cloned().collect(),
        final_scores: scored,
        evaluations,
        stage_counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub median: f64,
    pub evaluated: usize,
}

#[derive(Debug, Clone)]
pub struct EvolveResult {
    pub best: BitPlan,
    pub best_score: f64,
    pub elites: Vec<(BitPlan, f64)>,
    pub history: Vec<GenerationStats>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

const MAX_DRAWS_PER_CHILD: usize = 32;

/// Elitist evolution from `seed`. Each generation mutates the elites
/// round-robin into `population − elites` new, never-seen plans, runs them
/// through successive halving, and keeps the best `elites` of the old elites
/// plus the final-stage scores.
pub fn evolve(seed: &BitPlan, cfg: &SearchConfig, objective: &dyn Objective, rng_seed: u64) -> Result<EvolveResult> {
    cfg.validate()?;
    let full = *cfg.stages.last().expect("validated nonempty");
    let seed_score = objective.evaluate(seed, full)?;
    let mut elites = vec![(seed.clone(), seed_score)];
    let mut seen: HashSet<String> = HashSet::from([plan_fingerprint(seed)]);
    let mut history = vec![GenerationStats {
        generation: 0,
        best: seed_score,
        median: seed_score,
        evaluated: 1,
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let n_children = cfg.population - cfg.elites;

    for generation in 1..=cfg.generations {
        let mut children = Vec::with_capacity(n_children);
        let mut draws = 0;
        while children.len() < n_children && draws < n_children * MAX_DRAWS_PER_CHILD {
            let parent = &elites[draws % elites.len()].0;
            draws += 1;
            let child = mutate(parent, &cfg.space, cfg.mutation_rate, &mut rng);
            if seen.insert(plan_fingerprint(&child)) {
                children.push(child);
            }
        }
        let mut pool: Vec<(f64, String, BitPlan)> = elites
            .iter()
            .map(|(p, s)| (*s, plan_fingerprint(p), p.clone()))
            .collect();
        let mut evaluated = 0;
        if !children.is_empty() {
            let res = successive_halving(children, &cfg.stages, objective)?;
            evaluated = res.evaluations;
            pool.extend(
                res.final_scores
                    .into_iter()
                    .map(|(p, s)| (s, plan_fingerprint(&p), p)),
            );
        }
        pool.sort_by(|a, b| rank_cmp(&(a.0, a.1.clone()), &(b.0, b.1.clone())));
        let scores: Vec<f64> = pool.iter().map(|p| p.0).collect();
        elites = pool
            .into_iter()
            .take(cfg.elites)
            .map(|(s, _, p)| (p, s))
            .collect();
        history.push(GenerationStats {
            generation,
            best: elites[0].1,
            median: median(&scores),
            evaluated,
        });
    }
    Ok(EvolveResult {
        best: elites[0].0.clone(),
        best_score: elites[0].1,
        elites,
        history,
    })
}

/// `evolution.csv`: `generation,best,median,evaluated`.
pub fn write_evolution_csv(path: &Path, history: &[GenerationStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for g in history {
        w.serialize(g).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
