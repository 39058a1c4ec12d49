//! Budgeted greedy planner over weight precisions and kept steps.
//!
//! Starts from every layer at the top of its ladder and every candidate step
//! kept, then repeatedly applies the better of two moves until both budgets
//! hold:
//!
//! * drop the lowest-drift non-tail step `t*`, scored
//!   `c_step(t*) / (ε + D̃(t*))` with `D̃ = δ / max δ`;
//! * move one layer one rung down its ladder, scored
//!   `Δc_lat / (ε + s(ℓ))` with `Δc_lat` summed over the kept steps.
//!
//! Step costs are recomputed under the current precisions. While memory is
//! over budget only downgrades are eligible, since dropping steps frees no
//! memory, and they are ranked by `Δc_mem / (ε + s(ℓ))` instead. Downgrade
//! scores can only fall as steps are dropped, so the heaps are refreshed
//! lazily.
//!
//! With `reclaim` set, a final pass undoes moves while both budgets hold.
//! Instances small enough to enumerate are solved exactly instead.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::daq::DaqPolicy;
use crate::pruning::{tail_start, DriftProfile};
use crate::quant::{ActBits, BitPlan, CostModel, Precision};
use crate::{Error, Result};

/// Cost oracle for the planner.
pub trait PlannerCost {
    fn num_layers(&self) -> usize;
    /// Latency of one layer for one forward at step `t`.
    fn layer_latency(&self, layer: usize, precision: Precision, t: usize) -> f64;
    fn layer_memory(&self, layer: usize, precision: Precision) -> f64;
    /// Memory not attributable to any planned layer.
    fn fixed_memory(&self) -> f64 {
        0.0
    }
}

/// Costs from the model's [`CostModel`] with fixed per-layer groups and a
/// DAQ policy for the activation width.
pub struct ModelPlannerCost<'a> {
    pub cost: &'a CostModel,
    pub groups: Vec<usize>,
    pub policy: DaqPolicy,
}

impl<'a> ModelPlannerCost<'a> {
    pub fn new(cost: &'a CostModel, plan: &BitPlan, policy: DaqPolicy) -> Self {
        Self {
            cost,
            groups: plan.layers.iter().map(|l| l.group_size).collect(),
            policy,
        }
    }
}

impl PlannerCost for ModelPlannerCost<'_> {
    fn num_layers(&self) -> usize {
        self.groups.len()
    }

    fn layer_latency(&self, layer: usize, precision: Precision, t: usize) -> f64 {
        self.cost.layer_latency(layer, precision, ActBits::Daq(&self.policy), t)
    }

    fn layer_memory(&self, layer: usize, precision: Precision) -> f64 {
        self.cost.c_mem(layer, precision, self.groups[layer]) as f64
    }

    fn fixed_memory(&self) -> f64 {
        self.cost.fixed_bytes() as f64
    }
}

pub struct PlannerInput<'a> {
    /// Allowed precisions per layer, ascending; the planner starts at the
    /// last entry. A single-entry ladder pins the layer.
    pub ladders: Vec<Vec<Precision>>,
    /// Per-layer sensitivity `s(ℓ)`, nonnegative.
    pub sensitivity: Vec<f64>,
    /// Drift over the candidate steps; every candidate starts kept.
    pub profile: &'a DriftProfile,
    pub rho: f64,
    pub lat_budget: f64,
    pub mem_budget: f64,
    pub epsilon: f64,
    /// Undo moves afterwards while both budgets still hold.
    pub reclaim: bool,
    /// Solve exactly by enumeration when the number of (precision, kept set)
    /// configurations is at most this; `0` always uses the greedy path.
    pub exact_limit: u64,
}

/// Default for [`PlannerInput::exact_limit`].
pub const DEFAULT_EXACT_LIMIT: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Move {
    RemoveStep {
        t: usize,
        score: f64,
        latency_after: f64,
    },
    Downgrade {
        layer: usize,
        from: Precision,
        to: Precision,
        score: f64,
        latency_after: f64,
        memory_after: f64,
    },
    RestoreStep {
        t: usize,
        gain: f64,
        latency_after: f64,
    },
    Upgrade {
        layer: usize,
        from: Precision,
        to: Precision,
        gain: f64,
        latency_after: f64,
        memory_after: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerResult {
    pub precisions: Vec<Precision>,
    pub kept: Vec<usize>,
    pub moves: Vec<Move>,
    pub latency: f64,
    pub memory: f64,
}

/// `(score, layer, rung the score was computed at)`; entries for a rung the
/// layer has since left are discarded on pop.
#[derive(PartialEq)]
struct HeapKey(f64, Reverse<usize>, usize);

impl Eq for HeapKey {}

impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

struct State<'c> {
    cost: &'c dyn PlannerCost,
    rung: Vec<usize>,
    ladders: Vec<Vec<Precision>>,
    kept: Vec<usize>,
}

impl State<'_> {
    fn precision(&self, layer: usize) -> Precision {
        self.ladders[layer][self.rung[layer]]
    }

    fn step_cost(&self, t: usize) -> f64 {
        (0..self.rung.len())
            .map(|l| self.cost.layer_latency(l, self.precision(l), t))
            .sum()
    }

    fn latency(&self) -> f64 {
        self.kept.iter().map(|&t| self.step_cost(t)).sum()
    }

    fn memory(&self) -> f64 {
        self.cost.fixed_memory()
            + (0..self.rung.len())
                .map(|l| self.cost.layer_memory(l, self.precision(l)))
                .sum::<f64>()
    }

    /// Memory saved by moving `layer` down one rung.
    fn memory_gain(&self, layer: usize) -> Option<f64> {
        let r = self.rung[layer];
        (r > 0).then(|| {
            self.cost.layer_memory(layer, self.ladders[layer][r])
                - self.cost.layer_memory(layer, self.ladders[layer][r - 1])
        })
    }

    /// Latency saved over the kept steps by moving `layer` down one rung.
    fn downgrade_gain(&self, layer: usize) -> Option<f64> {
        let r = self.rung[layer];
        if r == 0 {
            return None;
        }
        let (hi, lo) = (self.ladders[layer][r], self.ladders[layer][r - 1]);
        Some(
            self.kept
                .iter()
                .map(|&t| self.cost.layer_latency(layer, hi, t) - self.cost.layer_latency(layer, lo, t))
                .sum(),
        )
    }
}

fn check_input(input: &PlannerInput<'_>, cost: &dyn PlannerCost) -> Result<()> {
    let n = cost.num_layers();
    if input.ladders.len() != n || input.sensitivity.len() != n {
        return Err(Error::invalid(format!(
            "planner needs one ladder and sensitivity per layer ({n})"
        )));
    }
    if input.ladders.iter().any(|l| l.is_empty() || l.windows(2).any(|w| w[0] >= w[1])) {
        return Err(Error::invalid("precision ladders must be nonempty and ascending"));
    }
    if !(input.lat_budget > 0.0 && input.mem_budget > 0.0) {
        return Err(Error::invalid("budgets must be positive"));
    }
    if input.sensitivity.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::invalid("sensitivities must be finite and nonnegative"));
    }
    if input.epsilon <= 0.0 {
        return Err(Error::invalid("ε must be positive"));
    }
    Ok(())
}

/// Greedy joint precision/step planner; see the module docs.
pub fn joint_budget_plan(input: &PlannerInput<'_>, cost: &dyn PlannerCost) -> Result<PlannerResult> {
    check_input(input, cost)?;
    let profile = input.profile;
    let start = tail_start(profile.num_steps, input.rho);
    let tail: Vec<usize> = profile.timesteps.iter().copied().filter(|&t| t >= start).collect();

    // Feasibility at the floor: lowest rungs, tail only.
    let floor = State {
        cost,
        rung: vec![0; input.ladders.len()],
        ladders: input.ladders.clone(),
        kept: tail.clone(),
    };
    let (min_lat, min_mem) = (floor.latency(), floor.memory());
    if min_lat > input.lat_budget {
        return Err(Error::infeasible(
            "latency",
            format!(
                "lowest precisions with only the protected tail cost {min_lat:.6e} > budget {:.6e}",
                input.lat_budget
            ),
        ));
    }
    if min_mem > input.mem_budget {
        return Err(Error::infeasible(
            "memory",
            format!(
                "lowest precisions need {min_mem:.0} bytes > budget {:.0}",
                input.mem_budget
            ),
        ));
    }

    let d_norm = profile.normalized();
    if let Some(res) = exact_plan(input, cost, &d_norm, start)? {
        return Ok(res);
    }

    let mut st = State {
        cost,
        rung: input.ladders.iter().map(|l| l.len() - 1).collect(),
        ladders: input.ladders.clone(),
        kept: profile.timesteps.clone(),
    };
    // Prunable steps, lowest drift first; ties drop the smaller t first.
    let mut prunable: Vec<(f64, usize)> = profile
        .timesteps
        .iter()
        .zip(&d_norm)
        .filter(|(t, _)| **t < start)
        .map(|(&t, &d)| (d, t))
        .collect();
    prunable.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut next_step = 0;

    let eps = input.epsilon;
    let sens = &input.sensitivity;
    let lat_key = |st: &State<'_>, l: usize| st.downgrade_gain(l).map(|g| g / (eps + sens[l]));
    let mem_key = |st: &State<'_>, l: usize| st.memory_gain(l).map(|g| g / (eps + sens[l]));
    let seed_heap = |st: &State<'_>, key: &dyn Fn(&State<'_>, usize) -> Option<f64>| {
        (0..st.rung.len())
            .filter_map(|l| key(st, l).map(|s| HeapKey(s, Reverse(l), st.rung[l])))
            .collect::<BinaryHeap<_>>()
    };
    let mut lat_heap = seed_heap(&st, &lat_key);
    let mut mem_heap = seed_heap(&st, &mem_key);

    let mut latency = st.latency();
    let mut memory = st.memory();
    let mut moves = Vec::new();

    while latency > input.lat_budget || memory > input.mem_budget {
        let mem_over = memory > input.mem_budget;
        let (heap, key): (&mut BinaryHeap<HeapKey>, &dyn Fn(&State<'_>, usize) -> Option<f64>) = if mem_over {
            (&mut mem_heap, &mem_key)
        } else {
            (&mut lat_heap, &lat_key)
        };
        let best_bit = pop_fresh(heap, &st, key);
        let step = (!mem_over && next_step < prunable.len()).then(|| {
            let (d, t) = prunable[next_step];
            (st.step_cost(t) / (eps + d), t)
        });

        let take_step = match (step, best_bit) {
            (Some((ss, _)), Some((sb, _))) => ss > sb,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => {
                let resource = if mem_over { "memory" } else { "latency" };
                return Err(Error::infeasible(
                    resource,
                    format!("no moves left at latency {latency:.6e}, memory {memory:.0}"),
                ));
            }
        };
        if take_step {
            let (score, t) = step.expect("checked");
            if let Some((sb, l)) = best_bit {
                heap.push(HeapKey(sb, Reverse(l), st.rung[l]));
            }
            next_step += 1;
            st.kept.retain(|&k| k != t);
            latency = st.latency();
            moves.push(Move::RemoveStep {
                t,
                score,
                latency_after: latency,
            });
        } else {
            let (score, l) = best_bit.expect("checked");
            let from = st.precision(l);
            st.rung[l] -= 1;
            let to = st.precision(l);
            latency = st.latency();
            memory = st.memory();
            moves.push(Move::Downgrade {
                layer: l,
                from,
                to,
                score,
                latency_after: latency,
                memory_after: memory,
            });
            if let Some(s) = lat_key(&st, l) {
                lat_heap.push(HeapKey(s, Reverse(l), st.rung[l]));
            }
            if let Some(s) = mem_key(&st, l) {
                mem_heap.push(HeapKey(s, Reverse(l), st.rung[l]));
            }
        }
    }

    if input.reclaim {
        reclaim(&mut st, input, &d_norm, &mut moves, &mut latency, &mut memory);
        // Second start: grow from the floor and keep whichever ends lower.
        let mut alt = floor;
        let (mut alt_lat, mut alt_mem) = (min_lat, min_mem);
        let mut alt_moves = Vec::new();
        reclaim(&mut alt, input, &d_norm, &mut alt_moves, &mut alt_lat, &mut alt_mem);
        if surrogate(&alt, input, &d_norm) < surrogate(&st, input, &d_norm) - 1e-12 {
            st = alt;
            moves = alt_moves;
            latency = alt_lat;
            memory = alt_mem;
        }
    }

    Ok(PlannerResult {
        precisions: (0..st.rung.len()).map(|l| st.precision(l)).collect(),
        kept: st.kept,
        moves,
        latency,
        memory,
    })
}

/// Pops the best current downgrade. Scores never rise while the rung is
/// unchanged, so a refreshed entry that still beats the next stored key is
/// the true maximum.
fn pop_fresh(
    heap: &mut BinaryHeap<HeapKey>,
    st: &State<'_>,
    key: &dyn Fn(&State<'_>, usize) -> Option<f64>,
) -> Option<(f64, usize)> {
    loop {
        let HeapKey(stored, Reverse(l), rung) = heap.pop()?;
        if rung != st.rung[l] {
            continue;
        }
        let Some(fresh) = key(st, l) else { continue };
        let next = heap.peek().map_or(f64::NEG_INFINITY, |k| k.0);
        if fresh == stored || fresh >= next {
            return Some((fresh, l));
        }
        heap.push(HeapKey(fresh, Reverse(l), rung));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Edit {
    AddStep(usize),
    DropStep(usize),
    Up(usize),
    Down(usize),
}

impl State<'_> {
    fn apply(&mut self, e: Edit) {
        match e {
            Edit::AddStep(t) => {
                let pos = self.kept.partition_point(|&k| k < t);
                self.kept.insert(pos, t);
            }
            Edit::DropStep(t) => self.kept.retain(|&k| k != t),
            Edit::Up(l) => self.rung[l] += 1,
            Edit::Down(l) => self.rung[l] -= 1,
        }
    }

    fn undo(&mut self, e: Edit) {
        self.apply(match e {
            Edit::AddStep(t) => Edit::DropStep(t),
            Edit::DropStep(t) => Edit::AddStep(t),
            Edit::Up(l) => Edit::Down(l),
            Edit::Down(l) => Edit::Up(l),
        });
    }
}

/// Exhaustive optimum of the drift proxy under both budgets, or `None` when
/// the instance exceeds `exact_limit`. Ties prefer fewer edits from the
/// all-top start, then lower latency, then enumeration order. The move log
/// lists the downgrades, then the removed steps, from the all-top start.
fn exact_plan(
    input: &PlannerInput<'_>,
    cost: &dyn PlannerCost,
    d_norm: &[f64],
    start: usize,
) -> Result<Option<PlannerResult>> {
    let profile = input.profile;
    let prunable: Vec<usize> = (0..profile.len()).filter(|&i| profile.timesteps[i] < start).collect();
    let size = input
        .ladders
        .iter()
        .try_fold(1u64, |acc, l| acc.checked_mul(l.len() as u64))
        .and_then(|c| 1u64.checked_shl(prunable.len() as u32).and_then(|m| c.checked_mul(m)));
    match size {
        Some(n) if n <= input.exact_limit => {}
        _ => return Ok(None),
    }

    let n_layers = input.ladders.len();
    let mut rung = vec![0usize; n_layers];
    let mut best: Option<(f64, usize, f64, Vec<usize>, u64)> = None;
    loop {
        let st = State {
            cost,
            rung: rung.clone(),
            ladders: input.ladders.clone(),
            kept: Vec::new(),
        };
        if st.memory() <= input.mem_budget {
            let step: Vec<f64> = profile.timesteps.iter().map(|&t| st.step_cost(t)).collect();
            let fixed: f64 = (0..profile.len()).filter(|&i| profile.timesteps[i] >= start).map(|i| step[i]).sum();
            let bits: f64 = (0..n_layers)
                .map(|l| input.sensitivity[l] * (input.ladders[l].len() - 1 - rung[l]) as f64)
                .sum();
            let rung_edits: usize = (0..n_layers).map(|l| input.ladders[l].len() - 1 - rung[l]).sum();
            for mask in 0..1u64 << prunable.len() {
                let mut lat = fixed;
                let mut drift = bits;
                for (j, &i) in prunable.iter().enumerate() {
                    if mask >> j & 1 == 1 {
                        lat += step[i];
                    } else {
                        drift += d_norm[i];
                    }
                }
                if lat > input.lat_budget {
                    continue;
                }
                let edits = rung_edits + prunable.len() - mask.count_ones() as usize;
                let better = best.as_ref().is_none_or(|(bd, be, bl, ..)| {
                    drift < *bd || (drift == *bd && (edits, lat) < (*be, *bl))
                });
                if better {
                    best = Some((drift, edits, lat, rung.clone(), mask));
                }
            }
        }
        // Mixed-radix increment.
        let mut l = 0;
        while l < n_layers {
            rung[l] += 1;
            if rung[l] < input.ladders[l].len() {
                break;
            }
            rung[l] = 0;
            l += 1;
        }
        if l == n_layers {
            break;
        }
    }
    let Some((_, _, _, rung, mask)) = best else {
        return Err(Error::infeasible(
            "latency",
            "no precision and step assignment meets both budgets",
        ));
    };

    let mut st = State {
        cost,
        rung: input.ladders.iter().map(|l| l.len() - 1).collect(),
        ladders: input.ladders.clone(),
        kept: profile.timesteps.clone(),
    };
    let mut moves = Vec::new();
    for (l, &target) in rung.iter().enumerate() {
        while st.rung[l] > target {
            let from = st.precision(l);
            st.rung[l] -= 1;
            moves.push(Move::Downgrade {
                layer: l,
                from,
                to: st.precision(l),
                score: input.sensitivity[l],
                latency_after: st.latency(),
                memory_after: st.memory(),
            });
        }
    }
    for (j, &i) in prunable.iter().enumerate() {
        if mask >> j & 1 == 0 {
            let t = profile.timesteps[i];
            st.kept.retain(|&k| k != t);
            moves.push(Move::RemoveStep {
                t,
                score: d_norm[i],
                latency_after: st.latency(),
            });
        }
    }
    let (latency, memory) = (st.latency(), st.memory());
    Ok(Some(PlannerResult {
        precisions: (0..n_layers).map(|l| st.precision(l)).collect(),
        kept: st.kept,
        moves,
        latency,
        memory,
    }))
}

/// Drift proxy of a state: `D̃(t)` of every dropped step plus `s(ℓ)` per rung
/// below each layer's top.
fn surrogate(st: &State<'_>, input: &PlannerInput<'_>, d_norm: &[f64]) -> f64 {
    let steps: f64 = input
        .profile
        .timesteps
        .iter()
        .zip(d_norm)
        .filter(|(t, _)| st.kept.binary_search(t).is_err())
        .map(|(_, d)| d)
        .sum();
    let bits: f64 = (0..st.rung.len())
        .map(|l| input.sensitivity[l] * (st.ladders[l].len() - 1 - st.rung[l]) as f64)
        .sum();
    steps + bits
}

/// Largest number of edits on either side of one exchange.
const MAX_EXCHANGE: usize = 2;
/// Exchanges kept for the exact budget check each round.
const EXCHANGE_SHORTLIST: usize = 256;

#[derive(Debug, Clone, Copy)]
struct Priced {
    edit: Edit,
    /// Drift proxy restored (up edits) or given up (down edits).
    value: f64,
    lat: f64,
    mem: f64,
}

/// Nonempty subsets of at most `size` entries, in lexicographic order, plus
/// the empty set first when `with_empty`.
fn subsets(n: usize, size: usize, with_empty: bool) -> Vec<Vec<usize>> {
    fn extend(n: usize, size: usize, from: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        for i in from..n {
            cur.push(i);
            out.push(cur.clone());
            if cur.len() < size {
                extend(n, size, i + 1, cur, out);
            }
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if with_empty {
        out.push(Vec::new());
    }
    extend(n, size, 0, &mut Vec::new(), &mut out);
    out
}

/// Local improvement once the budgets hold. Drift is proxied by `D̃(t)` per
/// dropped step and `s(ℓ)` per rung below the top. Each round applies the
/// best exchange: a few restores (a dropped step back, a layer one rung up)
/// paid for by a few further cuts, keeping both budgets. Exchanges
/// are ranked by net proxy gain with additive cost estimates and confirmed
/// exactly before use. Only strict improvements are taken, so the pass
/// terminates.
fn reclaim(
    st: &mut State<'_>,
    input: &PlannerInput<'_>,
    d_norm: &[f64],
    moves: &mut Vec<Move>,
    latency: &mut f64,
    memory: &mut f64,
) {
    let profile = input.profile;
    let start = tail_start(profile.num_steps, input.rho);
    let drift_of = |t: usize| profile.timesteps.binary_search(&t).map_or(0.0, |i| d_norm[i]);
    loop {
        let mut ups = Vec::new();
        let mut downs = Vec::new();
        for &t in &profile.timesteps {
            let c = st.step_cost(t);
            if st.kept.binary_search(&t).is_err() {
                ups.push(Priced { edit: Edit::AddStep(t), value: drift_of(t), lat: c, mem: 0.0 });
            } else if t < start {
                downs.push(Priced { edit: Edit::DropStep(t), value: drift_of(t), lat: -c, mem: 0.0 });
            }
        }
        for l in 0..st.rung.len() {
            let r = st.rung[l];
            let cur = st.precision(l);
            let layer_lat = |p: Precision| st.kept.iter().map(|&t| st.cost.layer_latency(l, p, t)).sum::<f64>();
            if let Some(&hi) = st.ladders[l].get(r + 1) {
                ups.push(Priced {
                    edit: Edit::Up(l),
                    value: input.sensitivity[l],
                    lat: layer_lat(hi) - layer_lat(cur),
                    mem: st.cost.layer_memory(l, hi) - st.cost.layer_memory(l, cur),
                });
            }
            if r > 0 {
                let lo = st.ladders[l][r - 1];
                downs.push(Priced {
                    edit: Edit::Down(l),
                    value: input.sensitivity[l],
                    lat: layer_lat(lo) - layer_lat(cur),
                    mem: st.cost.layer_memory(l, lo) - st.cost.layer_memory(l, cur),
                });
            }
        }

        let up_sets = subsets(ups.len(), MAX_EXCHANGE, false);
        let down_sets = subsets(downs.len(), MAX_EXCHANGE, true);
        // Min-heap of the best exchanges by net gain.
        let mut shortlist: BinaryHeap<Reverse<(HeapKey, usize)>> = BinaryHeap::new();
        let mut exchanges: Vec<(usize, usize)> = Vec::new();
        for (ui, us) in up_sets.iter().enumerate() {
            let gain: f64 = us.iter().map(|&i| ups[i].value).sum();
            let ulat: f64 = us.iter().map(|&i| ups[i].lat).sum();
            let umem: f64 = us.iter().map(|&i| ups[i].mem).sum();
            for (di, ds) in down_sets.iter().enumerate() {
                let net = gain - ds.iter().map(|&i| downs[i].value).sum::<f64>();
                if net <= 1e-12 {
                    continue;
                }
                if shortlist.len() == EXCHANGE_SHORTLIST
                    && shortlist.peek().is_some_and(|Reverse((k, _))| net <= k.0)
                {
                    continue;
                }
                let conflict = us.iter().any(|&u| {
                    ds.iter().any(|&d| matches!((ups[u].edit, downs[d].edit), (Edit::Up(a), Edit::Down(b)) if a == b))
                });
                if conflict {
                    continue;
                }
                let lat = *latency + ulat + ds.iter().map(|&i| downs[i].lat).sum::<f64>();
                let mem = *memory + umem + ds.iter().map(|&i| downs[i].mem).sum::<f64>();
                let slack = 1e-9 * input.lat_budget.abs();
                if lat > input.lat_budget + slack || mem > input.mem_budget {
                    continue;
                }
                let id = exchanges.len();
                exchanges.push((ui, di));
                shortlist.push(Reverse((HeapKey(net, Reverse(id), 0), id)));
                if shortlist.len() > EXCHANGE_SHORTLIST {
                    shortlist.pop();
                }
            }
        }
        let mut ranked: Vec<(f64, usize)> = shortlist
            .into_iter()
            .map(|Reverse((k, id))| (k.0, id))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

        let chosen = ranked.into_iter().find_map(|(_, id)| {
            let (ui, di) = exchanges[id];
            let edits: Vec<Edit> = up_sets[ui]
                .iter()
                .map(|&i| ups[i].edit)
                .chain(down_sets[di].iter().map(|&i| downs[i].edit))
                .collect();
            for &e in &edits {
                st.apply(e);
            }
            let ok = st.latency() <= input.lat_budget && st.memory() <= input.mem_budget;
            for &e in edits.iter().rev() {
                st.undo(e);
            }
            ok.then_some(edits)
        });
        let Some(edits) = chosen else { return };
        for e in edits {
            let from = match e {
                Edit::Up(l) | Edit::Down(l) => Some(st.precision(l)),
                _ => None,
            };
            st.apply(e);
            *latency = st.latency();
            *memory = st.memory();
            moves.push(match e {
                Edit::AddStep(t) => Move::RestoreStep {
                    t,
                    gain: drift_of(t),
                    latency_after: *latency,
                },
                Edit::DropStep(t) => Move::RemoveStep {
                    t,
                    score: drift_of(t),
                    latency_after: *latency,
                },
                Edit::Up(l) => Move::Upgrade {
                    layer: l,
                    from: from.expect("layer edit"),
                    to: st.precision(l),
                    gain: input.sensitivity[l],
                    latency_after: *latency,
                    memory_after: *memory,
                },
                Edit::Down(l) => Move::Downgrade {
                    layer: l,
                    from: from.expect("layer edit"),
                    to: st.precision(l),
                    score: input.sensitivity[l],
                    latency_after: *latency,
                    memory_after: *memory,
                },
            });
        }
    }
}
