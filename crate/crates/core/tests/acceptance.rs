//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits nonzero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dplan_core::calibration::{calibration_captures, combined_score, pca_rank, pca_sensitivity, CalibConfig};
use dplan_core::daq::{daq_quantize, DaqPolicy};
use dplan_core::deploy::{read_ablation_csv, AblationRow, DeployReport, Variant};
use dplan_core::{EvalSet, Fidelity};
use dplan_core::model::{
    cosine_schedule, ForwardObserver, Latent, LatentPool, Linear, LinearExec, NoObserver, StepContext, TinyDiT,
    LATENT_LEN, NUM_CLASSES,
};
use dplan_core::pipeline::{run_all, PlanDoc, RunConfig};
use dplan_core::pruning::{gini, lorenz_coverage, select_schedule, DriftProfile};
use dplan_core::quant::{
    dequantize, gptq_pack, output_mse, quantize_grouped, BitPlan, CostModel, Precision,
};
use dplan_core::search::{
    evolve, joint_budget_plan, score, Budgets, DriftObjective, Objective, PlannerCost, PlannerInput, PlannerResult,
    ScoreParts, SearchConfig, SearchSpace,
};
use dplan_core::student::{ActivationMode, PackCache, Student};
use dplan_core::tensor::Matrix;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(
        elapsed.as_secs_f64() < limit_s,
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn close(a: f64, b: f64, what: &str) -> Result<(), String> {
    check((a - b).abs() <= 1e-12, format!("{what}: {a} vs {b}"))
}

// 1 ---------------------------------------------------------------------

fn formula_fidelity() -> Outcome {
    let t0 = Instant::now();
    close(pca_sensitivity(64, 64, 0.0), 0.5, "s_pca(d, d, 0)")?;
    close(pca_sensitivity(3, 64, 0.0), 0.0234375, "s_pca(3, 64, 0)")?;
    close(pca_sensitivity(32, 64, 0.05), 0.275, "s_pca(32, 64, 0.05)")?;
    close(combined_score(0.0, 0.0, 0.5), 0.0, "blend zeros")?;
    close(combined_score(0.2, 0.6, 0.5), 0.4, "blend 0.2/0.6")?;
    close(combined_score(0.37, 0.9, 1.0), 0.37, "blend alpha=1")?;

    // Percentile 100, 8 bits: tau = max |v|, alpha = tau/127, ties away from zero.
    let (vh, tau, alpha) = daq_quantize(&[0.5, -1.0, 0.25, 0.1], 100.0, 8);
    close(tau, 1.0, "tau")?;
    close(alpha, 1.0 / 127.0, "alpha")?;
    for (got, want) in vh.iter().zip([64.0 / 127.0, -1.0, 32.0 / 127.0, 13.0 / 127.0]) {
        close(*got, want, "v_hat")?;
    }
    // Nearest rank: ceil(0.99 * 100) = 99th smallest of 0.01..1.00.
    let v: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let (_, tau, _) = daq_quantize(&v, 99.0, 8);
    close(tau, 0.99, "nearest-rank tau")?;
    let (vh, tau, _) = daq_quantize(&[0.0; 8], 99.9, 4);
    close(tau, 1e-12, "tau floor")?;
    check(vh.iter().all(|&x| x == 0.0), "zero group must stay zero")?;

    let budgets = Budgets { latency: 10.0, bitops: 100.0, mem_bytes: 1.0 };
    let under = ScoreParts { drift_mse: 0.123, latency: 9.0, bitops: 50.0, mem_bytes: 1.0 };
    close(score(&under, &budgets, 0.5, 0.5).total, 0.123, "under-budget score")?;
    let slow = ScoreParts { latency: 20.0, ..under };
    close(score(&slow, &budgets, 0.5, 0.5).total, 0.623, "latency 2x budget")?;
    let heavy = ScoreParts { bitops: 300.0, ..under };
    close(score(&heavy, &budgets, 0.5, 0.5).total, 1.123, "bitops 3x budget")?;
    within(t0.elapsed(), 1.0)?;
    Ok("PCA score, blend, DAQ and score hand values exact".into())
}

// 2 ---------------------------------------------------------------------

fn quantization_bound() -> Outcome {
    let t0 = Instant::now();
    let bits = [3u8, 4, 6, 8];
    let groups = [32usize, 64, 128, 192, 288];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let b = bits[i % bits.len()];
        let g = groups[(i / bits.len()) % groups.len()];
        let rows = rng.random_range(1..=12);
        let cols = rng.random_range(1..=320);
        let spread: f64 = rng.random_range(0.01..5.0);
        let w = Matrix::from_fn(rows, cols, |_, _| spread * rng.sample::<f64, _>(StandardNormal));
        let q = quantize_grouped(&w, b, g).map_err(|e| e.to_string())?;
        let d = dequantize(&q);
        for r in 0..rows {
            for c in 0..cols {
                let s = q.scale(r, c / g);
                let err = (w.get(r, c) - d.get(r, c)).abs();
                check(err <= s / 2.0 + 1e-12, format!("matrix {i} b={b} g={g} ({r},{c}): {err} > {s}/2"))?;
                worst = worst.max(err / s);
            }
        }
    }
    within(t0.elapsed(), 10.0)?;
    Ok(format!("1000 matrices, worst error {worst:.4} scale"))
}

// 3 ---------------------------------------------------------------------

fn gptq_dominance() -> Outcome {
    let t0 = Instant::now();
    let model = TinyDiT::new(3, 100);
    let cfg = CalibConfig { n_samples: 512, reservoir_cap: 512, ..CalibConfig::default() };
    let caps = calibration_captures(&model, &cfg, 3).map_err(|e| e.to_string())?;
    let mut wins = 0;
    for cap in &caps {
        let x = cap.reservoir_matrix();
        check(x.rows() == 512, format!("{} has {} rows", cap.layer_id, x.rows()))?;
        let w = &model.layers()[cap.index].weight;
        let rtn = dequantize(&quantize_grouped(w, 4, 64).map_err(|e| e.to_string())?);
        let gptq = dequantize(&gptq_pack(w, &x, 4, 64).map_err(|e| e.to_string())?);
        if output_mse(&x, w, &gptq) <= output_mse(&x, w, &rtn) {
            wins += 1;
        }
    }
    check(caps.len() == 20, format!("{} layers captured", caps.len()))?;
    check(wins * 10 >= caps.len() * 9, format!("GPTQ <= RTN on {wins}/{}", caps.len()))?;
    within(t0.elapsed(), 60.0)?;
    Ok(format!("GPTQ <= RTN on {wins}/20 layers"))
}

// 4 ---------------------------------------------------------------------

/// Fake-quantizes activations with `daq_quantize`, dequantizes the weight
/// codes by hand, then multiplies in floating point.
struct DequantOracle<'a> {
    student: &'a Student,
    policy: DaqPolicy,
}

impl LinearExec for DequantOracle<'_> {
    fn linear(
        &self,
        index: usize,
        layer: &Linear,
        input: &Matrix,
        step: StepContext,
        _observer: &mut dyn ForwardObserver,
    ) -> dplan_core::Result<Matrix> {
        let Some(packed) = self.student.packed_weights(index) else {
            return Ok(layer.forward(input));
        };
        let q = &packed.q;
        let bits = self.policy.bits_at(step.t, step.num_steps);
        let (rows, cols) = input.shape();
        let mut out = Matrix::zeros(rows, q.rows);
        for r in 0..rows {
            let xq: Vec<f64> = input
                .row(r)
                .chunks(self.policy.group_size)
                .flat_map(|g| daq_quantize(g, self.policy.percentile, bits).0)
                .collect();
            for o in 0..q.rows {
                let mut acc = 0.0;
                for (c, x) in xq.iter().enumerate().take(cols) {
                    acc += x * q.code(o, c) as f64 * q.scale(o, c / q.group_size);
                }
                out.set(r, o, acc + layer.bias[o]);
            }
        }
        Ok(out)
    }
}

fn integer_kernel_equivalence() -> Outcome {
    let t0 = Instant::now();
    let model = TinyDiT::new(4, 100);
    let policy = DaqPolicy::uniform(8);
    let plan = BitPlan::uniform(Precision::W8, 64);
    let student = Student::build(&model, &plan, &PackCache::rtn(), ActivationMode::Dynamic(policy.clone()))
        .map_err(|e| e.to_string())?;
    let oracle = DequantOracle { student: &student, policy };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let x = Latent::from_vec((0..LATENT_LEN).map(|_| rng.sample(StandardNormal)).collect())
            .map_err(|e| e.to_string())?;
        let t = rng.random_range(0..100);
        let y = rng.random_range(0..NUM_CLASSES);
        let a = model.forward_with(&student, &x, t, y, &mut NoObserver).map_err(|e| e.to_string())?;
        let b = model.forward_with(&oracle, &x, t, y, &mut NoObserver).map_err(|e| e.to_string())?;
        let rel = (a.dist_sq(&b) / b.norm_sq()).sqrt();
        check(rel < 1e-4, format!("input {i}: relative error {rel}"))?;
        worst = worst.max(rel);
    }
    within(t0.elapsed(), 30.0)?;
    Ok(format!("100 inputs, worst relative error {worst:.2e}"))
}

// 5 ---------------------------------------------------------------------

fn low_rank(n: usize, d: usize, r: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < r {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / norm).collect());
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
        data.extend((0..d).map(|c| z.iter().zip(&basis).map(|(zi, b)| zi * b[c]).sum::<f64>()));
    }
    Matrix::from_vec(n, d, data)
}

fn pca_rank_recovery() -> Outcome {
    for r in [1, 3, 8] {
        for seed in 0..3 {
            let p = pca_rank(&low_rank(2000, 64, r, seed), 128, 0.95).map_err(|e| e.to_string())?;
            check(p.k95 == r, format!("rank {r} seed {seed}: k95 = {}", p.k95))?;
            check(p.spill <= 1e-6, format!("rank {r} seed {seed}: spill = {}", p.spill))?;
        }
    }
    Ok("k95 = r for r in {1,3,8}".into())
}

// 6 ---------------------------------------------------------------------

fn profile_of(delta: Vec<f64>) -> DriftProfile {
    let n = delta.len();
    DriftProfile::new(n, 1, (0..n).collect(), delta).expect("valid profile")
}

fn oracle_tail(n: usize, rho: f64) -> usize {
    ((1.0 - rho) * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Best kept set by enumeration: size `k`, contains the tail, maximal drift.
fn brute_schedule(delta: &[f64], k: usize, rho: f64) -> Vec<usize> {
    let n = delta.len();
    let tail = oracle_tail(n, rho);
    let mut best: Option<(f64, u32)> = None;
    for mask in 0u32..1 << n {
        if mask.count_ones() as usize != k || (tail..n).any(|t| mask >> t & 1 == 0) {
            continue;
        }
        let s: f64 = (0..n).filter(|t| mask >> t & 1 == 1).map(|t| delta[t]).sum();
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, mask));
        }
    }
    let mask = best.expect("feasible").1;
    (0..n).filter(|t| mask >> t & 1 == 1).collect()
}

fn schedule_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut combos = 0;
    for n in 1..=12 {
        for rho in [0.0, 0.1, 0.2, 0.25, 0.5, 0.75, 1.0] {
            for k in (n - oracle_tail(n, rho))..=n {
                for _ in 0..3 {
                    let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                    let want = brute_schedule(&delta, k, rho);
                    let got = select_schedule(&profile_of(delta.clone()), k, rho).map_err(|e| e.to_string())?;
                    check(got.kept == want, format!("n={n} k={k} rho={rho}: {:?} vs {want:?}", got.kept))?;
                    combos += 1;
                }
            }
        }
    }
    for trial in 0..10_000 {
        let n = rng.random_range(1..=200);
        let rho: f64 = rng.random_range(0.0..=1.0);
        let tail = n - oracle_tail(n, rho);
        let k = rng.random_range(tail..=n);
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = select_schedule(&profile_of(delta), k, rho).map_err(|e| e.to_string())?;
        check(s.kept.len() == k, format!("trial {trial}: |S| = {} != {k}", s.kept.len()))?;
        check(
            (oracle_tail(n, rho)..n).all(|t| s.kept.binary_search(&t).is_ok()),
            format!("trial {trial}: tail not kept"),
        )?;
        check(s.kept.windows(2).all(|w| w[0] < w[1]), format!("trial {trial}: kept not sorted"))?;
    }
    Ok(format!("{combos} enumerated cases, 10000 random trials"))
}

// 7 ---------------------------------------------------------------------

fn gini_pairwise(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let total: f64 = v.iter().sum();
    let mut s = 0.0;
    for a in v {
        for b in v {
            s += (a - b).abs();
        }
    }
    s / (2.0 * n * total)
}

fn lorenz_gini() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..200 {
        let n = rng.random_range(2..=60);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
        let g = gini(&v);
        close(g, gini_pairwise(&v), &format!("gini trial {trial}"))?;
        let rho = rng.random_range(0.0..0.5);
        let p = profile_of(v);
        let mut prev = 0.0;
        for k in (n - oracle_tail(n, rho))..=n {
            let c = lorenz_coverage(&p, k, rho).map_err(|e| e.to_string())?;
            check(c + 1e-12 >= prev, format!("trial {trial}: coverage falls at k={k}"))?;
            prev = c;
        }
        close(prev, 1.0, "coverage at k = n")?;
    }
    // Drift spiked at the start of the index range, flat elsewhere.
    let spiked: Vec<f64> = (0..100).map(|t| (-(t as f64) / 10.0).exp() + 0.02).collect();
    let cov = lorenz_coverage(&profile_of(spiked), 50, 0.2).map_err(|e| e.to_string())?;
    check(cov > 0.5, format!("spiked coverage at k=50: {cov}"))?;
    Ok(format!("gini exact, coverage monotone, spiked coverage {cov:.3}"))
}

// 8 ---------------------------------------------------------------------

struct Micro {
    w: Vec<f64>,
    tf: Vec<f64>,
    m: Vec<f64>,
}

impl PlannerCost for Micro {
    fn num_layers(&self) -> usize {
        4
    }
    fn layer_latency(&self, l: usize, p: Precision, t: usize) -> f64 {
        self.w[l] * p.bits() as f64 * self.tf[t]
    }
    fn layer_memory(&self, l: usize, p: Precision) -> f64 {
        self.m[l] * p.bits() as f64
    }
}

const LADDER: [Precision; 3] = [Precision::W4, Precision::W8, Precision::Fp16];

/// Penalized score of a micro plan: drift proxy plus zero penalties when both
/// budgets hold. The drift proxy charges normalized drift for each dropped
/// step and `s(ℓ)` per rung below the top.
fn micro_score(rungs: &[usize], dropped: &[usize], dn: &[f64], s: &[f64], lat: f64, b: &Budgets) -> f64 {
    let drift = dropped.iter().map(|&t| dn[t]).sum::<f64>()
        + rungs.iter().zip(s).map(|(&r, s)| s * (2 - r) as f64).sum::<f64>();
    let parts = ScoreParts { drift_mse: drift, latency: lat, bitops: 0.0, mem_bytes: 0.0 };
    score(&parts, b, 0.5, 0.5).total
}

struct MicroCase {
    cost: Micro,
    delta: Vec<f64>,
    s: Vec<f64>,
    lat: f64,
    mem: f64,
}

fn micro_case(seed: u64) -> MicroCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cost = Micro {
        w: (0..4).map(|_| rng.random_range(0.5..2.0)).collect(),
        tf: (0..6).map(|_| rng.random_range(0.8..1.2)).collect(),
        m: (0..4).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    let delta = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
    let s = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
    let full_lat: f64 = (0..6)
        .map(|t| (0..4).map(|l| cost.layer_latency(l, Precision::Fp16, t)).sum::<f64>())
        .sum();
    let full_mem: f64 = (0..4).map(|l| cost.layer_memory(l, Precision::Fp16)).sum();
    let lat = full_lat * rng.random_range(0.1..1.0);
    let mem = full_mem * rng.random_range(0.2..1.0);
    MicroCase { cost, delta, s, lat, mem }
}

/// Exhaustive best feasible score; tail {5} always kept.
fn micro_brute(c: &MicroCase, dn: &[f64], b: &Budgets) -> Option<f64> {
    let mut best: Option<f64> = None;
    for code in 0..81usize {
        let rungs: Vec<usize> = (0..4).map(|l| code / 3usize.pow(l as u32) % 3).collect();
        let mem: f64 = (0..4).map(|l| c.cost.layer_memory(l, LADDER[rungs[l]])).sum();
        for mask in 0..32u32 {
            let kept: Vec<usize> = (0..5).filter(|t| mask >> t & 1 == 1).chain([5]).collect();
            let dropped: Vec<usize> = (0..5).filter(|t| mask >> t & 1 == 0).collect();
            let lat: f64 = kept
                .iter()
                .map(|&t| (0..4).map(|l| c.cost.layer_latency(l, LADDER[rungs[l]], t)).sum::<f64>())
                .sum();
            if lat <= c.lat && mem <= c.mem {
                let sc = micro_score(&rungs, &dropped, dn, &c.s, lat, b);
                best = Some(best.map_or(sc, |x: f64| x.min(sc)));
            }
        }
    }
    best
}

fn planner_oracle() -> Outcome {
    let t0 = Instant::now();
    let (mut feasible, mut infeasible, mut worst) = (0, 0, 1.0f64);
    for seed in 0..200u64 {
        let c = micro_case(seed);
        let p = profile_of(c.delta.clone());
        let dn = p.normalized();
        let budgets = Budgets { latency: c.lat, bitops: f64::INFINITY, mem_bytes: c.mem };
        let input = PlannerInput {
            ladders: vec![LADDER.to_vec(); 4],
            sensitivity: c.s.clone(),
            profile: &p,
            rho: 0.2,
            lat_budget: c.lat,
            mem_budget: c.mem,
            epsilon: 1e-8,
            reclaim: true,
            exact_limit: 0,
        };
        let res: dplan_core::Result<PlannerResult> = joint_budget_plan(&input, &c.cost);
        match (micro_brute(&c, &dn, &budgets), res) {
            (Some(best), Ok(r)) => {
                // Recompute the plan's costs independently.
                let rungs: Vec<usize> =
                    r.precisions.iter().map(|p| LADDER.iter().position(|x| x == p).unwrap()).collect();
                let lat: f64 = r
                    .kept
                    .iter()
                    .map(|&t| (0..4).map(|l| c.cost.layer_latency(l, LADDER[rungs[l]], t)).sum::<f64>())
                    .sum();
                let mem: f64 = (0..4).map(|l| c.cost.layer_memory(l, LADDER[rungs[l]])).sum();
                check(lat <= c.lat && mem <= c.mem, format!("seed {seed}: over budget"))?;
                check(r.kept.contains(&5), format!("seed {seed}: tail dropped"))?;
                let dropped: Vec<usize> = (0..5).filter(|t| !r.kept.contains(t)).collect();
                let got = micro_score(&rungs, &dropped, &dn, &c.s, lat, &budgets);
                check(
                    got <= 1.2 * best + 1e-12,
                    format!("seed {seed}: score {got:.6} > 1.2 x best {best:.6}"),
                )?;
                if best > 0.0 {
                    worst = worst.max(got / best);
                }
                feasible += 1;
            }
            (None, Err(e)) if e.is_budget_infeasible() => infeasible += 1,
            (Some(_), Err(e)) => return Err(format!("seed {seed}: feasible but planner said {e}")),
            (None, other) => return Err(format!("seed {seed}: infeasible but planner gave {other:?}")),
        }
    }
    within(t0.elapsed(), 120.0)?;
    Ok(format!("{feasible} feasible, {infeasible} infeasible, worst ratio {worst:.4}"))
}

// 9 ---------------------------------------------------------------------

const FREE: [usize; 4] = [3, 4, 5, 6];

fn micro_seed_plan() -> BitPlan {
    let mut plan = BitPlan::uniform(Precision::W8, 64);
    for (i, l) in plan.layers.iter_mut().enumerate() {
        if FREE.contains(&i) {
            l.precision = Precision::W4;
        } else {
            l.frozen = true;
        }
    }
    plan
}

fn evolution_sanity(runs: &[PathBuf]) -> Outcome {
    let model = TinyDiT::new(9, 100);
    let pool = LatentPool::generate(9, 32);
    let sched = cosine_schedule(100).map_err(|e| e.to_string())?;
    let set = EvalSet::build(&model, &pool, &sched, 12, 6, 9).map_err(|e| e.to_string())?;
    let cache = PackCache::rtn();
    let cost = CostModel::new(&model);
    let seed = micro_seed_plan();
    let all: Vec<BitPlan> = (0..16u32)
        .map(|m| {
            let mut p = seed.clone();
            for (j, &l) in FREE.iter().enumerate() {
                p.layers[l].precision = if m >> j & 1 == 1 { Precision::W8 } else { Precision::W4 };
            }
            p
        })
        .collect();
    let full_sched: Vec<usize> = (0..100).collect();
    let act = dplan_core::quant::ActBits::Static(8);
    // Budgets at the two-up plan make the penalized variant a real trade-off.
    let mid = &all[0b0011];
    let budgets = Budgets {
        latency: cost.latency(mid, act, &full_sched),
        bitops: cost.bitops(mid, act, &full_sched) as f64,
        mem_bytes: f64::INFINITY,
    };
    let cfg = SearchConfig {
        stages: vec![Fidelity::new(2, 6), set.full()],
        space: SearchSpace { bits: vec![Precision::W4, Precision::W8], groups: vec![64] },
        mutation_rate: 0.3,
        ..SearchConfig::default()
    };
    let mut notes = Vec::new();
    for (lambda, mu) in [(0.0, 0.0), (0.5, 0.5)] {
        let obj = DriftObjective {
            model: &model,
            cache: &cache,
            evalset: &set,
            cost: &cost,
            mode: ActivationMode::Dynamic(DaqPolicy::uniform(8)),
            schedule: full_sched.clone(),
            budgets,
            lambda,
            mu,
        };
        let mut best = f64::INFINITY;
        for p in &all {
            best = best.min(obj.evaluate(p, set.full()).map_err(|e| e.to_string())?);
        }
        for rng_seed in 0..3 {
            let res = evolve(&seed, &cfg, &obj, rng_seed).map_err(|e| e.to_string())?;
            check(
                res.history.windows(2).all(|w| w[1].best <= w[0].best),
                format!("λ={lambda} run {rng_seed}: best rose"),
            )?;
            check(
                res.best_score <= 1.05 * best + 1e-15,
                format!("λ={lambda} run {rng_seed}: {} > 1.05 x {best}", res.best_score),
            )?;
            check(
                res.best.layers.iter().zip(&seed.layers).all(|(a, b)| !b.frozen || a == b),
                "frozen layer moved",
            )?;
        }
        notes.push(format!("λ={lambda}: optimum {best:.3e}"));
    }
    // Every pipeline run's generation log.
    for dir in runs {
        let mut rdr = csv::Reader::from_path(dir.join("evolution.csv")).map_err(|e| e.to_string())?;
        let idx = rdr
            .headers()
            .map_err(|e| e.to_string())?
            .iter()
            .position(|h| h == "best")
            .ok_or("evolution.csv lacks a best column")?;
        let bests: Vec<f64> = rdr
            .records()
            .map(|r| r.map_err(|e| e.to_string()).and_then(|r| r[idx].parse().map_err(|_| "bad float".to_string())))
            .collect::<Result<_, _>>()?;
        check(
            bests.windows(2).all(|w| w[1] <= w[0]),
            format!("{}: best rose", dir.display()),
        )?;
    }
    Ok(format!("{}, {} pipeline logs nonincreasing", notes.join("; "), runs.len()))
}

// 10 --------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn row(rows: &[AblationRow], v: Variant) -> Result<&AblationRow, String> {
    rows.iter().find(|r| r.variant == v).ok_or_else(|| format!("no {} row", v.name()))
}

fn end_to_end(runs: &[PathBuf], pipeline_time: Duration) -> Outcome {
    let mut full = Vec::new();
    let mut no_daq = Vec::new();
    let mut uniform = Vec::new();
    let mut bits_full = Vec::new();
    let mut bits_no_prune = Vec::new();
    for dir in runs {
        let rows = read_ablation_csv(&dir.join("ablation.csv")).map_err(|e| e.to_string())?;
        full.push(row(&rows, Variant::Full)?.drift_mse);
        no_daq.push(row(&rows, Variant::NoDaq)?.drift_mse);
        uniform.push(row(&rows, Variant::UniformW4G288)?.drift_mse);
        bits_full.push(row(&rows, Variant::Full)?.bitops as f64);
        bits_no_prune.push(row(&rows, Variant::NoPrune)?.bitops as f64);
    }
    let (f, n, u) = (median(full), median(no_daq), median(uniform));
    let (bf, bn) = (median(bits_full), median(bits_no_prune));
    check(f <= n, format!("median drift full {f:.4e} > no-DAQ {n:.4e}"))?;
    check(f <= u, format!("median drift full {f:.4e} > uniform {u:.4e}"))?;
    check(bf <= bn, format!("median bitops full {bf:.4e} > no-prune {bn:.4e}"))?;
    within(pipeline_time, 600.0)?;
    Ok(format!(
        "median drift full {f:.3e} / no-DAQ {n:.3e} / uniform {u:.3e}; bitops {:.3} of no-prune",
        bf / bn
    ))
}

// 11 --------------------------------------------------------------------

/// Bytes counted straight from the weights: packed codes plus 2-byte scales
/// for integer layers, 2 bytes per weight for FP16, 4 per weight for FP32,
/// and 4 bytes for every bias and class-table entry.
fn byte_oracle(model: &TinyDiT, plan: &BitPlan) -> u64 {
    let mut total = 0u64;
    for (layer, a) in model.layers().iter().zip(&plan.layers) {
        let (out, inp) = (layer.weight.rows() as u64, layer.weight.cols() as u64);
        total += match a.precision {
            Precision::Fp16 => 2 * out * inp,
            Precision::Fp32 => 4 * out * inp,
            p => (out * inp * p.bits() as u64).div_ceil(8) + 2 * out * inp.div_ceil(a.group_size as u64),
        };
        total += 4 * layer.bias.len() as u64;
    }
    let ce = model.class_embed();
    total + 4 * (ce.rows() * ce.cols()) as u64
}

fn compression_accounting(runs: &[PathBuf]) -> Outcome {
    let model = TinyDiT::new(11, 100);
    let cost = CostModel::new(&model);
    // Roughly the reference mix: two thirds W4, an eighth W8, a fifth FP16.
    let mut plan = BitPlan::uniform(Precision::W4, 128);
    for i in [0, 1, 2, 19] {
        plan.layers[i].precision = Precision::Fp16;
    }
    for i in [3, 18] {
        plan.layers[i].precision = Precision::W8;
    }
    let got = cost.model_size_bytes(&plan).map_err(|e| e.to_string())?;
    let want = byte_oracle(&model, &plan);
    check(got == want, format!("mixed plan: {got} vs oracle {want}"))?;
    let fp32 = byte_oracle(&model, &BitPlan::uniform(Precision::Fp32, 128));
    check(cost.fp32_size_bytes() == fp32, "fp32 size differs from oracle")?;
    check(fp32 as f64 / got as f64 >= 4.0, format!("mixed plan only {:.2}x smaller than FP32", fp32 as f64 / got as f64))?;

    for dir in runs {
        let report: DeployReport =
            serde_json::from_slice(&fs::read(dir.join("report.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let doc: PlanDoc = serde_json::from_slice(&fs::read(dir.join("plan.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let teacher = dplan_core::model::load_checkpoint(&dir.join("teacher.ckpt")).map_err(|e| e.to_string())?;
        let bytes = byte_oracle(&teacher, &doc.bitplan);
        check(report.model_size_bytes == bytes, format!("{}: report size {} vs {bytes}", dir.display(), report.model_size_bytes))?;
        let base = byte_oracle(&teacher, &BitPlan::uniform(Precision::Fp32, 128));
        check(report.baseline_model_size_bytes == Some(base), "baseline size differs from oracle")?;
        check(report.compression_ratio == Some(base as f64 / bytes as f64), "ratio differs from byte quotient")?;
        check(report.reference.fp_mb == 2575.42 && report.reference.plan_mb == 397.24, "reference sizes")?;
        check(format!("{:.2}", report.reference.ratio) == "6.48", "reference ratio")?;
    }
    Ok(format!(
        "mixed plan {got} B = oracle, ratio {:.2}x vs FP32; reference 2575.42 -> 397.24 MB (6.48x) documented",
        fp32 as f64 / got as f64
    ))
}

// 12 --------------------------------------------------------------------

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).expect("readable run dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), fs::read(&p).expect("readable"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn run_in_pool(cfg: &RunConfig, dir: &Path, threads: usize) -> Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?
        .install(|| run_all(cfg, dir))
        .map_err(|e| e.to_string())
}

fn determinism(reference: &Path, scratch: &Path) -> Outcome {
    let want = tree(reference);
    for threads in [1, 3] {
        let dir = scratch.join(format!("det-{threads}"));
        run_in_pool(&RunConfig { seed: 0, ..RunConfig::default() }, &dir, threads)?;
        let got = tree(&dir);
        check(
            got.keys().eq(want.keys()),
            format!("{threads} workers: file sets differ"),
        )?;
        for (k, v) in &want {
            check(&got[k] == v, format!("{threads} workers: {} differs", k.display()))?;
        }
    }
    Ok(format!("{} files identical at 1, 3 and default workers", want.len()))
}

// -----------------------------------------------------------------------

fn report(n: usize, name: &str, outcome: Outcome, elapsed: Duration) -> bool {
    let secs = elapsed.as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {n:>2} {name} ({secs:.1}s): {detail}");
            true
        }
        Err(why) => {
            println!("FAIL  {n:>2} {name} ({secs:.1}s): {why}");
            false
        }
    }
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t0 = Instant::now();
    let o = f();
    (o, t0.elapsed())
}

fn main() {
    let scratch = tempfile::tempdir().expect("temp dir");
    let mut ok = true;
    let simple: [(&str, fn() -> Outcome); 8] = [
        ("formula fidelity", formula_fidelity),
        ("quantization bound", quantization_bound),
        ("GPTQ dominance", gptq_dominance),
        ("integer-kernel equivalence", integer_kernel_equivalence),
        ("PCA rank recovery", pca_rank_recovery),
        ("schedule correctness", schedule_correctness),
        ("Lorenz coverage and Gini", lorenz_gini),
        ("planner feasibility and oracle proximity", planner_oracle),
    ];
    for (i, (name, f)) in simple.into_iter().enumerate() {
        let (o, d) = timed(f);
        ok &= report(i + 1, name, o, d);
    }

    // Five seeded pipeline runs feed criteria 9 to 12.
    let t0 = Instant::now();
    let mut runs = Vec::new();
    let mut pipeline_err = None;
    for seed in 0..5u64 {
        let dir = scratch.path().join(format!("seed-{seed}"));
        if let Err(e) = run_all(&RunConfig { seed, ..RunConfig::default() }, &dir) {
            pipeline_err = Some(format!("seed {seed}: {e}"));
            break;
        }
        runs.push(dir);
    }
    let pipeline_time = t0.elapsed();
    let gated = |f: &dyn Fn() -> Outcome| match &pipeline_err {
        Some(e) => Err(format!("pipeline failed: {e}")),
        None => f(),
    };

    let (o, d) = timed(|| gated(&|| evolution_sanity(&runs)));
    ok &= report(9, "evolution sanity", o, d);
    let o = gated(&|| end_to_end(&runs, pipeline_time));
    ok &= report(10, "end-to-end ordering", o, pipeline_time);
    let (o, d) = timed(|| gated(&|| compression_accounting(&runs)));
    ok &= report(11, "compression accounting", o, d);
    let (o, d) = timed(|| gated(&|| determinism(&runs[0], scratch.path())));
    ok &= report(12, "determinism", o, d);

    if !ok {
        std::process::exit(1);
    }
}
