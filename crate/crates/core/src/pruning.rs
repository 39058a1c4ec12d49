//! Per-timestep teacher–student drift, budgeted step selection with a
//! protected tail, and Lorenz/Gini statistics of the drift profile.
//!
//! Timesteps are indices on the original grid `0..T`. The tail is
//! `{t : t/T ≥ 1 − ρ}` and is always kept.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{CalibSample, LinearExec, NoObserver, TinyDiT};
use crate::{Error, Result};

/// `δ(t)` over a candidate step set `C`, ascending in `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftProfile {
    pub num_steps: usize,
    pub batch: usize,
    pub timesteps: Vec<usize>,
    pub delta: Vec<f64>,
}

impl DriftProfile {
    pub fn new(num_steps: usize, batch: usize, timesteps: Vec<usize>, delta: Vec<f64>) -> Result<Self> {
        if timesteps.len() != delta.len() {
            return Err(Error::invalid("drift profile needs one value per timestep"));
        }
        if timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("drift timesteps must be strictly ascending"));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t >= num_steps) {
            return Err(Error::invalid(format!("timestep {t} outside 0..{num_steps}")));
        }
        if delta.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::invalid("drift values must be finite and nonnegative"));
        }
        Ok(Self {
            num_steps,
            batch,
            timesteps,
            delta,
        })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<f64> {
        self.timesteps.binary_search(&t).ok().map(|i| self.delta[i])
    }

    pub fn total(&self) -> f64 {
        self.delta.iter().sum()
    }

    /// `δ / max δ`; all zeros stay zero.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.delta.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            self.delta.iter().map(|d| d / max).collect()
        } else {
            vec![0.0; self.delta.len()]
        }
    }

    /// Tail members of `C`.
    pub fn tail(&self, rho: f64) -> Vec<usize> {
        let start = tail_start(self.num_steps, rho);
        self.timesteps.iter().copied().filter(|&t| t >= start).collect()
    }
}

/// First timestep with `t/T ≥ 1 − ρ`.
pub fn tail_start(num_steps: usize, rho: f64) -> usize {
    ((1.0 - rho) * num_steps as f64 - 1e-9).ceil().max(0.0) as usize
}

/// `δ(t)`: batch mean of `‖ε̂_student − ε̂_teacher‖²` per timestep, on the
/// same latents for both models. Samples are grouped by their `t`.
pub fn measure_drift(
    model: &TinyDiT,
    teacher: &dyn LinearExec,
    student: &dyn LinearExec,
    samples: &[CalibSample],
) -> Result<DriftProfile> {
    if samples.is_empty() {
        return Err(Error::invalid("drift batch size is 0"));
    }
    let mut timesteps: Vec<usize> = samples.iter().map(|s| s.t).collect();
    timesteps.sort_unstable();
    timesteps.dedup();
    let per_t: Vec<(f64, usize)> = timesteps
        .par_iter()
        .map(|&t| {
            let mut sum = 0.0;
            let mut n = 0;
            for s in samples.iter().filter(|s| s.t == t) {
                let a = model.forward_with(teacher, &s.x_t, t, s.label, &mut NoObserver)?;
                let b = model.forward_with(student, &s.x_t, t, s.label, &mut NoObserver)?;
                sum += a.dist_sq(&b);
                n += 1;
            }
            Ok((sum / n as f64, n))
        })
        .collect::<Result<_>>()?;
    let batch = per_t.iter().map(|p| p.1).min().unwrap_or(0);
    DriftProfile::new(
        model.num_steps,
        batch,
        timesteps,
        per_t.into_iter().map(|p| p.0).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub num_steps: usize,
    /// Sorted ascending.
    pub kept: Vec<usize>,
    pub tail: Vec<usize>,
    pub k: usize,
    pub rho: f64,
}

impl Schedule {
    pub fn full(num_steps: usize, rho: f64) -> Self {
        let kept: Vec<usize> = (0..num_steps).collect();
        let start = tail_start(num_steps, rho);
        Self {
            num_steps,
            tail: (start..num_steps).collect(),
            k: num_steps,
            kept,
            rho,
        }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.kept.binary_search(&t).is_ok()
    }

    pub fn is_tail(&self, t: usize) -> bool {
        self.tail.binary_search(&t).is_ok()
    }
}

/// Non-tail steps in selection order: larger `δ` first, ties toward larger `t`.
fn ranked_prunable(profile: &DriftProfile, rho: f64) -> Vec<usize> {
    let start = tail_start(profile.num_steps, rho);
    let mut idx: Vec<usize> = (0..profile.len())
        .filter(|&i| profile.timesteps[i] < start)
        .collect();
    idx.sort_by(|&a, &b| {
        profile.delta[b]
            .total_cmp(&profile.delta[a])
            .then(profile.timesteps[b].cmp(&profile.timesteps[a]))
    });
    idx.into_iter().map(|i| profile.timesteps[i]).collect()
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("tail fraction {rho} outside [0, 1]")));
    }
    Ok(())
}

/// Tail plus the `k − |tail|` largest-drift steps outside it.
pub fn select_schedule(profile: &DriftProfile, k: usize, rho: f64) -> Result<Schedule> {
    check_rho(rho)?;
    let tail = profile.tail(rho);
    if k < tail.len() {
        return Err(Error::infeasible(
            "steps",
            format!("k = {k} is below the protected tail; at least {} steps required", tail.len()),
        ));
    }
    if k > profile.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} candidate steps",
            profile.len()
        )));
    }
    let mut kept = tail.clone();
    kept.extend(ranked_prunable(profile, rho).into_iter().take(k - tail.len()));
    kept.sort_unstable();
    Ok(Schedule {
        num_steps: profile.num_steps,
        kept,
        tail,
        k,
        rho,
    })
}

/// Largest schedule whose summed step cost fits `budget`.
pub fn select_schedule_for_budget(
    profile: &DriftProfile,
    rho: f64,
    budget: f64,
    step_cost: impl Fn(usize) -> f64,
) -> Result<Schedule> {
    check_rho(rho)?;
    let tail = profile.tail(rho);
    let mut spent: f64 = tail.iter().map(|&t| step_cost(t)).sum();
    if spent > budget {
        return Err(Error::infeasible(
            "latency",
            format!("protected tail alone costs {spent:.6e} > budget {budget:.6e}"),
        ));
    }
    let mut k = tail.len();
    for t in ranked_prunable(profile, rho) {
        let c = step_cost(t);
        if spent + c > budget {
            break;
        }
        spent += c;
        k += 1;
    }
    select_schedule(profile, k, rho)
}

/// Share of total drift covered by the selected schedule.
pub fn lorenz_coverage(profile: &DriftProfile, k: usize, rho: f64) -> Result<f64> {
    let schedule = select_schedule(profile, k, rho)?;
    let total = profile.total();
    if total <= 0.0 {
        return Ok(k as f64 / profile.len() as f64);
    }
    let kept: f64 = schedule.kept.iter().filter_map(|&t| profile.get(t)).sum();
    Ok(kept / total)
}

/// Gini coefficient via the sorted-sum formula; 0 for an all-zero profile.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (i + 1) as f64 * v)
        .sum();
    let nf = n as f64;
    (2.0 * weighted / (nf * total) - (nf + 1.0) / nf).max(0.0)
}

#[derive(Serialize)]
struct DriftRow {
    t: usize,
    delta: f64,
    kept: u8,
    tail: u8,
}

/// `drift.csv`: `t,delta,kept,tail`.
pub fn write_drift_csv(path: &Path, profile: &DriftProfile, schedule: &Schedule) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (&t, &delta) in profile.timesteps.iter().zip(&profile.delta) {
        w.serialize(DriftRow {
            t,
            delta,
            kept: schedule.contains(t) as u8,
            tail: schedule.is_tail(t) as u8,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{calibration_set, cosine_schedule, FloatExec, Linear, LatentPool, StepContext, ForwardObserver};
    use crate::tensor::Matrix;
    use proptest::prelude::*;

    fn profile(delta: Vec<f64>) -> DriftProfile {
        let n = delta.len();
        DriftProfile::new(n, 1, (0..n).collect(), delta).unwrap()
    }

    #[test]
    fn constant_drift_tie_break() {
        let s = select_schedule(&profile(vec![1.0; 10]), 5, 0.2).unwrap();
        assert_eq!(s.kept, vec![5, 6, 7, 8, 9]);
        assert_eq!(s.tail, vec![8, 9]);
    }

    #[test]
    fn full_k_keeps_everything() {
        let p = profile(vec![0.3, 0.1, 0.9, 0.2]);
        assert_eq!(select_schedule(&p, 4, 0.2).unwrap().kept, vec![0, 1, 2, 3]);
        assert_eq!(lorenz_coverage(&p, 4, 0.2).unwrap(), 1.0);
    }

    #[test]
    fn k_below_tail_is_budget_error() {
        let err = select_schedule(&profile(vec![1.0; 100]), 10, 0.2).unwrap_err();
        assert!(err.is_budget_infeasible());
        assert!(err.to_string().contains("20"));
        assert!(matches!(select_schedule(&profile(vec![1.0; 4]), 5, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn coverage_arithmetic() {
        assert!((lorenz_coverage(&profile(vec![4.0, 3.0, 2.0, 1.0]), 2, 0.0).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(lorenz_coverage(&profile(vec![0.0; 4]), 1, 0.0).unwrap(), 0.25);
    }

    #[test]
    fn gini_extremes() {
        assert_eq!(gini(&[2.0; 7]), 0.0);
        assert!((gini(&[0.0, 0.0, 5.0, 0.0]) - 0.75).abs() < 1e-15);
        assert_eq!(gini(&[0.0; 3]), 0.0);
    }

    #[test]
    fn tail_matches_fraction() {
        assert_eq!(tail_start(100, 0.2), 80);
        assert_eq!(tail_start(10, 0.2), 8);
        assert_eq!(tail_start(10, 0.0), 10);
        assert_eq!(tail_start(7, 1.0), 0);
    }

    #[test]
    fn budget_entry_point_converts_to_k() {
        let p = profile(vec![0.5, 0.9, 0.1, 0.7, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0]);
        let s = select_schedule_for_budget(&p, 0.2, 5.5, |_| 1.0).unwrap();
        assert_eq!(s.k, 5);
        assert_eq!(s.kept, select_schedule(&p, 5, 0.2).unwrap().kept);
        assert!(select_schedule_for_budget(&p, 0.2, 1.5, |_| 1.0).unwrap_err().is_budget_infeasible());
    }

    struct ScaleOutput(f64);

    impl LinearExec for ScaleOutput {
        fn linear(
            &self,
            index: usize,
            layer: &Linear,
            input: &Matrix,
            _step: StepContext,
            _observer: &mut dyn ForwardObserver,
        ) -> Result<Matrix> {
            let mut out = layer.forward(input);
            if index == crate::model::NUM_LAYERS - 1 {
                out.as_mut_slice().iter_mut().for_each(|v| *v *= self.0);
            }
            Ok(out)
        }
    }

    fn drift_samples(t: &[usize], per_step: usize) -> Vec<CalibSample> {
        let pool = LatentPool::generate(4, 16);
        let sched = cosine_schedule(100).unwrap();
        calibration_set(&pool, &sched, t, per_step, 9).unwrap()
    }

    #[test]
    fn identity_and_scaled_student() {
        let m = TinyDiT::new(5, 100);
        let samples = drift_samples(&[3, 50, 97], 3);
        let zero = measure_drift(&m, &FloatExec, &FloatExec, &samples).unwrap();
        assert!(zero.delta.iter().all(|&d| d == 0.0));
        assert_eq!(zero.batch, 3);

        let eps = 1e-3;
        let p = measure_drift(&m, &FloatExec, &ScaleOutput(1.0 + eps), &samples).unwrap();
        for (k, &t) in p.timesteps.iter().enumerate() {
            let mean_sq: f64 = samples
                .iter()
                .filter(|s| s.t == t)
                .map(|s| m.forward(&s.x_t, t, s.label).unwrap().norm_sq())
                .sum::<f64>()
                / 3.0;
            let expect = eps * eps * mean_sq;
            assert!((p.delta[k] - expect).abs() <= 1e-9 * expect, "{} vs {}", p.delta[k], expect);
        }
        assert!(matches!(measure_drift(&m, &FloatExec, &FloatExec, &[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn drift_csv_has_header_and_flags() {
        let p = profile(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = select_schedule(&p, 3, 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drift.csv");
        write_drift_csv(&path, &p, &s).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,delta,kept,tail");
        assert_eq!(lines[5], "4,5.0,1,1");
        assert_eq!(lines[1], "0,1.0,0,0");
    }

    fn brute_best(delta: &[f64], k: usize, rho: f64) -> f64 {
        let n = delta.len();
        let start = tail_start(n, rho);
        let tail_mask: u32 = (start..n).fold(0, |m, t| m | 1 << t);
        (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k && m & tail_mask == tail_mask)
            .map(|m| (0..n).filter(|i| m >> i & 1 == 1).map(|i| delta[i]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    proptest! {
        #[test]
        fn tail_and_cardinality(
            delta in prop::collection::vec(0.0f64..10.0, 1..60),
            rho in 0.0f64..1.0,
            kf in 0.0f64..1.0,
        ) {
            let p = profile(delta);
            let tail = p.tail(rho);
            let k = tail.len() + ((p.len() - tail.len()) as f64 * kf) as usize;
            let s = select_schedule(&p, k, rho).unwrap();
            prop_assert_eq!(s.kept.len(), k);
            prop_assert!(tail.iter().all(|t| s.contains(*t)));
            prop_assert!(s.kept.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn optimal_among_tail_sets(delta in prop::collection::vec(0.0f64..1.0, 1..=10), rho in 0.0f64..0.6, kf in 0.0f64..1.0) {
            let p = profile(delta.clone());
            let tail = p.tail(rho).len();
            let k = tail + ((p.len() - tail) as f64 * kf) as usize;
            let s = select_schedule(&p, k, rho).unwrap();
            let got: f64 = s.kept.iter().map(|&t| delta[t]).sum();
            prop_assert!((got - brute_best(&delta, k, rho)).abs() < 1e-12);
        }

        #[test]
        fn coverage_monotone_in_k(delta in prop::collection::vec(0.0f64..1.0, 2..40), rho in 0.0f64..0.5) {
            let p = profile(delta);
            let tail = p.tail(rho).len();
            let mut prev = 0.0;
            for k in tail..=p.len() {
                let c = lorenz_coverage(&p, k, rho).unwrap();
                prop_assert!(c + 1e-12 >= prev);
                prev = c;
            }
        }

        #[test]
        fn gini_matches_pairwise(values in prop::collection::vec(0.0f64..5.0, 1..50)) {
            let n = values.len() as f64;
            let total: f64 = values.iter().sum();
            prop_assume!(total > 0.0);
            let pair: f64 = values.iter().flat_map(|a| values.iter().map(move |b| (a - b).abs())).sum();
            let oracle = pair / (2.0 * n * total);
            prop_assert!((gini(&values) - oracle).abs() < 1e-12);
        }
    }
}
