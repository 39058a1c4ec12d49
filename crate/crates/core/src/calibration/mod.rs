//! Per-layer calibration statistics, sensitivity signals, tiers and the seed
//! bit plan.
//!
//! Signals per layer:
//!
//! * `Sx`: PCA/curvature score blended with the temporal variability of the
//!   layer's input std across timesteps.
//! * `Sd`: drift with only this layer quantized to W4/g288.
//! * `Sk`: drift removed per added bit over a small (bits, group) grid, plus
//!   the knee of that grid.
//! * `Sn`: `Δ²/12 · ‖J‖²_F`, the output noise a rounding step of size `Δ`
//!   injects through the layer's output Jacobian.

mod pca;
mod scores;

pub use pca::{covariance, k95_from_spectrum, pca_rank, rank_from_covariance, PcaRank, StreamingCovariance};
pub use scores::{
    combined_score, composite_score, pca_sensitivity, quant_noise_variance, src_slope,
    temporal_variability, tier_and_seed, uniform_seed, SensitivitySignals, Tier, Tiering,
    COMPOSITE_WEIGHTS,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{EvalSet, Fidelity};
use crate::model::{
    calibration_set, cosine_schedule, even_timesteps, CalibSample, CaptureKind, HookSet,
    LayerCapture, Linear, LinearExec, ForwardObserver, LatentPool, NoObserver, StepContext, TinyDiT,
    layer_table,
};
use crate::quant::{quantize_grouped, BitPlan, CostModel, Precision};
use crate::student::{ActivationMode, PackCache, Student};
use crate::tensor::{min_max_normalize, Matrix};
use crate::{Error, Result};

/// Which per-layer score drives tiering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierSignal {
    /// The four-signal composite `S*`.
    Composite,
    /// The PCA/curvature blend alone.
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub n_samples: usize,
    pub n_timesteps: usize,
    pub reservoir_cap: usize,
    pub envelope_group: usize,
    pub pca_cap: usize,
    pub pca_threshold: f64,
    pub alpha: f64,
    /// Weight of temporal variability inside `Sx`.
    pub tvi_weight: f64,
    pub freeze_fraction: f64,
    pub tier_by: TierSignal,
    pub uniform_seed: bool,
    /// Evaluation set for the drift-based signals.
    pub signal_steps: usize,
    pub signal_per_step: usize,
    pub sweep_bits: Vec<u8>,
    pub sweep_groups: Vec<usize>,
    pub jacobian_probes: usize,
    pub jacobian_samples: usize,
    pub fd_step: f64,
    pub noise_bits: u8,
    pub noise_group: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            n_samples: 512,
            n_timesteps: 16,
            reservoir_cap: 2048,
            envelope_group: 128,
            pca_cap: 128,
            pca_threshold: 0.95,
            alpha: 0.5,
            tvi_weight: 0.2,
            freeze_fraction: 0.1,
            tier_by: TierSignal::Composite,
            uniform_seed: false,
            signal_steps: 8,
            signal_per_step: 4,
            sweep_bits: vec![4, 8],
            sweep_groups: vec![64, 288],
            jacobian_probes: 8,
            jacobian_samples: 4,
            fd_step: 1e-4,
            noise_bits: 4,
            noise_group: 128,
        }
    }
}

/// The calibration set: `n_samples` noised pool latents spread over
/// `n_timesteps` evenly spaced steps.
pub fn calibration_samples(model: &TinyDiT, cfg: &CalibConfig, seed: u64) -> Result<Vec<CalibSample>> {
    if cfg.n_samples == 0 || cfg.n_timesteps == 0 {
        return Err(Error::invalid("calibration set is empty"));
    }
    let sched = cosine_schedule(model.num_steps)?;
    let timesteps = even_timesteps(model.num_steps, cfg.n_timesteps);
    let per_step = cfg.n_samples.div_ceil(timesteps.len());
    let pool = LatentPool::generate(seed, cfg.n_samples);
    let mut samples = calibration_set(&pool, &sched, &timesteps, per_step, seed)?;
    samples.truncate(cfg.n_samples);
    Ok(samples)
}

/// Runs the teacher over `samples` with input hooks on every layer.
pub fn collect_stats(
    model: &TinyDiT,
    samples: &[CalibSample],
    reservoir_cap: usize,
    envelope_group: usize,
    seed: u64,
) -> Result<Vec<LayerCapture>> {
    if samples.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    let ids = model.layer_ids();
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let mut hooks = HookSet::register(
        model,
        &refs,
        CaptureKind::Inputs,
        reservoir_cap,
        envelope_group,
        seed,
    )?;
    for s in samples {
        model.forward_with(&crate::model::FloatExec, &s.x_t, s.t, s.label, &mut hooks)?;
    }
    Ok(hooks.into_captures())
}

/// Teacher forward with `h·dir` added to one layer's output.
struct Perturbed<'a> {
    layer: usize,
    dir: &'a Matrix,
    h: f64,
}

impl LinearExec for Perturbed<'_> {
    fn linear(
        &self,
        index: usize,
        layer: &Linear,
        input: &Matrix,
        _step: StepContext,
        _observer: &mut dyn ForwardObserver,
    ) -> Result<Matrix> {
        let mut out = layer.forward(input);
        if index == self.layer {
            for (o, d) in out.as_mut_slice().iter_mut().zip(self.dir.as_slice()) {
                *o += self.h * d;
            }
        }
        Ok(out)
    }
}

/// Hutchinson estimate of `‖∂ε̂/∂y_ℓ‖²_F` (mean over samples) with
/// Rademacher probes and forward finite differences.
pub fn jacobian_fro_sq(
    model: &TinyDiT,
    layer: usize,
    samples: &[CalibSample],
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() || probes == 0 {
        return Err(Error::invalid("Jacobian estimate needs samples and probes"));
    }
    let info = &layer_table()[layer];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (layer as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
    let mut total = 0.0;
    for s in samples {
        let base = model.forward(&s.x_t, s.t, s.label)?;
        for _ in 0..probes {
            let dir = Matrix::from_fn(info.rows_per_forward, info.out_features, |_, _| {
                if rng.random::<bool>() { 1.0 } else { -1.0 }
            });
            let exec = Perturbed { layer, dir: &dir, h };
            let out = model.forward_with(&exec, &s.x_t, s.t, s.label, &mut NoObserver)?;
            total += out.dist_sq(&base) / (h * h);
        }
    }
    Ok(total / (samples.len() * probes) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub bits: u8,
    pub group_size: usize,
    pub drift: f64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrcSweep {
    pub grid: Vec<GridPoint>,
    pub slope: f64,
    pub knee: GridPoint,
}

/// Drift of a student with only `layer` quantized (weights only).
pub fn single_layer_drift(
    model: &TinyDiT,
    cache: &PackCache,
    evalset: &EvalSet,
    layer: usize,
    precision: Precision,
    group_size: usize,
) -> Result<f64> {
    let mut plan = BitPlan::uniform(Precision::Fp16, group_size);
    plan.layers[layer].precision = precision;
    let student = Student::build(model, &plan, cache, ActivationMode::Float)?;
    evalset.drift(model, &student, evalset.full())
}

/// Cheapest grid point whose drift is within 10% of the best one; ties by
/// (bytes, bits, group).
pub fn knee_point(grid: &[GridPoint]) -> Option<GridPoint> {
    let best = grid.iter().map(|g| g.drift).fold(f64::INFINITY, f64::min);
    grid.iter()
        .filter(|g| g.drift <= 1.1 * best)
        .min_by(|a, b| {
            a.bytes
                .cmp(&b.bytes)
                .then(a.bits.cmp(&b.bits))
                .then(a.group_size.cmp(&b.group_size))
        })
        .copied()
}

/// Sweeps the (bits, group) grid for one layer.
pub fn src_sweep(
    model: &TinyDiT,
    cache: &PackCache,
    evalset: &EvalSet,
    cost: &CostModel,
    layer: usize,
    bits: &[u8],
    groups: &[usize],
) -> Result<SrcSweep> {
    let mut grid = Vec::with_capacity(bits.len() * groups.len());
    for &b in bits {
        let precision = int_precision(b)?;
        for &g in groups {
            let drift = single_layer_drift(model, cache, evalset, layer, precision, g)?;
            grid.push(GridPoint {
                bits: b,
                group_size: g,
                drift,
                bytes: cost.c_mem(layer, precision, g),
            });
        }
    }
    // Mean drift per bit width, then the slope across widths.
    let per_bit: Vec<(f64, f64)> = bits
        .iter()
        .map(|&b| {
            let pts: Vec<f64> = grid.iter().filter(|p| p.bits == b).map(|p| p.drift).collect();
            (b as f64, pts.iter().sum::<f64>() / pts.len().max(1) as f64)
        })
        .collect();
    let knee = knee_point(&grid).ok_or_else(|| Error::invalid("empty sweep grid"))?;
    Ok(SrcSweep {
        slope: src_slope(&per_bit),
        grid,
        knee,
    })
}

fn int_precision(bits: u8) -> Result<Precision> {
    match bits {
        3 => Ok(Precision::W3),
        4 => Ok(Precision::W4),
        6 => Ok(Precision::W6),
        8 => Ok(Precision::W8),
        b => Err(Error::invalid(format!("no integer precision with {b} bits"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub delta: f64,
    pub sigma2: f64,
    pub jacobian_fro_sq: f64,
    pub sn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStd {
    pub t: usize,
    pub std: f64,
}

/// Everything recorded about one layer (`stats.json` entry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer_id: String,
    pub d: usize,
    pub rows_seen: u64,
    pub h_diag_mean: f64,
    pub h_diag_norm: f64,
    pub k95: usize,
    pub spill: f64,
    pub s_pca: f64,
    pub score: f64,
    pub temporal_variability: f64,
    pub per_step_std: Vec<StepStd>,
    pub group_envelopes: Vec<(f64, f64)>,
    pub sweep: SrcSweep,
    pub leave_one_drift: f64,
    pub noise: NoiseEstimate,
    pub signals: SensitivitySignals,
    pub composite: f64,
    pub tier: Tier,
    pub frozen: bool,
}

/// `stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsDoc {
    pub schema_version: u32,
    pub seed: u64,
    pub num_steps: usize,
    pub n_samples: usize,
    pub timesteps: Vec<usize>,
    pub tier_by: TierSignal,
    pub uniform_seed: bool,
    /// Signals whose definitions are local stand-ins.
    pub stand_ins: Vec<String>,
    pub layers: Vec<LayerStats>,
}

pub struct Calibration {
    pub stats: StatsDoc,
    pub seed_plan: BitPlan,
    pub cache: PackCache,
    pub captures: Vec<LayerCapture>,
}

/// Captures from the default calibration set; later stages rebuild their
/// GPTQ inputs from this deterministically.
pub fn calibration_captures(model: &TinyDiT, cfg: &CalibConfig, seed: u64) -> Result<Vec<LayerCapture>> {
    let samples = calibration_samples(model, cfg, seed)?;
    collect_stats(model, &samples, cfg.reservoir_cap, cfg.envelope_group, seed)
}

/// Full calibration: statistics, four signals, tiers and the seed plan.
pub fn calibrate(model: &TinyDiT, cfg: &CalibConfig, seed: u64) -> Result<Calibration> {
    let captures = calibration_captures(model, cfg, seed)?;
    let table = layer_table();
    let cost = CostModel::new(model);

    // Curvature, PCA and temporal statistics.
    let mut h_diag = Vec::with_capacity(table.len());
    let mut pcas = Vec::with_capacity(table.len());
    let mut tvis = Vec::with_capacity(table.len());
    for cap in &captures {
        h_diag.push(cap.sum_sq.iter().sum::<f64>() / cap.sum_sq.len() as f64);
        pcas.push(pca_rank(&cap.reservoir_matrix(), cfg.pca_cap, cfg.pca_threshold)?);
        let stds: Vec<f64> = cap.per_step.values().map(|m| m.std()).collect();
        tvis.push(temporal_variability(&stds));
    }
    let h_norm = min_max_normalize(&h_diag);
    let tvi_norm = min_max_normalize(&tvis);
    let s_pca: Vec<f64> = captures
        .iter()
        .zip(&pcas)
        .map(|(c, p)| pca_sensitivity(p.k95, c.sum_sq.len(), p.spill))
        .collect();
    let score: Vec<f64> = s_pca
        .iter()
        .zip(&h_norm)
        .map(|(s, h)| combined_score(*s, *h, cfg.alpha))
        .collect();
    let sx = min_max_normalize(
        &score
            .iter()
            .zip(&tvi_norm)
            .map(|(s, v)| (1.0 - cfg.tvi_weight) * s + cfg.tvi_weight * v)
            .collect::<Vec<_>>(),
    );

    // Drift-based signals.
    let cache = PackCache::from_captures(&captures);
    let sched = cosine_schedule(model.num_steps)?;
    let pool = LatentPool::generate(seed ^ 0x51_6E_A1, 64);
    let evalset = EvalSet::build(model, &pool, &sched, cfg.signal_steps, cfg.signal_per_step, seed ^ 0x51)?;
    let jac_idx = evalset.indices(Fidelity::new(1, cfg.jacobian_samples));
    let jac_samples: Vec<CalibSample> = jac_idx.iter().map(|&i| evalset.samples()[i].clone()).collect();

    let per_layer: Vec<(SrcSweep, f64, NoiseEstimate)> = (0..table.len())
        .into_par_iter()
        .map(|i| {
            let sweep = src_sweep(model, &cache, &evalset, &cost, i, &cfg.sweep_bits, &cfg.sweep_groups)?;
            let leave_one = match sweep.grid.iter().find(|p| p.bits == 4 && p.group_size == 288) {
                Some(p) => p.drift,
                None => single_layer_drift(model, &cache, &evalset, i, Precision::W4, 288)?,
            };
            let delta = quantize_grouped(&model.layer(i).weight, cfg.noise_bits, cfg.noise_group)?.mean_scale();
            let jac = jacobian_fro_sq(model, i, &jac_samples, cfg.jacobian_probes, cfg.fd_step, seed)?;
            let sigma2 = quant_noise_variance(delta);
            Ok((
                sweep,
                leave_one,
                NoiseEstimate {
                    delta,
                    sigma2,
                    jacobian_fro_sq: jac,
                    sn: sigma2 * jac,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let sd = min_max_normalize(&per_layer.iter().map(|p| p.1).collect::<Vec<_>>());
    let sk = min_max_normalize(&per_layer.iter().map(|p| p.0.slope).collect::<Vec<_>>());
    let sn = min_max_normalize(&per_layer.iter().map(|p| p.2.sn).collect::<Vec<_>>());
    let signals: Vec<SensitivitySignals> = (0..table.len())
        .map(|i| SensitivitySignals::new(sx[i], sd[i], sk[i], sn[i]))
        .collect();
    let composite = signals.iter().map(composite_score).collect::<Result<Vec<_>>>()?;

    let ids: Vec<String> = table.iter().map(|l| l.id.clone()).collect();
    let tier_scores = match cfg.tier_by {
        TierSignal::Composite => &composite,
        TierSignal::Score => &score,
    };
    let tiering = tier_and_seed(&ids, tier_scores, cfg.freeze_fraction)?;
    let seed_plan = if cfg.uniform_seed {
        uniform_seed()
    } else {
        tiering.plan.clone()
    };

    let layers = captures
        .iter()
        .enumerate()
        .zip(per_layer)
        .map(|((i, cap), (sweep, leave_one, noise))| LayerStats {
            layer_id: cap.layer_id.clone(),
            d: cap.sum_sq.len(),
            rows_seen: cap.rows_seen,
            h_diag_mean: h_diag[i],
            h_diag_norm: h_norm[i],
            k95: pcas[i].k95,
            spill: pcas[i].spill,
            s_pca: s_pca[i],
            score: score[i],
            temporal_variability: tvis[i],
            per_step_std: cap
                .per_step
                .iter()
                .map(|(&t, m)| StepStd { t, std: m.std() })
                .collect(),
            group_envelopes: cap.envelopes_or_zero(),
            sweep,
            leave_one_drift: leave_one,
            noise,
            signals: signals[i],
            composite: composite[i],
            tier: tiering.tiers[i],
            frozen: !cfg.uniform_seed && tiering.frozen[i],
        })
        .collect();

    let stats = StatsDoc {
        schema_version: 1,
        seed,
        num_steps: model.num_steps,
        n_samples: cfg.n_samples,
        timesteps: even_timesteps(model.num_steps, cfg.n_timesteps),
        tier_by: cfg.tier_by,
        uniform_seed: cfg.uniform_seed,
        stand_ins: vec![
            "sd: drift with only this layer quantized at W4/g288".into(),
            "sx: score blended with coefficient of variation of input std over timesteps".into(),
            "hf_bias: not modelled".into(),
        ],
        layers,
    };
    Ok(Calibration {
        stats,
        seed_plan,
        cache,
        captures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Latent;

    fn sample(v: f64, t: usize) -> CalibSample {
        CalibSample {
            x_t: Latent::from_vec(vec![v; crate::model::LATENT_LEN]).unwrap(),
            t,
            label: 0,
        }
    }

    #[test]
    fn empty_calibration_rejected() {
        let m = TinyDiT::new(0, 100);
        assert!(matches!(collect_stats(&m, &[], 16, 128, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_batch_gives_zero_patch_energy() {
        let m = TinyDiT::new(0, 100);
        let caps = collect_stats(&m, &[sample(0.0, 5)], 16, 128, 0).unwrap();
        assert!(caps[0].sum_sq.iter().all(|&v| v == 0.0));
        assert_eq!(caps[0].envelopes_or_zero(), vec![(0.0, 0.0)]);
    }

    #[test]
    fn identical_batches_double_energy() {
        let m = TinyDiT::new(2, 100);
        let batch = vec![sample(0.3, 10), sample(-0.7, 60)];
        let once = collect_stats(&m, &batch, 16, 128, 0).unwrap();
        let twice_batch: Vec<_> = batch.iter().chain(&batch).cloned().collect();
        let twice = collect_stats(&m, &twice_batch, 16, 128, 0).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            for (x, y) in a.sum_sq.iter().zip(&b.sum_sq) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn identity_jacobian_at_output_layer() {
        let m = TinyDiT::new(3, 100);
        let s = vec![sample(0.2, 40)];
        let last = layer_table().len() - 1;
        let j = jacobian_fro_sq(&m, last, &s, 8, 1e-4, 1).unwrap();
        let dim = crate::model::LATENT_LEN as f64;
        assert!((j - dim).abs() <= 0.2 * dim, "estimate {j}");
    }

    #[test]
    fn knee_prefers_cheapest_within_tolerance() {
        let g = |bits, group_size, drift, bytes| GridPoint { bits, group_size, drift, bytes };
        let grid = [g(4, 64, 0.8, 10), g(4, 288, 0.9, 8), g(8, 64, 0.2, 20), g(8, 288, 0.21, 16)];
        assert_eq!(knee_point(&grid).unwrap(), grid[3]);
        let flat = [g(4, 64, 0.5, 10), g(4, 288, 0.5, 8), g(8, 64, 0.5, 20), g(8, 288, 0.5, 16)];
        assert_eq!(knee_point(&flat).unwrap(), flat[1]);
    }
}
