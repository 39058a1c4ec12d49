//! Sensitivity formulas and tier assignment.

use serde::{Deserialize, Serialize};

use crate::quant::{BitPlan, LayerAssignment, Precision};
use crate::{Error, Result};

pub const COMPOSITE_WEIGHTS: [f64; 4] = [0.4, 0.2, 0.25, 0.15];

/// `0.5·spill + 0.5·k95/d`.
pub fn pca_sensitivity(k95: usize, d: usize, spill: f64) -> f64 {
    0.5 * spill + 0.5 * k95 as f64 / d as f64
}

/// `α·s_pca + (1 − α)·h`.
pub fn combined_score(s_pca: f64, h_diag_norm: f64, alpha: f64) -> f64 {
    alpha * s_pca + (1.0 - alpha) * h_diag_norm
}

/// The four per-layer signals, each already normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySignals {
    pub sx: Option<f64>,
    pub sd: Option<f64>,
    pub sk: Option<f64>,
    pub sn: Option<f64>,
}

impl SensitivitySignals {
    pub fn new(sx: f64, sd: f64, sk: f64, sn: f64) -> Self {
        Self {
            sx: Some(sx),
            sd: Some(sd),
            sk: Some(sk),
            sn: Some(sn),
        }
    }
}

/// `0.4·Sx + 0.2·Sd + 0.25·Sk + 0.15·Sn`.
pub fn composite_score(s: &SensitivitySignals) -> Result<f64> {
    let named = [("sx", s.sx), ("sd", s.sd), ("sk", s.sk), ("sn", s.sn)];
    let mut total = 0.0;
    for ((name, v), w) in named.into_iter().zip(COMPOSITE_WEIGHTS) {
        let v = v.ok_or_else(|| Error::invalid(format!("sensitivity signal `{name}` missing")))?;
        if !v.is_finite() {
            return Err(Error::invalid(format!("sensitivity signal `{name}` is not finite")));
        }
        total += w * v;
    }
    Ok(total)
}

/// Least-squares slope of drift against bit width, negated and clamped at
/// zero: the drift removed per added bit.
pub fn src_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mb = points.iter().map(|p| p.0).sum::<f64>() / n;
    let md = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sbb: f64 = points.iter().map(|p| (p.0 - mb) * (p.0 - mb)).sum();
    if sbb == 0.0 {
        return 0.0;
    }
    let sbd: f64 = points.iter().map(|p| (p.0 - mb) * (p.1 - md)).sum();
    (-sbd / sbb).max(0.0)
}

/// `σ² = Δ²/12`.
pub fn quant_noise_variance(delta: f64) -> f64 {
    delta * delta / 12.0
}

/// Coefficient of variation of a layer's activation std across timesteps.
pub fn temporal_variability(stds: &[f64]) -> f64 {
    if stds.is_empty() {
        return 0.0;
    }
    let n = stds.len() as f64;
    let mean = stds.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return 0.0;
    }
    let var = stds.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Low,
    Mid,
    High,
}

impl Tier {
    /// Seed precision and group size for the tier.
    pub fn seed_assignment(self) -> (Precision, usize) {
        match self {
            Tier::Low => (Precision::W4, 288),
            Tier::Mid => (Precision::W8, 128),
            Tier::High => (Precision::Fp16, 64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tiering {
    pub tiers: Vec<Tier>,
    pub frozen: Vec<bool>,
    pub plan: BitPlan,
}

/// Tertile split of layers by score (ties broken by layer order, earlier
/// layers lower), seed assignments per tier, and the top
/// `round(freeze_fraction·n)` layers frozen.
pub fn tier_and_seed(layer_ids: &[String], scores: &[f64], freeze_fraction: f64) -> Result<Tiering> {
    if layer_ids.len() != scores.len() {
        return Err(Error::invalid("one score per layer required"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score of `{}` is not finite", layer_ids[i])));
    }
    if !(0.0..=1.0).contains(&freeze_fraction) {
        return Err(Error::invalid("freeze fraction must lie in [0, 1]"));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));

    let mut tiers = vec![Tier::Mid; n];
    if n >= 3 {
        let base = n / 3;
        let rem = n % 3;
        let low = base + usize::from(rem >= 1);
        let mid = base + usize::from(rem >= 2);
        for (rank, &i) in order.iter().enumerate() {
            tiers[i] = if rank < low {
                Tier::Low
            } else if rank < low + mid {
                Tier::Mid
            } else {
                Tier::High
            };
        }
    }
    let n_frozen = ((freeze_fraction * n as f64).round() as usize).min(n);
    let mut frozen = vec![false; n];
    for &i in order.iter().rev().take(n_frozen) {
        frozen[i] = true;
    }
    let plan = BitPlan {
        layers: layer_ids
            .iter()
            .zip(&tiers)
            .zip(&frozen)
            .map(|((id, tier), &f)| {
                let (precision, group_size) = tier.seed_assignment();
                LayerAssignment {
                    layer_id: id.clone(),
                    precision,
                    group_size,
                    frozen: f,
                }
            })
            .collect(),
    };
    Ok(Tiering { tiers, frozen, plan })
}

/// W4 with 288-wide groups everywhere, nothing frozen.
pub fn uniform_seed() -> BitPlan {
    BitPlan::uniform(Precision::W4, 288)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn pca_sensitivity_arithmetic() {
        assert_eq!(pca_sensitivity(64, 64, 0.0), 0.5);
        assert!((pca_sensitivity(3, 64, 0.0) - 0.0234375).abs() < 1e-12);
        assert!((pca_sensitivity(32, 64, 0.05) - 0.275).abs() < 1e-12);
    }

    #[test]
    fn combined_score_arithmetic() {
        assert_eq!(combined_score(0.0, 0.0, 0.5), 0.0);
        assert!((combined_score(0.2, 0.6, 0.5) - 0.4).abs() < 1e-12);
        assert_eq!(combined_score(0.37, 0.9, 1.0), 0.37);
    }

    #[test]
    fn composite_arithmetic_and_missing_signal() {
        assert!((composite_score(&SensitivitySignals::new(1.0, 1.0, 1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((composite_score(&SensitivitySignals::new(1.0, 0.0, 0.0, 0.0)).unwrap() - 0.4).abs() < 1e-12);
        let mut s = SensitivitySignals::new(0.1, 0.2, 0.3, 0.4);
        s.sk = None;
        assert!(matches!(composite_score(&s), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn src_slope_two_points() {
        assert!((src_slope(&[(4.0, 0.8), (8.0, 0.2)]) - 0.6 / 4.0).abs() < 1e-12);
        assert_eq!(src_slope(&[(4.0, 0.3), (8.0, 0.3)]), 0.0);
    }

    #[test]
    fn noise_variance_scales_quadratically() {
        assert_eq!(quant_noise_variance(0.0), 0.0);
        let d = 0.037;
        assert_eq!(quant_noise_variance(2.0 * d), 4.0 * quant_noise_variance(d));
    }

    #[test]
    fn twenty_layer_tertiles() {
        let scores: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64).collect();
        let t = tier_and_seed(&ids(20), &scores, 0.1).unwrap();
        let count = |x| t.tiers.iter().filter(|&&y| y == x).count();
        assert_eq!((count(Tier::Low), count(Tier::Mid), count(Tier::High)), (7, 7, 6));
        assert_eq!(t.frozen.iter().filter(|&&f| f).count(), 2);
        for (i, s) in scores.iter().enumerate() {
            if t.frozen[i] {
                assert!(*s >= 18.0);
                assert_eq!(t.plan.layers[i].precision, Precision::Fp16);
            }
        }
    }

    #[test]
    fn equal_scores_tier_by_layer_order() {
        let t = tier_and_seed(&ids(6), &[1.0; 6], 0.0).unwrap();
        assert_eq!(
            t.tiers,
            vec![Tier::Low, Tier::Low, Tier::Mid, Tier::Mid, Tier::High, Tier::High]
        );
    }

    #[test]
    fn fewer_than_three_layers_all_mid() {
        let t = tier_and_seed(&ids(2), &[0.1, 0.9], 0.1).unwrap();
        assert_eq!(t.tiers, vec![Tier::Mid, Tier::Mid]);
    }

    #[test]
    fn uniform_seed_is_w4_g288() {
        let p = uniform_seed();
        assert!(p.layers.iter().all(|l| l.precision == Precision::W4 && l.group_size == 288 && !l.frozen));
    }

    proptest! {
        #[test]
        fn pca_sensitivity_bounded_and_monotone(k in 1usize..64, spill in 0.0f64..1.0) {
            let s = pca_sensitivity(k, 64, spill);
            prop_assert!(s > 0.0 && s <= 1.0);
            prop_assert!(pca_sensitivity(k + 1, 64, spill) > s);
            prop_assert!(pca_sensitivity(k, 64, (spill + 0.01).min(1.0)) >= s);
        }

        #[test]
        fn combined_is_convex(s in 0.0f64..=1.0, h in 0.0f64..=1.0, a in 0.0f64..=1.0) {
            let c = combined_score(s, h, a);
            prop_assert!(c >= s.min(h) - 1e-15 && c <= s.max(h) + 1e-15);
        }

        #[test]
        fn tiering_invariant_under_monotone_transform(scores in proptest::collection::vec(-5.0f64..5.0, 3..30)) {
            let ids = ids(scores.len());
            let a = tier_and_seed(&ids, &scores, 0.1).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            let b = tier_and_seed(&ids, &mapped, 0.1).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn composite_is_permutation_equivariant(
            sig in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 2..12),
            rot in 0usize..12,
        ) {
            let base: Vec<f64> = sig.iter().map(|&(a, b, c, d)| composite_score(&SensitivitySignals::new(a, b, c, d)).unwrap()).collect();
            let k = rot % sig.len();
            let mut rotated = sig.clone();
            rotated.rotate_left(k);
            let got: Vec<f64> = rotated.iter().map(|&(a, b, c, d)| composite_score(&SensitivitySignals::new(a, b, c, d)).unwrap()).collect();
            let mut expect = base.clone();
            expect.rotate_left(k);
            prop_assert_eq!(got, expect);
        }
    }
}
