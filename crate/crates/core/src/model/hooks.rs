//! Capture hooks: per-layer running statistics and seeded reservoirs of rows.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{layer_table, ForwardObserver, StepContext, TinyDiT};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureKind {
    Inputs,
    Outputs,
}

/// Running moments of everything a layer saw at one timestep.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let n = self.count as f64;
        let mean = self.sum / n;
        (self.sum_sq / n - mean * mean).max(0.0).sqrt()
    }
}

/// Everything recorded for one layer.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub layer_id: String,
    pub index: usize,
    pub kind: CaptureKind,
    pub reservoir_cap: usize,
    pub envelope_group: usize,
    /// Rows observed so far.
    pub rows_seen: u64,
    /// Uniform sample of at most `reservoir_cap` rows.
    pub reservoir: Vec<Vec<f64>>,
    /// Per-feature Σx².
    pub sum_sq: Vec<f64>,
    /// Per-group (min, max) over every observed value.
    pub envelopes: Vec<(f64, f64)>,
    /// Per-timestep moments, keyed by step index.
    pub per_step: BTreeMap<usize, Moments>,
    rng: ChaCha8Rng,
}

impl LayerCapture {
    fn new(
        layer_id: String,
        index: usize,
        width: usize,
        kind: CaptureKind,
        reservoir_cap: usize,
        envelope_group: usize,
        seed: u64,
    ) -> Self {
        let groups = width.div_ceil(envelope_group);
        Self {
            layer_id,
            index,
            kind,
            reservoir_cap,
            envelope_group,
            rows_seen: 0,
            reservoir: Vec::new(),
            sum_sq: vec![0.0; width],
            envelopes: vec![(f64::INFINITY, f64::NEG_INFINITY); groups],
            per_step: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        }
    }

    fn record(&mut self, step: StepContext, m: &Matrix) {
        let moments = self.per_step.entry(step.t).or_default();
        for r in 0..m.rows() {
            let row = m.row(r);
            for (i, &x) in row.iter().enumerate() {
                self.sum_sq[i] += x * x;
                let env = &mut self.envelopes[i / self.envelope_group];
                env.0 = env.0.min(x);
                env.1 = env.1.max(x);
                moments.sum += x;
                moments.sum_sq += x * x;
            }
            moments.count += row.len() as u64;

            // Algorithm R.
            let seen = self.rows_seen;
            if (seen as usize) < self.reservoir_cap {
                self.reservoir.push(row.to_vec());
            } else if self.reservoir_cap > 0 {
                let j = self.rng.random_range(0..=seen);
                if (j as usize) < self.reservoir_cap {
                    self.reservoir[j as usize] = row.to_vec();
                }
            }
            self.rows_seen += 1;
        }
    }

    /// Reservoir as an N×d matrix.
    pub fn reservoir_matrix(&self) -> Matrix {
        let d = self.sum_sq.len();
        let data = self.reservoir.iter().flatten().copied().collect();
        Matrix::from_vec(self.reservoir.len(), d, data)
    }

    /// Envelopes with empty groups reported as (0, 0).
    pub fn envelopes_or_zero(&self) -> Vec<(f64, f64)> {
        self.envelopes
            .iter()
            .map(|&(lo, hi)| if lo > hi { (0.0, 0.0) } else { (lo, hi) })
            .collect()
    }
}

/// A set of registered capture hooks. Pass it as the observer of
/// [`TinyDiT::forward_with`]; it never alters the forward results.
#[derive(Debug, Clone, Default)]
pub struct HookSet {
    captures: Vec<LayerCapture>,
}

impl HookSet {
    pub fn register(
        model: &TinyDiT,
        layer_ids: &[&str],
        kind: CaptureKind,
        reservoir_cap: usize,
        envelope_group: usize,
        seed: u64,
    ) -> Result<Self> {
        if envelope_group == 0 {
            return Err(Error::invalid("envelope group size must be positive"));
        }
        let table = layer_table();
        let mut captures = Vec::with_capacity(layer_ids.len());
        for id in layer_ids {
            let index = model
                .layer_index(id)
                .ok_or_else(|| Error::invalid(format!("unknown layer id `{id}`")))?;
            let info = &table[index];
            let width = match kind {
                CaptureKind::Inputs => info.in_features,
                CaptureKind::Outputs => info.out_features,
            };
            captures.push(LayerCapture::new(
                info.id.clone(),
                index,
                width,
                kind,
                reservoir_cap,
                envelope_group,
                seed,
            ));
        }
        Ok(Self { captures })
    }

    /// Removes a hook, returning what it had captured.
    pub fn remove(&mut self, layer_id: &str) -> Option<LayerCapture> {
        let pos = self.captures.iter().position(|c| c.layer_id == layer_id)?;
        Some(self.captures.remove(pos))
    }

    pub fn clear(&mut self) {
        self.captures.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.captures.is_empty()
    }

    pub fn get(&self, layer_id: &str) -> Option<&LayerCapture> {
        self.captures.iter().find(|c| c.layer_id == layer_id)
    }

    pub fn captures(&self) -> &[LayerCapture] {
        &self.captures
    }

    pub fn into_captures(self) -> Vec<LayerCapture> {
        self.captures
    }
}

impl ForwardObserver for HookSet {
    fn on_linear(&mut self, index: usize, step: StepContext, input: &Matrix, output: &Matrix) {
        for cap in self.captures.iter_mut().filter(|c| c.index == index) {
            match cap.kind {
                CaptureKind::Inputs => cap.record(step, input),
                CaptureKind::Outputs => cap.record(step, output),
            }
        }
    }
}
