//! Cached teacher outputs on a fixed set of noised latents and the
//! student–teacher noise-prediction MSE measured against them.

use crate::model::{
    calibration_set, even_timesteps, CalibSample, Latent, LatentPool, LinearExec, NoObserver,
    NoiseSchedule, TinyDiT, LATENT_LEN,
};
use crate::{Error, Result};

/// How much of an [`EvalSet`] one evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Fidelity {
    pub samples_per_step: usize,
    pub steps: usize,
}

impl Fidelity {
    pub fn new(samples_per_step: usize, steps: usize) -> Self {
        Self {
            samples_per_step,
            steps,
        }
    }
}

/// Noised latents grouped by timestep, with the teacher's predictions.
#[derive(Debug, Clone)]
pub struct EvalSet {
    timesteps: Vec<usize>,
    per_step: usize,
    samples: Vec<CalibSample>,
    teacher: Vec<Latent>,
}

impl EvalSet {
    /// `n_steps` evenly spaced timesteps, `per_step` samples each.
    pub fn build(
        teacher: &TinyDiT,
        pool: &LatentPool,
        sched: &NoiseSchedule,
        n_steps: usize,
        per_step: usize,
        seed: u64,
    ) -> Result<Self> {
        let timesteps = even_timesteps(sched.num_steps(), n_steps);
        Self::at_timesteps(teacher, pool, sched, &timesteps, per_step, seed)
    }

    pub fn at_timesteps(
        teacher: &TinyDiT,
        pool: &LatentPool,
        sched: &NoiseSchedule,
        timesteps: &[usize],
        per_step: usize,
        seed: u64,
    ) -> Result<Self> {
        if timesteps.is_empty() || per_step == 0 {
            return Err(Error::invalid("evaluation set needs at least one step and sample"));
        }
        let samples = calibration_set(pool, sched, timesteps, per_step, seed)?;
        let teacher_out = samples
            .iter()
            .map(|s| teacher.forward(&s.x_t, s.t, s.label))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            timesteps: timesteps.to_vec(),
            per_step,
            samples,
            teacher: teacher_out,
        })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn samples(&self) -> &[CalibSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn full(&self) -> Fidelity {
        Fidelity::new(self.per_step, self.timesteps.len())
    }

    /// Sample indices for a fidelity: steps spread evenly over the cached
    /// ones, the first `samples_per_step` samples at each.
    pub fn indices(&self, fid: Fidelity) -> Vec<usize> {
        let n_steps = fid.steps.clamp(1, self.timesteps.len());
        let per = fid.samples_per_step.clamp(1, self.per_step);
        let step_pos = even_timesteps(self.timesteps.len(), n_steps);
        step_pos
            .iter()
            .flat_map(|&k| (0..per).map(move |i| k * self.per_step + i))
            .collect()
    }

    pub fn teacher_output(&self, index: usize) -> &Latent {
        &self.teacher[index]
    }

    /// Mean over samples of the per-element squared error between the
    /// student's and the cached teacher's noise predictions.
    pub fn drift(&self, model: &TinyDiT, exec: &dyn LinearExec, fid: Fidelity) -> Result<f64> {
        let idx = self.indices(fid);
        let mut total = 0.0;
        for &i in &idx {
            let s = &self.samples[i];
            let out = model.forward_with(exec, &s.x_t, s.t, s.label, &mut NoObserver)?;
            total += out.dist_sq(&self.teacher[i]) / LATENT_LEN as f64;
        }
        Ok(total / idx.len() as f64)
    }

    /// Same quantity with the teacher recomputed instead of read from cache.
    pub fn drift_uncached(
        &self,
        model: &TinyDiT,
        exec: &dyn LinearExec,
        fid: Fidelity,
    ) -> Result<f64> {
        let idx = self.indices(fid);
        let mut total = 0.0;
        for &i in &idx {
            let s = &self.samples[i];
            let out = model.forward_with(exec, &s.x_t, s.t, s.label, &mut NoObserver)?;
            let reference = model.forward(&s.x_t, s.t, s.label)?;
            total += out.dist_sq(&reference) / LATENT_LEN as f64;
        }
        Ok(total / idx.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cosine_schedule, FloatExec};

    #[test]
    fn teacher_has_zero_drift_and_indices_follow_fidelity() {
        let model = TinyDiT::new(1, 100);
        let pool = LatentPool::generate(1, 32);
        let sched = cosine_schedule(100).unwrap();
        let set = EvalSet::build(&model, &pool, &sched, 12, 6, 3).unwrap();
        assert_eq!(set.len(), 72);
        assert_eq!(set.indices(set.full()).len(), 72);
        let idx = set.indices(Fidelity::new(2, 6));
        assert_eq!(idx.len(), 12);
        assert!(idx.iter().all(|i| i % 6 < 2));
        assert_eq!(set.drift(&model, &FloatExec, Fidelity::new(2, 3)).unwrap(), 0.0);
    }
}
