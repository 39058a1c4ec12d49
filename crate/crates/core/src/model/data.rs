//! Synthetic latent data: a seeded pool of clean latents and the noised
//! calibration samples derived from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{add_noise, Latent, NoiseSchedule, LATENT_LEN, NUM_CLASSES};
use crate::Result;

const BASIS: usize = 4;

/// Clean latents drawn as a class prototype plus a low-rank shared
/// variation, roughly unit variance per element.
#[derive(Debug, Clone)]
pub struct LatentPool {
    latents: Vec<Latent>,
    labels: Vec<usize>,
}

impl LatentPool {
    pub fn generate(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_DA7A);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let protos: Vec<Vec<f64>> = (0..NUM_CLASSES)
            .map(|_| (0..LATENT_LEN).map(|_| normal()).collect())
            .collect();
        let basis: Vec<Vec<f64>> = (0..BASIS)
            .map(|_| (0..LATENT_LEN).map(|_| normal()).collect())
            .collect();
        let mut latents = Vec::with_capacity(size);
        let mut labels = Vec::with_capacity(size);
        for i in 0..size {
            let label = i % NUM_CLASSES;
            let z: Vec<f64> = (0..BASIS).map(|_| normal()).collect();
            let data = (0..LATENT_LEN)
                .map(|k| {
                    let var: f64 = z.iter().zip(&basis).map(|(zj, b)| zj * b[k]).sum();
                    0.8 * protos[label][k] + 0.3 * var
                })
                .collect();
            latents.push(Latent(data));
            labels.push(label);
        }
        Self { latents, labels }
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn get(&self, i: usize) -> (&Latent, usize) {
        let i = i % self.latents.len();
        (&self.latents[i], self.labels[i])
    }
}

/// One `(x_t, t, y)` calibration triple.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSample {
    pub x_t: Latent,
    pub t: usize,
    pub label: usize,
}

/// `n` timesteps evenly spread over `[0, T)` including both ends.
pub fn even_timesteps(num_steps: usize, n: usize) -> Vec<usize> {
    if n <= 1 || num_steps <= 1 {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..n)
        .map(|i| ((i as f64) * (num_steps - 1) as f64 / (n - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Noises pool latents at each requested timestep (`per_step` samples per
/// step). The same pool entry and noise draw are used for sample `i` at every
/// step, so students and teachers always see identical latents.
pub fn calibration_set(
    pool: &LatentPool,
    sched: &NoiseSchedule,
    timesteps: &[usize],
    per_step: usize,
    seed: u64,
) -> Result<Vec<CalibSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA11_B8A7E);
    let noises: Vec<Latent> = (0..per_step)
        .map(|_| Latent((0..LATENT_LEN).map(|_| rng.sample(StandardNormal)).collect()))
        .collect();
    let mut out = Vec::with_capacity(timesteps.len() * per_step);
    for (k, &t) in timesteps.iter().enumerate() {
        for (i, eps) in noises.iter().enumerate() {
            let (x0, label) = pool.get(i + k * per_step);
            out.push(CalibSample {
                x_t: add_noise(x0, t, eps, sched)?,
                t,
                label,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cosine_schedule;

    #[test]
    fn even_timesteps_cover_both_ends() {
        assert_eq!(even_timesteps(100, 4), vec![0, 33, 66, 99]);
        assert_eq!(even_timesteps(100, 1), vec![0]);
    }

    #[test]
    fn calibration_set_is_reproducible() {
        let pool = LatentPool::generate(1, 32);
        let sched = cosine_schedule(100).unwrap();
        let a = calibration_set(&pool, &sched, &[0, 50, 99], 4, 7).unwrap();
        let b = calibration_set(&pool, &sched, &[0, 50, 99], 4, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        // t = 0 has alpha_bar = 1: the clean latent itself.
        assert_eq!(&a[0].x_t, pool.get(0).0);
    }
}
