use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ddim_step, Latent, LinearExec, NoObserver, NoiseSchedule, TinyDiT, LATENT_LEN};
use crate::{Error, Result};

/// Seeded pure-noise starting latent for image `index`.
pub fn initial_noise(seed: u64, index: usize) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x100_0000_01B3) ^ index as u64);
    Latent((0..LATENT_LEN).map(|_| rng.sample(StandardNormal)).collect())
}

/// DDIM over `steps` (ascending, indexed on the original grid, no
/// re-spacing), iterated from the largest step down to a clean latent.
pub fn ddim_sample(
    model: &TinyDiT,
    exec: &dyn LinearExec,
    sched: &NoiseSchedule,
    steps: &[usize],
    x_start: Latent,
    label: usize,
) -> Result<Latent> {
    if steps.is_empty() {
        return Err(Error::invalid("sampling schedule is empty"));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sampling schedule must be strictly ascending"));
    }
    let mut x = x_start;
    for (pos, &t) in steps.iter().enumerate().rev() {
        let eps = model.forward_with(exec, &x, t, label, &mut NoObserver)?;
        let prev = pos.checked_sub(1).map(|p| steps[p]);
        x = ddim_step(&x, &eps, t, prev, sched)?;
    }
    Ok(x)
}
