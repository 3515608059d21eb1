//! Noise schedule, forward/reverse diffusion, the latent autoencoder and the
//! plain denoising objective.

mod schedule;
pub mod vae;

pub use schedule::{
    ddpm_reverse_step, forward_diffuse, forward_diffuse_var, predict_x0, NoiseSchedule,
};
pub use vae::{Vae, VaeConfig};

use autodiff::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Anything that predicts noise from a noisy latent on a tape.
pub trait Denoiser<'t> {
    /// `cond` is a `[n_tokens, d]` embedding sequence.
    fn predict_eps(&self, z_t: &Var<'t>, t: usize, cond: &Var<'t>) -> Result<Var<'t>>;
}

/// Draws the diffusion step and noise used by one evaluation of the
/// denoising objective.
pub fn sample_step_and_noise(shape: &[usize], num_steps: usize, seed: u64) -> (usize, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(0..num_steps);
    let eps = Tensor::randn(shape.to_vec(), 1.0, &mut rng);
    (t, eps)
}

/// Mean squared noise-prediction error at a seeded step and noise.
pub fn loss_ldm<'t, D: Denoiser<'t> + ?Sized>(
    denoiser: &D,
    z0: &Var<'t>,
    cond: &Var<'t>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Var<'t>> {
    let (t, eps) = sample_step_and_noise(&z0.shape(), schedule.num_steps(), seed);
    loss_ldm_at(denoiser, z0, cond, schedule, t, &eps)
}

/// [`loss_ldm`] at an explicit step and noise.
pub fn loss_ldm_at<'t, D: Denoiser<'t> + ?Sized>(
    denoiser: &D,
    z0: &Var<'t>,
    cond: &Var<'t>,
    schedule: &NoiseSchedule,
    t: usize,
    eps: &Tensor,
) -> Result<Var<'t>> {
    let tape = z0.tape();
    let eps = tape.constant(eps.clone());
    let z_t = forward_diffuse_var(z0, t, &eps, schedule)?;
    let pred = denoiser.predict_eps(&z_t, t, cond)?;
    Ok(pred.sub(&eps)?.square().mean())
}

/// Runs the reverse chain from `z_start` at step `T-1` down to `z_0` and
/// returns the final clean estimate.
///
/// `predict(z, t)` returns the noise prediction. With `seed = None` every
/// step is the posterior mean; otherwise step `t` draws its noise from
/// `seed + t`.
pub fn reverse_chain(
    z_start: &Tensor,
    schedule: &NoiseSchedule,
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    seed: Option<u64>,
) -> Result<Tensor> {
    let mut z = z_start.clone();
    for t in (1..schedule.num_steps()).rev() {
        let eps = predict(&z, t)?;
        z = ddpm_reverse_step(
            &z,
            t,
            &eps,
            schedule,
            seed.map(|s| s.wrapping_add(t as u64)),
        )?;
        if !z.is_finite() {
            return Err(crate::Error::Numerical(format!(
                "reverse chain diverged at step {t}"
            )));
        }
    }
    let eps = predict(&z, 0)?;
    predict_x0(&z, 0, &eps, schedule)
}

/// Noises `z0` to the last step with seeded noise and denoises it back
/// with the noise-free chain.
pub fn reconstruct(
    z0: &Tensor,
    schedule: &NoiseSchedule,
    predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::randn(z0.shape().to_vec(), 1.0, &mut rng);
    let start = forward_diffuse(z0, schedule.num_steps() - 1, &eps, schedule)?;
    reverse_chain(&start, schedule, predict, None)
}
