use autodiff::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 {
            return invalid("a schedule needs at least 2 steps");
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return invalid(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            ));
        }
        let betas = (0..num_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return invalid("every beta must lie in (0, 1)");
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bar,
        })
    }

    /// 20 steps, linear beta from 1e-4 to 0.1.
    pub fn desk_default() -> Self {
        Self::linear(20, 1e-4, 0.1).expect("valid default schedule")
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return invalid(format!("step {t} outside [0, {})", self.num_steps()));
        }
        Ok(())
    }

    /// Posterior variance of `z_{t-1}` given `z_t` and `z_0`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        if t == 0 {
            return invalid("no posterior below step 0");
        }
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        Ok((1.0 - ab_prev) / (1.0 - ab) * self.betas[t])
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check(t)?;
    same_shape(z0, eps, "forward_diffuse")?;
    let ab = schedule.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.zip_with(eps, |z, e| a * z + b * e)?)
}

/// Taped [`forward_diffuse`].
pub fn forward_diffuse_var<'t>(
    z0: &Var<'t>,
    t: usize,
    eps: &Var<'t>,
    schedule: &NoiseSchedule,
) -> Result<Var<'t>> {
    schedule.check(t)?;
    if z0.shape() != eps.shape() {
        return invalid("forward_diffuse: latent and noise shapes differ");
    }
    let ab = schedule.alpha_bar[t];
    Ok(z0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))?)
}

/// Estimate of `z0` from `z_t` and predicted noise.
pub fn predict_x0(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check(t)?;
    same_shape(z_t, eps_hat, "predict_x0")?;
    let ab = schedule.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.zip_with(eps_hat, |z, e| (z - b * e) / a)?)
}

/// One ancestral step `z_t -> z_{t-1}`.
///
/// With `rng_seed = None` the noise term is dropped, giving the posterior
/// mean. The step from `t = 1` never adds noise.
pub fn ddpm_reverse_step(
    z_t: &Tensor,
    t: usize,
    predicted_eps: &Tensor,
    schedule: &NoiseSchedule,
    rng_seed: Option<u64>,
) -> Result<Tensor> {
    schedule.check(t)?;
    if t == 0 {
        return invalid("reverse step from t = 0");
    }
    same_shape(z_t, predicted_eps, "ddpm_reverse_step")?;
    let beta = schedule.betas[t];
    let coef = beta / (1.0 - schedule.alpha_bar[t]).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alphas[t].sqrt();
    let mut out = z_t.zip_with(predicted_eps, |z, e| inv_sqrt_alpha * (z - coef * e))?;
    if let (Some(seed), true) = (rng_seed, t > 1) {
        let sigma = schedule.posterior_variance(t)?.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::randn(z_t.shape().to_vec(), 1.0, &mut rng);
        for (o, n) in out.data_mut().iter_mut().zip(noise.data()) {
            *o += sigma * n;
        }
    }
    Ok(out)
}
