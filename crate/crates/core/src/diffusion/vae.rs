//! Convolutional autoencoder between frames `[.., H, W, 3]` and latents
//! `[.., H/4, W/4, C]`.
//!
//! Deterministic: no sampling in the bottleneck. Latents are divided by a
//! stored scale (`latent_scale`) so that they have roughly unit spread.

use autodiff::{Adam, AdamConfig, Bound, ParamSet, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{conv, init_conv, Init};
use crate::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    pub enc_width: usize,
    pub dec_width: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            latent_channels: 8,
            enc_width: 16,
            dec_width: 16,
        }
    }
}

impl VaeConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    pub params: ParamSet,
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        if config.image_size % 4 != 0 || config.image_size < 8 {
            return invalid("image size must be a multiple of 4 and at least 8");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, d, c) = (config.enc_width, config.dec_width, config.latent_channels);
        let mut p = ParamSet::new();
        init_conv(&mut p, "enc.c1", 3, 3, e, Init::Normal, &mut rng);
        init_conv(&mut p, "enc.c2", 3, e, 2 * e, Init::Normal, &mut rng);
        init_conv(&mut p, "enc.c3", 1, 2 * e, c, Init::Normal, &mut rng);
        init_conv(&mut p, "dec.c1", 3, c, d, Init::Normal, &mut rng);
        init_conv(&mut p, "dec.c2", 3, d, d, Init::Normal, &mut rng);
        init_conv(&mut p, "dec.c3", 3, d, d, Init::Normal, &mut rng);
        init_conv(&mut p, "dec.out", 3, d, 3, Init::Zero, &mut rng);
        p.insert("latent_scale", Tensor::scalar(1.0));
        Ok(Self { config, params: p })
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 3 {
            return invalid(format!("expected images [N, {s}, {s}, 3], got {shape:?}"));
        }
        Ok(())
    }

    fn check_latents(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.latent_size();
        let c = self.config.latent_channels;
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != c {
            return invalid(format!(
                "expected latents [N, {s}, {s}, {c}], got {shape:?}"
            ));
        }
        Ok(())
    }

    /// Images `[N, H, W, 3]` to latents `[N, h, w, C]`.
    pub fn encode_var<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.check_images(&x.shape())?;
        let h = conv(b, "enc.c1", x, 2)?.silu();
        let h = conv(b, "enc.c2", &h, 2)?.silu();
        let z = conv(b, "enc.c3", &h, 1)?;
        let scale = b.get("latent_scale")?.detach();
        Ok(z.div(&scale)?)
    }

    /// Latents `[N, h, w, C]` to images `[N, H, W, 3]`.
    pub fn decode_var<'t>(&self, b: &Bound<'t>, z: &Var<'t>) -> Result<Var<'t>> {
        self.check_latents(&z.shape())?;
        let scale = b.get("latent_scale")?.detach();
        let z = z.mul(&scale)?;
        let h = conv(b, "dec.c1", &z, 1)?.silu().upsample2x()?;
        let h = conv(b, "dec.c2", &h, 1)?.silu().upsample2x()?;
        let h = conv(b, "dec.c3", &h, 1)?.silu();
        conv(b, "dec.out", &h, 1)
    }

    /// Frames `[.., H, W, 3]` (any number of leading axes) to latents.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let lead = leading(x.shape(), 3)?;
        let n: usize = lead.iter().product();
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let s = self.config.image_size;
        let xv = tape.constant(x.clone().reshape([n, s, s, 3])?);
        let z = self.encode_var(&b, &xv)?.value();
        let mut shape = lead;
        let l = self.config.latent_size();
        shape.extend([l, l, self.config.latent_channels]);
        Ok((*z).clone().reshape(shape)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let lead = leading(z.shape(), 3)?;
        let n: usize = lead.iter().product();
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let l = self.config.latent_size();
        let zv = tape.constant(z.clone().reshape([n, l, l, self.config.latent_channels])?);
        let x = self.decode_var(&b, &zv)?.value();
        let mut shape = lead;
        let s = self.config.image_size;
        shape.extend([s, s, 3]);
        Ok((*x).clone().reshape(shape)?)
    }
}

fn leading(shape: &[usize], trailing: usize) -> Result<Vec<usize>> {
    if shape.len() <= trailing {
        return invalid(format!("tensor of shape {shape:?} has no batch axes"));
    }
    Ok(shape[..shape.len() - trailing].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 3e-3,
            seed: 1,
        }
    }
}

/// Fits the autoencoder to `images` `[N, H, W, 3]` by pixel MSE, then sets
/// the latent scale to the latent standard deviation. Returns the loss per
/// step.
pub fn train_vae(vae: &mut Vae, images: &Tensor, cfg: &VaeTrainConfig) -> Result<Vec<f64>> {
    vae.check_images(images.shape())?;
    let n = images.shape()[0];
    let batch = cfg.batch.min(n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    let scale = vae.params.get("latent_scale")?.item()?;
    for step in 0..cfg.steps {
        // cosine decay to 5% of the base rate
        let frac = step as f64 / cfg.steps.max(1) as f64;
        opt.set_lr(cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())));
        let idx: Vec<usize> = sample(&mut rng, n, batch).into_vec();
        let tape = Tape::new();
        let b = vae.params.bind(&tape);
        let mut shape = images.shape().to_vec();
        shape[0] = idx.len();
        let x = tape
            .constant(images.clone().reshape([n, images.numel() / n])?)
            .gather_rows(&idx)?
            .reshape(&shape)?;
        let z = vae.encode_var(&b, &x)?;
        let y = vae.decode_var(&b, &z)?;
        let loss = y.sub(&x)?.square().mean();
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "autoencoder loss diverged at step {step}"
            )));
        }
        losses.push(value);
        let mut grads = b.grads(loss)?;
        grads.insert("latent_scale", Tensor::scalar(0.0));
        opt.step(&mut vae.params, &grads)?;
    }
    // latent spread on the raw (unscaled) encoder output
    let z = vae.encode(images)?;
    let std = (z.norm_sq() / z.numel() as f64).sqrt() * scale;
    if std > 1e-8 && cfg.steps > 0 {
        // rescale the latent without changing the round trip
        vae.params.insert("latent_scale", Tensor::scalar(std));
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_round_trip_and_bias_image() {
        let vae = Vae::new(VaeConfig::default(), 3).unwrap();
        let x = Tensor::zeros([2, 3, 32, 32, 3]);
        let z = vae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 3, 8, 8, 8]);
        let y = vae.decode(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
        // zero-init output layer: the output is the output bias everywhere
        let bias = vae.params.get("dec.out.b").unwrap();
        for px in y.data().chunks(3) {
            assert_eq!(px, bias.data());
        }
    }

    #[test]
    fn wrong_resolution_rejected() {
        let vae = Vae::new(VaeConfig::default(), 3).unwrap();
        assert!(vae.encode(&Tensor::zeros([1, 16, 16, 3])).is_err());
        assert!(vae.decode(&Tensor::zeros([1, 8, 8, 4])).is_err());
    }
}
