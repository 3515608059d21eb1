//! Frozen source denoisers: a multi-view model that only ever sees static
//! scenes and a video model that only ever sees single-view sequences.

use autodiff::{Adam, AdamConfig, ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse_var, NoiseSchedule};
use crate::model::{channel_forward, init_channel, tap_tokens, Axis, ChannelSpec, ModelConfig};
use crate::nn::linear;
use crate::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Input `[V, h, w, C]`: the views of one static instant.
    MultiView,
    /// Input `[T, h, w, C]`: the frames of one view.
    Video,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub kind: TeacherKind,
    pub spec: ChannelSpec,
    /// Channel weights plus the frozen random tap projection `proj`.
    pub params: ParamSet,
    pub trained_steps: usize,
}

impl Teacher {
    pub fn spec_for(kind: TeacherKind, cfg: &ModelConfig) -> ChannelSpec {
        let c = cfg.latent_channels;
        let base = match kind {
            TeacherKind::MultiView => cfg.spatial_spec(),
            TeacherKind::Video => ChannelSpec {
                pos_enc: false,
                ..cfg.temporal_spec()
            },
        };
        ChannelSpec {
            cin: c,
            cout: c,
            ..base
        }
    }

    pub fn new(kind: TeacherKind, cfg: &ModelConfig, seed: u64) -> Self {
        let spec = Self::spec_for(kind, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_channel(&mut params, &spec, &mut rng);
        Self {
            kind,
            spec,
            params,
            trained_steps: 0,
        }
    }

    pub fn from_params(
        kind: TeacherKind,
        cfg: &ModelConfig,
        params: ParamSet,
        trained_steps: usize,
    ) -> Result<Self> {
        let t = Self::new(kind, cfg, 0);
        for (name, w) in t.params.iter() {
            if params
                .get(name)
                .map(|p| p.shape() != w.shape())
                .unwrap_or(true)
            {
                return invalid(format!("teacher checkpoint is missing or misshapes {name}"));
            }
        }
        Ok(Self {
            params,
            trained_steps,
            ..t
        })
    }

    /// The teacher's view of a 4D latent `[V, T, h, w, C]`: frame 0 across
    /// views, or view 0 across frames.
    pub fn input_from(&self, z4d: &Tensor) -> Result<Tensor> {
        let s = z4d.shape();
        if s.len() != 5 {
            return invalid(format!("teacher input from latent {s:?}"));
        }
        match self.kind {
            TeacherKind::Video => Ok(z4d.index_axis0(0)?),
            TeacherKind::MultiView => {
                let views: Vec<Tensor> = (0..s[0])
                    .map(|v| z4d.index_axis0(v).and_then(|x| x.index_axis0(0)))
                    .collect::<Result<_, _>>()?;
                Ok(Tensor::stack(&views)?)
            }
        }
    }

    /// Projected mid-depth tokens `[h*w, tap_dim]` for a noisy input.
    pub fn features(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let out = channel_forward(&b, &self.spec, &tape.constant(x_t.clone()), t)?;
        let f = linear(&b, "proj", &tap_tokens(&out.tap)?)?;
        Ok((*f.value()).clone())
    }

    pub fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let out = channel_forward(&b, &self.spec, &tape.constant(x_t.clone()), t)?;
        Ok((*out.out.value()).clone())
    }

    pub fn axis(&self) -> Axis {
        self.spec.axis
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Steps without a new best running loss before warning.
    pub patience: usize,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            seed: 1,
            patience: 400,
        }
    }
}

/// Denoising loss of a teacher on clean inputs, at fixed seeded steps and
/// noises. Used for validation.
pub fn teacher_loss(
    teacher: &Teacher,
    samples: &[Tensor],
    schedule: &NoiseSchedule,
    seed: u64,
    draws: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let x0 = &samples[rng.random_range(0..samples.len())];
        let t = rng.random_range(0..schedule.num_steps());
        let eps = Tensor::randn(x0.shape().to_vec(), 1.0, &mut rng);
        let x_t = crate::diffusion::forward_diffuse(x0, t, &eps, schedule)?;
        let pred = teacher.predict(&x_t, t)?;
        total += pred.zip_with(&eps, |a, b| (a - b) * (a - b))?.mean();
    }
    Ok(total / draws as f64)
}

/// Trains the teacher's denoising channel on `samples` (its own input
/// domain). The tap projection is never updated. Returns per-step losses.
pub fn pretrain_teacher(
    teacher: &mut Teacher,
    samples: &[Tensor],
    schedule: &NoiseSchedule,
    cfg: &TeacherTrainConfig,
) -> Result<Vec<f64>> {
    pretrain_teacher_until(teacher, samples, schedule, cfg, |_, _| Ok(false))
}

/// [`pretrain_teacher`] that asks `stop(step, teacher)` before every step
/// and ends early once it returns true.
pub fn pretrain_teacher_until(
    teacher: &mut Teacher,
    samples: &[Tensor],
    schedule: &NoiseSchedule,
    cfg: &TeacherTrainConfig,
    mut stop: impl FnMut(usize, &Teacher) -> Result<bool>,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Prerequisite(
            "teacher pretraining needs at least one sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    let (mut best, mut since_best, mut running) = (f64::INFINITY, 0usize, None::<f64>);
    for step in 0..cfg.steps {
        if stop(step, teacher)? {
            break;
        }
        let x0 = &samples[rng.random_range(0..samples.len())];
        let t = rng.random_range(0..schedule.num_steps());
        let eps = Tensor::randn(x0.shape().to_vec(), 1.0, &mut rng);
        let tape = Tape::new();
        let b = teacher.params.bind(&tape);
        let eps_v = tape.constant(eps);
        let x_t = forward_diffuse_var(&tape.constant(x0.clone()), t, &eps_v, schedule)?;
        let out = channel_forward(&b, &teacher.spec, &x_t, t)?;
        let loss = out.out.sub(&eps_v)?.square().mean();
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "teacher loss diverged at step {step}"
            )));
        }
        losses.push(value);
        let mut grads = b.grads(loss)?;
        grads.insert(
            "proj.w",
            Tensor::zeros(teacher.params.get("proj.w")?.shape().to_vec()),
        );
        grads.insert(
            "proj.b",
            Tensor::zeros(teacher.params.get("proj.b")?.shape().to_vec()),
        );
        opt.step(&mut teacher.params, &grads)?;
        let r = running.map_or(value, |r| 0.98 * r + 0.02 * value);
        running = Some(r);
        if r < best {
            best = r;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best == cfg.patience {
                log::warn!(
                    "{:?} teacher: no improvement for {} steps at step {step}",
                    teacher.kind,
                    cfg.patience
                );
            }
        }
    }
    teacher.trained_steps += losses.len();
    Ok(losses)
}
