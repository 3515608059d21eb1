use autodiff::{Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    kernel_eval_var, orster_loss, spt_attn, tmpr_attn, KernelParams, Teacher, TeacherKind,
};
use crate::diffusion::{forward_diffuse_var, NoiseSchedule};
use crate::model::{ModelBound, Std4dModel};
use crate::{invalid, Error, Result};

pub const TEMPERATURE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrsterConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_o: f64,
    /// Weight of the plain denoising loss kept alongside the transfer loss.
    pub ldm_weight: f64,
    pub seed: u64,
}

impl Default for OrsterConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            lambda_o: 0.5,
            ldm_weight: 1.0,
            seed: 1,
        }
    }
}

/// Learnable kernel scales and the two attention temperatures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrsterState {
    pub kernel: KernelParams,
    pub temp_s: f64,
    pub temp_t: f64,
}

impl Default for OrsterState {
    fn default() -> Self {
        Self {
            kernel: KernelParams::default(),
            temp_s: 0.25,
            temp_t: 0.25,
        }
    }
}

impl OrsterState {
    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("kernel.", &self.kernel.to_params());
        p.insert("temp_s", Tensor::scalar(self.temp_s));
        p.insert("temp_t", Tensor::scalar(self.temp_t));
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(Self {
            kernel: KernelParams::from_params(&p.strip_prefix("kernel."))?,
            temp_s: p.get("temp_s")?.item()?,
            temp_t: p.get("temp_t")?.item()?,
        })
    }

    pub fn project(self) -> Self {
        Self {
            kernel: self.kernel.project(),
            temp_s: self.temp_s.max(TEMPERATURE_FLOOR),
            temp_t: self.temp_t.max(TEMPERATURE_FLOOR),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrsterRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_s: f64,
    pub loss_t: f64,
    pub sigma_s: f64,
    pub sigma_t: f64,
    pub sigma_st: f64,
    pub alpha: f64,
}

struct StepLoss<'t> {
    total: Var<'t>,
    orster: Var<'t>,
    spatial: Var<'t>,
    temporal: Var<'t>,
}

#[allow(clippy::too_many_arguments)]
fn step_loss<'t>(
    mb: &ModelBound<'t>,
    kb: &autodiff::Bound<'t>,
    teacher_3d: &Teacher,
    teacher_video: &Teacher,
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &OrsterConfig,
) -> Result<StepLoss<'t>> {
    let tape = mb.tape();
    let eps_v = tape.constant(eps.clone());
    let z_t = forward_diffuse_var(&tape.constant(z0.clone()), t, &eps_v, schedule)?;
    let out = mb.forward(&z_t, t, &mb.null_cond())?;
    let (fs4d, ft4d) = mb.taps(&out)?;

    let zt_val = z_t.value();
    let fs3d = tape.constant(teacher_3d.features(&teacher_3d.input_from(&zt_val)?, t)?);
    let ftv = tape.constant(teacher_video.features(&teacher_video.input_from(&zt_val)?, t)?);
    let g_s = fs3d.mean_axis(0)?;
    let g_t = ftv.mean_axis(0)?;
    let kappa = kernel_eval_var(&fs3d, &ftv, &g_s, &g_t, &kb.scope("kernel."))?;
    let target_s = spt_attn(&fs3d, &kappa, &kb.get("temp_s")?)?;
    let target_t = tmpr_attn(&ftv, &kappa, &kb.get("temp_t")?)?;
    let l = orster_loss(&fs4d, &ft4d, &target_s, &target_t, cfg.lambda_o)?;
    let total = if cfg.ldm_weight > 0.0 {
        let ldm = out.eps.sub(&eps_v)?.square().mean();
        l.total.add(&ldm.scale(cfg.ldm_weight))?
    } else {
        l.total
    };
    Ok(StepLoss {
        total,
        orster: l.total,
        spatial: l.spatial,
        temporal: l.temporal,
    })
}

fn check_teachers(teacher_3d: &Teacher, teacher_video: &Teacher) -> Result<()> {
    if teacher_3d.kind != TeacherKind::MultiView || teacher_video.kind != TeacherKind::Video {
        return invalid("teachers passed in the wrong order");
    }
    Ok(())
}

/// Optimizes the student (and kernel state) on the transfer loss plus the
/// retained denoising loss. Teachers are only read. `on_record` sees every
/// per-step record as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn run_orster_stage(
    student: &mut Std4dModel,
    state: &mut OrsterState,
    teacher_3d: &Teacher,
    teacher_video: &Teacher,
    latents: &[Tensor],
    schedule: &NoiseSchedule,
    cfg: &OrsterConfig,
    mut on_record: impl FnMut(&OrsterRecord) -> Result<()>,
) -> Result<Vec<OrsterRecord>> {
    check_teachers(teacher_3d, teacher_video)?;
    if latents.is_empty() {
        return Err(Error::Prerequisite(
            "transfer stage needs training latents".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.lambda_o) {
        return Err(Error::Config(format!(
            "lambda_o = {} outside [0, 1]",
            cfg.lambda_o
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let z0 = &latents[rng.random_range(0..latents.len())];
        let t = rng.random_range(0..schedule.num_steps());
        let eps = Tensor::randn(z0.shape().to_vec(), 1.0, &mut rng);
        let tape = Tape::new();
        let mb = student.bind(&tape);
        let kb = state.to_params().bind(&tape);
        let l = step_loss(
            &mb,
            &kb,
            teacher_3d,
            teacher_video,
            z0,
            t,
            &eps,
            schedule,
            cfg,
        )?;
        let total = l.total.item()?;
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "transfer loss diverged at step {step}"
            )));
        }
        let all = mb
            .spatial
            .clone()
            .with("s/", &mb.temporal)
            .with("f/", &mb.fusion)
            .with("k/", &kb);
        let g = all.grads(l.total)?;
        let mut params = student.to_params();
        params.extend_prefixed("orster.", &state.to_params());
        let mut grads = ParamSet::new();
        for (k, v) in g.iter() {
            let name = if let Some(k) = k.strip_prefix("s/") {
                format!("temporal.{k}")
            } else if let Some(k) = k.strip_prefix("f/") {
                format!("fusion.{k}")
            } else if let Some(k) = k.strip_prefix("k/") {
                format!("orster.{k}")
            } else {
                format!("spatial.{k}")
            };
            grads.insert(name, v.clone());
        }
        opt.step(&mut params, &grads)?;
        *student = Std4dModel::from_params(student.config, &params)?;
        *state = OrsterState::from_params(&params.strip_prefix("orster."))?.project();
        let rec = OrsterRecord {
            step,
            loss_total: l.orster.item()?,
            loss_s: l.spatial.item()?,
            loss_t: l.temporal.item()?,
            sigma_s: state.kernel.sigma_s,
            sigma_t: state.kernel.sigma_t,
            sigma_st: state.kernel.sigma_st,
            alpha: state.kernel.alpha,
        };
        on_record(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Mean transfer loss over `draws` seeded (sample, step, noise) triples.
#[allow(clippy::too_many_arguments)]
pub fn orster_validation_loss(
    student: &Std4dModel,
    state: &OrsterState,
    teacher_3d: &Teacher,
    teacher_video: &Teacher,
    latents: &[Tensor],
    schedule: &NoiseSchedule,
    lambda_o: f64,
    seed: u64,
    draws: usize,
) -> Result<f64> {
    check_teachers(teacher_3d, teacher_video)?;
    let cfg = OrsterConfig {
        lambda_o,
        ldm_weight: 0.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let z0 = &latents[rng.random_range(0..latents.len())];
        let t = rng.random_range(0..schedule.num_steps());
        let eps = Tensor::randn(z0.shape().to_vec(), 1.0, &mut rng);
        let tape = Tape::new();
        let mb = student.bind_frozen(&tape);
        let kb = state.to_params().bind_frozen(&tape);
        total += step_loss(
            &mb,
            &kb,
            teacher_3d,
            teacher_video,
            z0,
            t,
            &eps,
            schedule,
            &cfg,
        )?
        .orster
        .item()?;
    }
    Ok(total / draws.max(1) as f64)
}
