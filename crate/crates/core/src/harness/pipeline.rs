//! Dataset synthesis, pretraining, the four training stages, evaluation
//! and construction. Every entry point works on one [`RunDir`].
//!
//! Checkpoints under `checkpoints/`:
//!
//! | file                  | contents                                   |
//! |-----------------------|--------------------------------------------|
//! | `vae.ckpt`            | autoencoder, `meta.trained_steps`           |
//! | `teacher_3d.ckpt`     | multi-view teacher, `meta.trained_steps`    |
//! | `teacher_video.ckpt`  | video teacher, `meta.trained_steps`         |
//! | `stage1.ckpt`         | student (`spatial.`, `temporal.`, `fusion.`) |
//! | `stage2.ckpt`         | student plus `orster.` kernel state          |
//! | `stage3.ckpt`         | student                                    |
//! | `stage4.ckpt`         | student plus `cond.` condition encoders      |
//! | `construct_scene{i}.ckpt` | `gaussians.`, `field.`, `priors.`      |
//!
//! A stage that hits a non-finite loss writes `stage{k}.partial.ckpt` with
//! the last finite parameters and fails; earlier checkpoints are untouched.

use std::collections::BTreeMap;
use std::time::Instant;

use autodiff::{Adam, AdamConfig, Bound, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{PriorSource, RunConfig};
use super::io::{decode_ppm, encode_ppm, read_bytes, read_video, write_bytes, write_video};
use super::metrics::{psnr, ssim};
use super::run::{MetricsRow, RunDir};
use super::scene::{synth_dataset, SceneSpec};
use crate::checkpoint;
use crate::conditioning::{loss_cond, CondEncoder, CondInput, Vocabulary};
use crate::consistency::{
    loss_align, loss_const, loss_perc, loss_rec, loss_temp, ConsistencyTerms, FeatureExtractor,
};
use crate::diffusion::vae::{train_vae, VaeTrainConfig};
use crate::diffusion::{forward_diffuse_var, loss_ldm, reconstruct, NoiseSchedule, Vae};
use crate::gs4d::{construct_4d, ConstructOutput, DeformField, GaussianSet, PriorBank};
use crate::model::{ForwardOut, ModelBound, Std4dModel};
use crate::orster::{
    orster_validation_loss, pretrain_teacher_until, run_orster_stage, teacher_loss, OrsterConfig,
    OrsterState, Teacher, TeacherKind, TeacherTrainConfig,
};
use crate::{invalid, Error, Result};

/// One training scene as stored in the run directory.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    /// `[V, T, H, W, 3]`
    pub video: Tensor,
    /// `[V, H, W, 3]`
    pub static_video: Tensor,
}

impl Scene {
    /// View 0 at the first frame.
    pub fn reference_image(&self) -> Result<Tensor> {
        Ok(self.video.index_axis0(0)?.index_axis0(0)?)
    }
}

/// Seed of one pipeline component, derived from the run seed.
pub fn component_seed(cfg: &RunConfig, salt: u64) -> u64 {
    cfg.run.seed.wrapping_mul(1_000_003).wrapping_add(salt)
}

const SALT_VAE: u64 = 1;
const SALT_TEACHER_3D: u64 = 2;
const SALT_TEACHER_VIDEO: u64 = 3;
const SALT_TEACHER_VAL: u64 = 4;
const SALT_MODEL: u64 = 10;
const SALT_STAGE: u64 = 10; // + stage number
const SALT_ENCODER: u64 = 15;
const SALT_VAL: u64 = 20; // + stage number

/// Base rate decayed along a half cosine to 5% over `steps`.
pub fn cosine_lr(base: f64, step: usize, steps: usize) -> f64 {
    let frac = step as f64 / steps.max(1) as f64;
    base * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

fn scene_dir(run: &RunDir, i: usize) -> std::path::PathBuf {
    run.path()
        .join("frames")
        .join("gt")
        .join(format!("scene{i}"))
}

/// Renders every configured scene into the run directory and returns them
/// as read back from disk.
pub fn synth(cfg: &RunConfig, run: &RunDir) -> Result<Vec<Scene>> {
    let start = Instant::now();
    for (i, seed) in cfg.scene_seeds().into_iter().enumerate() {
        let spec = SceneSpec::random(seed);
        let ds = synth_dataset(&spec, &cfg.data.orbit)?;
        let dir = scene_dir(run, i);
        write_video(&dir, &ds.video)?;
        for v in 0..cfg.data.orbit.views {
            write_bytes(
                &dir.join(format!("static_v{v}.ppm")),
                &encode_ppm(&ds.static_video.index_axis0(v)?)?,
            )?;
        }
        write_bytes(
            &run.path().join("data").join(format!("scene{i}.json")),
            (serde_json::to_string_pretty(&spec)? + "\n").as_bytes(),
        )?;
    }
    let scenes = load_scenes(cfg, run)?;
    run.append_timing("synth", "-", start.elapsed().as_secs_f64())?;
    run.finish(
        cfg,
        "synth",
        json!({ "scenes": scenes.len(), "descriptions":
            scenes.iter().map(|s| s.spec.describe()).collect::<Vec<_>>() }),
    )?;
    Ok(scenes)
}

/// The stored scenes, quantized as on disk.
pub fn load_scenes(cfg: &RunConfig, run: &RunDir) -> Result<Vec<Scene>> {
    let o = &cfg.data.orbit;
    (0..cfg.data.scenes)
        .map(|i| {
            let json_path = run.path().join("data").join(format!("scene{i}.json"));
            if !json_path.is_file() {
                return Err(Error::Prerequisite(format!(
                    "{} not found; run synth first",
                    json_path.display()
                )));
            }
            let spec: SceneSpec = serde_json::from_slice(&read_bytes(&json_path)?)?;
            let dir = scene_dir(run, i);
            let video = read_video(&dir, o.views, o.frames)?;
            let stills = (0..o.views)
                .map(|v| decode_ppm(&read_bytes(&dir.join(format!("static_v{v}.ppm")))?))
                .collect::<Result<Vec<_>>>()?;
            let static_video = Tensor::stack(&stills)?;
            let want = [o.views, o.frames, o.resolution, o.resolution, 3];
            if video.shape() != want {
                return Err(Error::Config(format!(
                    "stored frames {:?} do not match the orbit {want:?}",
                    video.shape()
                )));
            }
            Ok(Scene {
                spec,
                video,
                static_video,
            })
        })
        .collect()
}

fn with_steps(params: &ParamSet, steps: usize) -> ParamSet {
    let mut p = params.clone();
    p.insert("meta.trained_steps", Tensor::scalar(steps as f64));
    p
}

fn split_steps(p: ParamSet) -> Result<(ParamSet, usize)> {
    let steps = p.get("meta.trained_steps")?.item()?;
    let mut rest = ParamSet::new();
    for (k, v) in p.iter().filter(|(k, _)| !k.starts_with("meta.")) {
        rest.insert(k.clone(), v.clone());
    }
    Ok((rest, steps as usize))
}

pub fn load_vae(cfg: &RunConfig, run: &RunDir) -> Result<Vae> {
    let path = run.require("vae.ckpt", "pretrain-teachers")?;
    let (params, _) = split_steps(checkpoint::load(&path)?)?;
    let mut vae = Vae::new(cfg.vae_config(), 0)?;
    for (name, t) in vae.params.iter() {
        if params
            .get(name)
            .map(|p| p.shape() != t.shape())
            .unwrap_or(true)
        {
            return Err(Error::Format(format!(
                "{}: autoencoder tensor {name} missing or misshaped",
                path.display()
            )));
        }
    }
    vae.params = params;
    Ok(vae)
}

pub fn load_teacher(cfg: &RunConfig, run: &RunDir, kind: TeacherKind) -> Result<Teacher> {
    let name = match kind {
        TeacherKind::MultiView => "teacher_3d.ckpt",
        TeacherKind::Video => "teacher_video.ckpt",
    };
    let path = run.require(name, "pretrain-teachers")?;
    let (params, steps) = split_steps(checkpoint::load(&path)?)?;
    Teacher::from_params(kind, &cfg.model_config(), params, steps)
}

/// Training latents `[V, T, h, w, C]`, one per scene.
pub fn encode_scenes(vae: &Vae, scenes: &[Scene]) -> Result<Vec<Tensor>> {
    scenes.iter().map(|s| vae.encode(&s.video)).collect()
}

fn all_frames(scenes: &[Scene]) -> Result<Tensor> {
    let mut frames = Vec::new();
    for s in scenes {
        let sh = s.video.shape();
        for v in 0..sh[0] {
            let view = s.video.index_axis0(v)?;
            for t in 0..sh[1] {
                frames.push(view.index_axis0(t)?);
            }
            frames.push(s.static_video.index_axis0(v)?);
        }
    }
    Ok(Tensor::stack(&frames)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub trained_steps: usize,
    pub untrained: bool,
    pub val_initial: f64,
    pub val_final: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub vae_steps: usize,
    pub vae_loss_initial: f64,
    pub vae_loss_final: f64,
    pub vae_roundtrip_psnr: f64,
    pub teacher_3d: TeacherReport,
    pub teacher_video: TeacherReport,
}

fn train_teacher(
    cfg: &RunConfig,
    run: &RunDir,
    kind: TeacherKind,
    samples: &[Tensor],
    schedule: &NoiseSchedule,
) -> Result<TeacherReport> {
    let (salt, name, file) = match kind {
        TeacherKind::MultiView => (SALT_TEACHER_3D, "teacher_3d", "teacher_3d.ckpt"),
        TeacherKind::Video => (SALT_TEACHER_VIDEO, "teacher_video", "teacher_video.ckpt"),
    };
    let tc = &cfg.teachers;
    let val_seed = component_seed(cfg, SALT_TEACHER_VAL);
    let mut teacher = Teacher::new(kind, &cfg.model_config(), component_seed(cfg, salt));
    let val_initial = teacher_loss(&teacher, samples, schedule, val_seed, tc.val_draws)?;
    let train = TeacherTrainConfig {
        steps: tc.steps,
        lr: tc.lr,
        seed: component_seed(cfg, salt + 100),
        patience: tc.patience,
    };
    let losses = pretrain_teacher_until(&mut teacher, samples, schedule, &train, |step, t| {
        if tc.val_ceiling <= 0.0 || step == 0 || step % tc.val_every != 0 {
            return Ok(false);
        }
        let v = teacher_loss(t, samples, schedule, val_seed, tc.val_draws)?;
        log::info!("{name}: validation loss {v:.5} at step {step}");
        Ok(v <= tc.val_ceiling)
    })?;
    let val_final = teacher_loss(&teacher, samples, schedule, val_seed, tc.val_draws)?;
    checkpoint::save(
        &run.checkpoint(file),
        &with_steps(&teacher.params, teacher.trained_steps),
    )?;
    run.log_losses(
        &losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{name} {i} {l}"))
            .collect::<Vec<_>>(),
    )?;
    if teacher.trained_steps == 0 {
        log::warn!("{name} checkpoint is untrained");
    }
    Ok(TeacherReport {
        trained_steps: teacher.trained_steps,
        untrained: teacher.trained_steps == 0,
        val_initial,
        val_final,
        ratio: val_final / val_initial,
    })
}

/// Fits the autoencoder to every stored frame, then the multi-view teacher
/// to static multi-view latents and the video teacher to single-view latent
/// sequences.
pub fn pretrain_teachers(cfg: &RunConfig, run: &RunDir) -> Result<PretrainReport> {
    let start = Instant::now();
    let scenes = load_scenes(cfg, run)?;
    let schedule = cfg.schedule()?;
    let mut vae = Vae::new(cfg.vae_config(), component_seed(cfg, SALT_VAE))?;
    let frames = all_frames(&scenes)?;
    let vl = train_vae(
        &mut vae,
        &frames,
        &VaeTrainConfig {
            steps: cfg.vae.steps,
            batch: cfg.vae.batch,
            lr: cfg.vae.lr,
            seed: component_seed(cfg, SALT_VAE + 100),
        },
    )?;
    checkpoint::save(
        &run.checkpoint("vae.ckpt"),
        &with_steps(&vae.params, vl.len()),
    )?;
    run.log_losses(
        &vl.iter()
            .enumerate()
            .map(|(i, l)| format!("vae {i} {l}"))
            .collect::<Vec<_>>(),
    )?;
    let roundtrip = {
        let back = vae
            .decode(&vae.encode(&frames)?)?
            .map(|v| v.clamp(0.0, 1.0));
        let n = frames.shape()[0];
        let mut total = 0.0;
        for i in 0..n {
            total += psnr(&back.index_axis0(i)?, &frames.index_axis0(i)?)?;
        }
        total / n as f64
    };
    run.append_timing("pretrain-teachers", "vae", start.elapsed().as_secs_f64())?;

    let mut static_latents = Vec::new();
    let mut sequences = Vec::new();
    for s in &scenes {
        static_latents.push(vae.encode(&s.static_video)?);
        let z = vae.encode(&s.video)?;
        for v in 0..z.shape()[0] {
            sequences.push(z.index_axis0(v)?);
        }
    }
    let t0 = Instant::now();
    let teacher_3d = train_teacher(cfg, run, TeacherKind::MultiView, &static_latents, &schedule)?;
    let teacher_video = train_teacher(cfg, run, TeacherKind::Video, &sequences, &schedule)?;
    run.append_timing("pretrain-teachers", "teachers", t0.elapsed().as_secs_f64())?;
    let report = PretrainReport {
        vae_steps: vl.len(),
        vae_loss_initial: vl.first().copied().unwrap_or(f64::NAN),
        vae_loss_final: vl.last().copied().unwrap_or(f64::NAN),
        vae_roundtrip_psnr: roundtrip,
        teacher_3d,
        teacher_video,
    };
    run.finish(cfg, "pretrain-teachers", serde_json::to_value(&report)?)?;
    Ok(report)
}

/// Everything a training stage reads.
struct Context {
    scenes: Vec<Scene>,
    latents: Vec<Tensor>,
    vae: Vae,
    schedule: NoiseSchedule,
}

fn context(cfg: &RunConfig, run: &RunDir) -> Result<Context> {
    let scenes = load_scenes(cfg, run)?;
    let vae = load_vae(cfg, run)?;
    let latents = encode_scenes(&vae, &scenes)?;
    Ok(Context {
        scenes,
        latents,
        vae,
        schedule: cfg.schedule()?,
    })
}

/// Parameter sets of several groups recorded under distinct prefixes.
fn union<'t>(tape: &'t Tape, parts: &[(&str, &Bound<'t>)]) -> Bound<'t> {
    parts
        .iter()
        .fold(ParamSet::new().bind(tape), |acc, (p, b)| acc.with(p, b))
}

fn model_union<'t>(mb: &ModelBound<'t>, extra: &[(&str, &Bound<'t>)]) -> Bound<'t> {
    let mut parts = vec![
        ("spatial.", &mb.spatial),
        ("temporal.", &mb.temporal),
        ("fusion.", &mb.fusion),
    ];
    parts.extend_from_slice(extra);
    union(mb.tape(), &parts)
}

fn stage_file(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

fn load_stage(cfg: &RunConfig, run: &RunDir, stage: u8) -> Result<ParamSet> {
    let producer = if stage == 0 {
        "pretrain-teachers".to_string()
    } else {
        format!("train --stage {stage}")
    };
    checkpoint::load(&run.require(&stage_file(stage), &producer)?).and_then(|p| {
        Std4dModel::from_params(cfg.model_config(), &p)?;
        Ok(p)
    })
}

/// Student weights from a stage checkpoint, without its extra groups.
pub fn load_model(cfg: &RunConfig, run: &RunDir, stage: u8) -> Result<Std4dModel> {
    Std4dModel::from_params(cfg.model_config(), &load_stage(cfg, run, stage)?)
}

/// Condition encoders stored with the stage-4 student.
pub fn load_encoder(cfg: &RunConfig, run: &RunDir) -> Result<CondEncoder> {
    let p = load_stage(cfg, run, 4)?;
    let mut enc = new_encoder(cfg);
    let stored = p.strip_prefix("cond.");
    for (name, t) in enc.params.iter() {
        if stored
            .get(name)
            .map(|s| s.shape() != t.shape())
            .unwrap_or(true)
        {
            return Err(Error::Format(format!(
                "stage-4 checkpoint lacks cond.{name}"
            )));
        }
    }
    enc.params = stored;
    Ok(enc)
}

fn new_encoder(cfg: &RunConfig) -> CondEncoder {
    CondEncoder::new(
        Vocabulary::default(),
        cfg.data.orbit.resolution,
        cfg.model.cond_dim,
        component_seed(cfg, SALT_ENCODER),
    )
}

/// Latest trained stage present in the run.
pub fn latest_stage(run: &RunDir) -> Result<u8> {
    (1..=4)
        .rev()
        .find(|&k| run.checkpoint(&stage_file(k)).is_file())
        .ok_or_else(|| Error::Prerequisite("no stage checkpoint found; run train first".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    /// Seeded validation loss of the stage objective before and after.
    pub loss_initial: f64,
    pub loss_final: f64,
    pub skipped: bool,
    pub eval: EvalSummary,
}

/// Runs the selected stages in order, each from its predecessor's
/// checkpoint.
pub fn train(cfg: &RunConfig, run: &RunDir) -> Result<Vec<StageReport>> {
    let ctx = context(cfg, run)?;
    let mut reports = Vec::new();
    for stage in cfg.run.stage.stages() {
        let start = Instant::now();
        let report = match stage {
            1 => stage1(cfg, run, &ctx)?,
            2 => stage2(cfg, run, &ctx)?,
            3 => stage3(cfg, run, &ctx)?,
            4 => stage4(cfg, run, &ctx)?,
            _ => return invalid(format!("no stage {stage}")),
        };
        log::info!(
            "stage {stage}: loss {:.5} -> {:.5}, psnr {:.2}",
            report.loss_initial,
            report.loss_final,
            report.eval.psnr_mean
        );
        run.append_timing("train", &stage.to_string(), start.elapsed().as_secs_f64())?;
        run.finish(
            cfg,
            &format!("train:stage{stage}"),
            serde_json::to_value(&report)?,
        )?;
        reports.push(report);
    }
    Ok(reports)
}

fn fail_partial(run: &RunDir, stage: u8, params: &ParamSet, step: usize) -> Error {
    let path = run.checkpoint(&format!("stage{stage}.partial.ckpt"));
    if let Err(e) = checkpoint::save(&path, params) {
        log::error!("could not write {}: {e}", path.display());
    }
    Error::Numerical(format!(
        "stage {stage} loss is not finite at step {step}; last finite weights in {}",
        path.display()
    ))
}

fn finish_stage(
    cfg: &RunConfig,
    run: &RunDir,
    ctx: &Context,
    stage: u8,
    model: &Std4dModel,
    encoder: Option<&CondEncoder>,
    steps: usize,
) -> Result<EvalSummary> {
    let rows = evaluate_model(cfg, ctx, model, encoder)?;
    let csv = eval_csv(&rows);
    let summary = summarize(&rows);
    let dir = run.path().join("eval");
    write_bytes(&dir.join(format!("stage{stage}.csv")), csv.as_bytes())?;
    write_bytes(
        &dir.join(format!("stage{stage}_summary.toml")),
        summary_from_csv(&csv)?.as_bytes(),
    )?;
    let step = run.last_step()? + steps;
    run.append_metrics(&MetricsRow {
        run_id: run.id().to_string(),
        stage,
        step,
        psnr: summary.psnr_mean,
        ssim: summary.ssim_mean,
        temporal_smoothness: summary.temporal_error,
    })?;
    Ok(summary)
}

fn stage_rng(cfg: &RunConfig, stage: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(component_seed(cfg, SALT_STAGE + stage as u64))
}

fn val_seed(cfg: &RunConfig, stage: u8) -> u64 {
    component_seed(cfg, SALT_VAL + stage as u64) ^ cfg.eval.seed
}

/// Mean unconditional denoising loss over seeded draws.
pub fn ldm_validation(
    model: &Std4dModel,
    latents: &[Tensor],
    schedule: &NoiseSchedule,
    seed: u64,
    draws: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let z = &latents[rng.random_range(0..latents.len())];
        let tape = Tape::new();
        let mb = model.bind_frozen(&tape);
        total += loss_ldm(
            &mb,
            &tape.constant(z.clone()),
            &mb.null_cond(),
            schedule,
            rng.random(),
        )?
        .item()?;
    }
    Ok(total / draws as f64)
}

fn stage1(cfg: &RunConfig, run: &RunDir, ctx: &Context) -> Result<StageReport> {
    let sc = &cfg.stage1;
    let mut model = Std4dModel::new(cfg.model_config(), component_seed(cfg, SALT_MODEL))?;
    let vs = val_seed(cfg, 1);
    let loss_initial = ldm_validation(&model, &ctx.latents, &ctx.schedule, vs, cfg.eval.draws)?;
    let mut rng = stage_rng(cfg, 1);
    let mut opt = Adam::new(AdamConfig {
        lr: sc.lr,
        ..Default::default()
    });
    let mut lines = Vec::with_capacity(sc.steps);
    for step in 0..sc.steps {
        let z = &ctx.latents[rng.random_range(0..ctx.latents.len())];
        let seed: u64 = rng.random();
        opt.set_lr(cosine_lr(sc.lr, step, sc.steps));
        let tape = Tape::new();
        let mb = model.bind(&tape);
        let loss = loss_ldm(
            &mb,
            &tape.constant(z.clone()),
            &mb.null_cond(),
            &ctx.schedule,
            seed,
        )?;
        let value = loss.item()?;
        if !value.is_finite() {
            run.log_losses(&lines)?;
            return Err(fail_partial(run, 1, &model.to_params(), step));
        }
        lines.push(format!("stage1 {step} {value}"));
        let grads = mb.grads(loss)?;
        model.apply(&mut opt, &grads)?;
    }
    run.log_losses(&lines)?;
    checkpoint::save(&run.checkpoint(&stage_file(1)), &model.to_params())?;
    let loss_final = ldm_validation(&model, &ctx.latents, &ctx.schedule, vs, cfg.eval.draws)?;
    let eval = finish_stage(cfg, run, ctx, 1, &model, None, sc.steps)?;
    Ok(StageReport {
        stage: 1,
        steps: sc.steps,
        loss_initial,
        loss_final,
        skipped: false,
        eval,
    })
}

fn stage2(cfg: &RunConfig, run: &RunDir, ctx: &Context) -> Result<StageReport> {
    let sc = &cfg.stage2;
    let mut model = load_model(cfg, run, 1)?;
    let teacher_3d = load_teacher(cfg, run, TeacherKind::MultiView)?;
    let teacher_video = load_teacher(cfg, run, TeacherKind::Video)?;
    for t in [&teacher_3d, &teacher_video] {
        if t.trained_steps == 0 {
            log::warn!("{:?} teacher is untrained", t.kind);
        }
    }
    let mut state = OrsterState::default();
    let vs = val_seed(cfg, 2);
    let validate = |m: &Std4dModel, s: &OrsterState| {
        orster_validation_loss(
            m,
            s,
            &teacher_3d,
            &teacher_video,
            &ctx.latents,
            &ctx.schedule,
            sc.lambda_o,
            vs,
            cfg.eval.draws,
        )
    };
    let loss_initial = validate(&model, &state)?;
    let steps = if sc.enabled { sc.steps } else { 0 };
    if sc.enabled {
        let mut lines = Vec::with_capacity(sc.steps);
        let result = run_orster_stage(
            &mut model,
            &mut state,
            &teacher_3d,
            &teacher_video,
            &ctx.latents,
            &ctx.schedule,
            &OrsterConfig {
                steps: sc.steps,
                lr: sc.lr,
                lambda_o: sc.lambda_o,
                ldm_weight: sc.ldm_weight,
                seed: component_seed(cfg, SALT_STAGE + 2),
            },
            |r| {
                lines.push(format!(
                    "stage2 {} {} {} {}",
                    r.step, r.loss_total, r.loss_s, r.loss_t
                ));
                Ok(())
            },
        );
        run.log_losses(&lines)?;
        match result {
            Ok(_) => {}
            Err(Error::Numerical(_)) => {
                let mut p = model.to_params();
                p.extend_prefixed("orster.", &state.to_params());
                return Err(fail_partial(run, 2, &p, lines.len()));
            }
            Err(e) => return Err(e),
        }
    } else {
        log::info!("stage 2 disabled; carrying the stage-1 weights over");
    }
    let mut p = model.to_params();
    p.extend_prefixed("orster.", &state.to_params());
    checkpoint::save(&run.checkpoint(&stage_file(2)), &p)?;
    let loss_final = validate(&model, &state)?;
    let eval = finish_stage(cfg, run, ctx, 2, &model, None, steps)?;
    Ok(StageReport {
        stage: 2,
        steps,
        loss_initial,
        loss_final,
        skipped: !sc.enabled,
        eval,
    })
}

/// Mean over all positions of the last axis.
fn global_pool<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let c = *s.last().expect("channel outputs have rank >= 1");
    Ok(x.reshape(&[x.numel() / c, c])?.mean_axis(0)?)
}

struct ConstStep<'t> {
    total: Var<'t>,
    l_const: Var<'t>,
}

/// Consistency objective at one draw: the clean latent estimate from the
/// predicted noise is decoded by the frozen autoencoder and compared with
/// the ground-truth frames.
#[allow(clippy::too_many_arguments)]
fn const_step<'t>(
    cfg: &RunConfig,
    ctx: &Context,
    fx: &FeatureExtractor,
    mb: &ModelBound<'t>,
    scene: usize,
    t: usize,
    eps: &Tensor,
) -> Result<ConstStep<'t>> {
    let tape = mb.tape();
    let vb = ctx.vae.params.bind_frozen(tape);
    let eps_v = tape.constant(eps.clone());
    let z0 = tape.constant(ctx.latents[scene].clone());
    let z_t = forward_diffuse_var(&z0, t, &eps_v, &ctx.schedule)?;
    let out: ForwardOut<'t> = mb.forward(&z_t, t, &mb.null_cond())?;
    let ab = ctx.schedule.alpha_bar()[t];
    let x0 = z_t
        .sub(&out.eps.scale((1.0 - ab).sqrt()))?
        .scale(1.0 / ab.sqrt());
    let gt = tape.constant(ctx.scenes[scene].video.clone());
    let s = gt.shape();
    let flat = [s[0] * s[1], s[2], s[3], s[4]];
    let zs = x0.shape();
    let x0 = x0.reshape(&[zs[0] * zs[1], zs[2], zs[3], zs[4]])?;
    let frames = ctx.vae.decode_var(&vb, &x0)?.reshape(&s)?;
    let terms = ConsistencyTerms {
        rec: loss_rec(&frames, &gt)?,
        perc: loss_perc(&frames.reshape(&flat)?, &gt.reshape(&flat)?, fx)?,
        temp: loss_temp(&out.temporal.out)?,
        align: loss_align(
            &global_pool(&out.spatial.out)?,
            &global_pool(&out.temporal.out)?,
        )?,
    };
    let l_const = loss_const(&terms, &cfg.stage3.weights())?;
    let total = if cfg.stage3.ldm_weight > 0.0 {
        let ldm = out.eps.sub(&eps_v)?.square().mean();
        l_const.add(&ldm.scale(cfg.stage3.ldm_weight))?
    } else {
        l_const
    };
    Ok(ConstStep { total, l_const })
}

fn const_validation(
    cfg: &RunConfig,
    ctx: &Context,
    fx: &FeatureExtractor,
    model: &Std4dModel,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(val_seed(cfg, 3));
    let mut total = 0.0;
    for _ in 0..cfg.eval.draws {
        let i = rng.random_range(0..ctx.latents.len());
        let t = rng.random_range(0..ctx.schedule.num_steps());
        let eps = Tensor::randn(ctx.latents[i].shape().to_vec(), 1.0, &mut rng);
        let tape = Tape::new();
        let mb = model.bind_frozen(&tape);
        total += const_step(cfg, ctx, fx, &mb, i, t, &eps)?.l_const.item()?;
    }
    Ok(total / cfg.eval.draws as f64)
}

fn stage3(cfg: &RunConfig, run: &RunDir, ctx: &Context) -> Result<StageReport> {
    let sc = &cfg.stage3;
    let m = cfg.model_config();
    if sc.lambda_align > 0.0 && m.spatial_channels != m.temporal_channels {
        return Err(Error::Config(
            "feature alignment needs equal spatial and temporal channel counts".into(),
        ));
    }
    let mut model = load_model(cfg, run, 2)?;
    let fx = FeatureExtractor::new(sc.extractor_seed, cfg.data.orbit.resolution);
    let loss_initial = const_validation(cfg, ctx, &fx, &model)?;
    let mut rng = stage_rng(cfg, 3);
    let mut opt = Adam::new(AdamConfig {
        lr: sc.lr,
        ..Default::default()
    });
    let mut lines = Vec::with_capacity(sc.steps);
    for step in 0..sc.steps {
        let i = rng.random_range(0..ctx.latents.len());
        let t = rng.random_range(0..ctx.schedule.num_steps());
        let eps = Tensor::randn(ctx.latents[i].shape().to_vec(), 1.0, &mut rng);
        opt.set_lr(cosine_lr(sc.lr, step, sc.steps));
        let tape = Tape::new();
        let mb = model.bind(&tape);
        let l = const_step(cfg, ctx, &fx, &mb, i, t, &eps);
        let l = match l {
            Err(Error::Numerical(_)) => {
                run.log_losses(&lines)?;
                return Err(fail_partial(run, 3, &model.to_params(), step));
            }
            l => l?,
        };
        let value = l.total.item()?;
        if !value.is_finite() {
            run.log_losses(&lines)?;
            return Err(fail_partial(run, 3, &model.to_params(), step));
        }
        lines.push(format!("stage3 {step} {value} {}", l.l_const.item()?));
        let grads = mb.grads(l.total)?;
        model.apply(&mut opt, &grads)?;
    }
    run.log_losses(&lines)?;
    checkpoint::save(&run.checkpoint(&stage_file(3)), &model.to_params())?;
    let loss_final = const_validation(cfg, ctx, &fx, &model)?;
    let eval = finish_stage(cfg, run, ctx, 3, &model, None, sc.steps)?;
    Ok(StageReport {
        stage: 3,
        steps: sc.steps,
        loss_initial,
        loss_final,
        skipped: false,
        eval,
    })
}

/// Condition types used in stage 4 and its validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondSource {
    Text,
    Image,
    Static3d,
}

impl CondSource {
    pub const ALL: [CondSource; 3] = [CondSource::Text, CondSource::Image, CondSource::Static3d];
}

fn cond_var<'t>(
    enc: &CondEncoder,
    eb: &Bound<'t>,
    scene: &Scene,
    source: CondSource,
) -> Result<Var<'t>> {
    match source {
        CondSource::Text => enc.encode_var(eb, &CondInput::Text(&scene.spec.describe())),
        CondSource::Image => enc.encode_var(eb, &CondInput::Image(&scene.reference_image()?)),
        CondSource::Static3d => enc.encode_var(eb, &CondInput::Static3d(&scene.static_video)),
    }
}

fn cond_validation(
    cfg: &RunConfig,
    ctx: &Context,
    model: &Std4dModel,
    enc: &CondEncoder,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(val_seed(cfg, 4));
    let mut total = 0.0;
    for _ in 0..cfg.eval.draws {
        let i = rng.random_range(0..ctx.latents.len());
        let source = CondSource::ALL[rng.random_range(0..3)];
        let seed: u64 = rng.random();
        let tape = Tape::new();
        let mb = model.bind_frozen(&tape);
        let eb = enc.params.bind_frozen(&tape);
        let c = cond_var(enc, &eb, &ctx.scenes[i], source)?;
        total += loss_cond(
            &mb,
            &tape.constant(ctx.latents[i].clone()),
            &c,
            &ctx.schedule,
            seed,
        )?
        .item()?;
    }
    Ok(total / cfg.eval.draws as f64)
}

fn stage4(cfg: &RunConfig, run: &RunDir, ctx: &Context) -> Result<StageReport> {
    let sc = &cfg.stage4;
    let mut model = load_model(cfg, run, 3)?;
    let mut enc = new_encoder(cfg);
    let loss_initial = cond_validation(cfg, ctx, &model, &enc)?;
    let mut rng = stage_rng(cfg, 4);
    let mut opt = Adam::new(AdamConfig {
        lr: sc.lr,
        ..Default::default()
    });
    let joint = |m: &Std4dModel, e: &CondEncoder| {
        let mut p = m.to_params();
        p.extend_prefixed("cond.", &e.params);
        p
    };
    let mut lines = Vec::with_capacity(sc.steps);
    for step in 0..sc.steps {
        let i = rng.random_range(0..ctx.latents.len());
        let source = CondSource::ALL[rng.random_range(0..3)];
        let seed: u64 = rng.random();
        opt.set_lr(cosine_lr(sc.lr, step, sc.steps));
        let tape = Tape::new();
        let mb = model.bind(&tape);
        let eb = enc.params.bind(&tape);
        let c = cond_var(&enc, &eb, &ctx.scenes[i], source)?;
        let loss = loss_cond(
            &mb,
            &tape.constant(ctx.latents[i].clone()),
            &c,
            &ctx.schedule,
            seed,
        )?;
        let value = loss.item()?;
        if !value.is_finite() {
            run.log_losses(&lines)?;
            return Err(fail_partial(run, 4, &joint(&model, &enc), step));
        }
        lines.push(format!("stage4 {step} {value} {source:?}"));
        let grads = model_union(&mb, &[("cond.", &eb)]).grads(loss)?;
        let mut params = joint(&model, &enc);
        opt.step(&mut params, &grads)?;
        model = Std4dModel::from_params(model.config, &params)?;
        enc.params = params.strip_prefix("cond.");
    }
    run.log_losses(&lines)?;
    checkpoint::save(&run.checkpoint(&stage_file(4)), &joint(&model, &enc))?;
    let loss_final = cond_validation(cfg, ctx, &model, &enc)?;
    let eval = finish_stage(cfg, run, ctx, 4, &model, Some(&enc), sc.steps)?;
    Ok(StageReport {
        stage: 4,
        steps: sc.steps,
        loss_initial,
        loss_final,
        skipped: false,
        eval,
    })
}

/// Per-frame comparison of a render against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub scene: usize,
    pub view: usize,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// RMS difference between the rendered and true frame-to-frame
    /// changes into this frame; absent on the first frame.
    pub temporal_error: Option<f64>,
}

pub const EVAL_HEADER: &str = "scene,view,frame,psnr,ssim,temporal_error";

/// Rows for one scene's `[V, T, H, W, 3]` render.
pub fn compare_video(scene: usize, render: &Tensor, gt: &Tensor) -> Result<Vec<EvalRow>> {
    if render.shape() != gt.shape() || render.rank() != 5 {
        return invalid(format!(
            "render {:?} and ground truth {:?} must be equal [V, T, H, W, 3]",
            render.shape(),
            gt.shape()
        ));
    }
    let (nv, nt) = (gt.shape()[0], gt.shape()[1]);
    let mut rows = Vec::with_capacity(nv * nt);
    for v in 0..nv {
        let (rv, gv) = (render.index_axis0(v)?, gt.index_axis0(v)?);
        for t in 0..nt {
            let (r, g) = (rv.index_axis0(t)?, gv.index_axis0(t)?);
            let temporal_error = if t == 0 {
                None
            } else {
                let (rp, gp) = (rv.index_axis0(t - 1)?, gv.index_axis0(t - 1)?);
                let mut s = 0.0;
                for k in 0..r.numel() {
                    let d = (r.data()[k] - rp.data()[k]) - (g.data()[k] - gp.data()[k]);
                    s += d * d;
                }
                Some((s / r.numel() as f64).sqrt())
            };
            rows.push(EvalRow {
                scene,
                view: v,
                frame: t,
                psnr: psnr(&r, &g)?,
                ssim: ssim(&r, &g)?,
                temporal_error,
            });
        }
    }
    Ok(rows)
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for r in rows {
        let te = r.temporal_error.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{te}\n",
            r.scene, r.view, r.frame, r.psnr, r.ssim
        ));
    }
    out
}

pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(EVAL_HEADER) {
        return Err(Error::Format("evaluation file lacks its header".into()));
    }
    let bad = |l: &str| Error::Format(format!("evaluation row {l:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(l));
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            Ok(EvalRow {
                scene: int(f[0])?,
                view: int(f[1])?,
                frame: int(f[2])?,
                psnr: num(f[3])?,
                ssim: num(f[4])?,
                temporal_error: if f[5].is_empty() {
                    None
                } else {
                    Some(num(f[5])?)
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: usize,
    pub psnr_mean: f64,
    pub psnr_min: f64,
    pub ssim_mean: f64,
    pub ssim_min: f64,
    /// Mean of the per-frame temporal errors; zero for a perfect render.
    pub temporal_error: f64,
    /// Mean PSNR per scene, in scene order.
    pub scene_psnr: Vec<f64>,
}

pub fn summarize(rows: &[EvalRow]) -> EvalSummary {
    let n = rows.len().max(1) as f64;
    let te: Vec<f64> = rows.iter().filter_map(|r| r.temporal_error).collect();
    let mut per_scene: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = per_scene.entry(r.scene).or_insert((0.0, 0));
        e.0 += r.psnr;
        e.1 += 1;
    }
    EvalSummary {
        rows: rows.len(),
        psnr_mean: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        psnr_min: rows.iter().map(|r| r.psnr).fold(f64::INFINITY, f64::min),
        ssim_mean: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        ssim_min: rows.iter().map(|r| r.ssim).fold(f64::INFINITY, f64::min),
        temporal_error: te.iter().sum::<f64>() / te.len().max(1) as f64,
        scene_psnr: per_scene.values().map(|(s, c)| s / *c as f64).collect(),
    }
}

/// TOML summary of a stored evaluation file; a pure function of its text.
pub fn summary_from_csv(text: &str) -> Result<String> {
    let s = summarize(&parse_eval_csv(text)?);
    toml::to_string(&s).map_err(|e| Error::Format(e.to_string()))
}

/// Reconstructs each scene through the reverse chain from seeded start
/// noise, decodes it and compares with the stored frames. With `encoder`
/// the student is conditioned on each scene's text description; otherwise
/// on the null condition.
fn evaluate_model(
    cfg: &RunConfig,
    ctx: &Context,
    model: &Std4dModel,
    encoder: Option<&CondEncoder>,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (i, scene) in ctx.scenes.iter().enumerate() {
        let render = reconstruct_scene(cfg, ctx, model, encoder, i)?;
        rows.extend(compare_video(i, &render, &scene.video)?);
    }
    Ok(rows)
}

fn reconstruct_scene(
    cfg: &RunConfig,
    ctx: &Context,
    model: &Std4dModel,
    encoder: Option<&CondEncoder>,
    i: usize,
) -> Result<Tensor> {
    let cond = match encoder {
        Some(enc) => enc.encode(&CondInput::Text(&ctx.scenes[i].spec.describe()))?,
        None => crate::model::Condition::null(cfg.model.cond_dim),
    };
    let z = reconstruct(
        &ctx.latents[i],
        &ctx.schedule,
        |z, t| model.predict(z, t, &cond.tokens),
        cfg.eval.seed.wrapping_add(i as u64),
    )?;
    Ok(ctx.vae.decode(&z)?.map(|v| v.clamp(0.0, 1.0)))
}

/// What [`evaluate`] compares against the stored ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    /// The ground truth itself.
    GroundTruth,
    /// The student of the latest (or given) stage, via the reverse chain.
    Model(Option<u8>),
    /// Stored construction outputs.
    Construct,
}

impl EvalTarget {
    fn name(&self) -> String {
        match self {
            EvalTarget::GroundTruth => "gt".into(),
            EvalTarget::Model(None) => "model".into(),
            EvalTarget::Model(Some(k)) => format!("model_stage{k}"),
            EvalTarget::Construct => "construct".into(),
        }
    }
}

/// Writes `eval/<target>.csv` and `eval/<target>_summary.toml`.
pub fn evaluate(cfg: &RunConfig, run: &RunDir, target: EvalTarget) -> Result<EvalSummary> {
    let scenes = load_scenes(cfg, run)?;
    let mut rows = Vec::new();
    match target {
        EvalTarget::GroundTruth => {
            for (i, s) in scenes.iter().enumerate() {
                rows.extend(compare_video(i, &s.video, &s.video)?);
            }
        }
        EvalTarget::Model(stage) => {
            let stage = match stage {
                Some(k) => k,
                None => latest_stage(run)?,
            };
            let ctx = context(cfg, run)?;
            let model = load_model(cfg, run, stage)?;
            let enc = if stage == 4 {
                Some(load_encoder(cfg, run)?)
            } else {
                None
            };
            rows = evaluate_model(cfg, &ctx, &model, enc.as_ref())?;
        }
        EvalTarget::Construct => {
            for (i, s) in scenes.iter().enumerate() {
                let (out, priors) = load_construct(cfg, run, i)?;
                let render = out.render_video(
                    &priors,
                    &cfg.data.orbit.cameras()?,
                    cfg.data.orbit.frames,
                    cfg.construct.background,
                )?;
                rows.extend(compare_video(i, &render, &s.video)?);
            }
        }
    }
    let csv = eval_csv(&rows);
    let name = target.name();
    let dir = run.path().join("eval");
    write_bytes(&dir.join(format!("{name}.csv")), csv.as_bytes())?;
    write_bytes(
        &dir.join(format!("{name}_summary.toml")),
        summary_from_csv(&csv)?.as_bytes(),
    )?;
    let summary = summarize(&rows);
    run.finish(
        cfg,
        &format!("evaluate:{name}"),
        serde_json::to_value(&summary)?,
    )?;
    Ok(summary)
}

/// Prior tokens from the student's spatial and temporal taps on a clean
/// latent, each bank centred and scaled to unit RMS.
pub fn prior_bank(model: &Std4dModel, latent: &Tensor) -> Result<PriorBank> {
    let tape = Tape::new();
    let mb = model.bind_frozen(&tape);
    let out = mb.forward(&tape.constant(latent.clone()), 0, &mb.null_cond())?;
    let (fs, ft) = mb.taps(&out)?;
    PriorBank::new(standardize(&fs.value())?, standardize(&ft.value())?)
}

/// The same bank from the frozen teachers' taps: the 3D teacher over the
/// first frame's views, the video teacher over the first view's frames.
pub fn teacher_prior_bank(
    teacher_3d: &Teacher,
    teacher_video: &Teacher,
    latent: &Tensor,
) -> Result<PriorBank> {
    let fs = teacher_3d.features(&teacher_3d.input_from(latent)?, 0)?;
    let ft = teacher_video.features(&teacher_video.input_from(latent)?, 0)?;
    PriorBank::new(standardize(&fs)?, standardize(&ft)?)
}

/// `[N, d]` tokens minus their mean token, divided by the overall RMS.
fn standardize(tokens: &Tensor) -> Result<Tensor> {
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in tokens.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let centred = Tensor::from_fn([n, d], |k| tokens.data()[k] - mean[k % d]);
    let rms = (centred.norm_sq() / centred.numel().max(1) as f64).sqrt();
    Ok(if rms > 0.0 {
        centred.map(|v| v / rms)
    } else {
        centred
    })
}

fn construct_file(i: usize) -> String {
    format!("construct_scene{i}.ckpt")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructReport {
    pub scene: usize,
    pub with_priors: bool,
    pub psnr: f64,
    pub ssim: f64,
}

/// Builds 4D Gaussians for the selected scenes (all when `scene` is
/// `None`) from their stored videos. With priors, the bank comes from the
/// latest trained student or from the teachers, per `priors.source`.
pub fn construct(
    cfg: &RunConfig,
    run: &RunDir,
    scene: Option<usize>,
    with_priors: bool,
) -> Result<Vec<ConstructReport>> {
    let start = Instant::now();
    let scenes = load_scenes(cfg, run)?;
    let picked: Vec<usize> = match scene {
        Some(i) if i < scenes.len() => vec![i],
        Some(i) => return invalid(format!("scene {i} of {}", scenes.len())),
        None => (0..scenes.len()).collect(),
    };
    let priors_for = |i: usize| -> Result<PriorBank> {
        if !with_priors {
            return Ok(PriorBank::empty(cfg.construct.field.prior_dim));
        }
        let vae = load_vae(cfg, run)?;
        let latent = vae.encode(&scenes[i].video)?;
        match cfg.priors.source {
            PriorSource::Student => prior_bank(&load_model(cfg, run, latest_stage(run)?)?, &latent),
            PriorSource::Teachers => teacher_prior_bank(
                &load_teacher(cfg, run, TeacherKind::MultiView)?,
                &load_teacher(cfg, run, TeacherKind::Video)?,
                &latent,
            ),
        }
    };
    let cams = cfg.data.orbit.cameras()?;
    let fx = FeatureExtractor::new(cfg.stage3.extractor_seed, cfg.data.orbit.resolution);
    let mut reports = Vec::new();
    for i in picked {
        let priors = priors_for(i)?;
        let s = &scenes[i];
        let out = construct_4d(
            &s.video,
            &s.static_video,
            &cams,
            &priors,
            &fx,
            &cfg.construct,
        )?;
        let mut p = ParamSet::new();
        p.extend_prefixed("gaussians.", &out.gaussians.to_params());
        p.extend_prefixed("field.", &out.field.params);
        p.insert("priors.o_s", priors.o_s.clone());
        p.insert("priors.o_t", priors.o_t.clone());
        checkpoint::save(&run.checkpoint(&construct_file(i)), &p)?;
        let render = out.render_video(
            &priors,
            &cams,
            cfg.data.orbit.frames,
            cfg.construct.background,
        )?;
        write_video(
            &run.path()
                .join("frames")
                .join("construct")
                .join(format!("scene{i}")),
            &render,
        )?;
        let summary = summarize(&compare_video(i, &render, &s.video)?);
        run.log_losses(
            &out.records
                .iter()
                .map(|r| format!("construct{i} {:?} {} {}", r.phase, r.iter, r.loss))
                .collect::<Vec<_>>(),
        )?;
        reports.push(ConstructReport {
            scene: i,
            with_priors,
            psnr: summary.psnr_mean,
            ssim: summary.ssim_mean,
        });
    }
    run.append_timing("construct", "-", start.elapsed().as_secs_f64())?;
    run.finish(cfg, "construct", serde_json::to_value(&reports)?)?;
    Ok(reports)
}

/// A stored construction output and the priors it was built with.
pub fn load_construct(
    cfg: &RunConfig,
    run: &RunDir,
    scene: usize,
) -> Result<(ConstructOutput, PriorBank)> {
    let p = checkpoint::load(&run.require(&construct_file(scene), "construct")?)?;
    let gaussians = GaussianSet::from_params(&p.strip_prefix("gaussians."))?;
    let field = DeformField::from_params(cfg.construct.field, p.strip_prefix("field."))?;
    let priors = PriorBank::new(p.get("priors.o_s")?.clone(), p.get("priors.o_t")?.clone())?;
    Ok((
        ConstructOutput {
            gaussians,
            field,
            records: Vec::new(),
            psnr: Vec::new(),
        },
        priors,
    ))
}

/// Renders stored constructions on an orbit of `views` cameras (the
/// configured orbit when `None`) into `frames/render/scene{i}/`.
pub fn render(cfg: &RunConfig, run: &RunDir, views: Option<usize>) -> Result<Vec<String>> {
    let o = cfg.data.orbit;
    let cams = crate::gs4d::Camera::orbit(
        views.unwrap_or(o.views),
        o.elevation,
        o.radius,
        o.resolution,
    )?;
    let mut written = Vec::new();
    for i in 0..cfg.data.scenes {
        let (out, priors) = load_construct(cfg, run, i)?;
        let video = out.render_video(&priors, &cams, o.frames, cfg.construct.background)?;
        let rel = format!("frames/render/scene{i}");
        write_video(&run.path().join(&rel), &video)?;
        written.push(rel);
    }
    run.finish(cfg, "render", json!({ "dirs": written }))?;
    Ok(written)
}

/// Settings of the single-sample overfit experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverfitConfig {
    pub scene_seed: u64,
    pub vae_steps: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            scene_seed: 1,
            vae_steps: 2000,
            steps: 4000,
            lr: 2e-3,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    /// Autoencoder round trip alone, a ceiling for the chain.
    pub vae_psnr: f64,
    /// Mean over views and frames after the full chain.
    pub psnr: f64,
    pub final_loss: f64,
}

/// Fits the autoencoder and student to one scene under the desk
/// configuration, then reconstructs it through disentangle, denoise, fuse
/// and decode.
pub fn overfit_single(cfg: &RunConfig, o: &OverfitConfig) -> Result<OverfitReport> {
    let ds = synth_dataset(&SceneSpec::random(o.scene_seed), &cfg.data.orbit)?;
    let scene = Scene {
        spec: ds.spec.clone(),
        video: ds.video.clone(),
        static_video: ds.static_video.clone(),
    };
    let mut vae = Vae::new(cfg.vae_config(), o.seed)?;
    train_vae(
        &mut vae,
        &all_frames(std::slice::from_ref(&scene))?,
        &VaeTrainConfig {
            steps: o.vae_steps,
            batch: cfg.vae.batch,
            lr: cfg.vae.lr,
            seed: o.seed,
        },
    )?;
    let z0 = vae.encode(&scene.video)?;
    let vae_psnr = mean_psnr(&vae.decode(&z0)?.map(|v| v.clamp(0.0, 1.0)), &scene.video)?;
    let schedule = cfg.schedule()?;
    let mut model = Std4dModel::new(cfg.model_config(), o.seed)?;
    let mut opt = Adam::new(AdamConfig {
        lr: o.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut final_loss = f64::NAN;
    for step in 0..o.steps {
        opt.set_lr(cosine_lr(o.lr, step, o.steps));
        let tape = Tape::new();
        let mb = model.bind(&tape);
        let loss = loss_ldm(
            &mb,
            &tape.constant(z0.clone()),
            &mb.null_cond(),
            &schedule,
            rng.random(),
        )?;
        final_loss = loss.item()?;
        if !final_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "overfit loss diverged at step {step}"
            )));
        }
        let g = mb.grads(loss)?;
        model.apply(&mut opt, &g)?;
    }
    let null = crate::model::Condition::null(cfg.model.cond_dim);
    let z = reconstruct(
        &z0,
        &schedule,
        |z, t| model.predict(z, t, &null.tokens),
        cfg.eval.seed,
    )?;
    let video = vae.decode(&z)?.map(|v| v.clamp(0.0, 1.0));
    Ok(OverfitReport {
        vae_psnr,
        psnr: mean_psnr(&video, &scene.video)?,
        final_loss,
    })
}

/// Mean per-frame PSNR of two `[V, T, H, W, 3]` videos.
pub fn mean_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(summarize(&compare_video(0, a, b)?).psnr_mean)
}
