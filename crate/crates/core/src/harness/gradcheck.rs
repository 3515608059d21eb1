//! Finite-difference gradient suite over every trainable operation, on
//! miniature configurations.

use autodiff::{attention, Bound, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conditioning::loss_cond;
use crate::consistency::{
    loss_align, loss_const, loss_perc, loss_rec, loss_temp, ConsistencyTerms, ConsistencyWeights,
    FeatureExtractor,
};
use crate::diffusion::{loss_ldm, NoiseSchedule};
use crate::gs4d::{
    deform_var, hexplane_query_var, loss_dep, loss_gs, loss_hex, render, Camera, DeformField,
    Gaussian3D, GaussianSet, GaussianVars, GsWeights, HexPlaneConfig, PriorBank,
};
use crate::model::{
    denoise_spatial, denoise_temporal, fuse_ffn, init_channel, ModelBound, ModelConfig, Std4dModel,
};
use crate::nn::{grad_check, grad_check_params};
use crate::orster::{kernel_eval_var, orster_loss, spt_attn, tmpr_attn, KernelParams};
use crate::Result;

pub const TOLERANCE: f64 = 1e-4;
pub const RENDER_TOLERANCE: f64 = 5e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn mini_model() -> ModelConfig {
    ModelConfig {
        views: 2,
        frames: 3,
        latent_size: 4,
        latent_channels: 2,
        spatial_channels: 2,
        temporal_channels: 2,
        hidden: 3,
        fusion_hidden: 4,
        cond_dim: 3,
        time_dim: 4,
        tap_dim: 3,
        temporal_pos_enc: true,
    }
}

fn randomize(p: &mut ParamSet, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.iter_mut() {
        *t = Tensor::randn(t.shape().to_vec(), std, &mut rng);
    }
}

fn random_model(seed: u64) -> Result<Std4dModel> {
    let mut m = Std4dModel::new(mini_model(), seed)?;
    randomize(&mut m.spatial, seed + 1, 0.4);
    randomize(&mut m.temporal, seed + 2, 0.4);
    randomize(&mut m.fusion, seed + 3, 0.4);
    Ok(m)
}

fn gaussians(seed: u64, n: usize) -> Result<GaussianSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs = (0..n)
        .map(|_| {
            let p = [0; 3].map(|_| rng.random_range(-0.5..0.5));
            let q = [0; 4].map(|_| rng.random_range(-1.0..1.0));
            let s = [0; 3].map(|_| rng.random_range(0.15..0.3));
            let c = [0; 3].map(|_| rng.random_range(0.0..1.0));
            Gaussian3D::new(p, q, s, rng.random_range(0.3..0.8), c)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianSet::new(&gs)
}

fn small_field(seed: u64, with_priors: bool) -> Result<DeformField> {
    let cfg = HexPlaneConfig {
        resolution: 4,
        feature_dim: 3,
        hidden: 4,
        fusion_depth: 2,
        prior_dim: 3,
        bound: 1.5,
    };
    let mut f = DeformField::new(cfg, with_priors, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for (name, t) in f.params.iter_mut() {
        if name.starts_with("plane.") {
            *t = Tensor::uniform(t.shape().to_vec(), 0.2, 1.4, &mut rng);
        } else if name.starts_with("head.") {
            *t = Tensor::randn(t.shape().to_vec(), 0.3, &mut rng);
        }
    }
    Ok(f)
}

fn scoped<'t>(config: ModelConfig, b: &Bound<'t>) -> ModelBound<'t> {
    ModelBound {
        config,
        spatial: b.scope("spatial."),
        temporal: b.scope("temporal."),
        fusion: b.scope("fusion."),
    }
}

/// Separates the attention key biases, which shift every logit of a query
/// by the same amount and so have an identically zero gradient. A finite
/// difference on them measures only roundoff.
pub fn split_key_biases(params: &ParamSet) -> (ParamSet, ParamSet) {
    let (mut rest, mut keys) = (ParamSet::new(), ParamSet::new());
    for (name, t) in params.iter() {
        if name.ends_with(".k.b") {
            keys.insert(name.clone(), t.clone());
        } else {
            rest.insert(name.clone(), t.clone());
        }
    }
    (rest, keys)
}

fn constant<'t>(tape: &'t Tape, t: &Tensor) -> Var<'t> {
    tape.constant(t.clone())
}

fn check(
    out: &mut Vec<GradCheck>,
    name: &'static str,
    tolerance: f64,
    error: Result<f64>,
) -> Result<()> {
    let error = error?;
    log::info!("gradcheck {name}: {error:.3e} (tolerance {tolerance:.0e})");
    out.push(GradCheck {
        name,
        error,
        tolerance,
    });
    Ok(())
}

/// Runs every check and reports the worst relative error of each.
pub fn gradient_suite() -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = mini_model();
    let n = cfg.latent_size;

    // kernel
    let fs = Tensor::randn([5, 3], 0.6, &mut rng);
    let ft = Tensor::randn([5, 3], 0.6, &mut rng);
    let w5 = Tensor::randn([5], 1.0, &mut rng);
    let kp = KernelParams {
        sigma_s: 1.1,
        sigma_t: 0.8,
        sigma_st: 1.3,
        alpha: 0.3,
    };
    check(
        &mut out,
        "kernel_eval",
        TOLERANCE,
        grad_check_params(
            |b| {
                let tape = b.tape();
                let (a, c) = (tape.constant(fs.clone()), tape.constant(ft.clone()));
                Ok(
                    kernel_eval_var(&a, &c, &a.mean_axis(0)?, &c.mean_axis(0)?, b)?
                        .dot(&tape.constant(w5.clone()))?,
                )
            },
            &kp.to_params(),
            1e-5,
        ),
    )?;

    // attention
    let mut qkv = ParamSet::new();
    qkv.insert("q", Tensor::randn([3, 4], 1.0, &mut rng));
    qkv.insert("k", Tensor::randn([5, 4], 1.0, &mut rng));
    qkv.insert("v", Tensor::randn([5, 2], 1.0, &mut rng));
    let probe = Tensor::randn([3, 2], 1.0, &mut rng);
    check(
        &mut out,
        "attention",
        TOLERANCE,
        grad_check_params(
            |b| {
                Ok(attention(&b.get("q")?, &b.get("k")?, &b.get("v")?)?
                    .mul(&b.tape().constant(probe.clone()))?
                    .mean())
            },
            &qkv,
            1e-5,
        ),
    )?;

    // denoising channels
    for (name, spec, set) in [
        ("denoise_spatial", cfg.spatial_spec(), cfg.views),
        ("denoise_temporal", cfg.temporal_spec(), cfg.frames),
    ] {
        let mut p = ParamSet::new();
        init_channel(&mut p, &spec, &mut rng);
        randomize(&mut p, rng.random(), 0.4);
        let x = Tensor::randn([set, n, n, spec.cin], 1.0, &mut rng);
        let probe = Tensor::randn([set, n, n, spec.cout], 1.0, &mut rng);
        let tap_probe = Tensor::randn([set, n, n, spec.hidden], 1.0, &mut rng);
        check(
            &mut out,
            name,
            TOLERANCE,
            grad_check_params(
                |b| {
                    let tape = b.tape();
                    let x = tape.constant(x.clone());
                    let o = if spec.axis == crate::model::Axis::Views {
                        denoise_spatial(b, &cfg, &x, 6)?
                    } else {
                        denoise_temporal(b, &cfg, &x, 6)?
                    };
                    let tap = o
                        .tap
                        .mul(&tape.constant(tap_probe.clone()))?
                        .mean()
                        .scale(0.1);
                    Ok(o.out.mul(&tape.constant(probe.clone()))?.mean().add(&tap)?)
                },
                &p,
                1e-4,
            ),
        )?;
    }

    // fusion
    let m = random_model(11)?;
    let zs = Tensor::randn([cfg.views, n, n, cfg.spatial_channels], 1.0, &mut rng);
    let zt = Tensor::randn([cfg.frames, n, n, cfg.temporal_channels], 1.0, &mut rng);
    let cond = Tensor::randn([2, cfg.cond_dim], 1.0, &mut rng);
    let z = Tensor::randn(cfg.latent_shape().to_vec(), 1.0, &mut rng);
    let probe = Tensor::randn(cfg.latent_shape().to_vec(), 1.0, &mut rng);
    check(
        &mut out,
        "fuse_ffn",
        TOLERANCE,
        grad_check_params(
            |b| {
                let tape = b.tape();
                let c = |t: &Tensor| tape.constant(t.clone());
                Ok(fuse_ffn(b, &cfg, &c(&zs), &c(&zt), &c(&cond), &c(&z), 3)?
                    .mul(&c(&probe))?
                    .mean())
            },
            &m.fusion,
            1e-5,
        ),
    )?;

    // denoising and conditional objectives through the whole student
    let schedule = NoiseSchedule::linear(10, 1e-3, 0.2)?;
    let (params, key_bias) = split_key_biases(&m.to_params());
    check(
        &mut out,
        "loss_ldm",
        TOLERANCE,
        grad_check_params(
            // a zero condition would leave the key and value weights with
            // exactly zero gradient
            |b| {
                let tape = b.tape();
                loss_ldm(
                    &scoped(cfg, &key_bias.bind_frozen(tape).with("", b)),
                    &tape.constant(z.clone()),
                    &tape.constant(cond.clone()),
                    &schedule,
                    5,
                )
            },
            &params,
            1e-5,
        ),
    )?;
    check(
        &mut out,
        "loss_cond",
        TOLERANCE,
        grad_check_params(
            |b| {
                let tape = b.tape();
                loss_cond(
                    &scoped(cfg, &key_bias.bind_frozen(tape).with("", b)),
                    &tape.constant(z.clone()),
                    &tape.constant(cond.clone()),
                    &schedule,
                    6,
                )
            },
            &params,
            1e-4,
        ),
    )?;

    // transfer objective through the kernel attention targets
    let mut ps = ParamSet::new();
    ps.extend_prefixed("kernel.", &kp.to_params());
    ps.insert("temp_s", Tensor::scalar(0.4));
    ps.insert("temp_t", Tensor::scalar(0.6));
    ps.insert("fs4d", Tensor::randn([5, 3], 1.0, &mut rng));
    ps.insert("ft4d", Tensor::randn([5, 3], 1.0, &mut rng));
    check(
        &mut out,
        "loss_orster",
        TOLERANCE,
        grad_check_params(
            |b| {
                let tape = b.tape();
                let (a, c) = (tape.constant(fs.clone()), tape.constant(ft.clone()));
                let kappa = kernel_eval_var(
                    &a,
                    &c,
                    &a.mean_axis(0)?,
                    &c.mean_axis(0)?,
                    &b.scope("kernel."),
                )?;
                let ts = spt_attn(&a, &kappa, &b.get("temp_s")?)?;
                let tt = tmpr_attn(&c, &kappa, &b.get("temp_t")?)?;
                Ok(orster_loss(&b.get("fs4d")?, &b.get("ft4d")?, &ts, &tt, 0.3)?.total)
            },
            &ps,
            1e-5,
        ),
    )?;

    // consistency terms; inputs kept off the kink of |x|
    let fx = FeatureExtractor::with_layers(3, 8, &[(4, 1), (4, 2)]);
    let gt = Tensor::uniform([2, 8, 8, 3], 0.0, 1.0, &mut rng);
    let x = Tensor::uniform([2, 8, 8, 3], 0.0, 1.0, &mut rng).zip_with(&gt, |a, b| {
        if (a - b).abs() < 1e-2 {
            a + 0.05
        } else {
            a
        }
    })?;
    check(
        &mut out,
        "loss_rec",
        TOLERANCE,
        grad_check(|tape, v| loss_rec(&v, &constant(tape, &gt)), &x, 1e-6),
    )?;
    check(
        &mut out,
        "loss_perc",
        TOLERANCE,
        grad_check(|tape, v| loss_perc(&v, &constant(tape, &gt), &fx), &x, 1e-5),
    )?;
    let seq = Tensor::randn([4, 5], 1.0, &mut rng);
    check(
        &mut out,
        "loss_temp",
        TOLERANCE,
        grad_check(|_, v| loss_temp(&v), &seq, 1e-5),
    )?;
    let other = Tensor::randn([5], 1.0, &mut rng);
    check(
        &mut out,
        "loss_align",
        TOLERANCE,
        grad_check(
            |tape, v| loss_align(&v, &constant(tape, &other)),
            &Tensor::randn([5], 1.0, &mut rng),
            1e-5,
        ),
    )?;
    let w = ConsistencyWeights {
        lambda_rec: 1.0,
        lambda_perc: 0.1,
        lambda_temp: 0.5,
        lambda_align: 0.2,
    };
    check(
        &mut out,
        "loss_const",
        TOLERANCE,
        grad_check(
            |tape, v| {
                let terms = ConsistencyTerms {
                    rec: loss_rec(&v, &constant(tape, &gt))?,
                    perc: loss_perc(&v, &constant(tape, &gt), &fx)?,
                    temp: loss_temp(&v)?,
                    align: loss_align(&v.slice(0, 0, 1)?, &v.slice(0, 1, 1)?)?,
                };
                loss_const(&terms, &w)
            },
            &x,
            1e-6,
        ),
    )?;

    // construction objectives
    let mut gp = ParamSet::new();
    gp.insert("rgb", x.clone());
    gp.insert("depth", Tensor::uniform([2, 8, 8], 2.0, 4.0, &mut rng));
    gp.insert("hex", Tensor::scalar(0.3));
    check(
        &mut out,
        "loss_dep",
        TOLERANCE,
        grad_check(|_, v| loss_dep(&v), gp.get("depth")?, 1e-5),
    )?;
    check(
        &mut out,
        "loss_gs",
        TOLERANCE,
        grad_check_params(
            |b| {
                let hex = b.get("hex")?;
                loss_gs(
                    &b.get("rgb")?,
                    &gt,
                    &b.get("depth")?,
                    Some(&hex),
                    &GsWeights::default(),
                    &fx,
                )
            },
            &gp,
            1e-6,
        ),
    )?;

    // renderer
    let set = gaussians(5, 3)?;
    let cam = Camera::looking_at_origin(0.4, 0.2, 3.0, 12)?;
    let probes = [
        Tensor::randn([12, 12, 3], 1.0, &mut rng),
        Tensor::randn([12, 12], 1.0, &mut rng),
        Tensor::randn([12, 12], 1.0, &mut rng),
    ];
    check(
        &mut out,
        "render",
        RENDER_TOLERANCE,
        grad_check_params(
            |b| {
                let tape = b.tape();
                let r = render(&GaussianVars::from_bound(b)?, &cam, [0.3, 0.1, 0.2])?;
                let a = r.rgb.mul(&tape.constant(probes[0].clone()))?.mean();
                let d = r
                    .depth
                    .mul(&tape.constant(probes[1].clone()))?
                    .mean()
                    .scale(0.1);
                let o = r.alpha.mul(&tape.constant(probes[2].clone()))?.mean();
                Ok(a.add(&d)?.add(&o)?)
            },
            &set.to_params(),
            1e-6,
        ),
    )?;

    // deformation field
    let field = small_field(48, true)?;
    let bank = PriorBank::new(
        Tensor::randn([4, 3], 1.0, &mut rng),
        Tensor::randn([4, 3], 1.0, &mut rng),
    )?;
    let feat_probe = Tensor::randn([3, 4], 1.0, &mut rng);
    check(
        &mut out,
        "hexplane_query",
        TOLERANCE,
        grad_check_params(
            |b| {
                let tape = b.tape();
                let p = tape.constant(set.position.clone());
                Ok(hexplane_query_var(b, &field.config, &p, 0.4)?
                    .mul(&tape.constant(feat_probe.clone()))?
                    .mean())
            },
            &field.params,
            1e-5,
        ),
    )?;
    let dprobes = [3usize, 4, 3].map(|w| Tensor::randn([3, w], 1.0, &mut rng));
    check(
        &mut out,
        "deform",
        TOLERANCE,
        grad_check_params(
            |b| {
                let tape = b.tape();
                let d = deform_var(b, &field, &set.bind_frozen(tape), &bank, 0.7)?;
                let mut acc = tape.scalar(0.0);
                for (v, p) in [d.position, d.rotation, d.log_scale].iter().zip(&dprobes) {
                    acc = acc.add(&v.mul(&tape.constant(p.clone()))?.mean())?;
                }
                Ok(acc)
            },
            &field.params,
            1e-5,
        ),
    )?;
    let ref_video = Tensor::uniform([2, 12, 12, 3], 0.0, 1.0, &mut rng);
    check(
        &mut out,
        "loss_hex",
        TOLERANCE,
        grad_check_params(
            |b| {
                let g = set.bind_frozen(b.tape());
                loss_hex(b, &field, &g, &bank, &ref_video, &cam, None, [0.0; 3])
            },
            &field.params,
            1e-6,
        ),
    )?;
    Ok(out)
}
