//! Reference-view and full-video objectives and the three-phase fit.

use std::collections::BTreeMap;
use std::path::PathBuf;

use autodiff::{Adam, AdamConfig, ParamSet, Tape, Tensor, Var};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    deform_var, render, Camera, DeformField, Gaussian3D, GaussianSet, GaussianVars, HexPlaneConfig,
    PriorBank,
};
use crate::checkpoint;
use crate::consistency::{loss_perc, loss_rec, FeatureExtractor};
use crate::harness::metrics::psnr;
use crate::{invalid, Error, Result};

/// Normalized time of frame `tau` out of `frames`.
pub fn frame_time(tau: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        tau as f64 / (frames - 1) as f64
    }
}

/// Mean squared adjacent-pixel depth difference, horizontal plus vertical,
/// over `[.., H, W]` depth maps.
pub fn loss_dep<'t>(depth: &Var<'t>) -> Result<Var<'t>> {
    let s = depth.shape();
    if s.len() < 2 || s[s.len() - 1] < 2 || s[s.len() - 2] < 2 {
        return invalid(format!(
            "depth maps must be [.., H >= 2, W >= 2], got {s:?}"
        ));
    }
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let dx = depth
        .slice(r - 1, 1, w - 1)?
        .sub(&depth.slice(r - 1, 0, w - 1)?)?;
    let dy = depth
        .slice(r - 2, 1, h - 1)?
        .sub(&depth.slice(r - 2, 0, h - 1)?)?;
    Ok(dx.square().mean().add(&dy.square().mean())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GsWeights {
    pub lambda_l1: f64,
    pub lambda_lpips: f64,
    pub lambda_dep: f64,
    pub lambda_hex: f64,
}

impl Default for GsWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 1.0,
            lambda_lpips: 0.1,
            lambda_dep: 0.05,
            lambda_hex: 1.0,
        }
    }
}

impl GsWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda_l1,
            self.lambda_lpips,
            self.lambda_dep,
            self.lambda_hex,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `λ_l1·L1 + λ_lpips·L_perc + λ_dep·L_dep + λ_hex·L_hex` over renders
/// `[N, H, W, 3]` and depth maps `[N, H, W]`. Terms with zero weight are
/// not evaluated; a missing `l_hex` counts as zero.
pub fn loss_gs<'t>(
    renders: &Var<'t>,
    gt: &Tensor,
    depth: &Var<'t>,
    l_hex: Option<&Var<'t>>,
    w: &GsWeights,
    fx: &FeatureExtractor,
) -> Result<Var<'t>> {
    w.validate()?;
    let tape = renders.tape();
    let gtv = tape.constant(gt.clone());
    let mut total = tape.scalar(0.0);
    if w.lambda_l1 > 0.0 {
        total = total.add(&loss_rec(renders, &gtv)?.scale(w.lambda_l1))?;
    }
    if w.lambda_lpips > 0.0 {
        total = total.add(&loss_perc(renders, &gtv, fx)?.scale(w.lambda_lpips))?;
    }
    if w.lambda_dep > 0.0 {
        total = total.add(&loss_dep(depth)?.scale(w.lambda_dep))?;
    }
    if let (Some(h), true) = (l_hex, w.lambda_hex > 0.0) {
        total = total.add(&h.scale(w.lambda_hex))?;
    }
    Ok(total)
}

/// Mean over `frames` of the per-image MSE between the deformed render at
/// the reference camera and the reference frame. `ref_video` is
/// `[τ, H, W, 3]`; `frames = None` uses every frame.
#[allow(clippy::too_many_arguments)]
pub fn loss_hex<'t>(
    b: &autodiff::Bound<'t>,
    field: &DeformField,
    g: &GaussianVars<'t>,
    priors: &PriorBank,
    ref_video: &Tensor,
    ref_cam: &Camera,
    frames: Option<&[usize]>,
    background: [f64; 3],
) -> Result<Var<'t>> {
    let s = ref_video.shape();
    if s.len() != 4 || s[1] != ref_cam.height || s[2] != ref_cam.width || s[3] != 3 {
        return invalid(format!(
            "reference video {s:?} does not match the {}x{} camera",
            ref_cam.height, ref_cam.width
        ));
    }
    let total_frames = s[0];
    let all: Vec<usize> = (0..total_frames).collect();
    let frames = frames.unwrap_or(&all);
    if frames.is_empty() || frames.iter().any(|&f| f >= total_frames) {
        return invalid(format!(
            "frames {frames:?} do not index a {total_frames}-frame video"
        ));
    }
    let tape = b.tape();
    let mut acc = tape.scalar(0.0);
    for &tau in frames {
        let d = deform_var(b, field, g, priors, frame_time(tau, total_frames))?;
        let out = render(&d, ref_cam, background)?;
        let target = tape.constant(ref_video.index_axis0(tau)?);
        acc = acc.add(&out.rgb.sub(&target)?.square().mean())?;
    }
    Ok(acc.scale(1.0 / frames.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstructConfig {
    pub num_points: usize,
    /// Static fit plus reference-view deformation fit.
    pub coarse_iters: usize,
    /// Fraction of the coarse iterations spent on the static fit.
    pub static_share: f64,
    pub fine_iters: usize,
    /// Images per optimization step.
    pub batch: usize,
    pub lr_position: f64,
    pub lr_appearance: f64,
    pub lr_field: f64,
    pub init_scale: f64,
    pub init_opacity: f64,
    pub background: [f64; 3],
    pub weights: GsWeights,
    pub field: HexPlaneConfig,
    pub seed: u64,
    /// Where to write the state when the loss diverges.
    pub dump_dir: Option<PathBuf>,
}

impl Default for ConstructConfig {
    fn default() -> Self {
        Self {
            num_points: 512,
            coarse_iters: 600,
            static_share: 0.5,
            fine_iters: 300,
            batch: 4,
            lr_position: 5e-3,
            lr_appearance: 2e-2,
            lr_field: 5e-3,
            init_scale: 0.06,
            init_opacity: 0.5,
            background: [0.0; 3],
            weights: GsWeights::default(),
            field: HexPlaneConfig::default(),
            seed: 1,
            dump_dir: None,
        }
    }
}

impl ConstructConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.field.validate()?;
        if self.num_points == 0 || self.batch == 0 {
            return Err(Error::Config(
                "num_points and batch must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.static_share) {
            return Err(Error::Config("static_share must lie in [0, 1]".into()));
        }
        let lrs = [
            self.lr_position,
            self.lr_appearance,
            self.lr_field,
            self.init_scale,
        ];
        if lrs.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || !(0.0..=1.0).contains(&self.init_opacity)
        {
            return Err(Error::Config(
                "learning rates and initial scale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn static_iters(&self) -> usize {
        (self.coarse_iters as f64 * self.static_share).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstructPhase {
    Static,
    Deform,
    Refine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructRecord {
    pub phase: ConstructPhase,
    pub iter: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct ConstructOutput {
    pub gaussians: GaussianSet,
    pub field: DeformField,
    pub records: Vec<ConstructRecord>,
    /// Final PSNR, `[view][frame]`.
    pub psnr: Vec<Vec<f64>>,
}

impl ConstructOutput {
    /// Gaussians deformed to frame `tau` of `frames`.
    pub fn frame(&self, priors: &PriorBank, tau: usize, frames: usize) -> Result<GaussianSet> {
        self.field
            .deform_set(&self.gaussians, priors, frame_time(tau, frames))
    }

    /// Renders of every camera and frame, `[V, T, H, W, 3]`.
    pub fn render_video(
        &self,
        priors: &PriorBank,
        cams: &[Camera],
        frames: usize,
        background: [f64; 3],
    ) -> Result<Tensor> {
        let mut views = Vec::with_capacity(cams.len());
        for cam in cams {
            let mut seq = Vec::with_capacity(frames);
            for tau in 0..frames {
                let tape = Tape::new();
                let fb = self.field.params.bind_frozen(&tape);
                let d = deform_var(
                    &fb,
                    &self.field,
                    &self.gaussians.bind_frozen(&tape),
                    priors,
                    frame_time(tau, frames),
                )?;
                seq.push((*render(&d, cam, background)?.rgb.value()).clone());
            }
            views.push(Tensor::stack(&seq)?);
        }
        Ok(Tensor::stack(&views)?)
    }

    pub fn mean_psnr(&self) -> f64 {
        let all: Vec<f64> = self.psnr.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

/// Anchors drawn from the foreground of `frame` (`[H, W, 3]`) seen by
/// `cam`, weighted by the pixel's distance from the background and
/// back-projected to a random depth around the orbit center.
pub fn init_anchors(
    frame: &Tensor,
    cam: &Camera,
    cfg: &ConstructConfig,
    rng: &mut impl Rng,
) -> Result<GaussianSet> {
    let (h, w) = (cam.height, cam.width);
    if frame.shape() != [h, w, 3] {
        return invalid(format!(
            "frame {:?} does not match the {h}x{w} camera",
            frame.shape()
        ));
    }
    let weights: Vec<f64> = frame
        .data()
        .chunks(3)
        .map(|p| {
            (0..3)
                .map(|c| (p[c] - cfg.background[c]).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|_| Error::Invalid("reference frame shows no foreground".into()))?;
    let eye = cam.eye();
    let half = 0.5 * cfg.field.bound;
    let mut gs = Vec::with_capacity(cfg.num_points);
    for _ in 0..cfg.num_points {
        let px = dist.sample(rng);
        let (y, x) = (px / w, px % w);
        let u = x as f64 + rng.random::<f64>();
        let v = y as f64 + rng.random::<f64>();
        let ray = cam.ray(u, v);
        let depth = cam.radius + rng.random_range(-half..half);
        let pos = [0, 1, 2].map(|i| eye[i] + depth * ray[i]);
        let c = &frame.data()[3 * px..3 * px + 3];
        let color = [
            c[0].clamp(0.0, 1.0),
            c[1].clamp(0.0, 1.0),
            c[2].clamp(0.0, 1.0),
        ];
        gs.push(Gaussian3D::isotropic(
            pos,
            cfg.init_scale,
            cfg.init_opacity,
            color,
        )?);
    }
    GaussianSet::new(&gs)
}

/// Per-attribute Adam states for a Gaussian set.
struct GaussianOptim {
    groups: Vec<(&'static str, Adam)>,
}

impl GaussianOptim {
    fn new(cfg: &ConstructConfig) -> Self {
        let adam = |lr| {
            Adam::new(AdamConfig {
                lr,
                clip_norm: None,
                ..AdamConfig::default()
            })
        };
        Self {
            groups: vec![
                ("position", adam(cfg.lr_position)),
                ("rotation", adam(cfg.lr_appearance)),
                ("log_scale", adam(cfg.lr_appearance)),
                ("opacity", adam(cfg.lr_appearance)),
                ("color", adam(cfg.lr_appearance)),
            ],
        }
    }

    fn step(&mut self, set: &mut GaussianSet, grads: &ParamSet) -> Result<()> {
        let mut params = set.to_params();
        for (name, opt) in &mut self.groups {
            let mut p = ParamSet::new();
            p.insert(*name, params.get(name)?.clone());
            let mut g = ParamSet::new();
            g.insert(*name, grads.get(name)?.clone());
            opt.step(&mut p, &g)?;
            *params.get_mut(name)? = p.get(name)?.clone();
        }
        *set = GaussianSet::from_params(&params)?;
        set.project();
        Ok(())
    }
}

fn diverged(
    cfg: &ConstructConfig,
    phase: ConstructPhase,
    iter: usize,
    records: &[ConstructRecord],
    set: &GaussianSet,
    field: &DeformField,
) -> Error {
    let last = records
        .last()
        .map(|r| format!("{:.6e} ({:?} {})", r.loss, r.phase, r.iter));
    let mut msg =
        format!("{phase:?} iteration {iter} produced a non-finite loss; last finite loss {last:?}");
    if let Some(dir) = &cfg.dump_dir {
        let mut ps = ParamSet::new();
        ps.extend_prefixed("gaussians.", &set.to_params());
        ps.extend_prefixed("field.", &field.params);
        let path = dir.join("diverged.ckpt");
        match std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir, e))
            .and_then(|_| checkpoint::save(&path, &ps))
        {
            Ok(()) => msg.push_str(&format!("; state written to {}", path.display())),
            Err(e) => msg.push_str(&format!("; state dump failed: {e}")),
        }
    }
    Error::Numerical(msg)
}

/// Fits Gaussians and a deformation field to an orbital video.
///
/// `video` is `[V, T, H, W, 3]`, `static_video` `[V, H, W, 3]` (the frozen
/// first-frame object on the same orbit), `cams` the `V` cameras; view 0 is
/// the reference view. An empty `priors` bank yields a plain HexPlane.
pub fn construct_4d(
    video: &Tensor,
    static_video: &Tensor,
    cams: &[Camera],
    priors: &PriorBank,
    fx: &FeatureExtractor,
    cfg: &ConstructConfig,
) -> Result<ConstructOutput> {
    cfg.validate()?;
    let vs = video.shape();
    if vs.len() != 5 || vs[0] != cams.len() || vs[0] == 0 || vs[4] != 3 {
        return invalid(format!(
            "video {vs:?} does not match {} cameras",
            cams.len()
        ));
    }
    let (nv, nt) = (vs[0], vs[1]);
    if static_video.shape() != [nv, vs[2], vs[3], 3] {
        return invalid(format!(
            "static video {:?} does not match video {vs:?}",
            static_video.shape()
        ));
    }
    for c in cams {
        c.validate()?;
        if c.height != vs[2] || c.width != vs[3] {
            return invalid("cameras and frames disagree on resolution");
        }
    }
    if !priors.is_empty() && priors.dim() != cfg.field.prior_dim {
        return Err(Error::Config(format!(
            "prior width {} != field prior_dim {}",
            priors.dim(),
            cfg.field.prior_dim
        )));
    }
    let bg = cfg.background;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut set = init_anchors(&static_video.index_axis0(0)?, &cams[0], cfg, &mut rng)?;
    let mut field = DeformField::new(cfg.field, !priors.is_empty(), cfg.seed.wrapping_add(1))?;
    let mut records = Vec::new();
    let mut g_opt = GaussianOptim::new(cfg);
    let mut f_opt = Adam::new(AdamConfig {
        lr: cfg.lr_field,
        clip_norm: None,
        ..AdamConfig::default()
    });
    let ref_video = video.index_axis0(0)?;

    // Static fit on the frozen orbit.
    for iter in 0..cfg.static_iters() {
        let views = sample(&mut rng, nv, cfg.batch.min(nv)).into_vec();
        let tape = Tape::new();
        let g = set.bind(&tape);
        let mut rgbs = Vec::new();
        let mut depths = Vec::new();
        let mut gts = Vec::new();
        for &v in &views {
            let out = render(&g, &cams[v], bg)?;
            rgbs.push(out.rgb);
            depths.push(out.depth);
            gts.push(static_video.index_axis0(v)?);
        }
        let loss = loss_gs(
            &stack(&rgbs)?,
            &Tensor::stack(&gts)?,
            &stack(&depths)?,
            None,
            &cfg.weights,
            fx,
        )?;
        let lv = loss.item()?;
        if !lv.is_finite() {
            return Err(diverged(
                cfg,
                ConstructPhase::Static,
                iter,
                &records,
                &set,
                &field,
            ));
        }
        let grads = g.grads(loss)?;
        g_opt.step(&mut set, &grads)?;
        records.push(ConstructRecord {
            phase: ConstructPhase::Static,
            iter,
            loss: lv,
        });
    }

    // Deformation field on the reference view, Gaussians frozen.
    for iter in 0..cfg.coarse_iters - cfg.static_iters() {
        let frames = sorted_sample(&mut rng, nt, cfg.batch);
        let tape = Tape::new();
        let fb = field.params.bind(&tape);
        let g = set.bind_frozen(&tape);
        let loss = loss_hex(
            &fb,
            &field,
            &g,
            priors,
            &ref_video,
            &cams[0],
            Some(&frames),
            bg,
        )?;
        let lv = loss.item()?;
        if !lv.is_finite() {
            return Err(diverged(
                cfg,
                ConstructPhase::Deform,
                iter,
                &records,
                &set,
                &field,
            ));
        }
        let grads = fb.grads(loss)?;
        f_opt.step(&mut field.params, &grads)?;
        records.push(ConstructRecord {
            phase: ConstructPhase::Deform,
            iter,
            loss: lv,
        });
    }

    // Joint refinement on the full video.
    for iter in 0..cfg.fine_iters {
        let picks = sample(&mut rng, nv * nt, cfg.batch.min(nv * nt)).into_vec();
        let mut joint = ParamSet::new();
        joint.extend_prefixed("field.", &field.params);
        joint.extend_prefixed("gaussians.", &set.to_params());
        let tape = Tape::new();
        let jb = joint.bind(&tape);
        let fb = jb.scope("field.");
        let g = GaussianVars::from_bound(&jb.scope("gaussians."))?;
        let mut deformed: BTreeMap<usize, GaussianVars> = BTreeMap::new();
        let mut rgbs = Vec::new();
        let mut depths = Vec::new();
        let mut gts = Vec::new();
        for &p in &picks {
            let (v, tau) = (p / nt, p % nt);
            let d = match deformed.get(&tau) {
                Some(d) => *d,
                None => {
                    let d = deform_var(&fb, &field, &g, priors, frame_time(tau, nt))?;
                    deformed.insert(tau, d);
                    d
                }
            };
            let out = render(&d, &cams[v], bg)?;
            rgbs.push(out.rgb);
            depths.push(out.depth);
            gts.push(video.index_axis0(v)?.index_axis0(tau)?);
        }
        let hex_frames: Vec<usize> = deformed.keys().copied().collect();
        let l_hex = if cfg.weights.lambda_hex > 0.0 {
            Some(loss_hex(
                &fb,
                &field,
                &g,
                priors,
                &ref_video,
                &cams[0],
                Some(&hex_frames),
                bg,
            )?)
        } else {
            None
        };
        let loss = loss_gs(
            &stack(&rgbs)?,
            &Tensor::stack(&gts)?,
            &stack(&depths)?,
            l_hex.as_ref(),
            &cfg.weights,
            fx,
        )?;
        let lv = loss.item()?;
        if !lv.is_finite() {
            return Err(diverged(
                cfg,
                ConstructPhase::Refine,
                iter,
                &records,
                &set,
                &field,
            ));
        }
        let grads = jb.grads(loss)?;
        f_opt.step(&mut field.params, &grads.strip_prefix("field."))?;
        g_opt.step(&mut set, &grads.strip_prefix("gaussians."))?;
        records.push(ConstructRecord {
            phase: ConstructPhase::Refine,
            iter,
            loss: lv,
        });
    }

    let mut out = ConstructOutput {
        gaussians: set,
        field,
        records,
        psnr: Vec::new(),
    };
    let renders = out.render_video(priors, cams, nt, bg)?;
    for v in 0..nv {
        let mut row = Vec::with_capacity(nt);
        for tau in 0..nt {
            let r = renders.index_axis0(v)?.index_axis0(tau)?;
            row.push(psnr(&r, &video.index_axis0(v)?.index_axis0(tau)?)?);
        }
        out.psnr.push(row);
    }
    Ok(out)
}

fn stack<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut shape = vec![1];
    shape.extend(parts[0].shape());
    let rs = parts
        .iter()
        .map(|p| p.reshape(&shape))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Var::concat(&rs, 0)?)
}

fn sorted_sample(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}
