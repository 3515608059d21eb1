//! The disentangled 4D denoiser.
//!
//! Latents are `[V, T, h, w, C]` (views, frames, rows, columns, channels).
//! The spatial latent is `[V, h, w, C_s]` (frame axis pooled); the temporal
//! latent is `[T, h, w, C_t]` (view axis pooled).

pub mod blocks;

use autodiff::{attention, Bound, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use blocks::{channel_forward, init_channel, tap_tokens, Axis, ChannelOut, ChannelSpec};

use crate::diffusion::Denoiser;
use crate::nn::{conv, init_conv, init_linear, linear, timestep_embedding, Init};
use crate::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub views: usize,
    pub frames: usize,
    pub latent_size: usize,
    pub latent_channels: usize,
    pub spatial_channels: usize,
    pub temporal_channels: usize,
    pub hidden: usize,
    pub fusion_hidden: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub tap_dim: usize,
    pub temporal_pos_enc: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            views: 4,
            frames: 8,
            latent_size: 8,
            latent_channels: 8,
            spatial_channels: 8,
            temporal_channels: 8,
            hidden: 16,
            fusion_hidden: 32,
            cond_dim: 16,
            time_dim: 16,
            tap_dim: 16,
            temporal_pos_enc: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views < 1 || self.frames < 2 {
            return Err(Error::Config(format!(
                "need at least one view and two frames, got V={} T={}",
                self.views, self.frames
            )));
        }
        let widths = [
            self.latent_size,
            self.latent_channels,
            self.spatial_channels,
            self.temporal_channels,
            self.hidden,
            self.fusion_hidden,
            self.cond_dim,
            self.tap_dim,
        ];
        if widths.contains(&0) || self.time_dim < 2 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 5] {
        [
            self.views,
            self.frames,
            self.latent_size,
            self.latent_size,
            self.latent_channels,
        ]
    }

    pub fn spatial_spec(&self) -> ChannelSpec {
        ChannelSpec {
            axis: Axis::Views,
            set: self.views,
            size: self.latent_size,
            cin: self.spatial_channels,
            cout: self.spatial_channels,
            hidden: self.hidden,
            time_dim: self.time_dim,
            tap_dim: self.tap_dim,
            pos_enc: false,
        }
    }

    pub fn temporal_spec(&self) -> ChannelSpec {
        ChannelSpec {
            axis: Axis::Frames,
            set: self.frames,
            cin: self.temporal_channels,
            cout: self.temporal_channels,
            pos_enc: self.temporal_pos_enc,
            ..self.spatial_spec()
        }
    }

    pub fn check_latent(&self, shape: &[usize]) -> Result<()> {
        if shape.len() == 5 && shape[1] < 2 {
            return invalid("latent has a single frame; the temporal axis is degenerate");
        }
        if shape != self.latent_shape() {
            return invalid(format!(
                "latent {:?}, expected {:?}",
                shape,
                self.latent_shape()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Null,
    Text,
    Image,
    Static3d,
}

/// An embedding sequence `[n_tokens, d]` attended by the fusion block.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub kind: ConditionKind,
    pub tokens: Tensor,
}

impl Condition {
    pub fn new(kind: ConditionKind, tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] == 0 {
            return invalid(format!(
                "condition tokens must be [n >= 1, d], got {:?}",
                tokens.shape()
            ));
        }
        Ok(Self { kind, tokens })
    }

    /// A single all-zero token.
    pub fn null(dim: usize) -> Self {
        Self {
            kind: ConditionKind::Null,
            tokens: Tensor::zeros([1, dim]),
        }
    }
}

/// Mean over `axis`, summing each fibre in sorted order so the result is
/// exactly invariant to permutations along that axis.
pub fn pool_mean<'t>(x: &Var<'t>, axis: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return invalid(format!("pooling axis {axis} for shape {shape:?}"));
    }
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let xv = x.value();
    let mut out = vec![0.0; outer * inner];
    let mut fibre = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for (k, f) in fibre.iter_mut().enumerate() {
                *f = xv.data()[(o * n + k) * inner + i];
            }
            fibre.sort_by(f64::total_cmp);
            out[o * inner + i] = fibre.iter().sum::<f64>() / n as f64;
        }
    }
    let mut out_shape = shape.clone();
    out_shape.remove(axis);
    let value = Tensor::new(out_shape, out)?;
    let in_shape = shape.clone();
    Ok(x.tape().custom(
        &[*x],
        value,
        Box::new(move |g, _| {
            let gx = Tensor::from_fn(in_shape.clone(), |idx| {
                let i = idx % inner;
                let o = idx / (inner * n);
                g.data()[o * inner + i] / n as f64
            });
            vec![Some(gx)]
        }),
    )?)
}

/// Frame-mean and view-mean pooling followed by one conv per branch.
///
/// `spatial` and `temporal` are the channel parameter scopes holding
/// `dis.w`/`dis.b`.
pub fn disentangle<'t>(
    spatial: &Bound<'t>,
    temporal: &Bound<'t>,
    z: &Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let s = z.shape();
    if s.len() != 5 {
        return invalid(format!("latent must be rank 5, got {s:?}"));
    }
    if s[1] < 2 {
        return invalid("cannot disentangle a single-frame latent");
    }
    let zs = conv(spatial, "dis", &pool_mean(z, 1)?, 1)?;
    let zt = conv(temporal, "dis", &pool_mean(z, 0)?, 1)?;
    Ok((zs, zt))
}

pub fn denoise_spatial<'t>(
    b: &Bound<'t>,
    cfg: &ModelConfig,
    zs: &Var<'t>,
    t: usize,
) -> Result<ChannelOut<'t>> {
    channel_forward(b, &cfg.spatial_spec(), zs, t)
}

pub fn denoise_temporal<'t>(
    b: &Bound<'t>,
    cfg: &ModelConfig,
    zt: &Var<'t>,
    t: usize,
) -> Result<ChannelOut<'t>> {
    channel_forward(b, &cfg.temporal_spec(), zt, t)
}

/// Broadcasts `zs` over frames and `zt` over views, concatenates, and runs
/// the conditional feed-forward stack. `skip` is the noisy latent, fed in
/// through a per-frame conv; `t` modulates the hidden layer
/// multiplicatively so that zero inputs map to zero.
pub fn fuse_ffn<'t>(
    b: &Bound<'t>,
    cfg: &ModelConfig,
    zs: &Var<'t>,
    zt: &Var<'t>,
    cond: &Var<'t>,
    skip: &Var<'t>,
    t: usize,
) -> Result<Var<'t>> {
    let [v, tf, n, _, c] = cfg.latent_shape();
    let (cs, ct, f) = (
        cfg.spatial_channels,
        cfg.temporal_channels,
        cfg.fusion_hidden,
    );
    if zs.shape() != [v, n, n, cs] || zt.shape() != [tf, n, n, ct] {
        return invalid(format!(
            "fusion inputs {:?} and {:?} do not match the configuration",
            zs.shape(),
            zt.shape()
        ));
    }
    if cond.shape().len() != 2 || cond.shape()[1] != cfg.cond_dim || cond.shape()[0] == 0 {
        return invalid(format!(
            "condition {:?}, expected [n, {}]",
            cond.shape(),
            cfg.cond_dim
        ));
    }
    let s_b = zs.expand_axis(1, tf)?;
    let t_b = zt.expand_axis(0, v)?;
    let cat = Var::concat(&[s_b, t_b], 4)?;
    let frames = skip.reshape(&[v * tf, n, n, c])?;
    let skip_h = conv(b, "skip", &frames, 1)?.reshape(&[v, tf, n, n, f])?;
    let temb = b.tape().constant(timestep_embedding(t, cfg.time_dim));
    let film = linear(b, "temb", &temb)?.add_scalar(1.0);
    let h = linear(b, "cat", &cat)?.add(&skip_h)?.mul(&film)?.silu();
    let rows = h.reshape(&[v * tf * n * n, f])?;
    let q = linear(b, "q", &rows)?;
    let a = attention(&q, &linear(b, "k", cond)?, &linear(b, "v", cond)?)?;
    let rows = rows.add(&linear(b, "o", &a)?)?;
    Ok(linear(b, "out", &rows)?.reshape(&[v, tf, n, n, c])?)
}

/// Everything one forward pass produces.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut<'t> {
    pub eps: Var<'t>,
    pub spatial: ChannelOut<'t>,
    pub temporal: ChannelOut<'t>,
}

/// The three parameter groups of the student recorded on one tape.
#[derive(Clone)]
pub struct ModelBound<'t> {
    pub config: ModelConfig,
    pub spatial: Bound<'t>,
    pub temporal: Bound<'t>,
    pub fusion: Bound<'t>,
}

impl<'t> ModelBound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.spatial.tape()
    }

    pub fn forward(&self, z: &Var<'t>, t: usize, cond: &Var<'t>) -> Result<ForwardOut<'t>> {
        self.config.check_latent(&z.shape())?;
        let (zs, zt) = disentangle(&self.spatial, &self.temporal, z)?;
        let spatial = denoise_spatial(&self.spatial, &self.config, &zs, t)?;
        let temporal = denoise_temporal(&self.temporal, &self.config, &zt, t)?;
        let eps = fuse_ffn(
            &self.fusion,
            &self.config,
            &spatial.out,
            &temporal.out,
            cond,
            z,
            t,
        )?;
        Ok(ForwardOut {
            eps,
            spatial,
            temporal,
        })
    }

    /// Student feature tokens `[h*w, tap_dim]` for the spatial and temporal
    /// channels.
    pub fn taps(&self, out: &ForwardOut<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let fs = linear(&self.spatial, "proj", &tap_tokens(&out.spatial.tap)?)?;
        let ft = linear(&self.temporal, "proj", &tap_tokens(&out.temporal.tap)?)?;
        Ok((fs, ft))
    }

    pub fn null_cond(&self) -> Var<'t> {
        self.tape()
            .constant(Condition::null(self.config.cond_dim).tokens)
    }

    /// Gradients of `loss` split back into the three groups.
    pub fn grads(&self, loss: Var<'t>) -> Result<[ParamSet; 3]> {
        // a single sweep over the union, then split by prefix
        let all = self
            .spatial
            .clone()
            .with("s/", &self.temporal)
            .with("f/", &self.fusion);
        let g = all.grads(loss)?;
        let mut s = ParamSet::new();
        let mut tg = ParamSet::new();
        let mut fg = ParamSet::new();
        for (k, v) in g.iter() {
            if let Some(k) = k.strip_prefix("s/") {
                tg.insert(k, v.clone());
            } else if let Some(k) = k.strip_prefix("f/") {
                fg.insert(k, v.clone());
            } else {
                s.insert(k.clone(), v.clone());
            }
        }
        Ok([s, tg, fg])
    }
}

impl<'t> Denoiser<'t> for ModelBound<'t> {
    fn predict_eps(&self, z_t: &Var<'t>, t: usize, cond: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward(z_t, t, cond)?.eps)
    }
}

/// The student before merging: one parameter group per channel plus the
/// fusion block. Each channel group also holds its disentangler branch
/// (`dis`) and its tap projection (`proj`).
#[derive(Clone, Debug, PartialEq)]
pub struct Std4dModel {
    pub config: ModelConfig,
    pub spatial: ParamSet,
    pub temporal: ParamSet,
    pub fusion: ParamSet,
}

impl Std4dModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.latent_channels;
        let mut spatial = ParamSet::new();
        init_conv(
            &mut spatial,
            "dis",
            3,
            c,
            config.spatial_channels,
            Init::Normal,
            &mut rng,
        );
        init_channel(&mut spatial, &config.spatial_spec(), &mut rng);
        let mut temporal = ParamSet::new();
        init_conv(
            &mut temporal,
            "dis",
            3,
            c,
            config.temporal_channels,
            Init::Normal,
            &mut rng,
        );
        init_channel(&mut temporal, &config.temporal_spec(), &mut rng);
        let (f, d) = (config.fusion_hidden, config.cond_dim);
        let mut fusion = ParamSet::new();
        init_linear(
            &mut fusion,
            "cat",
            config.spatial_channels + config.temporal_channels,
            f,
            Init::Normal,
            &mut rng,
        );
        init_conv(&mut fusion, "skip", 3, c, f, Init::Normal, &mut rng);
        init_linear(
            &mut fusion,
            "temb",
            config.time_dim,
            f,
            Init::Zero,
            &mut rng,
        );
        init_linear(&mut fusion, "q", f, d, Init::Normal, &mut rng);
        init_linear(&mut fusion, "k", d, d, Init::Normal, &mut rng);
        init_linear(&mut fusion, "v", d, d, Init::Normal, &mut rng);
        init_linear(&mut fusion, "o", d, f, Init::Zero, &mut rng);
        init_linear(&mut fusion, "out", f, c, Init::Normal, &mut rng);
        Ok(Self {
            config,
            spatial,
            temporal,
            fusion,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelBound<'t> {
        ModelBound {
            config: self.config,
            spatial: self.spatial.bind(tape),
            temporal: self.temporal.bind(tape),
            fusion: self.fusion.bind(tape),
        }
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> ModelBound<'t> {
        ModelBound {
            config: self.config,
            spatial: self.spatial.bind_frozen(tape),
            temporal: self.temporal.bind_frozen(tape),
            fusion: self.fusion.bind_frozen(tape),
        }
    }

    /// All groups in one set under `spatial.`, `temporal.`, `fusion.`.
    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("spatial.", &self.spatial);
        p.extend_prefixed("temporal.", &self.temporal);
        p.extend_prefixed("fusion.", &self.fusion);
        p
    }

    pub fn from_params(config: ModelConfig, params: &ParamSet) -> Result<Self> {
        let m = Self {
            config,
            spatial: params.strip_prefix("spatial."),
            temporal: params.strip_prefix("temporal."),
            fusion: params.strip_prefix("fusion."),
        };
        let template = Self::new(config, 0)?;
        check_layout("spatial", &m.spatial, &template.spatial)?;
        check_layout("temporal", &m.temporal, &template.temporal)?;
        check_layout("fusion", &m.fusion, &template.fusion)?;
        Ok(m)
    }

    /// Applies per-group gradients with one optimizer.
    pub fn apply(&mut self, opt: &mut autodiff::Adam, grads: &[ParamSet; 3]) -> Result<()> {
        let mut all = self.to_params();
        let mut g = ParamSet::new();
        g.extend_prefixed("spatial.", &grads[0]);
        g.extend_prefixed("temporal.", &grads[1]);
        g.extend_prefixed("fusion.", &grads[2]);
        opt.step(&mut all, &g)?;
        *self = Self {
            config: self.config,
            spatial: all.strip_prefix("spatial."),
            temporal: all.strip_prefix("temporal."),
            fusion: all.strip_prefix("fusion."),
        };
        Ok(())
    }

    /// Noise prediction outside any training tape.
    pub fn predict(&self, z: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let mb = self.bind_frozen(&tape);
        let out = mb.forward(&tape.constant(z.clone()), t, &tape.constant(cond.clone()))?;
        Ok((*out.eps.value()).clone())
    }
}

fn check_layout(group: &str, got: &ParamSet, want: &ParamSet) -> Result<()> {
    if got.len() != want.len() {
        return invalid(format!(
            "{group}: {} tensors, expected {}",
            got.len(),
            want.len()
        ));
    }
    for (name, w) in want.iter() {
        let g = got
            .get(name)
            .map_err(|_| Error::Invalid(format!("{group}: missing {name}")))?;
        if g.shape() != w.shape() {
            return invalid(format!(
                "{group}.{name}: shape {:?}, expected {:?}",
                g.shape(),
                w.shape()
            ));
        }
    }
    Ok(())
}

/// The merged denoiser: one parameter set, the same forward as the
/// composed disentangle, channels, fusion pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedDenoiser {
    pub config: ModelConfig,
    pub params: ParamSet,
}

pub fn merge_unified(
    config: ModelConfig,
    spatial: &ParamSet,
    temporal: &ParamSet,
    fusion: &ParamSet,
) -> Result<UnifiedDenoiser> {
    config.validate()?;
    let template = Std4dModel::new(config, 0)?;
    check_layout("spatial", spatial, &template.spatial)?;
    check_layout("temporal", temporal, &template.temporal)?;
    check_layout("fusion", fusion, &template.fusion)?;
    let m = Std4dModel {
        config,
        spatial: spatial.clone(),
        temporal: temporal.clone(),
        fusion: fusion.clone(),
    };
    Ok(UnifiedDenoiser {
        config,
        params: m.to_params(),
    })
}

impl UnifiedDenoiser {
    pub fn from_model(m: &Std4dModel) -> Result<Self> {
        merge_unified(m.config, &m.spatial, &m.temporal, &m.fusion)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        Std4dModel::from_params(config, &params)?;
        Ok(Self { config, params })
    }

    fn scoped<'t>(&self, all: Bound<'t>) -> ModelBound<'t> {
        ModelBound {
            config: self.config,
            spatial: all.scope("spatial."),
            temporal: all.scope("temporal."),
            fusion: all.scope("fusion."),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> (Bound<'t>, ModelBound<'t>) {
        let all = self.params.bind(tape);
        (all.clone(), self.scoped(all))
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> ModelBound<'t> {
        self.scoped(self.params.bind_frozen(tape))
    }

    pub fn predict(&self, z: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let mb = self.bind_frozen(&tape);
        let out = mb.forward(&tape.constant(z.clone()), t, &tape.constant(cond.clone()))?;
        Ok((*out.eps.value()).clone())
    }
}
