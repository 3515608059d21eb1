//! Six-plane factorization of the `(x, y, z, t)` deformation field, prior
//! attention, and the deformation heads.

use autodiff::{attention, Bound, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{col, stack_cols, Gaussian3D, GaussianSet, GaussianVars};
use crate::nn::{init_linear, linear, Init};
use crate::{invalid, Error, Result};

/// Axis pairs of the six planes; axis 3 is time.
pub const PLANES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HexPlaneConfig {
    pub resolution: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    /// Number of fusion layers, SiLU between consecutive layers.
    pub fusion_depth: usize,
    pub prior_dim: usize,
    /// Scene coordinates in `[-bound, bound]³` map onto the unit cube.
    pub bound: f64,
}

impl Default for HexPlaneConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            feature_dim: 8,
            hidden: 16,
            fusion_depth: 2,
            prior_dim: 16,
            bound: 1.5,
        }
    }
}

impl HexPlaneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2
            || self.feature_dim == 0
            || self.hidden == 0
            || self.fusion_depth == 0
        {
            return Err(Error::Config(format!(
                "degenerate HexPlane config {self:?}"
            )));
        }
        if !(self.bound > 0.0) {
            return Err(Error::Config("HexPlane bound must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen spatial and temporal prior tokens. An empty bank disables the
/// prior attention entirely.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBank {
    pub o_s: Tensor,
    pub o_t: Tensor,
}

impl PriorBank {
    pub fn new(o_s: Tensor, o_t: Tensor) -> Result<Self> {
        if o_s.rank() != 2 || o_t.rank() != 2 || o_s.shape()[1] != o_t.shape()[1] {
            return invalid(format!(
                "prior tokens {:?} and {:?} must be [N, d] of one width",
                o_s.shape(),
                o_t.shape()
            ));
        }
        Ok(Self { o_s, o_t })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            o_s: Tensor::zeros([0, dim]),
            o_t: Tensor::zeros([0, dim]),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.o_s.shape()[0] == 0 || self.o_t.shape()[0] == 0
    }

    pub fn dim(&self) -> usize {
        self.o_s.shape()[1]
    }
}

/// HexPlane grids, fusion MLP, query projection and zero-initialized heads.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformField {
    pub config: HexPlaneConfig,
    pub with_priors: bool,
    pub params: ParamSet,
}

impl DeformField {
    /// Spatial planes start uniform in `[0.5, 1.5]`, time planes at one, so
    /// the initial features do not depend on time.
    pub fn new(config: HexPlaneConfig, with_priors: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, d) = (config.resolution, config.feature_dim);
        let mut ps = ParamSet::new();
        for (k, &(_, b)) in PLANES.iter().enumerate() {
            let plane = if b == 3 {
                Tensor::ones([r, r, d])
            } else {
                Tensor::from_fn([r, r, d], |_| rng.random_range(0.5..1.5))
            };
            ps.insert(format!("plane.{k}"), plane);
        }
        for l in 0..config.fusion_depth {
            let din = if l == 0 { d } else { config.hidden };
            init_linear(
                &mut ps,
                &format!("fuse.{l}"),
                din,
                config.hidden,
                Init::Normal,
                &mut rng,
            );
        }
        let mut head_in = config.hidden;
        if with_priors {
            init_linear(
                &mut ps,
                "query",
                config.hidden,
                config.prior_dim,
                Init::Normal,
                &mut rng,
            );
            head_in += 2 * config.prior_dim;
        }
        init_linear(&mut ps, "head.dp", head_in, 3, Init::Zero, &mut rng);
        init_linear(&mut ps, "head.dr", head_in, 4, Init::Zero, &mut rng);
        init_linear(&mut ps, "head.ds", head_in, 3, Init::Zero, &mut rng);
        Ok(Self {
            config,
            with_priors,
            params: ps,
        })
    }

    pub fn from_params(config: HexPlaneConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let with_priors = params.contains("query.w");
        let reference = Self::new(config, with_priors, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Format(format!("deformation field lacks {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format(
                "deformation field has unexpected tensors".into(),
            ));
        }
        Ok(Self {
            config,
            with_priors,
            params,
        })
    }

    /// Deforms every Gaussian of `set` to time `t`.
    pub fn deform_set(&self, set: &GaussianSet, priors: &PriorBank, t: f64) -> Result<GaussianSet> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let g = deform_var(&b, self, &set.bind_frozen(&tape), priors, t)?;
        Ok(g.snapshot())
    }
}

/// HexPlane features `[N, hidden]` at anchors `xyz: [N, 3]` and time `t`.
pub fn hexplane_query_var<'t>(
    b: &Bound<'t>,
    cfg: &HexPlaneConfig,
    xyz: &Var<'t>,
    t: f64,
) -> Result<Var<'t>> {
    let s = xyz.shape();
    if s.len() != 2 || s[1] != 3 {
        return invalid(format!("query points must be [N, 3], got {s:?}"));
    }
    if !t.is_finite() || xyz.value().data().iter().any(|v| !v.is_finite()) {
        return invalid("query coordinates must be finite");
    }
    let n = s[0];
    let tape = b.tape();
    let unit = xyz.add_scalar(cfg.bound).scale(0.5 / cfg.bound);
    let axes = [
        col(&unit, 0)?,
        col(&unit, 1)?,
        col(&unit, 2)?,
        tape.constant(Tensor::full([n], t)),
    ];
    let mut feat: Option<Var<'t>> = None;
    for (k, &(i, j)) in PLANES.iter().enumerate() {
        let coords = stack_cols(&[axes[i], axes[j]])?;
        let f = Var::bilinear(&b.get(&format!("plane.{k}"))?, &coords)?;
        feat = Some(match feat {
            None => f,
            Some(acc) => acc.mul(&f)?,
        });
    }
    let mut h = feat.expect("six planes");
    for l in 0..cfg.fusion_depth {
        if l > 0 {
            h = h.silu();
        }
        h = linear(b, &format!("fuse.{l}"), &h)?;
    }
    Ok(h)
}

/// Single-point query of a field.
pub fn hexplane_query(field: &DeformField, x: f64, y: f64, z: f64, t: f64) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let b = field.params.bind_frozen(&tape);
    let p = tape.constant(Tensor::new([1, 3], vec![x, y, z])?);
    Ok(hexplane_query_var(&b, &field.config, &p, t)?
        .value()
        .data()
        .to_vec())
}

/// Cross-attention of the projected feature onto each prior bank:
/// `(Attn(q, O_s, O_s), Attn(q, O_t, O_t))`.
pub fn st_hexplane_attend<'t>(
    b: &Bound<'t>,
    d_feat: &Var<'t>,
    priors: &PriorBank,
) -> Result<(Var<'t>, Var<'t>)> {
    if priors.is_empty() {
        return invalid("prior attention needs a non-empty prior bank");
    }
    let tape = b.tape();
    let q = linear(b, "query", d_feat)?;
    if q.shape()[1] != priors.dim() {
        return invalid(format!(
            "query width {} does not match prior width {}",
            q.shape()[1],
            priors.dim()
        ));
    }
    let os = tape.constant(priors.o_s.clone());
    let ot = tape.constant(priors.o_t.clone());
    Ok((attention(&q, &os, &os)?, attention(&q, &ot, &ot)?))
}

/// Hamilton product `a ⊗ b` of `[N, 4]` quaternions.
fn quat_mul<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let (aw, ax, ay, az) = (col(a, 0)?, col(a, 1)?, col(a, 2)?, col(a, 3)?);
    let (bw, bx, by, bz) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);
    let w = aw
        .mul(&bw)?
        .sub(&ax.mul(&bx)?)?
        .sub(&ay.mul(&by)?)?
        .sub(&az.mul(&bz)?)?;
    let x = aw
        .mul(&bx)?
        .add(&ax.mul(&bw)?)?
        .add(&ay.mul(&bz)?)?
        .sub(&az.mul(&by)?)?;
    let y = aw
        .mul(&by)?
        .sub(&ax.mul(&bz)?)?
        .add(&ay.mul(&bw)?)?
        .add(&az.mul(&bx)?)?;
    let z = aw
        .mul(&bz)?
        .add(&ax.mul(&by)?)?
        .sub(&ay.mul(&bx)?)?
        .add(&az.mul(&bw)?)?;
    stack_cols(&[w, x, y, z])
}

/// Deformed Gaussians at time `t`: `p + Δp`, `q_Δ ⊗ q`, `log s + Δs`,
/// with `q_Δ = normalize((1, 0, 0, 0) + r)`. The composed rotation is left
/// unnormalized on the tape; the renderer normalizes.
pub fn deform_var<'t>(
    b: &Bound<'t>,
    field: &DeformField,
    g: &GaussianVars<'t>,
    priors: &PriorBank,
    t: f64,
) -> Result<GaussianVars<'t>> {
    let tape = b.tape();
    let n = g.len();
    let feat = hexplane_query_var(b, &field.config, &g.position, t)?;
    let input = match (field.with_priors, priors.is_empty()) {
        (true, false) => {
            let (vs, vt) = st_hexplane_attend(b, &feat, priors)?;
            Var::concat(&[feat, vs, vt], 1)?
        }
        (false, true) => feat,
        (true, true) => return invalid("field expects priors but the prior bank is empty"),
        (false, false) => return invalid("field was built without prior attention"),
    };
    let dp = linear(b, "head.dp", &input)?;
    let dr = linear(b, "head.dr", &input)?;
    let ds = linear(b, "head.ds", &input)?;
    if [&dp, &dr, &ds].iter().any(|v| !v.value().is_finite()) {
        return Err(Error::Numerical(
            "deformation head produced a non-finite value".into(),
        ));
    }
    let unit = tape.constant(Tensor::from_fn(
        [n, 4],
        |i| if i % 4 == 0 { 1.0 } else { 0.0 },
    ));
    let qd = dr.add(&unit)?;
    let qd = qd.div(&qd.square().sum_axis(1)?.sqrt().expand_axis(1, 4)?)?;
    Ok(GaussianVars {
        position: g.position.add(&dp)?,
        rotation: quat_mul(&qd, &g.rotation)?,
        log_scale: g.log_scale.add(&ds)?,
        opacity: g.opacity,
        color: g.color,
    })
}

/// Deforms one Gaussian; the returned quaternion is normalized.
pub fn deform(
    g: &Gaussian3D,
    field: &DeformField,
    priors: &PriorBank,
    t: f64,
) -> Result<Gaussian3D> {
    let set = GaussianSet::new(std::slice::from_ref(g))?;
    Ok(field
        .deform_set(&set, priors, t)?
        .get(0)
        .expect("one Gaussian"))
}
