//! Explicit Gaussians, a differentiable splat renderer, the HexPlane
//! deformation field with prior attention, and the construction losses.

mod construct;
mod hexplane;
mod raster;

use autodiff::{ParamSet, Tape, Tensor, Var};

use crate::{invalid, Error, Result};

pub use construct::{
    construct_4d, frame_time, init_anchors, loss_dep, loss_gs, loss_hex, ConstructConfig,
    ConstructOutput, ConstructPhase, ConstructRecord, GsWeights,
};
pub use hexplane::{
    deform, deform_var, hexplane_query, hexplane_query_var, st_hexplane_attend, DeformField,
    HexPlaneConfig, PriorBank, PLANES,
};
pub use raster::{MAX_ALPHA, NEAR_PLANE};

/// Stored log-scales are kept inside this range.
const LOG_SCALE_RANGE: (f64, f64) = (-9.0, 2.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3D {
    pub position: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian3D {
    /// Validates the attributes and normalizes the quaternion.
    pub fn new(
        position: [f64; 3],
        rotation: [f64; 4],
        scale: [f64; 3],
        opacity: f64,
        color: [f64; 3],
    ) -> Result<Self> {
        let n = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return invalid(format!("rotation {rotation:?} cannot be normalized"));
        }
        if scale.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return invalid(format!("scale {scale:?} must be positive"));
        }
        if !(0.0..=1.0).contains(&opacity) || color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return invalid("opacity and color must lie in [0, 1]");
        }
        if position.iter().any(|p| !p.is_finite()) {
            return invalid("position must be finite");
        }
        Ok(Self {
            position,
            rotation: rotation.map(|v| v / n),
            scale,
            opacity,
            color,
        })
    }

    /// An isotropic, unrotated Gaussian.
    pub fn isotropic(
        position: [f64; 3],
        scale: f64,
        opacity: f64,
        color: [f64; 3],
    ) -> Result<Self> {
        Self::new(position, [1.0, 0.0, 0.0, 0.0], [scale; 3], opacity, color)
    }
}

/// Column-stored Gaussians. Scale is kept as its logarithm.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub position: Tensor,
    pub rotation: Tensor,
    pub log_scale: Tensor,
    pub opacity: Tensor,
    pub color: Tensor,
}

impl GaussianSet {
    pub fn new(gs: &[Gaussian3D]) -> Result<Self> {
        if gs.is_empty() {
            return invalid("a Gaussian set needs at least one Gaussian");
        }
        let n = gs.len();
        let flat = |f: &dyn Fn(&Gaussian3D) -> Vec<f64>| gs.iter().flat_map(f).collect::<Vec<_>>();
        Ok(Self {
            position: Tensor::new([n, 3], flat(&|g| g.position.to_vec()))?,
            rotation: Tensor::new([n, 4], flat(&|g| g.rotation.to_vec()))?,
            log_scale: Tensor::new([n, 3], flat(&|g| g.scale.iter().map(|s| s.ln()).collect()))?,
            opacity: Tensor::new([n], flat(&|g| vec![g.opacity]))?,
            color: Tensor::new([n, 3], flat(&|g| g.color.to_vec()))?,
        })
    }

    pub fn len(&self) -> usize {
        self.opacity.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Option<Gaussian3D> {
        if i >= self.len() {
            return None;
        }
        let row = |t: &Tensor, w: usize| t.data()[i * w..(i + 1) * w].to_vec();
        let p = row(&self.position, 3);
        let q = row(&self.rotation, 4);
        let s = row(&self.log_scale, 3);
        let c = row(&self.color, 3);
        Some(Gaussian3D {
            position: [p[0], p[1], p[2]],
            rotation: [q[0], q[1], q[2], q[3]],
            scale: [s[0].exp(), s[1].exp(), s[2].exp()],
            opacity: self.opacity.data()[i],
            color: [c[0], c[1], c[2]],
        })
    }

    pub fn to_vec(&self) -> Vec<Gaussian3D> {
        (0..self.len()).filter_map(|i| self.get(i)).collect()
    }

    pub fn to_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("position", self.position.clone());
        ps.insert("rotation", self.rotation.clone());
        ps.insert("log_scale", self.log_scale.clone());
        ps.insert("opacity", self.opacity.clone());
        ps.insert("color", self.color.clone());
        ps
    }

    pub fn from_params(ps: &ParamSet) -> Result<Self> {
        let set = Self {
            position: ps.get("position")?.clone(),
            rotation: ps.get("rotation")?.clone(),
            log_scale: ps.get("log_scale")?.clone(),
            opacity: ps.get("opacity")?.clone(),
            color: ps.get("color")?.clone(),
        };
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let ok = n > 0
            && self.opacity.shape() == [n]
            && self.position.shape() == [n, 3]
            && self.rotation.shape() == [n, 4]
            && self.log_scale.shape() == [n, 3]
            && self.color.shape() == [n, 3];
        if !ok {
            return Err(Error::Format("inconsistent Gaussian set shapes".into()));
        }
        Ok(())
    }

    /// Restores the invariants after an unconstrained update: unit
    /// quaternions, opacity and color in `[0, 1]`, bounded log-scale.
    pub fn project(&mut self) {
        for q in self.rotation.data_mut().chunks_mut(4) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
        for v in self
            .opacity
            .data_mut()
            .iter_mut()
            .chain(self.color.data_mut())
        {
            *v = v.clamp(0.0, 1.0);
        }
        for v in self.log_scale.data_mut() {
            *v = v.clamp(LOG_SCALE_RANGE.0, LOG_SCALE_RANGE.1);
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> GaussianVars<'t> {
        GaussianVars {
            position: tape.param(self.position.clone()),
            rotation: tape.param(self.rotation.clone()),
            log_scale: tape.param(self.log_scale.clone()),
            opacity: tape.param(self.opacity.clone()),
            color: tape.param(self.color.clone()),
        }
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> GaussianVars<'t> {
        GaussianVars {
            position: tape.constant(self.position.clone()),
            rotation: tape.constant(self.rotation.clone()),
            log_scale: tape.constant(self.log_scale.clone()),
            opacity: tape.constant(self.opacity.clone()),
            color: tape.constant(self.color.clone()),
        }
    }
}

/// A Gaussian set on a tape.
#[derive(Clone, Copy)]
pub struct GaussianVars<'t> {
    pub position: Var<'t>,
    pub rotation: Var<'t>,
    pub log_scale: Var<'t>,
    pub opacity: Var<'t>,
    pub color: Var<'t>,
}

impl<'t> GaussianVars<'t> {
    /// Reads a set bound through [`GaussianSet::to_params`].
    pub fn from_bound(b: &autodiff::Bound<'t>) -> Result<Self> {
        Ok(Self {
            position: b.get("position")?,
            rotation: b.get("rotation")?,
            log_scale: b.get("log_scale")?,
            opacity: b.get("opacity")?,
            color: b.get("color")?,
        })
    }

    pub fn len(&self) -> usize {
        self.opacity.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradients in [`GaussianSet::to_params`] naming.
    pub fn grads(&self, loss: Var<'t>) -> Result<ParamSet> {
        let tape = loss.tape();
        let vars = [
            self.position,
            self.rotation,
            self.log_scale,
            self.opacity,
            self.color,
        ];
        let g = tape.grad(loss, &vars)?;
        let mut ps = ParamSet::new();
        for (name, t) in ["position", "rotation", "log_scale", "opacity", "color"]
            .into_iter()
            .zip(g)
        {
            ps.insert(name, t);
        }
        Ok(ps)
    }

    /// Current values as a plain set, quaternions normalized.
    pub fn snapshot(&self) -> GaussianSet {
        let mut set = GaussianSet {
            position: (*self.position.value()).clone(),
            rotation: (*self.rotation.value()).clone(),
            log_scale: (*self.log_scale.value()).clone(),
            opacity: (*self.opacity.value()).clone(),
            color: (*self.color.value()).clone(),
        };
        for q in set.rotation.data_mut().chunks_mut(4) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.iter_mut().for_each(|v| *v /= n);
        }
        set
    }
}

/// Pinhole camera on an orbit around the origin, looking at the origin
/// with world `+y` up. Camera axes are `x` right, `y` down, `z` forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Square image with focal length `1.4 · size` and centered principal
    /// point.
    pub fn looking_at_origin(
        azimuth: f64,
        elevation: f64,
        radius: f64,
        size: usize,
    ) -> Result<Self> {
        let cam = Self {
            azimuth,
            elevation,
            radius,
            focal: 1.4 * size as f64,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// `views` cameras at uniform azimuths starting from 0.
    pub fn orbit(views: usize, elevation: f64, radius: f64, size: usize) -> Result<Vec<Self>> {
        (0..views)
            .map(|v| {
                let az = 2.0 * std::f64::consts::PI * v as f64 / views as f64;
                Self::looking_at_origin(az, elevation, radius, size)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return invalid(format!("camera radius {} must be positive", self.radius));
        }
        if self.width < 8 || self.height < 8 {
            return invalid(format!("image {}x{} is below 8x8", self.width, self.height));
        }
        if !(self.focal > 0.0) {
            return invalid("focal length must be positive");
        }
        Ok(())
    }

    pub fn eye(&self) -> [f64; 3] {
        let (ce, se) = (self.elevation.cos(), self.elevation.sin());
        [
            self.radius * ce * self.azimuth.sin(),
            self.radius * se,
            self.radius * ce * self.azimuth.cos(),
        ]
    }

    /// World-to-camera rotation; rows are the right, down and forward axes.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let e = self.eye();
        let f = normalize([-e[0], -e[1], -e[2]]);
        let r = normalize(cross(f, [0.0, 1.0, 0.0]));
        let d = cross(f, r);
        [r, d, f]
    }

    /// Camera-space coordinates of a world point.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = self.eye();
        let w = self.rotation();
        let d = [p[0] - e[0], p[1] - e[1], p[2] - e[2]];
        [0, 1, 2].map(|i| w[i][0] * d[0] + w[i][1] * d[1] + w[i][2] * d[2])
    }

    /// World-space ray direction (unit) through pixel coordinates `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        let w = self.rotation();
        let c = [(u - self.cx) / self.focal, (v - self.cy) / self.focal, 1.0];
        normalize([0, 1, 2].map(|j| w[0][j] * c[0] + w[1][j] * c[1] + w[2][j] * c[2]))
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|v| v / n)
}

/// Screen-space footprint added to every projected covariance, in pixels².
pub const DILATION: f64 = 0.3;

/// Rendered image, expected depth and accumulated alpha.
#[derive(Clone, Copy)]
pub struct RenderOut<'t> {
    pub rgb: Var<'t>,
    pub depth: Var<'t>,
    pub alpha: Var<'t>,
}

fn col<'t>(x: &Var<'t>, j: usize) -> Result<Var<'t>> {
    let n = x.shape()[0];
    Ok(x.slice(1, j, 1)?.reshape(&[n])?)
}

fn stack_cols<'t>(cols: &[Var<'t>]) -> Result<Var<'t>> {
    let n = cols[0].shape()[0];
    let parts = cols
        .iter()
        .map(|c| c.reshape(&[n, 1]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Var::concat(&parts, 1)?)
}

/// Rotation matrices `[N, 3, 3]` of (not necessarily unit) quaternions.
pub fn rotation_matrices<'t>(q: &Var<'t>) -> Result<Var<'t>> {
    let n = q.shape()[0];
    let norm = q.square().sum_axis(1)?.sqrt();
    let qn = q.div(&norm.expand_axis(1, 4)?)?;
    let (w, x, y, z) = (col(&qn, 0)?, col(&qn, 1)?, col(&qn, 2)?, col(&qn, 3)?);
    let two = |a: &Var<'t>, b: &Var<'t>| -> Result<Var<'t>> { Ok(a.mul(b)?.scale(2.0)) };
    let one_minus = |a: &Var<'t>, b: &Var<'t>| -> Result<Var<'t>> {
        Ok(a.square().add(&b.square())?.scale(-2.0).add_scalar(1.0))
    };
    let entries = [
        one_minus(&y, &z)?,
        two(&x, &y)?.sub(&two(&w, &z)?)?,
        two(&x, &z)?.add(&two(&w, &y)?)?,
        two(&x, &y)?.add(&two(&w, &z)?)?,
        one_minus(&x, &z)?,
        two(&y, &z)?.sub(&two(&w, &x)?)?,
        two(&x, &z)?.sub(&two(&w, &y)?)?,
        two(&y, &z)?.add(&two(&w, &x)?)?,
        one_minus(&x, &y)?,
    ];
    Ok(stack_cols(&entries)?.reshape(&[n, 3, 3])?)
}

/// Screen-space means `[N, 2]`, covariances `[N, 3]` as `(a, b, c)` of
/// `[[a, b], [b, c]]`, and camera depth `[N]` clamped to the near plane,
/// plus the visibility of each Gaussian.
pub(crate) fn project<'t>(
    g: &GaussianVars<'t>,
    cam: &Camera,
) -> Result<(Var<'t>, Var<'t>, Var<'t>, Vec<bool>)> {
    let tape = g.position.tape();
    let n = g.len();
    let w = cam.rotation();
    let wt = Tensor::from_fn([3, 3], |i| w[i % 3][i / 3]);
    let eye = tape.constant(Tensor::new([3], cam.eye().to_vec())?);
    let pc = g.position.sub(&eye)?.matmul(&tape.constant(wt))?;
    let (x, y, z_raw) = (col(&pc, 0)?, col(&pc, 1)?, col(&pc, 2)?);
    let visible = z_raw
        .value()
        .data()
        .iter()
        .map(|&z| z >= NEAR_PLANE)
        .collect();
    let z = z_raw.clamp(NEAR_PLANE, f64::INFINITY);
    let inv_z = z.powf(-1.0);
    let u = x.mul(&inv_z)?.scale(cam.focal).add_scalar(cam.cx);
    let v = y.mul(&inv_z)?.scale(cam.focal).add_scalar(cam.cy);
    let mean = stack_cols(&[u, v])?;

    let rot = rotation_matrices(&g.rotation)?;
    let s = g.log_scale.exp().expand_axis(1, 3)?;
    let m = rot.mul(&s)?;
    let wm = tape
        .constant(Tensor::from_fn([n, 3, 3], |i| w[(i / 3) % 3][i % 3]))
        .bmm(&m)?;
    let fz = inv_z.scale(cam.focal);
    let zero = tape.constant(Tensor::zeros([n]));
    let jx = x.mul(&inv_z.square())?.scale(-cam.focal);
    let jy = y.mul(&inv_z.square())?.scale(-cam.focal);
    let j = stack_cols(&[fz, zero, jx, zero, fz, jy])?.reshape(&[n, 2, 3])?;
    let a = j.bmm(&wm)?;
    let cov = a.bmm(&a.permute(&[0, 2, 1])?)?.reshape(&[n, 4])?;
    let cov = stack_cols(&[
        col(&cov, 0)?.add_scalar(DILATION),
        col(&cov, 1)?,
        col(&cov, 3)?.add_scalar(DILATION),
    ])?;
    Ok((mean, cov, z, visible))
}

/// Splat-renders `g` from `cam` over a constant `background`.
///
/// Gaussians closer than [`NEAR_PLANE`] are skipped; with none in front of
/// the camera the result is the background with zero alpha and depth.
pub fn render<'t>(
    g: &GaussianVars<'t>,
    cam: &Camera,
    background: [f64; 3],
) -> Result<RenderOut<'t>> {
    cam.validate()?;
    if g.is_empty() {
        return invalid("cannot render an empty Gaussian set");
    }
    let (mean, cov, depth, visible) = project(g, cam)?;
    let out = raster::rasterize(
        &mean, &cov, &depth, &g.opacity, &g.color, visible, cam, background,
    )?;
    let (h, w) = (cam.height, cam.width);
    Ok(RenderOut {
        rgb: out.slice(2, 0, 3)?,
        depth: out.slice(2, 3, 1)?.reshape(&[h, w])?,
        alpha: out.slice(2, 4, 1)?.reshape(&[h, w])?,
    })
}

/// [`render`] without gradients: `([H, W, 3], [H, W], [H, W])`.
pub fn render_set(
    set: &GaussianSet,
    cam: &Camera,
    background: [f64; 3],
) -> Result<(Tensor, Tensor, Tensor)> {
    let tape = Tape::new();
    let out = render(&set.bind_frozen(&tape), cam, background)?;
    Ok((
        (*out.rgb.value()).clone(),
        (*out.depth.value()).clone(),
        (*out.alpha.value()).clone(),
    ))
}
