//! Distributional transfer from a frozen multi-view teacher and a frozen
//! video teacher into the student's spatial and temporal channels.
//!
//! A joint Gaussian kernel over the deviation of teacher tokens from their
//! batch means gives one logit per token; the logits weight a residual
//! mixture of the teacher tokens, and the student taps are regressed onto
//! the result.

mod stage;
pub mod teacher;

pub use stage::{
    orster_validation_loss, run_orster_stage, OrsterConfig, OrsterRecord, OrsterState,
};
pub use teacher::{
    pretrain_teacher, pretrain_teacher_until, teacher_loss, Teacher, TeacherKind,
    TeacherTrainConfig,
};

use autodiff::{Bound, ParamSet, Tensor, Var};

use crate::{invalid, Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    pub sigma_s: f64,
    pub sigma_t: f64,
    pub sigma_st: f64,
    pub alpha: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            sigma_s: 1.0,
            sigma_t: 1.0,
            sigma_st: 1.0,
            alpha: 0.0,
        }
    }
}

impl KernelParams {
    /// Floors the scales and clamps `|alpha| <= sigma_st^2 / (sigma_s sigma_t)`,
    /// so the kernel's quadratic form is positive semidefinite.
    pub fn project(self) -> Self {
        let floor = |v: f64| {
            if v.is_nan() {
                SIGMA_FLOOR
            } else {
                v.max(SIGMA_FLOOR)
            }
        };
        let (s, t, st) = (
            floor(self.sigma_s),
            floor(self.sigma_t),
            floor(self.sigma_st),
        );
        let bound = st * st / (s * t);
        let alpha = if self.alpha.is_nan() {
            0.0
        } else {
            self.alpha.clamp(-bound, bound)
        };
        Self {
            sigma_s: s,
            sigma_t: t,
            sigma_st: st,
            alpha,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.project() == *self
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("sigma_s", Tensor::scalar(self.sigma_s));
        p.insert("sigma_t", Tensor::scalar(self.sigma_t));
        p.insert("sigma_st", Tensor::scalar(self.sigma_st));
        p.insert("alpha", Tensor::scalar(self.alpha));
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(Self {
            sigma_s: p.get("sigma_s")?.item()?,
            sigma_t: p.get("sigma_t")?.item()?,
            sigma_st: p.get("sigma_st")?.item()?,
            alpha: p.get("alpha")?.item()?,
        })
    }
}

/// Batch means of the spatial and temporal teacher tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMeans {
    pub g_s: Vec<f64>,
    pub g_t: Vec<f64>,
}

impl FeatureMeans {
    /// `f_s`, `f_t`: `[N, d]` token matrices over the current batch.
    pub fn from_batch(f_s: &Tensor, f_t: &Tensor) -> Result<Self> {
        if f_s.rank() != 2 || f_s.shape() != f_t.shape() || f_s.shape()[0] == 0 {
            return invalid(format!(
                "token batches {:?} and {:?}",
                f_s.shape(),
                f_t.shape()
            ));
        }
        Ok(Self {
            g_s: column_mean(f_s),
            g_t: column_mean(f_t),
        })
    }
}

fn column_mean(f: &Tensor) -> Vec<f64> {
    let (n, d) = (f.shape()[0], f.shape()[1]);
    let mut g = vec![0.0; d];
    for row in f.data().chunks(d) {
        for (a, v) in g.iter_mut().zip(row) {
            *a += v;
        }
    }
    g.iter_mut().for_each(|v| *v /= n as f64);
    g
}

/// Kernel value without the feasibility projection.
pub fn kernel_eval_raw(
    f_s: &[f64],
    f_t: &[f64],
    means: &FeatureMeans,
    p: &KernelParams,
) -> Result<f64> {
    let d = f_s.len();
    if f_t.len() != d || means.g_s.len() != d || means.g_t.len() != d {
        return invalid("kernel_eval: token widths differ");
    }
    if f_s
        .iter()
        .chain(f_t)
        .chain(&means.g_s)
        .chain(&means.g_t)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numerical("kernel_eval: non-finite input".into()));
    }
    let (mut qs, mut qt, mut cross) = (0.0, 0.0, 0.0);
    for i in 0..d {
        let ds = f_s[i] - means.g_s[i];
        let dt = f_t[i] - means.g_t[i];
        qs += ds * ds;
        qt += dt * dt;
        cross += ds * dt;
    }
    let e = qs / (p.sigma_s * p.sigma_s)
        + qt / (p.sigma_t * p.sigma_t)
        + 2.0 * p.alpha * cross / (p.sigma_st * p.sigma_st);
    Ok((-0.5 * e).exp())
}

/// Joint spatial-temporal Gaussian kernel of one token pair, after
/// projecting the parameters onto the feasible set.
pub fn kernel_eval(
    f_s: &[f64],
    f_t: &[f64],
    means: &FeatureMeans,
    p: &KernelParams,
) -> Result<f64> {
    kernel_eval_raw(f_s, f_t, means, &p.project())
}

/// Taped kernel over token batches `[N, d]`; `g_s`, `g_t` are `[d]` and
/// `p` holds scalar `sigma_s`, `sigma_t`, `sigma_st`, `alpha`. Returns `[N]`.
pub fn kernel_eval_var<'t>(
    f_s: &Var<'t>,
    f_t: &Var<'t>,
    g_s: &Var<'t>,
    g_t: &Var<'t>,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    if f_s.shape() != f_t.shape() || f_s.shape().len() != 2 {
        return invalid(format!(
            "kernel tokens {:?} and {:?}",
            f_s.shape(),
            f_t.shape()
        ));
    }
    let ds = f_s.sub(g_s)?;
    let dt = f_t.sub(g_t)?;
    let qs = ds.square().sum_axis(1)?.div(&p.get("sigma_s")?.square())?;
    let qt = dt.square().sum_axis(1)?.div(&p.get("sigma_t")?.square())?;
    let cross = ds
        .mul(&dt)?
        .sum_axis(1)?
        .mul(&p.get("alpha")?.scale(2.0))?
        .div(&p.get("sigma_st")?.square())?;
    Ok(qs.add(&qt)?.add(&cross)?.scale(-0.5).exp())
}

/// Kernel-weighted residual attention: row `i` is `f_i + sum_j w_j f_j`
/// with `w = softmax(kappa / temperature)`.
pub fn spt_attn<'t>(f: &Var<'t>, kappa: &Var<'t>, temperature: &Var<'t>) -> Result<Var<'t>> {
    let s = f.shape();
    if s.len() != 2 || s[0] == 0 {
        return invalid(format!(
            "kernel attention needs [N >= 1, d] tokens, got {s:?}"
        ));
    }
    if kappa.shape() != [s[0]] {
        return invalid(format!("kappa {:?} for {} tokens", kappa.shape(), s[0]));
    }
    let w = kappa.div(temperature)?.softmax()?;
    let mix = w.reshape(&[1, s[0]])?.matmul(f)?.reshape(&[s[1]])?;
    Ok(f.add(&mix)?)
}

/// The temporal counterpart of [`spt_attn`]; same operator on `f_t^v`.
pub fn tmpr_attn<'t>(f: &Var<'t>, kappa: &Var<'t>, temperature: &Var<'t>) -> Result<Var<'t>> {
    spt_attn(f, kappa, temperature)
}

/// Spatial and temporal residual terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct OrsterLoss<'t> {
    pub total: Var<'t>,
    pub spatial: Var<'t>,
    pub temporal: Var<'t>,
}

/// `lambda_o * mse(s, s_bar) + (1 - lambda_o) * mse(t, t_bar)`. A term with
/// zero weight is left off the tape entirely.
pub fn orster_loss<'t>(
    student_s: &Var<'t>,
    student_t: &Var<'t>,
    teacher_s_bar: &Var<'t>,
    teacher_t_bar: &Var<'t>,
    lambda_o: f64,
) -> Result<OrsterLoss<'t>> {
    if !(0.0..=1.0).contains(&lambda_o) {
        return invalid(format!("lambda_o = {lambda_o} outside [0, 1]"));
    }
    if student_s.shape() != teacher_s_bar.shape() || student_t.shape() != teacher_t_bar.shape() {
        return invalid("student and teacher feature shapes differ");
    }
    let ls = student_s.sub(teacher_s_bar)?.square().mean();
    let lt = student_t.sub(teacher_t_bar)?.square().mean();
    let total = match lambda_o {
        l if l == 0.0 => lt.scale(1.0),
        l if l == 1.0 => ls.scale(1.0),
        l => ls.scale(l).add(&lt.scale(1.0 - l))?,
    };
    Ok(OrsterLoss {
        total,
        spatial: ls,
        temporal: lt,
    })
}
