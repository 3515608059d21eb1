//! Small layer helpers over [`ParamSet`] / [`Bound`].
//!
//! A linear layer `name` owns `name.w` `[din, dout]` and `name.b` `[dout]`;
//! a conv layer owns `name.w` `[k, k, cin, cout]` and `name.b` `[cout]`.

use autodiff::{Bound, ParamSet, Tensor, Var};
use rand::Rng;

use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 1/fan_in)` weights, zero bias.
    Normal,
    Zero,
}

pub fn init_linear(
    ps: &mut ParamSet,
    name: &str,
    din: usize,
    dout: usize,
    init: Init,
    rng: &mut impl Rng,
) {
    let w = match init {
        Init::Normal => Tensor::randn([din, dout], (1.0 / din as f64).sqrt(), rng),
        Init::Zero => Tensor::zeros([din, dout]),
    };
    ps.insert(format!("{name}.w"), w);
    ps.insert(format!("{name}.b"), Tensor::zeros([dout]));
}

pub fn init_conv(
    ps: &mut ParamSet,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    init: Init,
    rng: &mut impl Rng,
) {
    let fan_in = (k * k * cin) as f64;
    let w = match init {
        Init::Normal => Tensor::randn([k, k, cin, cout], (1.0 / fan_in).sqrt(), rng),
        Init::Zero => Tensor::zeros([k, k, cin, cout]),
    };
    ps.insert(format!("{name}.w"), w);
    ps.insert(format!("{name}.b"), Tensor::zeros([cout]));
}

/// `x @ w + b` over the last axis.
pub fn linear<'t>(b: &Bound<'t>, name: &str, x: &Var<'t>) -> Result<Var<'t>> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    Ok(x.matmul(&w)?.add(&bias)?)
}

/// Same-padded conv over NHWC input. Kernel size is read from the weight.
pub fn conv<'t>(b: &Bound<'t>, name: &str, x: &Var<'t>, stride: usize) -> Result<Var<'t>> {
    let w = b.get(&format!("{name}.w"))?;
    let bias = b.get(&format!("{name}.b"))?;
    let k = w.shape()[0];
    Ok(x.conv2d(&w, &bias, stride, k / 2)?)
}

/// Sinusoidal embedding of a diffusion step.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn([dim], |i| {
        let j = i % half.max(1);
        let freq = (-(10000f64).ln() * j as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        if i < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Merges per-flattened-batch axes: `[a, b, rest..] -> [a*b, rest..]`.
pub fn merge_leading<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let mut shape = vec![s[0] * s[1]];
    shape.extend_from_slice(&s[2..]);
    Ok(x.reshape(&shape)?)
}

fn to_tensor_error(e: crate::Error) -> autodiff::Error {
    match e {
        crate::Error::Tensor(e) => e,
        other => autodiff::Error::InvalidArgument(other.to_string()),
    }
}

/// [`autodiff::finite_diff_check_params`] for closures using this crate's
/// error type.
pub fn grad_check_params<F>(f: F, params: &ParamSet, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&Bound<'t>) -> Result<Var<'t>>,
{
    Ok(autodiff::finite_diff_check_params(
        |b| f(b).map_err(to_tensor_error),
        params,
        step,
    )?)
}

/// [`autodiff::finite_diff_check`] for closures using this crate's error
/// type.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t autodiff::Tape, Var<'t>) -> Result<Var<'t>>,
{
    Ok(autodiff::finite_diff_check(
        |t, v| f(t, v).map_err(to_tensor_error),
        x,
        step,
    )?)
}
