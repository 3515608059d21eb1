//! Central finite-difference gradient checks.

use crate::{Bound, Error, ParamSet, Result, Tape, Tensor, Var};

fn check_step(step: f64) -> Result<()> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} not in (0, 1e-2]"
        )));
    }
    Ok(())
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient estimate (analytic {a}, numeric {n})"
            )));
        }
        worst = worst.max((a - n).abs() / (a.abs() + 1e-8));
    }
    Ok(worst)
}

/// Max over coordinates of `|analytic − central| / (|analytic| + 1e-8)` for a
/// scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_step(step)?;
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv)?;
    let analytic = tape.grad(loss, &[xv])?.remove(0);

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        f(&tape, v)?.item()
    };
    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * step);
    }
    relative_error(analytic.data(), &numeric)
}

/// [`finite_diff_check`] over every coordinate of a parameter set.
pub fn finite_diff_check_params<F>(f: F, params: &ParamSet, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&Bound<'t>) -> Result<Var<'t>>,
{
    check_step(step)?;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&bound)?;
    let grads = bound.grads(loss)?;
    let analytic = grads.flatten();

    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        f(&p.bind_frozen(&tape))?.item()
    };
    let flat = params.flatten();
    let mut probe = params.clone();
    let mut numeric = vec![0.0; flat.len()];
    let mut buf = flat.clone();
    for i in 0..flat.len() {
        buf[i] = flat[i] + step;
        probe.unflatten(&buf)?;
        let fp = eval(&probe)?;
        buf[i] = flat[i] - step;
        probe.unflatten(&buf)?;
        let fm = eval(&probe)?;
        buf[i] = flat[i];
        numeric[i] = (fp - fm) / (2.0 * step);
    }
    relative_error(&analytic, &numeric)
}
