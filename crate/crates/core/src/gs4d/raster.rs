//! Front-to-back alpha compositing of projected 2D Gaussians as a single
//! tape operation.

use std::rc::Rc;

use autodiff::{Tensor, Var};

use super::Camera;
use crate::Result;

pub const NEAR_PLANE: f64 = 0.2;
/// Upper bound on a single splat's alpha.
pub const MAX_ALPHA: f64 = 0.99;
/// Footprint cutoff as a squared Mahalanobis radius (3σ).
const CUTOFF_SQ: f64 = 9.0;

/// Per-Gaussian screen quantities shared by forward and backward.
struct Splat {
    index: usize,
    mx: f64,
    my: f64,
    /// Inverse covariance `[[qa, qb], [qb, qc]]`.
    qa: f64,
    qb: f64,
    qc: f64,
    /// Half extents of the 3σ bounding box.
    rx: f64,
    ry: f64,
}

fn splats(mean: &Tensor, cov: &Tensor, depth: &Tensor, visible: &[bool]) -> Vec<Splat> {
    let mut order: Vec<usize> = (0..visible.len()).filter(|&i| visible[i]).collect();
    order.sort_by(|&a, &b| depth.data()[a].total_cmp(&depth.data()[b]));
    order
        .into_iter()
        .filter_map(|i| {
            let (a, b, c) = (
                cov.data()[3 * i],
                cov.data()[3 * i + 1],
                cov.data()[3 * i + 2],
            );
            let det = a * c - b * b;
            if !(det > 0.0) || !det.is_finite() {
                return None;
            }
            Some(Splat {
                index: i,
                mx: mean.data()[2 * i],
                my: mean.data()[2 * i + 1],
                qa: c / det,
                qb: -b / det,
                qc: a / det,
                rx: (CUTOFF_SQ * a).sqrt(),
                ry: (CUTOFF_SQ * c).sqrt(),
            })
        })
        .collect()
}

/// One splat's contribution at a pixel.
struct Hit {
    splat: usize,
    dx: f64,
    dy: f64,
    g: f64,
    alpha: f64,
    clamped: bool,
    transmittance: f64,
}

fn hits(splats: &[Splat], opacity: &[f64], px: f64, py: f64, out: &mut Vec<Hit>) -> f64 {
    out.clear();
    let mut t = 1.0;
    for (k, s) in splats.iter().enumerate() {
        let (dx, dy) = (px - s.mx, py - s.my);
        if dx.abs() > s.rx || dy.abs() > s.ry {
            continue;
        }
        let m = s.qa * dx * dx + 2.0 * s.qb * dx * dy + s.qc * dy * dy;
        if m > CUTOFF_SQ {
            continue;
        }
        let g = (-0.5 * m).exp();
        let raw = opacity[s.index] * g;
        let (alpha, clamped) = if raw > MAX_ALPHA {
            (MAX_ALPHA, true)
        } else {
            (raw, false)
        };
        out.push(Hit {
            splat: k,
            dx,
            dy,
            g,
            alpha,
            clamped,
            transmittance: t,
        });
        t *= 1.0 - alpha;
    }
    t
}

/// Output `[H, W, 5]`: RGB over `background`, expected depth
/// `Σ αᵢ Tᵢ zᵢ`, and accumulated alpha `1 − Π(1 − αᵢ)`. Pixel centers
/// sit at half-integer coordinates.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rasterize<'t>(
    mean: &Var<'t>,
    cov: &Var<'t>,
    depth: &Var<'t>,
    opacity: &Var<'t>,
    color: &Var<'t>,
    visible: Vec<bool>,
    cam: &Camera,
    background: [f64; 3],
) -> Result<Var<'t>> {
    let (h, w) = (cam.height, cam.width);
    let (mv, cv, dv, ov, colv) = (
        mean.value(),
        cov.value(),
        depth.value(),
        opacity.value(),
        color.value(),
    );
    let ss = splats(&mv, &cv, &dv, &visible);
    let mut out = vec![0.0; h * w * 5];
    let mut buf = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let t_end = hits(&ss, ov.data(), x as f64 + 0.5, y as f64 + 0.5, &mut buf);
            let o = &mut out[(y * w + x) * 5..(y * w + x + 1) * 5];
            for hit in &buf {
                let i = ss[hit.splat].index;
                let wgt = hit.alpha * hit.transmittance;
                for ch in 0..3 {
                    o[ch] += wgt * colv.data()[3 * i + ch];
                }
                o[3] += wgt * dv.data()[i];
            }
            for ch in 0..3 {
                o[ch] += t_end * background[ch];
            }
            o[4] = 1.0 - t_end;
        }
    }
    let value = Tensor::new(vec![h, w, 5], out)?;
    let tape = mean.tape();
    Ok(tape.custom(
        &[*mean, *cov, *depth, *opacity, *color],
        value,
        Box::new(move |grad, inputs| backward(grad, inputs, &visible, h, w, background)),
    )?)
}

fn backward(
    grad: &Tensor,
    inputs: &[Rc<Tensor>],
    visible: &[bool],
    h: usize,
    w: usize,
    background: [f64; 3],
) -> Vec<Option<Tensor>> {
    let (mv, cv, dv, ov, colv) = (&inputs[0], &inputs[1], &inputs[2], &inputs[3], &inputs[4]);
    let n = ov.numel();
    let ss = splats(mv, cv, dv, visible);
    let mut g_mean = vec![0.0; 2 * n];
    let mut g_cov = vec![0.0; 3 * n];
    let mut g_depth = vec![0.0; n];
    let mut g_op = vec![0.0; n];
    let mut g_col = vec![0.0; 3 * n];
    let mut buf = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let gp = &grad.data()[(y * w + x) * 5..(y * w + x + 1) * 5];
            if gp.iter().all(|&v| v == 0.0) {
                continue;
            }
            hits(&ss, ov.data(), x as f64 + 0.5, y as f64 + 0.5, &mut buf);
            // Composite of everything behind the current splat, per channel.
            let mut behind = [background[0], background[1], background[2], 0.0, 0.0];
            for hit in buf.iter().rev() {
                let s = &ss[hit.splat];
                let i = s.index;
                let wgt = hit.alpha * hit.transmittance;
                let front = [
                    colv.data()[3 * i],
                    colv.data()[3 * i + 1],
                    colv.data()[3 * i + 2],
                    dv.data()[i],
                    1.0,
                ];
                let mut d_alpha = 0.0;
                for ch in 0..5 {
                    d_alpha += gp[ch] * (front[ch] - behind[ch]);
                    behind[ch] = hit.alpha * front[ch] + (1.0 - hit.alpha) * behind[ch];
                }
                d_alpha *= hit.transmittance;
                for ch in 0..3 {
                    g_col[3 * i + ch] += gp[ch] * wgt;
                }
                g_depth[i] += gp[3] * wgt;
                if hit.clamped {
                    continue;
                }
                let op = ov.data()[i];
                g_op[i] += d_alpha * hit.g;
                // alpha = o · exp(-m / 2)
                let d_m = -0.5 * d_alpha * op * hit.g;
                let u0 = s.qa * hit.dx + s.qb * hit.dy;
                let u1 = s.qb * hit.dx + s.qc * hit.dy;
                g_mean[2 * i] -= 2.0 * d_m * u0;
                g_mean[2 * i + 1] -= 2.0 * d_m * u1;
                // dm/dΣ = -(Σ⁻¹ d)(Σ⁻¹ d)ᵀ, symmetric off-diagonal counted twice
                g_cov[3 * i] -= d_m * u0 * u0;
                g_cov[3 * i + 1] -= 2.0 * d_m * u0 * u1;
                g_cov[3 * i + 2] -= d_m * u1 * u1;
            }
        }
    }
    let t = |shape: Vec<usize>, d: Vec<f64>| Some(Tensor::new(shape, d).expect("gradient shape"));
    vec![
        t(vec![n, 2], g_mean),
        t(vec![n, 3], g_cov),
        t(vec![n], g_depth),
        t(vec![n], g_op),
        t(vec![n, 3], g_col),
    ]
}
