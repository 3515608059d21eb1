//! Image quality metrics over `[H, W, C]` images in `[0, 1]`.

use autodiff::Tensor;

use crate::{invalid, Result};

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!(
            "image shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    if a.rank() != 3 {
        return invalid(format!("images must be [H, W, C], got {:?}", a.shape()));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10 log10(1 / MSE)`; `+∞` for identical images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

/// Mean SSIM over all non-overlapping 8×8 windows and channels. Images
/// smaller than a window use a single window covering the whole image.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let s = a.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in (0..=h - wh).step_by(wh) {
        for x0 in (0..=w - ww).step_by(ww) {
            for ch in 0..c {
                let n = (wh * ww) as f64;
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        ma += ad[(y * w + x) * c + ch];
                        mb += bd[(y * w + x) * c + ch];
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let da = ad[(y * w + x) * c + ch] - ma;
                        let db = bd[(y * w + x) * c + ch] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
