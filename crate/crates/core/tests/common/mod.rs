//! Plain scalar-loop reference implementations used as test oracles.
#![allow(dead_code)]

use autodiff::Tensor;

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Same-padded NHWC convolution, weight `[k, k, cin, cout]`.
pub fn conv_ref(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros([n, ho, wo, cout]);
    for bi in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.get(&[bi, iy as usize, ix as usize, ci]).unwrap()
                                    * w.get(&[ky, kx, ci, co]).unwrap();
                            }
                        }
                    }
                    out.set(&[bi, oy, ox, co], acc).unwrap();
                }
            }
        }
    }
    out
}

/// Row-wise `x w + b` over the last axis.
pub fn linear_ref(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / din;
    let mut data = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b.data()[o];
            for i in 0..din {
                acc += x.data()[r * din + i] * w.data()[i * dout + o];
            }
            data[r * dout + o] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, data).unwrap()
}

pub fn softmax_ref(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Rows of `q` `[nq, d]` attending over `k` `[nk, d]`, `v` `[nk, dv]`.
pub fn attention_ref(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let w = softmax_ref(&scores);
            let mut out = vec![0.0; v[0].len()];
            for (wj, vj) in w.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += wj * x;
                }
            }
            out
        })
        .collect()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(|c| c.to_vec()).collect()
}

/// Sinusoidal step embedding: first half sines, second half cosines, with
/// frequencies `10000^(-j / half)`.
pub fn temb_ref(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let f = 10000f64.powf(-(j as f64) / half as f64);
        out[j] = (t as f64 * f).sin();
        out[j + half] = (t as f64 * f).cos();
    }
    out
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Scalar splat renderer: per pixel `[r, g, b, depth, alpha]`, row-major.
/// Gaussians are `(position, quaternion wxyz, scale, opacity, color)`.
pub fn render_ref(
    gs: &[([f64; 3], [f64; 4], [f64; 3], f64, [f64; 3])],
    az: f64,
    el: f64,
    radius: f64,
    focal: f64,
    size: usize,
    bg: [f64; 3],
) -> Vec<[f64; 5]> {
    let eye = [
        radius * el.cos() * az.sin(),
        radius * el.sin(),
        radius * el.cos() * az.cos(),
    ];
    let norm = |a: [f64; 3]| {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        [a[0] / n, a[1] / n, a[2] / n]
    };
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let f = norm([-eye[0], -eye[1], -eye[2]]);
    let r = norm(cross(f, [0.0, 1.0, 0.0]));
    let d = cross(f, r);
    let w = [r, d, f];
    let c = size as f64 / 2.0;
    // (depth, index, u, v, conic, opacity, color)
    let mut prims = Vec::new();
    for (idx, (p, q, s, o, col)) in gs.iter().enumerate() {
        let rel = [p[0] - eye[0], p[1] - eye[1], p[2] - eye[2]];
        let pc: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| w[i][j] * rel[j]).sum())
            .collect();
        if pc[2] < 0.2 {
            continue;
        }
        let qn = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let (qw, qx, qy, qz) = (q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn);
        let rot = [
            [
                1.0 - 2.0 * (qy * qy + qz * qz),
                2.0 * (qx * qy - qw * qz),
                2.0 * (qx * qz + qw * qy),
            ],
            [
                2.0 * (qx * qy + qw * qz),
                1.0 - 2.0 * (qx * qx + qz * qz),
                2.0 * (qy * qz - qw * qx),
            ],
            [
                2.0 * (qx * qz - qw * qy),
                2.0 * (qy * qz + qw * qx),
                1.0 - 2.0 * (qx * qx + qy * qy),
            ],
        ];
        let mut cov3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    cov3[i][j] += rot[i][k] * s[k] * s[k] * rot[j][k];
                }
            }
        }
        let (x, y, z) = (pc[0], pc[1], pc[2]);
        let jac = [
            [focal / z, 0.0, -focal * x / (z * z)],
            [0.0, focal / z, -focal * y / (z * z)],
        ];
        let mut t = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..3 {
                    t[i][j] += jac[i][k] * w[k][j];
                }
            }
        }
        let mut cov2 = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    for l in 0..3 {
                        cov2[i][j] += t[i][k] * cov3[k][l] * t[j][l];
                    }
                }
            }
        }
        cov2[0][0] += 0.3;
        cov2[1][1] += 0.3;
        let det = cov2[0][0] * cov2[1][1] - cov2[0][1] * cov2[1][0];
        let conic = [cov2[1][1] / det, -cov2[0][1] / det, cov2[0][0] / det];
        prims.push((
            z,
            idx,
            focal * x / z + c,
            focal * y / z + c,
            conic,
            *o,
            *col,
        ));
    }
    prims.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0;
            let mut acc = [0.0; 5];
            for (z, _, u, v, k, o, col) in &prims {
                let (dx, dy) = (fx - u, fy - v);
                let m = k[0] * dx * dx + 2.0 * k[1] * dx * dy + k[2] * dy * dy;
                if m > 9.0 {
                    continue;
                }
                let a = (o * (-0.5 * m).exp()).min(0.99);
                for ch in 0..3 {
                    acc[ch] += col[ch] * a * t;
                }
                acc[3] += z * a * t;
                t *= 1.0 - a;
            }
            for ch in 0..3 {
                acc[ch] += t * bg[ch];
            }
            acc[4] = 1.0 - t;
            out.push(acc);
        }
    }
    out
}
