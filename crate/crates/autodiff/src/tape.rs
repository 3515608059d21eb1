//! Gradient tape: records primitive operations and replays them backward.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{numel_of, Tensor};
use crate::{Error, Result};

/// Backward rule for a [`Tape::custom`] operation: receives the gradient of
/// the output and the input values, returns one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>]) -> Vec<Option<Tensor>>>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    Sqrt(usize),
    Abs(usize),
    Sigmoid(usize),
    Silu(usize),
    Tanh(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    ExpandAxis(usize, usize),
    Softmax(usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    TransposeLast2(usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    L2Norm(usize),
    Dot(usize, usize),
    Bilinear(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Upsample2x(usize),
    GatherRows(usize, Vec<usize>),
    Custom(Vec<usize>, BackwardFn),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so that it can be differentiated.
///
/// A tape is single-threaded; independent tapes may live on different threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

/// Splits `shape` around `axis` into (outer, n, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    )
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides_in: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += out_strides_in[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= out_strides_in[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    (out, out_shape)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear lookup weights for a normalized coordinate in `[0, 1]` on an axis
/// with `r ≥ 2` lattice nodes. Returns (lower node, fraction, d fraction/d coord).
fn lattice(c: f64, r: usize) -> (usize, f64, f64) {
    let inside = (0.0..=1.0).contains(&c);
    let c = c.clamp(0.0, 1.0);
    let u = c * (r - 1) as f64;
    let i0 = (u.floor() as usize).min(r - 2);
    let dscale = if inside { (r - 1) as f64 } else { 0.0 };
    (i0, u - i0 as f64, dscale)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(v.tape, self)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        backward: BackwardFn,
    ) -> Result<Var<'t>> {
        if inputs.iter().any(|v| !self.owns(v)) {
            return Err(Error::NotOnTape);
        }
        let rg = inputs.iter().any(|v| v.requires_grad());
        let idx = inputs.iter().map(|v| v.idx).collect();
        Ok(self.push(output, Op::Custom(idx, backward), rg))
    }

    /// Reverse-mode gradient of a scalar `loss` with respect to each of `params`.
    ///
    /// Parameters that do not influence `loss` receive zeros; parameters from a
    /// different tape are rejected.
    pub fn grad(&self, loss: Var<'_>, params: &[Var<'_>]) -> Result<Vec<Tensor>> {
        if !self.owns(&loss) || params.iter().any(|p| !self.owns(p)) {
            return Err(Error::NotOnTape);
        }
        let nodes = self.nodes.borrow();
        let loss_val = &nodes[loss.idx].value;
        if loss_val.numel() != 1 {
            return Err(Error::NotScalar(loss_val.shape().to_vec()));
        }
        let mut wanted: HashMap<usize, Vec<usize>> = HashMap::new();
        for (slot, p) in params.iter().enumerate() {
            wanted.entry(p.idx).or_default().push(slot);
        }
        let mut out: Vec<Option<Tensor>> = vec![None; params.len()];
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.idx + 1, || None);
        grads[loss.idx] = Some(vec![1.0]);

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(slots) = wanted.get(&i) {
                let t = Tensor::new(node.value.shape().to_vec(), g.clone())?;
                for &s in slots {
                    out[s] = Some(t.clone());
                }
            }
            if !node.requires_grad {
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads)?;
        }
        Ok(params
            .iter()
            .zip(out)
            .map(|(p, g)| g.unwrap_or_else(|| Tensor::zeros(nodes[p.idx].value.shape().to_vec())))
            .collect())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Reduces a gradient of the (longer) output shape onto an operand that was
/// suffix-broadcast to it.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

fn backward_node(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let val = |i: usize| nodes[i].value.clone();
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, reduce_to(g, val(*a).numel()));
            accumulate(nodes, grads, *b, reduce_to(g, val(*b).numel()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, reduce_to(g, val(*a).numel()));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(nodes, grads, *b, reduce_to(&neg, val(*b).numel()));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (na, nb) = (av.numel(), bv.numel());
            let (ad, bd) = (av.data(), bv.data());
            if nodes[*a].requires_grad {
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * bd[i % nb]).collect();
                accumulate(nodes, grads, *a, reduce_to(&ga, na));
            }
            if nodes[*b].requires_grad {
                let gb: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * ad[i % na]).collect();
                accumulate(nodes, grads, *b, reduce_to(&gb, nb));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (na, nb) = (av.numel(), bv.numel());
            let (ad, bd) = (av.data(), bv.data());
            if nodes[*a].requires_grad {
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, v)| v / bd[i % nb]).collect();
                accumulate(nodes, grads, *a, reduce_to(&ga, na));
            }
            if nodes[*b].requires_grad {
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let bb = bd[i % nb];
                        -v * ad[i % na] / (bb * bb)
                    })
                    .collect();
                accumulate(nodes, grads, *b, reduce_to(&gb, nb));
            }
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, g.iter().map(|v| -v).collect()),
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Exp(a) => {
            let ga = g.iter().zip(y.data()).map(|(g, y)| g * y).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Log(a) => {
            let x = val(*a);
            let ga = g.iter().zip(x.data()).map(|(g, x)| g / x).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Powf(a, p) => {
            let x = val(*a);
            let ga = g
                .iter()
                .zip(x.data())
                .map(|(g, x)| g * p * x.powf(p - 1.0))
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sqrt(a) => {
            let ga = g.iter().zip(y.data()).map(|(g, y)| g * 0.5 / y).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Abs(a) => {
            let x = val(*a);
            let ga = g
                .iter()
                .zip(x.data())
                .map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g
                .iter()
                .zip(y.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Silu(a) => {
            let x = val(*a);
            let ga = g
                .iter()
                .zip(x.data())
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Tanh(a) => {
            let ga = g
                .iter()
                .zip(y.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Relu(a) => {
            let x = val(*a);
            let ga = g
                .iter()
                .zip(x.data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a);
            let ga = g
                .iter()
                .zip(x.data())
                .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).numel()]),
        Op::Mean(a) => {
            let n = val(*a).numel();
            accumulate(nodes, grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let x = val(*a);
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let scale = if matches!(node.op, Op::MeanAxis(..)) {
                1.0 / n as f64
            } else {
                1.0
            };
            let mut ga = vec![0.0; x.numel()];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        ga[(o * n + k) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::ExpandAxis(a, axis) => {
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            let mut ga = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        ga[o * inner + i] += g[(o * n + k) * inner + i];
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softmax(a) => {
            let d = *y.shape().last().unwrap_or(&1);
            let yd = y.data();
            let mut ga = vec![0.0; yd.len()];
            for (r, chunk) in ga.chunks_mut(d).enumerate() {
                let ys = &yd[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    chunk[j] = ys[j] * (gs[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let k = bv.shape()[0];
            let n = bv.shape()[1];
            let rows = av.numel() / k;
            let (ad, bd) = (av.data(), bv.data());
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; rows * k];
                for i in 0..rows {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let br = &bd[p * n..(p + 1) * n];
                        ga[i * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                for i in 0..rows {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = ad[i * k + p];
                        let row = &mut gb[p * n..(p + 1) * n];
                        for (r, gv) in row.iter_mut().zip(gr) {
                            *r += a_ip * gv;
                        }
                    }
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Bmm(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (bsz, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = bv.shape()[2];
            let (ad, bd) = (av.data(), bv.data());
            let mut ga = vec![0.0; av.numel()];
            let mut gb = vec![0.0; bv.numel()];
            for bi in 0..bsz {
                let (ao, bo, go) = (bi * m * k, bi * k * n, bi * m * n);
                for i in 0..m {
                    let gr = &g[go + i * n..go + (i + 1) * n];
                    for p in 0..k {
                        let br = &bd[bo + p * n..bo + (p + 1) * n];
                        ga[ao + i * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
                        let a_ip = ad[ao + i * k + p];
                        for (j, gv) in gr.iter().enumerate() {
                            gb[bo + p * n + j] += a_ip * gv;
                        }
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::TransposeLast2(a) => {
            let r = y.rank();
            let mut perm: Vec<usize> = (0..r).collect();
            perm.swap(r - 2, r - 1);
            let (ga, _) = permute_data(g, y.shape(), &perm);
            accumulate(nodes, grads, *a, ga);
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (ga, _) = permute_data(g, y.shape(), &inv);
            accumulate(nodes, grads, *a, ga);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = axis_split(y.shape(), *axis);
            let total = y.shape()[*axis];
            let mut start = 0;
            for &p in parts {
                let n = nodes[p].value.shape()[*axis];
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gp.extend_from_slice(&g[base..base + n * inner]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                start += n;
            }
        }
        Op::Slice(a, axis, start) => {
            let x = val(*a);
            let (outer, total, inner) = axis_split(x.shape(), *axis);
            let n = y.shape()[*axis];
            let mut ga = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = (o * total + start) * inner;
                ga[base..base + n * inner].copy_from_slice(&g[o * n * inner..(o + 1) * n * inner]);
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::L2Norm(a) => {
            let x = val(*a);
            let norm = y.data()[0];
            let ga = if norm > 0.0 {
                x.data().iter().map(|v| g[0] * v / norm).collect()
            } else {
                vec![0.0; x.numel()]
            };
            accumulate(nodes, grads, *a, ga);
        }
        Op::Dot(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(
                nodes,
                grads,
                *a,
                bv.data().iter().map(|v| g[0] * v).collect(),
            );
            accumulate(
                nodes,
                grads,
                *b,
                av.data().iter().map(|v| g[0] * v).collect(),
            );
        }
        Op::Bilinear(grid, coords) => {
            let (gv, cv) = (val(*grid), val(*coords));
            let (r0, r1, d) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
            let gd = gv.data();
            let n = cv.shape()[0];
            let mut ggrid = vec![0.0; gv.numel()];
            let mut gcoord = vec![0.0; cv.numel()];
            for q in 0..n {
                let (i0, fu, du) = lattice(cv.data()[2 * q], r0);
                let (j0, fv, dv) = lattice(cv.data()[2 * q + 1], r1);
                let corners = [
                    (i0, j0, (1.0 - fu) * (1.0 - fv)),
                    (i0 + 1, j0, fu * (1.0 - fv)),
                    (i0, j0 + 1, (1.0 - fu) * fv),
                    (i0 + 1, j0 + 1, fu * fv),
                ];
                let gq = &g[q * d..(q + 1) * d];
                for &(i, j, w) in &corners {
                    let base = (i * r1 + j) * d;
                    for c in 0..d {
                        ggrid[base + c] += w * gq[c];
                    }
                }
                let at = |i: usize, j: usize, c: usize| gd[(i * r1 + j) * d + c];
                let mut su = 0.0;
                let mut sv = 0.0;
                for c in 0..d {
                    let dfu = (1.0 - fv) * (at(i0 + 1, j0, c) - at(i0, j0, c))
                        + fv * (at(i0 + 1, j0 + 1, c) - at(i0, j0 + 1, c));
                    let dfv = (1.0 - fu) * (at(i0, j0 + 1, c) - at(i0, j0, c))
                        + fu * (at(i0 + 1, j0 + 1, c) - at(i0 + 1, j0, c));
                    su += dfu * gq[c];
                    sv += dfv * gq[c];
                }
                gcoord[2 * q] = su * du;
                gcoord[2 * q + 1] = sv * dv;
            }
            accumulate(nodes, grads, *grid, ggrid);
            accumulate(nodes, grads, *coords, gcoord);
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, h, wd, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let (kh, kw, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[3]);
            let (ho, wo) = (y.shape()[1], y.shape()[2]);
            let (xd, wdt) = (xv.data(), wv.data());
            let need_x = nodes[*x].requires_grad;
            let need_w = nodes[*w].requires_grad;
            let mut gx = vec![0.0; if need_x { xv.numel() } else { 0 }];
            let mut gw = vec![0.0; if need_w { wv.numel() } else { 0 }];
            let mut gb = vec![0.0; cout];
            for bi in 0..n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = &g[((bi * ho + oy) * wo + ox) * cout..][..cout];
                        for (acc, v) in gb.iter_mut().zip(go) {
                            *acc += v;
                        }
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - *pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - *pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xo = ((bi * h + iy as usize) * wd + ix as usize) * cin;
                                let wo_ = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let wrow = &wdt[wo_ + ci * cout..][..cout];
                                    if need_x {
                                        gx[xo + ci] +=
                                            wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                    if need_w {
                                        let xvv = xd[xo + ci];
                                        let gwrow = &mut gw[wo_ + ci * cout..][..cout];
                                        for (acc, v) in gwrow.iter_mut().zip(go) {
                                            *acc += xvv * v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if need_x {
                accumulate(nodes, grads, *x, gx);
            }
            if need_w {
                accumulate(nodes, grads, *w, gw);
            }
            accumulate(nodes, grads, *b, gb);
        }
        Op::Upsample2x(a) => {
            let x = val(*a);
            let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let mut ga = vec![0.0; x.numel()];
            for bi in 0..n {
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        let src = ((bi * h + oy / 2) * w + ox / 2) * c;
                        let dst = ((bi * 2 * h + oy) * 2 * w + ox) * c;
                        for ch in 0..c {
                            ga[src + ch] += g[dst + ch];
                        }
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::GatherRows(a, idx) => {
            let t = val(*a);
            let d = t.shape()[1];
            let mut ga = vec![0.0; t.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    ga[i * d + c] += g[r * d + c];
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Custom(inputs, backward) => {
            let values: Vec<Rc<Tensor>> = inputs.iter().map(|&i| val(i)).collect();
            let gt = Tensor::new(y.shape().to_vec(), g.to_vec())?;
            let contribs = backward(&gt, &values);
            if contribs.len() != inputs.len() {
                return Err(shape_err(format!(
                    "custom backward returned {} gradients for {} inputs",
                    contribs.len(),
                    inputs.len()
                )));
            }
            for (&i, c) in inputs.iter().zip(contribs) {
                if let Some(c) = c {
                    if c.numel() != nodes[i].value.numel() {
                        return Err(shape_err("custom backward gradient has wrong size".into()));
                    }
                    accumulate(nodes, grads, i, c.into_data());
                }
            }
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.numel()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::NotOnTape)
        }
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(out, op, self.requires_grad())
    }

    /// Elementwise binary op; the shorter operand must be a suffix of the
    /// longer operand's shape and is broadcast over the leading dimensions.
    fn binary(
        &self,
        other: &Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let out_shape = if is_suffix(sb, sa) {
            sa.to_vec()
        } else if is_suffix(sa, sb) {
            sb.to_vec()
        } else {
            return Err(shape_err(format!("cannot broadcast {sa:?} with {sb:?}")));
        };
        let (na, nb) = (a.numel(), b.numel());
        let (ad, bd) = (a.data(), b.data());
        let n = numel_of(&out_shape);
        let data = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(out_shape, data)?, op(self.idx, other.idx), rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a / b, Op::Div)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(|x| -x, Op::Neg(self.idx))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|x| x * c, Op::Scale(self.idx, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.idx))
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.idx))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, Op::Log(self.idx))
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(|x| x.powf(p), Op::Powf(self.idx, p))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(f64::sqrt, Op::Sqrt(self.idx))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.idx))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.idx))
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(|x| x * sigmoid(x), Op::Silu(self.idx))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.idx))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.idx))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(|x| x.clamp(lo, hi), Op::Clamp(self.idx, lo, hi))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.idx), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let m = self.value().mean();
        self.tape
            .push(Tensor::scalar(m), Op::Mean(self.idx), self.requires_grad())
    }

    fn check_axis(&self, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(shape_err(format!("axis {axis} out of range for {s:?}")));
        }
        Ok(s)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let s = self.check_axis(axis)?;
        let (outer, n, inner) = axis_split(&s, axis);
        let x = self.value();
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= n as f64;
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let op = if mean {
            Op::MeanAxis(self.idx, axis)
        } else {
            Op::SumAxis(self.idx, axis)
        };
        Ok(self
            .tape
            .push(Tensor::new(shape, out)?, op, self.requires_grad()))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    /// Inserts a new axis of size `n` at `axis` by repetition.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if axis > s.len() {
            return Err(shape_err(format!("cannot insert axis {axis} into {s:?}")));
        }
        let outer = numel_of(&s[..axis]);
        let inner = numel_of(&s[axis..]);
        let x = self.value();
        let xd = x.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xd[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape.insert(axis, n);
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::ExpandAxis(self.idx, axis),
            self.requires_grad(),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax of a scalar".into()))?;
        if d == 0 {
            return Err(shape_err("softmax over an empty axis".into()));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::Softmax(self.idx),
            self.requires_grad(),
        ))
    }

    /// `[..., k] × [k, n] → [..., n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() < 1 || b.rank() != 2 || *a.shape().last().unwrap() != b.shape()[0] {
            return Err(shape_err(format!(
                "matmul {:?} × {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (k, n) = (b.shape()[0], b.shape()[1]);
        let rows = a.numel() / k.max(1);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; rows * n];
        for i in 0..rows {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += a_ip * bv;
                }
            }
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::MatMul(self.idx, other.idx),
            rg,
        ))
    }

    /// Batched `[B, m, k] × [B, k, n] → [B, m, n]`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err(format!("bmm {sa:?} × {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; bsz * m * n];
        for bi in 0..bsz {
            for i in 0..m {
                let orow = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
                for p in 0..k {
                    let a_ip = ad[(bi * m + i) * k + p];
                    let brow = &bd[(bi * k + p) * n..(bi * k + p + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += a_ip * bv;
                    }
                }
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new(vec![bsz, m, n], out)?,
            Op::Bmm(self.idx, other.idx),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r < 2 {
            return Err(shape_err(format!("transpose of {:?}", x.shape())));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let (data, shape) = permute_data(x.data(), x.shape(), &perm);
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::TransposeLast2(self.idx),
            self.requires_grad(),
        ))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank()
            || perm
                .iter()
                .any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err(format!(
                "invalid permutation {perm:?} for {:?}",
                x.shape()
            )));
        }
        let (data, shape) = permute_data(x.data(), x.shape(), perm);
        Ok(self.tape.push(
            Tensor::new(shape, data)?,
            Op::Permute(self.idx, perm.to_vec()),
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let t = (*x).clone().reshape(shape.to_vec())?;
        Ok(self
            .tape
            .push(t, Op::Reshape(self.idx), self.requires_grad()))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat of zero tensors".into()))?;
        let tape = first.tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for (p, v) in parts.iter().zip(&vals) {
            first.same_tape(p)?;
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err(format!(
                    "concat {base:?} with {s:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer = numel_of(&base[..axis]);
        let inner = numel_of(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            Tensor::new(shape, out)?,
            Op::Concat(parts.iter().map(|p| p.idx).collect(), axis),
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.check_axis(axis)?;
        if start + len > s[axis] {
            return Err(shape_err(format!(
                "slice {start}..{} of axis {axis} in {s:?}",
                start + len
            )));
        }
        let (outer, total, inner) = axis_split(&s, axis);
        let x = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * total + start) * inner;
            out.extend_from_slice(&x.data()[b..b + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::Slice(self.idx, axis, start),
            self.requires_grad(),
        ))
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&self) -> Var<'t> {
        let n = self.value().norm_sq().sqrt();
        self.tape.push(
            Tensor::scalar(n),
            Op::L2Norm(self.idx),
            self.requires_grad(),
        )
    }

    /// Inner product of all entries.
    pub fn dot(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.numel() != b.numel() {
            return Err(shape_err(format!("dot {:?} · {:?}", a.shape(), b.shape())));
        }
        let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(Tensor::scalar(d), Op::Dot(self.idx, other.idx), rg))
    }

    /// Bilinear lookup into a `[R0, R1, d]` grid at `[N, 2]` coordinates in
    /// `[0, 1]²`; coordinates outside are clamped (with zero gradient).
    pub fn bilinear(grid: &Var<'t>, coords: &Var<'t>) -> Result<Var<'t>> {
        grid.same_tape(coords)?;
        let (gv, cv) = (grid.value(), coords.value());
        let (gs, cs) = (gv.shape(), cv.shape());
        if gs.len() != 3 || gs[0] < 2 || gs[1] < 2 || cs.len() != 2 || cs[1] != 2 {
            return Err(shape_err(format!("bilinear grid {gs:?}, coords {cs:?}")));
        }
        let (r0, r1, d) = (gs[0], gs[1], gs[2]);
        let n = cs[0];
        let gd = gv.data();
        let mut out = vec![0.0; n * d];
        for q in 0..n {
            let (i0, fu, _) = lattice(cv.data()[2 * q], r0);
            let (j0, fv, _) = lattice(cv.data()[2 * q + 1], r1);
            let o = &mut out[q * d..(q + 1) * d];
            for &(i, j, w) in &[
                (i0, j0, (1.0 - fu) * (1.0 - fv)),
                (i0 + 1, j0, fu * (1.0 - fv)),
                (i0, j0 + 1, (1.0 - fu) * fv),
                (i0 + 1, j0 + 1, fu * fv),
            ] {
                let row = &gd[(i * r1 + j) * d..(i * r1 + j + 1) * d];
                for (ov, gvv) in o.iter_mut().zip(row) {
                    *ov += w * gvv;
                }
            }
        }
        let rg = grid.requires_grad() || coords.requires_grad();
        Ok(grid.tape.push(
            Tensor::new(vec![n, d], out)?,
            Op::Bilinear(grid.idx, coords.idx),
            rg,
        ))
    }

    /// 2D convolution over channels-last input `[N, H, W, Cin]` with weights
    /// `[kh, kw, Cin, Cout]` and bias `[Cout]`, zero padding.
    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: &Var<'t>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        self.same_tape(bias)?;
        let (xv, wv, bv) = (self.value(), weight.value(), bias.value());
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != xs[3] || bv.shape() != [ws[3]] || stride == 0
        {
            return Err(shape_err(format!(
                "conv2d input {xs:?}, weight {ws:?}, bias {:?}",
                bv.shape()
            )));
        }
        let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; n * ho * wo * cout];
        for bi in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let orow = &mut out[((bi * ho + oy) * wo + ox) * cout..][..cout];
                    orow.copy_from_slice(bd);
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xo = ((bi * h + iy as usize) * w + ix as usize) * cin;
                            let wo_ = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let xvv = xd[xo + ci];
                                let wrow = &wd[wo_ + ci * cout..][..cout];
                                for (o, wv) in orow.iter_mut().zip(wrow) {
                                    *o += xvv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            Tensor::new(vec![n, ho, wo, cout], out)?,
            Op::Conv2d {
                x: self.idx,
                w: weight.idx,
                b: bias.idx,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2× upsampling of `[N, H, W, C]`.
    pub fn upsample2x(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(shape_err(format!("upsample2x of {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xd = x.data();
        let mut out = vec![0.0; n * 4 * h * w * c];
        for bi in 0..n {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let src = ((bi * h + oy / 2) * w + ox / 2) * c;
                    let dst = ((bi * 2 * h + oy) * 2 * w + ox) * c;
                    out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(vec![n, 2 * h, 2 * w, c], out)?,
            Op::Upsample2x(self.idx),
            self.requires_grad(),
        ))
    }

    /// Selects rows of a `[rows, d]` table.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let s = t.shape();
        if s.len() != 2 || indices.iter().any(|&i| i >= s[0]) {
            return Err(shape_err(format!("gather rows {indices:?} from {s:?}")));
        }
        let d = s[1];
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        Ok(self.tape.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::GatherRows(self.idx, indices.to_vec()),
            self.requires_grad(),
        ))
    }

    /// A constant copy of this value, cut off from the gradient.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
