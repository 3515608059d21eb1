//! Stage-3 objective: reconstruction, perceptual, temporal-smoothness and
//! alignment terms.
//!
//! Conventions: every term averages over elements; the perceptual term
//! sums over extractor taps.

use autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct FrozenConv {
    w: Tensor,
    b: Tensor,
    stride: usize,
}

/// Fixed random conv stack standing in for a pretrained perceptual network.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<FrozenConv>,
    resolution: usize,
    seed: u64,
}

impl FeatureExtractor {
    /// Three layers of widths 8, 16, 16 with strides 1, 2, 2.
    pub fn new(seed: u64, resolution: usize) -> Self {
        Self::with_layers(seed, resolution, &[(8, 1), (16, 2), (16, 2)])
    }

    /// `(width, stride)` per layer; 3×3 kernels, SiLU between layers.
    pub fn with_layers(seed: u64, resolution: usize, layers: &[(usize, usize)]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let layers = layers
            .iter()
            .map(|&(cout, stride)| {
                let w = Tensor::randn([3, 3, cin, cout], (2.0 / (9 * cin) as f64).sqrt(), &mut rng);
                let b = Tensor::randn([cout], 0.1, &mut rng);
                cin = cout;
                FrozenConv { w, b, stride }
            })
            .collect();
        Self {
            layers,
            resolution,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Weight `[3, 3, cin, cout]`, bias and stride of layer `i`.
    pub fn layer(&self, i: usize) -> Option<(&Tensor, &Tensor, usize)> {
        self.layers.get(i).map(|l| (&l.w, &l.b, l.stride))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Tap after every layer for images `[N, R, R, 3]`.
    pub fn features<'t>(&self, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = x.shape();
        let r = self.resolution;
        if s.len() != 4 || s[1] != r || s[2] != r || s[3] != 3 {
            return invalid(format!("extractor expects [N, {r}, {r}, 3], got {s:?}"));
        }
        let tape: &'t Tape = x.tape();
        let mut h = *x;
        let mut taps = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.constant(l.w.clone());
            let b = tape.constant(l.b.clone());
            h = h.conv2d(&w, &b, l.stride, 1)?.silu();
            taps.push(h);
        }
        Ok(taps)
    }
}

fn same(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!(
            "{what}: shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Mean absolute error.
pub fn loss_rec<'t>(pred: &Var<'t>, gt: &Var<'t>) -> Result<Var<'t>> {
    same(pred, gt, "loss_rec")?;
    Ok(pred.sub(gt)?.abs().mean())
}

/// Sum over taps of the mean squared feature difference.
pub fn loss_perc<'t>(pred: &Var<'t>, gt: &Var<'t>, fx: &FeatureExtractor) -> Result<Var<'t>> {
    same(pred, gt, "loss_perc")?;
    let fp = fx.features(pred)?;
    let fg = fx.features(gt)?;
    let mut total = pred.tape().scalar(0.0);
    for (a, b) in fp.iter().zip(&fg) {
        total = total.add(&a.sub(b)?.square().mean())?;
    }
    Ok(total)
}

/// Mean over consecutive pairs of the mean squared difference; axis 0
/// indexes frames.
pub fn loss_temp<'t>(features: &Var<'t>) -> Result<Var<'t>> {
    let s = features.shape();
    if s.is_empty() || s[0] < 2 {
        return invalid(format!(
            "temporal loss needs at least two frames, got {s:?}"
        ));
    }
    let n = s[0];
    let next = features.slice(0, 1, n - 1)?;
    let prev = features.slice(0, 0, n - 1)?;
    Ok(next.sub(&prev)?.square().mean())
}

/// One minus the cosine similarity of two flattened feature vectors.
pub fn loss_align<'t>(f_s: &Var<'t>, f_t: &Var<'t>) -> Result<Var<'t>> {
    if f_s.numel() != f_t.numel() {
        return invalid(format!(
            "alignment of {:?} with {:?}",
            f_s.shape(),
            f_t.shape()
        ));
    }
    let (ns, nt) = (f_s.value().norm_sq(), f_t.value().norm_sq());
    if ns == 0.0 || nt == 0.0 {
        return invalid("cosine similarity of a zero vector is undefined");
    }
    let a = f_s.reshape(&[f_s.numel()])?;
    let b = f_t.reshape(&[f_t.numel()])?;
    let cos = a.dot(&b)?.div(&a.l2_norm().mul(&b.l2_norm())?)?;
    Ok(cos.neg().add_scalar(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyWeights {
    pub lambda_rec: f64,
    pub lambda_perc: f64,
    pub lambda_temp: f64,
    pub lambda_align: f64,
}

impl Default for ConsistencyWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_perc: 0.1,
            lambda_temp: 0.1,
            lambda_align: 0.1,
        }
    }
}

impl ConsistencyWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda_rec,
            self.lambda_perc,
            self.lambda_temp,
            self.lambda_align,
        ];
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!(
                "consistency weights must be finite and non-negative: {w:?}"
            )));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("all consistency weights are zero".into()));
        }
        Ok(())
    }
}

/// The four scalar terms of the consistency objective.
#[derive(Clone, Copy, Debug)]
pub struct ConsistencyTerms<'t> {
    pub rec: Var<'t>,
    pub perc: Var<'t>,
    pub temp: Var<'t>,
    pub align: Var<'t>,
}

pub fn loss_const<'t>(terms: &ConsistencyTerms<'t>, w: &ConsistencyWeights) -> Result<Var<'t>> {
    w.validate()?;
    let parts = [
        (terms.rec, w.lambda_rec),
        (terms.perc, w.lambda_perc),
        (terms.temp, w.lambda_temp),
        (terms.align, w.lambda_align),
    ];
    let mut total = terms.rec.tape().scalar(0.0);
    for (term, weight) in parts {
        let v = term.item()?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite consistency term {v}")));
        }
        if weight != 0.0 {
            total = total.add(&term.scale(weight))?;
        }
    }
    Ok(total)
}
