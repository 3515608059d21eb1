//! Building blocks shared by the student channels and the teachers.

use autodiff::{attention, attention_batched, Bound, ParamSet, Var};
use rand::Rng;

use crate::nn::{conv, init_conv, init_linear, linear, timestep_embedding, Init};
use crate::{invalid, Result};

/// Which set axis a channel block attends across.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Jointly over all views and pixels.
    Views,
    /// Over frames, independently per pixel.
    Frames,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSpec {
    pub axis: Axis,
    /// Length of the set axis (views or frames).
    pub set: usize,
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub tap_dim: usize,
    /// Learned per-frame offsets; only meaningful for [`Axis::Frames`].
    pub pos_enc: bool,
}

/// Output of one channel: the noise prediction and the mid-depth activation.
#[derive(Clone, Copy, Debug)]
pub struct ChannelOut<'t> {
    pub out: Var<'t>,
    /// `[set, h, w, hidden]`
    pub tap: Var<'t>,
}

/// Parameters `in`, `temb`, `q`, `k`, `v`, `o`, `out` (+ `pos`, `proj`).
pub fn init_channel(ps: &mut ParamSet, spec: &ChannelSpec, rng: &mut impl Rng) {
    let h = spec.hidden;
    init_conv(ps, "in", 3, spec.cin, h, Init::Normal, rng);
    init_linear(ps, "temb", spec.time_dim, h, Init::Normal, rng);
    for name in ["q", "k", "v"] {
        init_linear(ps, name, h, h, Init::Normal, rng);
    }
    init_linear(ps, "o", h, h, Init::Normal, rng);
    init_conv(ps, "out", 3, h, spec.cout, Init::Zero, rng);
    if spec.pos_enc && spec.axis == Axis::Frames {
        ps.insert("pos", autodiff::Tensor::randn([spec.set, h], 0.1, rng));
    }
    init_linear(ps, "proj", spec.set * h, spec.tap_dim, Init::Normal, rng);
}

pub fn channel_forward<'t>(
    b: &Bound<'t>,
    spec: &ChannelSpec,
    x: &Var<'t>,
    t: usize,
) -> Result<ChannelOut<'t>> {
    let (s, n, hid) = (spec.set, spec.size, spec.hidden);
    if x.shape() != [s, n, n, spec.cin] {
        return invalid(format!(
            "channel input {:?}, expected {:?}",
            x.shape(),
            [s, n, n, spec.cin]
        ));
    }
    let tape = b.tape();
    let temb = tape.constant(timestep_embedding(t, spec.time_dim));
    let mut h = conv(b, "in", x, 1)?.add(&linear(b, "temb", &temb)?)?.silu();
    if spec.pos_enc && spec.axis == Axis::Frames {
        let pos = b
            .get("pos")?
            .expand_axis(1, n * n)?
            .reshape(&[s, n, n, hid])?;
        h = h.add(&pos)?;
    }
    let tap = h;
    let mixed = match spec.axis {
        Axis::Views => {
            let tokens = h.reshape(&[s * n * n, hid])?;
            let a = attention(
                &linear(b, "q", &tokens)?,
                &linear(b, "k", &tokens)?,
                &linear(b, "v", &tokens)?,
            )?;
            linear(b, "o", &a)?.reshape(&[s, n, n, hid])?
        }
        Axis::Frames => {
            let tokens = h.permute(&[1, 2, 0, 3])?.reshape(&[n * n, s, hid])?;
            let a = attention_batched(
                &linear(b, "q", &tokens)?,
                &linear(b, "k", &tokens)?,
                &linear(b, "v", &tokens)?,
            )?;
            linear(b, "o", &a)?
                .reshape(&[n, n, s, hid])?
                .permute(&[2, 0, 1, 3])?
        }
    };
    let h = h.add(&mixed)?;
    let out = conv(b, "out", &h, 1)?;
    Ok(ChannelOut { out, tap })
}

/// Per-pixel tokens from a tap: `[set, h, w, H] -> [h*w, set*H]`.
pub fn tap_tokens<'t>(tap: &Var<'t>) -> Result<Var<'t>> {
    let s = tap.shape();
    Ok(tap
        .permute(&[1, 2, 0, 3])?
        .reshape(&[s[1] * s[2], s[0] * s[3]])?)
}
