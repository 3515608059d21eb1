//! Condition encoders (text, reference image, static orbital video) and
//! the conditional denoising objective.

use autodiff::{ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{loss_ldm, Denoiser, NoiseSchedule};
use crate::model::{Condition, ConditionKind};
use crate::nn::{conv, init_conv, Init};
use crate::{invalid, Error, Result};

/// The bundled 64-word vocabulary, one word per line.
pub const VOCAB_TEXT: &str = include_str!("../assets/vocab.txt");

/// Word list; id 0 is reserved for the null token, words start at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_text(VOCAB_TEXT)
    }
}

impl Vocabulary {
    pub fn from_text(text: &str) -> Self {
        Self {
            words: text
                .lines()
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .map(String::from)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Token ids for whitespace-separated lowercase words. Empty text gives
    /// the null token alone.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.words
                    .iter()
                    .position(|v| *v == w)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Invalid(format!("unknown token {w:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(if ids.is_empty() { vec![0] } else { ids })
    }
}

pub enum CondInput<'a> {
    Text(&'a str),
    /// `[H, W, 3]`
    Image(&'a Tensor),
    /// `[V, H, W, 3]`
    Static3d(&'a Tensor),
}

impl CondInput<'_> {
    pub fn kind(&self) -> ConditionKind {
        match self {
            CondInput::Text(_) => ConditionKind::Text,
            CondInput::Image(_) => ConditionKind::Image,
            CondInput::Static3d(_) => ConditionKind::Static3d,
        }
    }
}

/// Learned encoders for the three condition types.
///
/// Parameters: `text.embed` `[vocab + 1, d]`; `image.c1`, `image.c2` and
/// `video.c1`, `video.c2` (two stride-2 convs each).
#[derive(Clone, Debug, PartialEq)]
pub struct CondEncoder {
    pub vocab: Vocabulary,
    pub image_size: usize,
    pub dim: usize,
    pub params: ParamSet,
}

impl CondEncoder {
    pub fn new(vocab: Vocabulary, image_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert(
            "text.embed",
            Tensor::randn([vocab.len() + 1, dim], 0.5, &mut rng),
        );
        for branch in ["image", "video"] {
            init_conv(
                &mut p,
                &format!("{branch}.c1"),
                3,
                3,
                8,
                Init::Normal,
                &mut rng,
            );
            init_conv(
                &mut p,
                &format!("{branch}.c2"),
                3,
                8,
                dim,
                Init::Normal,
                &mut rng,
            );
        }
        Self {
            vocab,
            image_size,
            dim,
            params: p,
        }
    }

    fn check_frames(&self, shape: &[usize], rank: usize) -> Result<()> {
        let r = self.image_size;
        let ok = shape.len() == rank
            && shape[rank - 3] == r
            && shape[rank - 2] == r
            && shape[rank - 1] == 3;
        if !ok || (rank == 4 && shape[0] == 0) {
            return invalid(format!(
                "condition frames {shape:?}, expected [.., {r}, {r}, 3]"
            ));
        }
        Ok(())
    }

    /// Tokens `[n, d]` on the tape of `b`.
    pub fn encode_var<'t>(
        &self,
        b: &autodiff::Bound<'t>,
        input: &CondInput<'_>,
    ) -> Result<Var<'t>> {
        let tape = b.tape();
        let d = self.dim;
        match input {
            CondInput::Text(text) => {
                let ids = self.vocab.tokenize(text)?;
                Ok(b.get("text.embed")?.gather_rows(&ids)?)
            }
            CondInput::Image(img) => {
                self.check_frames(img.shape(), 3)?;
                let r = self.image_size;
                let x = tape.constant((*img).clone().reshape([1, r, r, 3])?);
                let h = conv(b, "image.c1", &x, 2)?.silu();
                let h = conv(b, "image.c2", &h, 2)?;
                let n = h.numel() / d;
                Ok(h.reshape(&[n, d])?)
            }
            CondInput::Static3d(frames) => {
                self.check_frames(frames.shape(), 4)?;
                let v = frames.shape()[0];
                let x = tape.constant((*frames).clone());
                let h = conv(b, "video.c1", &x, 2)?.silu();
                let h = conv(b, "video.c2", &h, 2)?;
                let s = h.shape();
                let (hh, ww) = (s[1], s[2]);
                if hh % 2 != 0 || ww % 2 != 0 {
                    return invalid("static-3d feature map is not divisible by the pooling window");
                }
                let pooled = h
                    .reshape(&[v, hh / 2, 2, ww / 2, 2, d])?
                    .mean_axis(4)?
                    .mean_axis(2)?;
                Ok(pooled.reshape(&[v * (hh / 2) * (ww / 2), d])?)
            }
        }
    }

    pub fn encode(&self, input: &CondInput<'_>) -> Result<Condition> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let v = self.encode_var(&b, input)?;
        Condition::new(input.kind(), (*v.value()).clone())
    }
}

/// Conditional denoising loss; identical sampling to the unconditional
/// objective.
pub fn loss_cond<'t, D: Denoiser<'t> + ?Sized>(
    denoiser: &D,
    z0: &Var<'t>,
    cond: &Var<'t>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Var<'t>> {
    loss_ldm(denoiser, z0, cond, schedule, seed)
}
