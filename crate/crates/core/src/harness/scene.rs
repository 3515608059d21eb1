//! Procedural animated scenes built from Gaussian clusters.

use autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gs4d::{render_set, Camera, Gaussian3D, GaussianSet};
use crate::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Sphere,
    Box,
}

/// Motion over normalized time `τ ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    /// Displacement reached at `τ = 1`.
    pub translate: [f64; 3],
    /// Rotation about the vertical axis through the center reached at `τ = 1`.
    pub rotate: f64,
    /// Size factor `1 + pulse · sin(π τ)`.
    pub pulse: f64,
}

impl Motion {
    pub const STILL: Motion = Motion {
        translate: [0.0; 3],
        rotate: 0.0,
        pulse: 0.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    /// Radius of a sphere or half extent of a box.
    pub size: f64,
    pub color: [f64; 3],
    pub motion: Motion,
}

/// Named colors, matching the text vocabulary.
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.15, 0.1]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("orange", [0.95, 0.5, 0.1]),
    ("purple", [0.6, 0.2, 0.8]),
    ("cyan", [0.1, 0.85, 0.85]),
    ("white", [0.92, 0.92, 0.92]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub gaussians_per_primitive: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// Two primitives left and right of the origin with one motion each.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut primitives = Vec::new();
        let first = rng.random_range(0..PALETTE.len());
        for (i, side) in [-1.0, 1.0].into_iter().enumerate() {
            let kind = if rng.random::<bool>() {
                PrimitiveKind::Sphere
            } else {
                PrimitiveKind::Box
            };
            let color = PALETTE[(first + 1 + 3 * i) % PALETTE.len()].1;
            let motion = match rng.random_range(0..3) {
                0 => Motion {
                    translate: [0.0, rng.random_range(0.25..0.45), 0.0],
                    ..Motion::STILL
                },
                1 => Motion {
                    rotate: rng.random_range(0.8..1.6),
                    ..Motion::STILL
                },
                _ => Motion {
                    pulse: rng.random_range(0.2..0.35),
                    ..Motion::STILL
                },
            };
            primitives.push(Primitive {
                kind,
                center: [
                    side * rng.random_range(0.45..0.6),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                ],
                size: rng.random_range(0.3..0.42),
                color,
                motion,
            });
        }
        Self {
            primitives,
            gaussians_per_primitive: 48,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() || self.gaussians_per_primitive == 0 {
            return invalid("a scene needs at least one primitive made of at least one Gaussian");
        }
        Ok(())
    }

    /// A copy with every motion removed.
    pub fn frozen(&self) -> Self {
        let mut s = self.clone();
        s.primitives
            .iter_mut()
            .for_each(|p| p.motion = Motion::STILL);
        s
    }

    /// Cluster members relative to their primitive's center, with local
    /// scale and color. A single-member cluster sits at the center.
    fn members(&self) -> Vec<Vec<([f64; 3], f64, [f64; 3])>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_c1);
        self.primitives
            .iter()
            .map(|p| {
                (0..self.gaussians_per_primitive)
                    .map(|_| {
                        let offset = if self.gaussians_per_primitive == 1 {
                            [0.0; 3]
                        } else {
                            loop {
                                let o = [0; 3].map(|_| rng.random_range(-1.0..1.0));
                                match p.kind {
                                    PrimitiveKind::Box => break o,
                                    PrimitiveKind::Sphere
                                        if o.iter().map(|v| v * v).sum::<f64>() <= 1.0 =>
                                    {
                                        break o
                                    }
                                    PrimitiveKind::Sphere => {}
                                }
                            }
                        };
                        let jitter = [0; 3].map(|_| rng.random_range(-0.05..0.05));
                        let color = [0, 1, 2].map(|c| (p.color[c] + jitter[c]).clamp(0.0, 1.0));
                        (offset.map(|v| 0.8 * p.size * v), 0.28 * p.size, color)
                    })
                    .collect()
            })
            .collect()
    }

    /// Ground-truth Gaussians at normalized time `tau`.
    pub fn gaussians_at(&self, tau: f64) -> Result<GaussianSet> {
        self.validate()?;
        let mut gs = Vec::new();
        for (p, members) in self.primitives.iter().zip(self.members()) {
            let m = p.motion;
            let k = 1.0 + m.pulse * (std::f64::consts::PI * tau).sin();
            let (s, c) = (m.rotate * tau).sin_cos();
            let half = 0.5 * m.rotate * tau;
            let q = [half.cos(), 0.0, half.sin(), 0.0];
            for (o, scale, color) in members {
                let r = [c * o[0] + s * o[2], o[1], -s * o[0] + c * o[2]];
                let pos = [0, 1, 2].map(|i| p.center[i] + m.translate[i] * tau + k * r[i]);
                gs.push(Gaussian3D::new(pos, q, [k * scale; 3], 0.85, color)?);
            }
        }
        GaussianSet::new(&gs)
    }

    /// Templated description in the text-condition vocabulary.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .primitives
            .iter()
            .map(|p| {
                let color = PALETTE
                    .iter()
                    .min_by(|a, b| dist(a.1, p.color).total_cmp(&dist(b.1, p.color)))
                    .map(|c| c.0)
                    .unwrap_or("gray");
                let noun = match p.kind {
                    PrimitiveKind::Sphere => "sphere",
                    PrimitiveKind::Box => "box",
                };
                let verb = if p.motion.translate[1] > 0.0 {
                    "moves up"
                } else if p.motion.translate[1] < 0.0 {
                    "moves down"
                } else if p.motion.rotate != 0.0 {
                    "rotates"
                } else if p.motion.pulse != 0.0 {
                    "pulses"
                } else {
                    "still"
                };
                format!("a {color} {noun} {verb}")
            })
            .collect();
        parts.join(" and ")
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Rendering setup shared by synthesis and construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitConfig {
    pub views: usize,
    pub frames: usize,
    pub resolution: usize,
    pub radius: f64,
    pub elevation: f64,
    pub background: [f64; 3],
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            views: 4,
            frames: 8,
            resolution: 32,
            radius: 3.2,
            elevation: 0.3,
            background: [0.0; 3],
        }
    }
}

impl OrbitConfig {
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        Camera::orbit(self.views, self.elevation, self.radius, self.resolution)
    }
}

/// Rendered orbital videos of an animated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub orbit: OrbitConfig,
    /// `[V, T, H, W, 3]`
    pub video: Tensor,
    /// First-frame scene on the same orbit, `[V, H, W, 3]`.
    pub static_video: Tensor,
    /// Ground-truth Gaussians per frame.
    pub trajectory: Vec<GaussianSet>,
}

impl Dataset {
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.orbit.cameras()
    }
}

pub fn synth_dataset(spec: &SceneSpec, orbit: &OrbitConfig) -> Result<Dataset> {
    spec.validate()?;
    if orbit.views < 2 || orbit.frames < 2 {
        return invalid(format!(
            "need at least 2 views and 2 frames, got {} and {}",
            orbit.views, orbit.frames
        ));
    }
    let cams = orbit.cameras()?;
    let trajectory = (0..orbit.frames)
        .map(|tau| spec.gaussians_at(tau as f64 / (orbit.frames - 1) as f64))
        .collect::<Result<Vec<_>>>()?;
    let still = spec.frozen().gaussians_at(0.0)?;
    let mut views = Vec::with_capacity(orbit.views);
    let mut stills = Vec::with_capacity(orbit.views);
    for cam in &cams {
        let frames = trajectory
            .iter()
            .map(|g| render_set(g, cam, orbit.background).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        views.push(Tensor::stack(&frames)?);
        stills.push(render_set(&still, cam, orbit.background)?.0);
    }
    Ok(Dataset {
        spec: spec.clone(),
        orbit: *orbit,
        video: Tensor::stack(&views)?,
        static_video: Tensor::stack(&stills)?,
        trajectory,
    })
}
