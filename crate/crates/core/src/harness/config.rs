//! Run configuration: a sectioned TOML file. Every section is optional and
//! falls back to the desk defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::OrbitConfig;
use crate::consistency::ConsistencyWeights;
use crate::diffusion::vae::VaeTrainConfig;
use crate::diffusion::{NoiseSchedule, VaeConfig};
use crate::gs4d::ConstructConfig;
use crate::model::ModelConfig;
use crate::{Error, Result};

/// Which training stages to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelect {
    One(u8),
    All,
}

impl StageSelect {
    pub fn stages(self) -> Vec<u8> {
        match self {
            StageSelect::One(k) => vec![k],
            StageSelect::All => vec![1, 2, 3, 4],
        }
    }
}

impl std::str::FromStr for StageSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(StageSelect::All),
            "1" | "2" | "3" | "4" => Ok(StageSelect::One(s.as_bytes()[0] - b'0')),
            _ => Err(Error::Config(format!(
                "stage must be 1, 2, 3, 4 or all, got {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for StageSelect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageSelect::One(k) => write!(f, "{k}"),
            StageSelect::All => f.write_str("all"),
        }
    }
}

impl Serialize for StageSelect {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StageSelect {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        let s = match Raw::deserialize(d)? {
            Raw::Int(i) => i.to_string(),
            Raw::Str(s) => s,
        };
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub id: String,
    pub stage: StageSelect,
    pub seed: u64,
    /// Parent of the run directories.
    pub root: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            id: "default".into(),
            stage: StageSelect::All,
            seed: 1,
            root: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training scenes, seeded `seed, seed + 1, ...`.
    pub scenes: usize,
    pub orbit: OrbitConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            scenes: 4,
            orbit: OrbitConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            num_steps: 20,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub latent_channels: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for VaeSection {
    fn default() -> Self {
        let c = VaeConfig::default();
        let t = VaeTrainConfig::default();
        Self {
            latent_channels: c.latent_channels,
            enc_width: c.enc_width,
            dec_width: c.dec_width,
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
        }
    }
}

/// Student widths; views, frames and latent shape come from the data and
/// autoencoder sections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub spatial_channels: usize,
    pub temporal_channels: usize,
    pub hidden: usize,
    pub fusion_hidden: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub tap_dim: usize,
    pub temporal_pos_enc: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            spatial_channels: m.spatial_channels,
            temporal_channels: m.temporal_channels,
            hidden: m.hidden,
            fusion_hidden: m.fusion_hidden,
            cond_dim: m.cond_dim,
            time_dim: m.time_dim,
            tap_dim: m.tap_dim,
            temporal_pos_enc: m.temporal_pos_enc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub steps: usize,
    pub lr: f64,
    pub patience: usize,
    /// Stop early once the validation loss falls to this value; zero
    /// disables the check.
    pub val_ceiling: f64,
    pub val_every: usize,
    pub val_draws: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            patience: 400,
            val_ceiling: 0.0,
            val_every: 250,
            val_draws: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub steps: usize,
    pub lr: f64,
}

impl Default for StageSection {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrsterSection {
    /// When false stage 2 carries the stage-1 weights over unchanged.
    pub enabled: bool,
    pub steps: usize,
    pub lr: f64,
    pub lambda_o: f64,
    pub ldm_weight: f64,
}

impl Default for OrsterSection {
    fn default() -> Self {
        Self {
            enabled: true,
            steps: 500,
            lr: 1e-3,
            lambda_o: 0.5,
            ldm_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencySection {
    pub steps: usize,
    pub lr: f64,
    pub lambda_rec: f64,
    pub lambda_perc: f64,
    pub lambda_temp: f64,
    pub lambda_align: f64,
    /// Retained denoising loss weight.
    pub ldm_weight: f64,
    pub extractor_seed: u64,
}

impl Default for ConsistencySection {
    fn default() -> Self {
        let w = ConsistencyWeights::default();
        Self {
            steps: 500,
            lr: 1e-3,
            lambda_rec: w.lambda_rec,
            lambda_perc: w.lambda_perc,
            lambda_temp: w.lambda_temp,
            lambda_align: w.lambda_align,
            ldm_weight: 1.0,
            extractor_seed: 7,
        }
    }
}

impl ConsistencySection {
    pub fn weights(&self) -> ConsistencyWeights {
        ConsistencyWeights {
            lambda_rec: self.lambda_rec,
            lambda_perc: self.lambda_perc,
            lambda_temp: self.lambda_temp,
            lambda_align: self.lambda_align,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Seed of the start noise of the reconstruction chain.
    pub seed: u64,
    /// Seeded draws for validation losses.
    pub draws: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seed: 99,
            draws: 16,
        }
    }
}

/// Which network supplies the construction prior features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    /// The channel taps of the latest trained student.
    #[default]
    Student,
    /// The taps of the two frozen teachers.
    Teachers,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsSection {
    pub source: PriorSource,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub diffusion: DiffusionSection,
    pub vae: VaeSection,
    pub model: ModelSection,
    pub teachers: TeacherSection,
    pub stage1: StageSection,
    pub stage2: OrsterSection,
    pub stage3: ConsistencySection,
    pub stage4: StageSection,
    pub construct: ConstructConfig,
    pub eval: EvalSection,
    pub priors: PriorsSection,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    /// Applies `section.field = value` overrides. Values are read as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in pairs {
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            let path: Vec<&str> = key.split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut table = &mut root;
            for p in parents {
                table = match table.get_mut(*p) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                };
            }
            match table.get_mut(*last) {
                Some(slot) if !slot.is_table() => *slot = value,
                _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
            }
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.run.id;
        if id.is_empty()
            || !id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || id.starts_with('.')
        {
            return Err(Error::Config(format!(
                "run id {id:?} must be a plain file name"
            )));
        }
        let o = &self.data.orbit;
        if self.data.scenes == 0 || o.views < 2 || o.frames < 2 {
            return Err(Error::Config(
                "need at least one scene, two views and two frames".into(),
            ));
        }
        if o.resolution < 8 || o.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be a multiple of 4 and at least 8",
                o.resolution
            )));
        }
        positive("orbit.radius", o.radius)?;
        if o.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background must lie in [0, 1]".into()));
        }
        let d = &self.diffusion;
        if d.num_steps < 2
            || !(0.0 < d.beta_start && d.beta_start <= d.beta_end && d.beta_end < 1.0)
        {
            return Err(Error::Config(format!("bad noise schedule {d:?}")));
        }
        let v = &self.vae;
        if v.latent_channels == 0 || v.enc_width == 0 || v.dec_width == 0 || v.batch == 0 {
            return Err(Error::Config(
                "autoencoder widths and batch must be positive".into(),
            ));
        }
        for (name, lr) in [
            ("vae.lr", v.lr),
            ("teachers.lr", self.teachers.lr),
            ("stage1.lr", self.stage1.lr),
            ("stage2.lr", self.stage2.lr),
            ("stage3.lr", self.stage3.lr),
            ("stage4.lr", self.stage4.lr),
        ] {
            positive(name, lr)?;
        }
        let t = &self.teachers;
        if !(t.val_ceiling >= 0.0) || t.val_every == 0 || t.val_draws == 0 {
            return Err(Error::Config(
                "teacher validation settings must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.stage2.lambda_o) {
            return Err(Error::Config(format!(
                "stage2.lambda_o = {} outside [0, 1]",
                self.stage2.lambda_o
            )));
        }
        if !(self.stage2.ldm_weight >= 0.0) || !(self.stage3.ldm_weight >= 0.0) {
            return Err(Error::Config(
                "retained denoising weights must be non-negative".into(),
            ));
        }
        self.stage3.weights().validate()?;
        self.model_config().validate()?;
        self.construct.validate()?;
        if self.construct.field.prior_dim != self.model.tap_dim {
            return Err(Error::Config(format!(
                "construct.field.prior_dim = {} must equal model.tap_dim = {}",
                self.construct.field.prior_dim, self.model.tap_dim
            )));
        }
        if self.construct.background != o.background {
            return Err(Error::Config(
                "construct.background must match data.orbit.background".into(),
            ));
        }
        if self.eval.draws == 0 {
            return Err(Error::Config("eval.draws must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.diffusion;
        NoiseSchedule::linear(d.num_steps, d.beta_start, d.beta_end)
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            image_size: self.data.orbit.resolution,
            latent_channels: self.vae.latent_channels,
            enc_width: self.vae.enc_width,
            dec_width: self.vae.dec_width,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            views: self.data.orbit.views,
            frames: self.data.orbit.frames,
            latent_size: self.vae_config().latent_size(),
            latent_channels: self.vae.latent_channels,
            spatial_channels: m.spatial_channels,
            temporal_channels: m.temporal_channels,
            hidden: m.hidden,
            fusion_hidden: m.fusion_hidden,
            cond_dim: m.cond_dim,
            time_dim: m.time_dim,
            tap_dim: m.tap_dim,
            temporal_pos_enc: m.temporal_pos_enc,
        }
    }

    /// Seeds of the training scenes.
    pub fn scene_seeds(&self) -> Vec<u64> {
        (0..self.data.scenes as u64)
            .map(|i| self.run.seed + i)
            .collect()
    }
}
