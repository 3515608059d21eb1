//! On-disk layout of one run:
//!
//! ```text
//! <root>/<id>/
//!   config.toml     the effective configuration
//!   manifest.json   config hash, seeds, artifact hashes, stage reports
//!   checkpoints/    *.ckpt
//!   data/           scene specs
//!   frames/         ground-truth and rendered PPM frames
//!   eval/           per-frame metric rows and summaries
//!   metrics.csv     one row per finished stage
//!   losses.log      per-step training losses
//!   timing.csv      wall-clock seconds per command and stage
//! ```
//!
//! Everything except `timing.csv` and `manifest.json` is a pure function of
//! the configuration.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, StageSelect};
use crate::{invalid, Error, Result};

pub const METRICS_HEADER: &str = "run_id,stage,step,psnr,ssim,temporal_smoothness";

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub stage: u8,
    pub step: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub temporal_smoothness: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.run_id, self.stage, self.step, self.psnr, self.ssim, self.temporal_smoothness
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("metrics row {line:?}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("metrics value {s:?}")))
        };
        Ok(Self {
            run_id: f[0].to_string(),
            stage: f[1]
                .parse()
                .map_err(|_| Error::Format(format!("metrics stage {:?}", f[1])))?,
            step: f[2]
                .parse()
                .map_err(|_| Error::Format(format!("metrics step {:?}", f[2])))?,
            psnr: num(f[3])?,
            ssim: num(f[4])?,
            temporal_smoothness: num(f[5])?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    /// Commands in the order they completed.
    pub commands: Vec<String>,
    /// Relative path to SHA-256 of every artifact.
    pub artifacts: BTreeMap<String, String>,
    /// Free-form per-command reports (losses before and after, ...).
    pub reports: BTreeMap<String, serde_json::Value>,
}

struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Exclusive handle on a run directory.
pub struct RunDir {
    dir: PathBuf,
    id: String,
    _lock: Lock,
}

/// The configuration as stored: independent of which stage a command runs
/// and where the run directory lives.
fn canonical(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.run.stage = StageSelect::All;
    c.run.root = PathBuf::from("runs");
    c
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunDir {
    /// Creates or reopens `<root>/<id>` and takes its lock. A directory
    /// created under a different configuration is refused.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.run.root.join(&cfg.run.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let lock_path = dir.join(".lock");
        match OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return invalid(format!(
                    "{} is locked by another run (remove {} if that run is gone)",
                    dir.display(),
                    lock_path.display()
                ));
            }
            Err(e) => return Err(Error::io(&lock_path, e)),
        }
        let run = Self {
            dir,
            id: cfg.run.id.clone(),
            _lock: Lock(lock_path),
        };
        let text = canonical(cfg).to_toml();
        let path = run.dir.join("config.toml");
        if path.exists() {
            let old = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            if old != text {
                return Err(Error::Config(format!(
                    "{} was created with a different configuration; use a new run id",
                    run.dir.display()
                )));
            }
        } else {
            std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(run)
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }

    /// Path of an existing checkpoint, or a prerequisite error naming the
    /// command that produces it.
    pub fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.checkpoint(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Prerequisite(format!(
                "{} not found; run {producer} first",
                p.display()
            )))
        }
    }

    fn append(&self, name: &str, header: Option<&str>, lines: &[String]) -> Result<()> {
        let path = self.dir.join(name);
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut text = String::new();
        if let (true, Some(h)) = (fresh, header) {
            text.push_str(h);
            text.push('\n');
        }
        for l in lines {
            text.push_str(l);
            text.push('\n');
        }
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(&path, e))
    }

    pub fn log_losses(&self, lines: &[String]) -> Result<()> {
        self.append("losses.log", None, lines)
    }

    pub fn metrics(&self) -> Result<Vec<MetricsRow>> {
        let path = self.dir.join("metrics.csv");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(MetricsRow::parse)
            .collect()
    }

    /// Step counter continuing from the last stored row.
    pub fn last_step(&self) -> Result<usize> {
        Ok(self.metrics()?.last().map_or(0, |r| r.step))
    }

    pub fn append_metrics(&self, row: &MetricsRow) -> Result<()> {
        if row.step < self.last_step()? {
            return invalid("metrics steps must not decrease");
        }
        self.append("metrics.csv", Some(METRICS_HEADER), &[row.to_csv()])
    }

    pub fn append_timing(&self, command: &str, stage: &str, seconds: f64) -> Result<()> {
        self.append(
            "timing.csv",
            Some("command,stage,seconds"),
            &[format!("{command},{stage},{seconds:.3}")],
        )
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(Manifest {
                run_id: self.id.clone(),
                ..Default::default()
            });
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Records a finished command: rehashes the configuration and every
    /// artifact and stores `report` under `command`.
    pub fn finish(
        &self,
        cfg: &RunConfig,
        command: &str,
        report: serde_json::Value,
    ) -> Result<Manifest> {
        let mut m = self.manifest()?;
        m.run_id = self.id.clone();
        m.config_sha256 = sha256_hex(canonical(cfg).to_toml().as_bytes());
        m.seeds = BTreeMap::from([
            ("run".to_string(), cfg.run.seed),
            ("eval".to_string(), cfg.eval.seed),
            ("construct".to_string(), cfg.construct.seed),
            ("extractor".to_string(), cfg.stage3.extractor_seed),
        ]);
        for (i, s) in cfg.scene_seeds().into_iter().enumerate() {
            m.seeds.insert(format!("scene{i}"), s);
        }
        m.commands.push(command.to_string());
        m.artifacts = self.hash_artifacts()?;
        m.reports.insert(command.to_string(), report);
        let path = self.manifest_path();
        let text = serde_json::to_string_pretty(&m)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }

    fn hash_artifacts(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![self.dir.clone()];
        while let Some(d) = stack.pop() {
            let entries = std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
            for e in entries {
                let e = e.map_err(|e| Error::io(&d, e))?;
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                    continue;
                }
                let rel = p
                    .strip_prefix(&self.dir)
                    .expect("walk stays inside the run")
                    .to_string_lossy()
                    .replace('\\', "/");
                if matches!(rel.as_str(), ".lock" | "manifest.json" | "timing.csv") {
                    continue;
                }
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                out.insert(rel, sha256_hex(&bytes));
            }
        }
        Ok(out)
    }
}
