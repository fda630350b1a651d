//! `section.key = value` run configuration with a closed key registry.
//!
//! Files hold one assignment per line; `#` starts a comment. Command-line
//! `--set key=value` pairs override file values, and the fully resolved
//! table is echoed into the run directory so a run can be reproduced from
//! its artifacts alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use flowalign::diffusion::{NoiseSchedule, ScheduleKind};
use flowalign::rewards::{AggregationPolicy, ControlWordPair};
use flowalign::synthdata::Vocabulary;
use flowalign::trainers::{AlignConfig, BranchMode, Interval, Method, SrpoConstruction};
use flowalign::{Error, Result};

/// Every recognized key with its default value.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("data.seed", "11"),
    ("data.size", "16"),
    ("data.train_count", "512"),
    ("data.pair_count", "2400"),
    ("data.bias_strength", "0.5"),
    ("schedule.t_min", "0.001"),
    ("schedule.t_max", "0.999"),
    // Alignment and generation run on a narrower working range so the
    // first sampler step stays well-conditioned.
    ("schedule.align_t_max", "0.95"),
    ("flow.hidden", "256,256"),
    ("flow.cond_dim", "32"),
    ("flow.seed", "21"),
    ("flow.pretrain_steps", "8000"),
    ("flow.batch", "16"),
    ("flow.lr", "0.001"),
    ("reward.hidden", "256,256"),
    ("reward.dim", "32"),
    ("reward.seed", "31"),
    ("reward.epochs_hi", "10"),
    ("reward.epochs_lo", "8"),
    ("reward.lr_hi", "0.002"),
    ("reward.lr_lo", "0.0005"),
    ("reward.batch", "8"),
    ("align.method", "direct_align"),
    ("align.interval", "all"),
    ("align.injections", "3"),
    ("align.spacing", "0.08"),
    ("align.delta_sigma_fraction", "1.0"),
    ("align.delta_cap_ratio", "0.3"),
    ("align.gamma", "0.9"),
    ("align.lambda_floor", "0"),
    ("align.control_pos", "photo"),
    ("align.control_neg", "render"),
    ("align.w_pos", "1"),
    ("align.w_neg", "1"),
    ("align.cfg_k", "1.5"),
    ("align.offline", "false"),
    ("align.rollout_steps", "25"),
    ("align.draft_k", "1"),
    ("align.branch_mode", "both"),
    ("align.srpo_construction", "inversion"),
    ("align.noise_level", "0.1"),
    ("align.lr", "0.00002"),
    ("align.steps", "300"),
    ("align.batch", "4"),
    ("align.seed", "41"),
    ("study.lr", "0.00003"),
    ("study.steps", "300"),
    ("study.seed", "61"),
    ("study.eval_seed", "71"),
    ("study.eval_rollout", "25"),
    ("ablate.lr", "0.00002"),
    ("ablate.bias_strength", "1.0"),
    ("ablate.seed", "81"),
    ("eval.prompts", "24"),
    ("eval.rollout_steps", "25"),
    ("eval.seed", "51"),
    ("curve.timesteps", "0.25,0.5,0.75,0.95"),
    ("curve.fractions", "0,0.025,0.075,1"),
    ("curve.batch", "64"),
    ("io.flow_ckpt", "flow.ckpt"),
    ("io.reward_ckpt", "reward.ckpt"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KNOWN_KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Set one key, rejecting anything outside the registry by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for pair in overrides {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set '{pair}' is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key '{key}' missing from registry"))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} = '{}' is not a float", self.get(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} = '{}' is not an integer", self.get(key))))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} = '{}' is not an integer", self.get(key))))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("{key} = '{other}' is not a bool"))),
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key} has non-integer entry '{p}'")))
            })
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key} has non-float entry '{p}'")))
            })
            .collect()
    }

    fn tokens(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split_whitespace()
            .map(|w| {
                Vocabulary::id(w)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown word '{w}'")))
            })
            .collect()
    }

    /// Resolved config as a canonical sorted text block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
        std::fs::write(dir.join("resolved.cfg"), self.render())
            .map_err(|e| Error::Config(format!("cannot write resolved.cfg: {e}")))
    }

    /// Short hex digest of the resolved configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.render().as_bytes());
        digest[..8].iter().fold(String::new(), |mut acc, b| {
            write!(acc, "{b:02x}").unwrap();
            acc
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(
            ScheduleKind::RectifiedLinear,
            self.f64("schedule.t_min")?,
            self.f64("schedule.t_max")?,
        )
    }

    /// Working schedule for alignment and generation.
    pub fn align_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(
            ScheduleKind::RectifiedLinear,
            self.f64("schedule.t_min")?,
            self.f64("schedule.align_t_max")?,
        )
    }

    pub fn control_pair(&self) -> Result<ControlWordPair> {
        ControlWordPair::weighted(
            self.tokens("align.control_pos")?,
            self.tokens("align.control_neg")?,
            self.f64("align.w_pos")?,
            self.f64("align.w_neg")?,
        )
    }

    pub fn align_config(&self) -> Result<AlignConfig> {
        let method = match self.get("align.method") {
            "refl" => Method::Refl,
            "draft_k" => Method::DraftK,
            "direct_align" => Method::DirectAlign,
            "srpo" => Method::Srpo,
            other => return Err(Error::Config(format!("unknown align.method '{other}'"))),
        };
        let interval = match self.get("align.interval") {
            "early" => Interval::Early,
            "all" => Interval::All,
            "late" => Interval::Late,
            other => return Err(Error::Config(format!("unknown align.interval '{other}'"))),
        };
        let branch_mode = match self.get("align.branch_mode") {
            "both" => BranchMode::Both,
            "split" => BranchMode::Split,
            other => return Err(Error::Config(format!("unknown align.branch_mode '{other}'"))),
        };
        let srpo_construction = match self.get("align.srpo_construction") {
            "inversion" => SrpoConstruction::Inversion,
            "direct" => SrpoConstruction::Direct,
            other => {
                return Err(Error::Config(format!(
                    "unknown align.srpo_construction '{other}'"
                )))
            }
        };
        let injections = self.usize("align.injections")?;
        Ok(AlignConfig {
            method,
            interval,
            injections,
            spacing: self.f64("align.spacing")?,
            delta_sigma_fraction: self.f64("align.delta_sigma_fraction")?,
            delta_cap_ratio: self.f64("align.delta_cap_ratio")?,
            aggregation: AggregationPolicy::new(
                injections,
                self.f64("align.gamma")?,
                self.f64("align.lambda_floor")?,
            )?,
            control: Some(self.control_pair()?),
            cfg_k: Some(self.f64("align.cfg_k")?),
            offline: self.bool("align.offline")?,
            rollout_steps: self.usize("align.rollout_steps")?,
            draft_k: self.usize("align.draft_k")?,
            branch_mode,
            srpo_construction,
            lr: self.f64("align.lr")?,
            steps: self.usize("align.steps")?,
            batch: self.usize("align.batch")?,
            seed: self.u64("align.seed")?,
        })
    }
}
