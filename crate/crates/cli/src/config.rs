use std::path::{Path, PathBuf};

use localctl::guidance::GuidanceConfig;
use localctl::model::ArchConfig;
use localctl::sampler::{ScheduleConfig, StepConfig, TrainConfig};
use localctl::scenes::SceneDistribution;
use localctl::{DType, Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Preview renders written by `dataset`.
    pub previews: u64,
    pub distribution: SceneDistribution,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            previews: 16,
            distribution: SceneDistribution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub base_steps: u64,
    pub control_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub control_learning_rate: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip: f64,
    /// Save a resumable checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub init_seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            base_steps: 4000,
            control_steps: 1500,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            control_learning_rate: t.learning_rate,
            warmup_steps: t.warmup_steps,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            grad_clip: t.grad_clip,
            checkpoint_every: 500,
            init_seed: 0,
        }
    }
}

impl TrainSection {
    pub fn phase(&self, steps: u64, learning_rate: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: self.batch_size,
            learning_rate,
            warmup_steps: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            grad_clip: self.grad_clip,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub checkpoint: PathBuf,
    pub prompt: String,
    pub condition: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub mode: String,
    /// Components for `full_method`, e.g. `"rdloss+ftr+fmc"`.
    pub toggles: String,
    pub seeds: Vec<u64>,
    pub step: StepConfig,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("out/model.ckpt"),
            prompt: "circle and square".into(),
            condition: None,
            mask: None,
            mode: "full_method".into(),
            toggles: "rdloss+ftr+fmc".into(),
            seeds: vec![0],
            step: StepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub checkpoint: PathBuf,
    /// Ablation rows: baseline mode names or component lists.
    pub rows: Vec<String>,
    pub scenarios: Vec<String>,
    pub seeds: Vec<u64>,
    pub keep_images: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("out/model.ckpt"),
            rows: [
                "none",
                "rdloss",
                "fmc",
                "rdloss+fmc",
                "rdloss+ftr",
                "rdloss+ftr+fmc",
                "naive",
                "noise_mask",
                "feature_mask",
            ]
            .map(String::from)
            .to_vec(),
            scenarios: vec!["circle_and_square".into()],
            seeds: (0..10).collect(),
            keep_images: false,
        }
    }
}

/// Every setting of every command. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Element type for training and sampling.
    pub dtype: DType,
    pub output_dir: PathBuf,
    /// Worker threads for sweeps and training; 0 uses every core.
    pub jobs: usize,
    pub data: DataSection,
    pub model: ArchConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dtype: DType::F32,
            output_dir: PathBuf::from("out"),
            jobs: 0,
            data: DataSection::default(),
            model: ArchConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, then applies `section.key=value` overrides on top.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.distribution.validate()?;
        self.model.validate()?;
        self.guidance.validate()?;
        self.train
            .phase(self.train.base_steps, self.train.learning_rate, self.seed)
            .validate()?;
        self.train
            .phase(
                self.train.control_steps,
                self.train.control_learning_rate,
                self.seed,
            )
            .validate()?;
        if self.schedule.train_steps != self.model.train_timesteps {
            return Err(Error::Config(format!(
                "schedule.train_steps = {} but model.train_timesteps = {}",
                self.schedule.train_steps, self.model.train_timesteps
            )));
        }
        if self.data.distribution.canvas != self.model.image_size {
            return Err(Error::Config(
                "data canvas and model image size differ".into(),
            ));
        }
        self.schedule.sampling()?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        localctl::model::checkpoint::hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Sets one dotted key. The value is parsed as TOML, falling back to a plain string.
fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = RunConfig::default();
        let back = RunConfig::from_toml(&d.to_toml()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.hash(), d.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[guidance]\nbetta = 0.8").is_err());
        let c = RunConfig::from_toml("seed = 9\n[guidance]\nbeta = 0.8").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.guidance.beta, 0.8);
        assert_eq!(c.guidance.gamma, GuidanceConfig::default().gamma);
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let c = RunConfig::from_toml_with(
            "[guidance]\nbeta = 0.8",
            &[
                "guidance.beta=0.9".into(),
                "sample.prompt=star and cross".into(),
                "train.base_steps=7".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.guidance.beta, 0.9);
        assert_eq!(c.sample.prompt, "star and cross");
        assert_eq!(c.train.base_steps, 7);
        assert!(RunConfig::from_toml_with("", &["guidance.nope=1".into()]).is_err());
        assert!(RunConfig::from_toml_with("", &["no_equals".into()]).is_err());
    }

    #[test]
    fn inconsistent_sections_are_rejected() {
        assert!(RunConfig::from_toml("[schedule]\ntrain_steps = 100").is_err());
        assert!(RunConfig::from_toml("[guidance]\nbeta = 1.5").is_err());
    }
}
