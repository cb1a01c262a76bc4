//! Run configuration: one JSON document whose defaults encode the
//! reference pipeline settings (middle-block extraction at timestep
//! fractions 0.05/0.15/0.25, a 10-member ensemble, the standard MLP
//! recipe). Flags override individual fields by dotted path.

use dseg_core::error::{Error, Result};
use dseg_core::features::{default_block_set, FeatureExtractionConfig, NoisePolicy};
use dseg_core::unet::UNetConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_name: String,
    /// Base output directory; the DSEG_OUT environment variable overrides.
    pub output_dir: String,
    pub dataset: DatasetSection,
    pub schedule: ScheduleSection,
    pub unet: UnetSection,
    pub training: TrainingSection,
    pub extraction: ExtractionSection,
    pub classifier: ClassifierSection,
    pub experiment: ExperimentSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Existing dataset directory; when absent, `gen-data` writes to
    /// `<out>/<run>/dataset` and later stages read from there.
    pub path: Option<String>,
    pub resolution: usize,
    pub class_count: usize,
    pub seed: u64,
    pub labeled_train: usize,
    pub unlabeled: usize,
    pub test: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: None,
            resolution: 64,
            class_count: 5,
            seed: 7,
            labeled_train: 20,
            unlabeled: 500,
            test: 20,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        // desk-scale schedule: T = 100 with betas scaled so the terminal
        // signal level matches the usual T = 1000, 1e-4..0.02 profile
        ScheduleSection {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetSection {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub time_embedding_dim: usize,
}

impl Default for UnetSection {
    fn default() -> Self {
        UnetSection {
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_resolution: 2,
            time_embedding_dim: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// 0 disables mid-training grids; a grid is always written at the end.
    pub sample_every: usize,
    pub sample_count: usize,
    pub sample_seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            steps: 1500,
            batch_size: 8,
            learning_rate: 2e-4,
            seed: 11,
            log_every: 25,
            checkpoint_every: 250,
            sample_every: 0,
            sample_count: 9,
            sample_seed: 4242,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionSection {
    /// Decoder block indices; None selects the middle-third-plus-shallow
    /// default for the model's depth.
    pub blocks: Option<Vec<usize>>,
    /// Timesteps as fractions of T, so the same config follows T.
    pub timestep_fractions: Vec<f64>,
    pub noise_policy: NoisePolicy,
    pub noise_seed: u64,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        ExtractionSection {
            blocks: None,
            timestep_fractions: vec![0.05, 0.15, 0.25],
            noise_policy: NoisePolicy::FixedShared,
            noise_seed: 99,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    /// None applies the class-count rule: (128, 32) below 30 classes,
    /// else (256, 128).
    pub hidden_dims: Option<(usize, usize)>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: f64,
    pub ensemble_size: usize,
    pub seed: u64,
    pub class_weighting: bool,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            hidden_dims: None,
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 4.0,
            ensemble_size: 10,
            seed: 21,
            class_weighting: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub probe_blocks: Option<Vec<usize>>,
    pub probe_fractions: Vec<f64>,
    /// acceptance threshold for the noise ablation (max gap between
    /// policy means)
    pub noise_gap: f64,
    pub budgets: Vec<usize>,
    pub budget_slack: f64,
    pub kmeans_k: usize,
    pub kmeans_block: Option<usize>,
    pub kmeans_fraction: f64,
    pub kmeans_images: usize,
    pub area_quantile: f64,
    pub severities: Vec<u8>,
    pub corrupt_seed: u64,
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![1, 2, 3],
            probe_blocks: None,
            probe_fractions: vec![0.05, 0.15, 0.25, 0.45, 0.65, 0.85],
            noise_gap: 0.05,
            budgets: vec![5, 10, 20],
            budget_slack: 0.02,
            kmeans_k: 5,
            kmeans_block: None,
            kmeans_fraction: 0.15,
            kmeans_images: 4,
            area_quantile: 0.5,
            severities: vec![1, 3, 5],
            corrupt_seed: 1234,
            workers: 1,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_name: "run".into(),
            output_dir: "runs".into(),
            dataset: DatasetSection::default(),
            schedule: ScheduleSection::default(),
            unet: UnetSection::default(),
            training: TrainingSection::default(),
            extraction: ExtractionSection::default(),
            classifier: ClassifierSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RunConfig {
    /// Load from an optional JSON file, then apply dotted-path overrides.
    /// Unknown keys anywhere are configuration errors.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("default serializes");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("config {} is not valid JSON: {e}", p.display())))?;
            merge(&mut value, user);
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{item}' is not key=value")))?;
            let parsed: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        let config: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.class_count < 3 {
            return Err(Error::config("dataset.class_count must be >= 3"));
        }
        for f in self
            .extraction
            .timestep_fractions
            .iter()
            .chain(self.experiment.probe_fractions.iter())
        {
            if !(*f > 0.0 && *f < 1.0) {
                return Err(Error::config(format!(
                    "timestep fraction {f} must lie in (0, 1)"
                )));
            }
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::config("experiment.seeds must be nonempty"));
        }
        if self.experiment.workers == 0 {
            return Err(Error::config("experiment.workers must be >= 1"));
        }
        Ok(())
    }

    /// Output directory for this run: `<output_dir>/<run_name>`, with
    /// DSEG_OUT overriding the base.
    pub fn run_dir(&self) -> PathBuf {
        let base = std::env::var("DSEG_OUT").unwrap_or_else(|_| self.output_dir.clone());
        Path::new(&base).join(&self.run_name)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        match &self.dataset.path {
            Some(p) => PathBuf::from(p),
            None => self.run_dir().join("dataset"),
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            base_channels: self.unet.base_channels,
            channel_multipliers: self.unet.channel_multipliers.clone(),
            blocks_per_resolution: self.unet.blocks_per_resolution,
            time_embedding_dim: self.unet.time_embedding_dim,
            input_resolution: self.dataset.resolution,
        }
    }

    /// Resolve fractions and default block selection against a concrete
    /// model depth and schedule length.
    pub fn extraction_config(&self, decoder_blocks: usize, steps: usize) -> FeatureExtractionConfig {
        let blocks = self
            .extraction
            .blocks
            .clone()
            .unwrap_or_else(|| default_block_set(decoder_blocks));
        let mut timesteps: Vec<usize> = self
            .extraction
            .timestep_fractions
            .iter()
            .map(|&f| dseg_core::diffusion::timestep_from_fraction(f, steps))
            .collect();
        timesteps.sort_unstable();
        timesteps.dedup();
        FeatureExtractionConfig {
            blocks,
            timesteps,
            noise_policy: self.extraction.noise_policy,
            noise_seed: self.extraction.noise_seed,
        }
    }

    pub fn mlp_config(&self, input_dim: usize, class_count: usize) -> dseg_core::classifier::MLPConfig {
        let mut cfg = dseg_core::classifier::default_mlp_config(input_dim, class_count);
        if let Some(h) = self.classifier.hidden_dims {
            cfg.hidden_dims = h;
        }
        cfg.learning_rate = self.classifier.learning_rate;
        cfg.batch_size = self.classifier.batch_size;
        cfg.epochs = self.classifier.epochs;
        cfg.class_weighting = self.classifier.class_weighting;
        cfg
    }

    /// FNV hash of the canonical JSON, recorded in run.json.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }
}

/// Deep-merge `user` over `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Set a dotted path like `training.steps` to a value.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override path '{path}' crosses a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(serde_json::Map::new()));
    }
    Err(Error::config(format!("empty override path '{path}'")))
}
