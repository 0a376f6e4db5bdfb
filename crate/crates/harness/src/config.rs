//! Experiment configuration: one TOML file, unknown keys rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coupled_core::coupling::{CouplingConfig, GuidanceSource, Strategy};
use coupled_core::ddpm::{SamplerKind, ScheduleKind};
use coupled_core::sde::{OuveParams, PcConfig, ScoreTrainConfig, ToySignalSpec};
use coupled_core::trainer::TrainConfig;
use coupled_core::world::{ClassifierConfig, Corruption, IMAGE_SIZE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub classes: usize,
    /// Side length of the images; the glyph world is fixed at 12.
    #[serde(default = "default_size")]
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

fn default_size() -> usize {
    IMAGE_SIZE
}

/// Classifier training knobs; its seed is derived from the replicate seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub label_smoothing: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        Self {
            hidden: c.hidden,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            label_smoothing: c.label_smoothing,
        }
    }
}

impl ClassifierSpec {
    pub fn to_config(&self, seed: u64) -> ClassifierConfig {
        ClassifierConfig {
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            label_smoothing: self.label_smoothing,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub embed: usize,
    pub schedule: ScheduleKind,
    /// Length of the discrete noise schedule.
    pub diffusion_steps: usize,
    /// Relative padding of the calibrated logit clamp.
    pub logit_margin: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            embed: 32,
            schedule: ScheduleKind::Cosine,
            diffusion_steps: 50,
            logit_margin: 0.1,
        }
    }
}

/// Optimisation settings shared by every trainer. Coupling-specific
/// settings (warm-up, guidance, estimate step budget) come from the
/// sampling config of the method being trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub warm_start_epochs: usize,
    /// Epochs of per-step coupled and CARD training.
    pub epochs: usize,
    /// Epochs of the alternating and nested trainers, whose batches each
    /// cost full sampling trajectories.
    pub sampling_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: Option<f64>,
    pub inner_steps: usize,
    pub estimate_dropout: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            warm_start_epochs: t.warm_start_epochs,
            epochs: t.epochs,
            sampling_epochs: t.epochs / 4,
            batch_size: t.batch_size,
            lr: t.lr,
            clip: t.clip,
            inner_steps: t.inner_steps,
            estimate_dropout: t.estimate_dropout,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

/// Sampling settings; every field left out falls back to the defaults of
/// `CouplingConfig::new` for the method's step count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    pub steps: Option<usize>,
    pub sampler: Option<SamplerKind>,
    pub warmup_fraction: Option<f64>,
    pub iterations: Option<usize>,
    pub t_switch: Option<usize>,
    pub refresh_every: Option<usize>,
    pub guidance: Option<GuidanceSource>,
}

impl SamplingSpec {
    fn overlay(&self, over: &SamplingSpec) -> SamplingSpec {
        SamplingSpec {
            steps: over.steps.or(self.steps),
            sampler: over.sampler.or(self.sampler),
            warmup_fraction: over.warmup_fraction.or(self.warmup_fraction),
            iterations: over.iterations.or(self.iterations),
            t_switch: over.t_switch.or(self.t_switch),
            refresh_every: over.refresh_every.or(self.refresh_every),
            guidance: over.guidance.or(self.guidance),
        }
    }

    fn resolve(&self, strategy: Strategy, schedule_len: usize) -> CouplingConfig {
        let mut c = CouplingConfig::new(strategy, self.steps.unwrap_or(schedule_len));
        if let Some(v) = self.sampler {
            c.sampler = v;
        }
        if let Some(v) = self.warmup_fraction {
            c.warmup_fraction = v;
        }
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        if let Some(v) = self.t_switch {
            c.t_switch = v;
        }
        if let Some(v) = self.refresh_every {
            c.refresh_every = v;
        }
        if let Some(v) = self.guidance {
            c.guidance = v;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// The exact kernel score around the known clean signal.
    Analytic,
    /// A denoising-score-matching network.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSpec {
    pub mode: ScoreMode,
    #[serde(default)]
    pub ouve: OuveParams,
    #[serde(default)]
    pub pc: PcConfig,
    #[serde(default)]
    pub signals: ToySignalSpec,
    #[serde(default)]
    pub score_training: ScoreTrainConfig,
    /// Examples whose full trajectories are written out.
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
}

fn default_trajectories() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One replicate per seed; every stream of a replicate derives from it.
    pub seeds: Vec<u64>,
    pub methods: Vec<Strategy>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Fail instead of training when a bundle checkpoint is absent.
    #[serde(default)]
    pub require_checkpoints: bool,
    pub world: WorldSpec,
    pub corruptions: Vec<Corruption>,
    #[serde(default)]
    pub classifier: ClassifierSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub sampling: SamplingSpec,
    /// Per-method sampling overrides keyed by method name.
    #[serde(default)]
    pub overrides: BTreeMap<String, SamplingSpec>,
    /// Step counts swept by the step ablation.
    #[serde(default)]
    pub ablate_steps: Vec<usize>,
    #[serde(default)]
    pub sde: Option<SdeSpec>,
}

fn invalid(field: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

/// The config spelling of a method, as used in `methods` and `overrides`.
pub fn method_key(s: Strategy) -> String {
    match serde_json::to_value(s) {
        Ok(serde_json::Value::String(k)) => k,
        _ => unreachable!("strategies serialise as strings"),
    }
}

pub fn strategy_by_key(key: &str) -> Option<Strategy> {
    serde_json::from_value(serde_json::Value::String(key.to_string())).ok()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config {
            field: e.span().map_or_else(|| "<file>".into(), |s| format!("bytes {}..{}", s.start, s.end)),
            msg: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(invalid("seeds", "replicate seeds must be distinct"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods", "at least one method is required"));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(invalid("methods", format!("{} is listed twice", m.name())));
            }
        }
        if self.world.size != IMAGE_SIZE {
            return Err(invalid("world.size", format!("the glyph world is {IMAGE_SIZE}x{IMAGE_SIZE}")));
        }
        if self.world.classes < 2 {
            return Err(invalid("world.classes", "need at least two classes"));
        }
        if self.world.train_per_class == 0 || self.world.test_per_class == 0 {
            return Err(invalid("world", "train_per_class and test_per_class must be positive"));
        }
        if self.corruptions.is_empty() {
            return Err(invalid("corruptions", "at least one corruption is required"));
        }
        for (i, c) in self.corruptions.iter().enumerate() {
            c.validate().map_err(|e| invalid(&format!("corruptions[{i}]"), e.to_string()))?;
            if self.corruptions[..i].iter().any(|o| o.label() == c.label()) {
                return Err(invalid(&format!("corruptions[{i}]"), "duplicate corruption"));
            }
        }
        if self.model.diffusion_steps == 0 {
            return Err(invalid("model.diffusion_steps", "must be at least 1"));
        }
        if self.model.embed == 0 || self.model.embed % 2 != 0 {
            return Err(invalid("model.embed", "must be a positive even width"));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(invalid("model.hidden", "need at least one nonzero hidden width"));
        }
        if !(self.model.logit_margin >= 0.0) {
            return Err(invalid("model.logit_margin", "must be non-negative"));
        }
        for name in self.overrides.keys() {
            match strategy_by_key(name) {
                Some(s) if self.methods.contains(&s) => {}
                Some(_) => return Err(invalid(&format!("overrides.{name}"), "method is not in the methods list")),
                None => return Err(invalid(&format!("overrides.{name}"), "unknown method")),
            }
        }
        for &m in &self.methods {
            let c = self.coupling(m);
            c.validate(self.model.diffusion_steps)
                .map_err(|e| invalid(&format!("overrides.{}", method_key(m)), e.to_string()))?;
            self.train_config(m, 0)
                .validate()
                .map_err(|e| invalid("train", e.to_string()))?;
        }
        let mut prev = 0;
        for &s in &self.ablate_steps {
            if s <= prev || s > self.model.diffusion_steps {
                return Err(invalid(
                    "ablate_steps",
                    format!("must ascend strictly within 1..={}", self.model.diffusion_steps),
                ));
            }
            prev = s;
        }
        if let Some(sde) = &self.sde {
            sde.ouve.validate().map_err(|e| invalid("sde.ouve", e.to_string()))?;
            if sde.pc.steps == 0 {
                return Err(invalid("sde.pc.steps", "must be at least 1"));
            }
            if !(sde.pc.snr >= 0.0) {
                return Err(invalid("sde.pc.snr", "must be non-negative"));
            }
            if sde.signals.count == 0 || sde.signals.length < 2 {
                return Err(invalid("sde.signals", "need count >= 1 and length >= 2"));
            }
        }
        Ok(())
    }

    /// The full sampling config of `method`.
    pub fn coupling(&self, method: Strategy) -> CouplingConfig {
        let spec = match self.overrides.get(&method_key(method)) {
            Some(o) => self.sampling.overlay(o),
            None => self.sampling.clone(),
        };
        spec.resolve(method, self.model.diffusion_steps)
    }

    /// Trainer settings for the bundle that serves `method`.
    pub fn train_config(&self, method: Strategy, seed: u64) -> TrainConfig {
        let c = self.coupling(method);
        let t = &self.train;
        let epochs = match method {
            Strategy::Alternating | Strategy::Nested => t.sampling_epochs,
            _ => t.epochs,
        };
        TrainConfig {
            epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            clip: t.clip,
            warm_start_epochs: t.warm_start_epochs,
            sampling_steps: c.steps,
            inner_steps: t.inner_steps,
            warmup_fraction: c.warmup_fraction,
            guidance: c.guidance,
            estimate_dropout: t.estimate_dropout,
            checkpoint_every: t.checkpoint_every,
            checkpoint_dir: None,
            seed,
        }
    }

    /// Replaces the seed list with one seed, for `--seed-override`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}
