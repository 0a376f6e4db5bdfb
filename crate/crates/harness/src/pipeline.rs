//! Per-replicate world construction, the bundle cache and evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use coupled_core::coupling::{run_strategy, CouplingConfig, GuidanceSource, NfeReport, Strategy, Trace};
use coupled_core::ddpm::NoiseSchedule;
use coupled_core::denoisers::{ConditioningMode, DenoiserBundle};
use coupled_core::nn::TimeEmbedding;
use coupled_core::rng::{derive_seed, SamplingStreams};
use coupled_core::trainer::{self, TrainConfig, TrainReport};
use coupled_core::world::{corrupt_examples, gen_dataset, Corruption, FrozenClassifier, LabeledExample, TrainingPairs};
use coupled_core::Tensor;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

/// Child indices mixed into a replicate seed, one per consumer.
pub mod seed_role {
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const TRAIN_CORRUPT: u64 = 3;
    pub const TEST_CORRUPT: u64 = 4;
    pub const CLASSIFIER: u64 = 5;
    pub const INIT: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const SAMPLE_INIT: u64 = 8;
    pub const SAMPLE_STEP: u64 = 9;
    /// Second posterior-noise stream for replay comparisons.
    pub const SAMPLE_STEP_REPLAY: u64 = 10;
    pub const SDE_SAMPLE: u64 = 11;
}

/// Clean data and the frozen classifier of one replicate.
pub struct World {
    pub seed: u64,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub classifier: Arc<FrozenClassifier>,
}

impl World {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let w = &cfg.world;
        let train = gen_dataset(w.classes, w.train_per_class, derive_seed(seed, seed_role::TRAIN_DATA))?;
        let test = gen_dataset(w.classes, w.test_per_class, derive_seed(seed, seed_role::TEST_DATA))?;
        let ccfg = cfg.classifier.to_config(derive_seed(seed, seed_role::CLASSIFIER));
        let classifier = Arc::new(FrozenClassifier::train(&train, w.classes, &ccfg)?);
        Ok(Self {
            seed,
            train,
            test,
            classifier,
        })
    }
}

/// One corruption applied to a replicate's train and test splits.
pub struct Split {
    pub corruption: Corruption,
    pub pairs: TrainingPairs,
    pub test_x: Tensor,
    pub labels: Vec<usize>,
    /// Fingerprint of `test_x`; every method of the split must report it.
    pub input_hash: u64,
}

impl Split {
    pub fn build(world: &World, corruption: Corruption) -> Result<Self> {
        let mut train = world.train.clone();
        let mut test = world.test.clone();
        corrupt_examples(&mut train, corruption, derive_seed(world.seed, seed_role::TRAIN_CORRUPT))?;
        corrupt_examples(&mut test, corruption, derive_seed(world.seed, seed_role::TEST_CORRUPT))?;
        let rows: Vec<&[f64]> = test.iter().map(|e| e.x_cor.data()).collect();
        let test_x = Tensor::stack_rows(&rows)?;
        Ok(Self {
            corruption,
            pairs: TrainingPairs::from_examples(&train)?,
            input_hash: test_x.fingerprint(),
            labels: test.iter().map(|e| e.label).collect(),
            test_x,
        })
    }
}

/// The trained networks a method is evaluated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    /// Untrained networks; only the classifier is used.
    Untrained,
    /// Independent warm start, no cross-conditioning.
    Independent,
    Card,
    Parallel(GuidanceSource),
    Alternating,
    Nested,
}

impl BundleKind {
    pub fn for_method(method: Strategy, guidance: GuidanceSource) -> Self {
        match method {
            Strategy::BaselineNoisy => BundleKind::Untrained,
            Strategy::BaselineEnhanced => BundleKind::Independent,
            Strategy::BaselineCard => BundleKind::Card,
            Strategy::Parallel => BundleKind::Parallel(guidance),
            Strategy::Alternating => BundleKind::Alternating,
            Strategy::Nested => BundleKind::Nested,
        }
    }

    fn dir_name(&self) -> String {
        match self {
            BundleKind::Untrained => "untrained".into(),
            BundleKind::Independent => "independent".into(),
            BundleKind::Card => "card".into(),
            BundleKind::Parallel(GuidanceSource::CleanEstimate) => "parallel".into(),
            BundleKind::Parallel(GuidanceSource::NoisySample) => "parallel-noisy".into(),
            BundleKind::Alternating => "alternating".into(),
            BundleKind::Nested => "nested".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainTiming {
    pub kind: String,
    pub seconds: f64,
    pub loaded: bool,
}

/// Trains, loads and memoises the bundles of one split.
pub struct BundleStore<'a> {
    cfg: &'a ExperimentConfig,
    world: &'a World,
    split: &'a Split,
    root: PathBuf,
    cache: HashMap<BundleKind, (DenoiserBundle, String)>,
    pub timings: Vec<TrainTiming>,
}

impl<'a> BundleStore<'a> {
    pub fn new(cfg: &'a ExperimentConfig, world: &'a World, split: &'a Split, out: &Path) -> Self {
        Self {
            cfg,
            world,
            split,
            root: out.join("bundles"),
            cache: HashMap::new(),
            timings: Vec::new(),
        }
    }

    fn train_seed(&self) -> u64 {
        derive_seed(self.world.seed, seed_role::TRAIN)
    }

    fn initial(&self) -> Result<DenoiserBundle> {
        let m = &self.cfg.model;
        let schedule = Arc::new(NoiseSchedule::new(m.schedule, m.diffusion_steps)?);
        let mut b = DenoiserBundle::init(
            &m.hidden,
            TimeEmbedding::new(m.embed)?,
            schedule,
            self.world.classifier.clone(),
            ConditioningMode::COUPLED,
            derive_seed(self.world.seed, seed_role::INIT),
        )?;
        b.calibrate_logit_range(self.split.pairs.x0(), m.logit_margin)?;
        Ok(b)
    }

    /// Trainer settings for `kind`, with fields the trainer ignores pinned
    /// so they do not perturb the cache key.
    fn train_config(&self, kind: BundleKind) -> TrainConfig {
        let seed = self.train_seed();
        match kind {
            BundleKind::Untrained | BundleKind::Independent => {
                let mut t = self.cfg.train_config(Strategy::BaselineEnhanced, seed);
                t.epochs = 0;
                t.sampling_steps = 1;
                t.warmup_fraction = 0.0;
                t.guidance = GuidanceSource::CleanEstimate;
                t.estimate_dropout = 0.0;
                t
            }
            BundleKind::Card => self.cfg.train_config(Strategy::BaselineCard, seed),
            BundleKind::Parallel(g) => {
                let mut t = self.cfg.train_config(Strategy::Parallel, seed);
                t.guidance = g;
                t
            }
            BundleKind::Alternating => self.cfg.train_config(Strategy::Alternating, seed),
            BundleKind::Nested => self.cfg.train_config(Strategy::Nested, seed),
        }
    }

    fn parent(kind: BundleKind) -> Option<BundleKind> {
        match kind {
            BundleKind::Parallel(_) | BundleKind::Alternating | BundleKind::Nested => Some(BundleKind::Independent),
            _ => None,
        }
    }

    /// Cache key: everything that determines the trained parameters.
    fn key(&self, kind: BundleKind, parent_key: Option<&str>) -> String {
        #[derive(Serialize)]
        struct Key<'k> {
            kind: BundleKind,
            seed: u64,
            world: &'k crate::config::WorldSpec,
            classifier: &'k crate::config::ClassifierSpec,
            model: &'k crate::config::ModelSpec,
            corruption: Corruption,
            train: TrainConfig,
            parent: Option<&'k str>,
        }
        let k = Key {
            kind,
            seed: self.world.seed,
            world: &self.cfg.world,
            classifier: &self.cfg.classifier,
            model: &self.cfg.model,
            corruption: self.split.corruption,
            train: self.train_config(kind),
            parent: parent_key,
        };
        let json = serde_json::to_vec(&k).expect("key serialises");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn dir(&self, kind: BundleKind, key: &str) -> PathBuf {
        self.root
            .join(format!("seed-{}", self.world.seed))
            .join(self.split.corruption.label())
            .join(format!("{}-{key}", kind.dir_name()))
    }

    pub fn get(&mut self, kind: BundleKind) -> Result<DenoiserBundle> {
        Ok(self.get_keyed(kind)?.0)
    }

    fn get_keyed(&mut self, kind: BundleKind) -> Result<(DenoiserBundle, String)> {
        if let Some(hit) = self.cache.get(&kind) {
            return Ok(hit.clone());
        }
        let parent = match Self::parent(kind) {
            Some(p) => Some(self.get_keyed(p)?),
            None => None,
        };
        let key = self.key(kind, parent.as_ref().map(|p| p.1.as_str()));
        let entry = if kind == BundleKind::Untrained {
            (self.initial()?, key)
        } else {
            let dir = self.dir(kind, &key);
            let start = Instant::now();
            let (bundle, loaded) = if dir.join("manifest.json").exists() {
                (DenoiserBundle::load_dir(&dir, self.world.classifier.clone())?, true)
            } else if self.cfg.require_checkpoints {
                return Err(HarnessError::MissingCheckpoint(dir));
            } else {
                let (b, report) = self.train(kind, parent.map(|p| p.0))?;
                b.save_dir(&dir)?;
                report.write_csv(std::io::BufWriter::new(std::fs::File::create(dir.join("loss.csv"))?))?;
                (b, false)
            };
            self.timings.push(TrainTiming {
                kind: kind.dir_name(),
                seconds: start.elapsed().as_secs_f64(),
                loaded,
            });
            (bundle, key)
        };
        self.cache.insert(kind, entry.clone());
        Ok(entry)
    }

    fn train(&self, kind: BundleKind, parent: Option<DenoiserBundle>) -> Result<(DenoiserBundle, TrainReport)> {
        let cfg = self.train_config(kind);
        let data = &self.split.pairs;
        let from_parent = |mode| parent.as_ref().expect("parent bundle").with_mode(mode);
        let out = match kind {
            BundleKind::Untrained => unreachable!("untrained bundles are never trained"),
            BundleKind::Independent => {
                trainer::warm_start(&self.initial()?.with_mode(ConditioningMode::INDEPENDENT), data, &cfg)?
            }
            BundleKind::Card => trainer::train_card(&self.initial()?.with_mode(ConditioningMode::LOGIT_ONLY), data, &cfg)?,
            BundleKind::Parallel(_) => trainer::train_parallel(&from_parent(ConditioningMode::COUPLED), data, &cfg)?,
            BundleKind::Alternating => {
                trainer::train_alternating(&from_parent(ConditioningMode::POINT_ESTIMATE), data, &cfg)?
            }
            BundleKind::Nested => trainer::train_nested(&from_parent(ConditioningMode::POINT_ESTIMATE), data, &cfg)?,
        };
        Ok(out)
    }
}

/// Sampling streams shared by every method of a replicate.
pub fn sampling_streams(seed: u64, replay: bool) -> SamplingStreams {
    let step = if replay {
        seed_role::SAMPLE_STEP_REPLAY
    } else {
        seed_role::SAMPLE_STEP
    };
    SamplingStreams::split(derive_seed(seed, seed_role::SAMPLE_INIT), derive_seed(seed, step))
}

pub struct Evaluation {
    pub accuracy: f64,
    /// Calls summed over every test example.
    pub nfe_total: NfeReport,
    pub y_hat: Tensor,
    pub trace: Trace,
    pub seconds: f64,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Runs `ccfg` over the whole test split as one batch.
pub fn evaluate(bundle: &DenoiserBundle, split: &Split, ccfg: &CouplingConfig, streams: &mut SamplingStreams) -> Result<Evaluation> {
    let start = Instant::now();
    let out = run_strategy(bundle, &split.test_x, ccfg, streams)?;
    if out.trace.input_hash != split.input_hash {
        return Err(HarnessError::InputMismatch(format!(
            "{} consumed inputs {:016x}, split holds {:016x}",
            ccfg.strategy.name(),
            out.trace.input_hash,
            split.input_hash
        )));
    }
    Ok(Evaluation {
        accuracy: accuracy(&out.predictions(), &split.labels),
        nfe_total: out.nfe.times(split.labels.len() as u64),
        y_hat: out.y_hat,
        trace: out.trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}
