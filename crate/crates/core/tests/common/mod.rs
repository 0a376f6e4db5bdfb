#![allow(dead_code)]

use std::sync::Arc;

use coupled_core::ddpm::{NoiseSchedule, ScheduleKind};
use coupled_core::denoisers::{ConditioningMode, DenoiserBundle};
use coupled_core::nn::TimeEmbedding;
use coupled_core::world::{
    corrupt_examples, gen_dataset, ClassifierConfig, Corruption, FrozenClassifier, LabeledExample, TrainingPairs,
};

pub const CLASSES: usize = 3;

pub fn examples(per_class: usize, seed: u64) -> Vec<LabeledExample> {
    let mut ex = gen_dataset(CLASSES, per_class, seed).unwrap();
    corrupt_examples(&mut ex, Corruption::PixelReplace { fraction: 0.3 }, seed + 1).unwrap();
    ex
}

pub fn classifier() -> Arc<FrozenClassifier> {
    let cfg = ClassifierConfig {
        hidden: vec![24],
        epochs: 8,
        ..ClassifierConfig::default()
    };
    Arc::new(FrozenClassifier::train(&gen_dataset(CLASSES, 20, 11).unwrap(), CLASSES, &cfg).unwrap())
}

pub fn bundle(t: usize, mode: ConditioningMode, seed: u64) -> DenoiserBundle {
    let sched = Arc::new(NoiseSchedule::new(ScheduleKind::Cosine, t).unwrap());
    DenoiserBundle::init(&[32], TimeEmbedding::new(8).unwrap(), sched, classifier(), mode, seed).unwrap()
}

pub fn pairs(per_class: usize, seed: u64) -> TrainingPairs {
    TrainingPairs::from_examples(&examples(per_class, seed)).unwrap()
}
