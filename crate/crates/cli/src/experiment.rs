//! The full experiment config: training, pose search and evaluation keys in
//! one flat file.

use pseudoneg::config::{self, Section};
use pseudoneg::pose::{EvalConfig, PoseConfig};
use pseudoneg::trainer::{config_digest, hex, TrainConfig};
use pseudoneg::Result;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub pose: PoseConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Defaults overridden by `text`; unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        config::apply(text, &mut [&mut self.train, &mut self.pose, &mut self.eval])?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.pose.validate()?;
        self.eval.validate()
    }

    /// Every key with its resolved value; [`ExperimentConfig::parse`] reads
    /// it back exactly.
    pub fn to_text(&self) -> String {
        config::render(&[&self.train as &dyn Section, &self.pose, &self.eval])
    }

    pub fn digest(&self) -> String {
        hex(&config_digest(&self.to_text()))
    }

    /// One seed for everything: training init and sampling, pose restarts
    /// and evaluation pairs.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.pose.pose_seed = seed;
        self.eval.eval_seed = seed;
    }
}
