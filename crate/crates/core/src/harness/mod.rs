//! Operational surface: training configuration, optimizer, FLOP
//! accounting, metrics export, and checkpoints. The CLI in `main.rs` is a
//! thin shell over this module.

pub mod checkpoint;
pub mod flops;
pub mod metrics;
pub mod optim;
pub mod train;

use crate::attention::Mechanism;
use crate::model::EncoderConfig;
use crate::synth::TaskSpec;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything one training run needs, as one flat record. The same JSON
/// shape is accepted from `--config` files and embedded into checkpoints;
/// missing fields fall back to the desk-scale defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    // model shape
    pub mechanism: Mechanism,
    pub d_model: usize,
    pub heads: usize,
    pub lang_layers: usize,
    pub vis_layers: usize,
    pub cross_blocks: usize,
    pub d_ff: usize,
    pub max_span: usize,
    pub ramp: f64,
    pub drop_count: usize,
    // task shape
    pub vocab: usize,
    pub classes: usize,
    pub t_lang: usize,
    pub t_vis: usize,
    pub attr_types: usize,
    pub noise: f64,
    // optimization
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub span_penalty: f64,
    pub eval_interval: usize,
    pub eval_count: usize,
    /// Stop as soon as eval accuracy reaches this, if set.
    pub stop_accuracy: Option<f64>,
    pub seed: u64,
    /// Write real step durations into the `ms` column. Off by default so
    /// two identically-seeded runs produce byte-identical CSVs.
    pub wall_clock_csv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mechanism: Mechanism::SpanEntmax,
            d_model: 32,
            heads: 2,
            lang_layers: 2,
            vis_layers: 1,
            cross_blocks: 1,
            d_ff: 128,
            max_span: 16,
            ramp: 4.0,
            drop_count: 0,
            vocab: 16,
            classes: 8,
            t_lang: 8,
            t_vis: 6,
            attr_types: 3,
            noise: 0.05,
            steps: 2000,
            batch: 32,
            lr: 3e-4,
            span_penalty: 1e-3,
            eval_interval: 100,
            eval_count: 200,
            stop_accuracy: None,
            seed: 9,
            wall_clock_csv: false,
        }
    }
}

impl TrainConfig {
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            t_lang: self.t_lang,
            t_vis: self.t_vis,
            attr_types: self.attr_types,
            attr_values: self.classes,
            noise: self.noise,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            mechanism: self.mechanism,
            d_model: self.d_model,
            heads: self.heads,
            lang_layers: self.lang_layers,
            vis_layers: self.vis_layers,
            cross_blocks: self.cross_blocks,
            d_ff: self.d_ff,
            vocab: self.vocab,
            d_vis: self.task_spec().d_vis(),
            classes: self.classes,
            max_span: self.max_span,
            ramp: self.ramp,
            drop_count: self.drop_count,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.task_spec();
        spec.validate()?;
        self.encoder_config().validate()?;
        if self.vocab < spec.vocab_needed() {
            return Err(Error::Config(format!(
                "vocab {} cannot express the question tokens; need at least {}",
                self.vocab,
                spec.vocab_needed()
            )));
        }
        if self.steps == 0 || self.batch == 0 || self.eval_interval == 0 || self.eval_count == 0 {
            return Err(Error::Config(
                "steps, batch, eval_interval and eval_count must be positive".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} is not usable", self.lr)));
        }
        if !self.span_penalty.is_finite() || self.span_penalty < 0.0 {
            return Err(Error::Config(format!(
                "span penalty {} is not usable",
                self.span_penalty
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config(format!("noise std {} is not usable", self.noise)));
        }
        if let Some(a) = self.stop_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!(
                    "stop_accuracy {a} must be a fraction in [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
