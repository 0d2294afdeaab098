//! Training and evaluation driver.
//!
//! One optimizer step per batch: every example in the batch runs through
//! the same sampled layer set on one tape, the mean task loss (plus the
//! span length penalty when spans are learned) is backpropagated, Adam
//! updates every parameter, and spans are projected back into range. All
//! randomness is counter-based, so a rerun with the same config writes a
//! byte-identical metrics file.

use super::checkpoint::write_checkpoint;
use super::metrics::{MetricsLog, MetricsRow};
use super::optim::Adam;
use super::TrainConfig;
use crate::layerdrop::DropState;
use crate::model::{Encoder, ExecutedLayers};
use crate::numerics::{Tape, Tensor};
use crate::synth::{generate_lookup, SynthExample, TaskSpec};
use crate::{Error, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Substream tag for training examples.
pub const TRAIN_STREAM: u64 = 0;
/// Substream tag for evaluation examples; disjoint from training for any
/// index so the eval set is never trained on.
pub const EVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalSummary {
    pub loss: f64,
    pub accuracy: f64,
    /// Kernel FLOPs the evaluation actually executed, summed over the set.
    pub flops: u64,
}

#[derive(Debug, Serialize)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_eval: EvalSummary,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Attention rows whose span mask hid every key, over the whole run.
    pub fallback_rows: u64,
    /// Alpha projections back into the supported range, over the whole run.
    pub alpha_clamps: u64,
}

pub fn vision_tensor(ex: &SynthExample, spec: &TaskSpec) -> Result<Tensor> {
    Tensor::new(&[spec.t_vis, spec.d_vis()], ex.vision.clone())
}

/// The deterministic evaluation set for a seed: examples the training
/// stream can never produce.
pub fn eval_examples(spec: &TaskSpec, seed: u64, count: usize) -> Vec<SynthExample> {
    (0..count)
        .map(|i| generate_lookup(spec, seed, EVAL_STREAM, i as u64))
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and accuracy over `examples` with every layer executing.
pub fn evaluate(enc: &Encoder, spec: &TaskSpec, examples: &[SynthExample]) -> Result<EvalSummary> {
    if examples.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let tape = Tape::eval();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for ex in examples {
        let vision = vision_tensor(ex, spec)?;
        let out = enc.forward(&tape, &ex.question, &vision, &DropState::Keep)?;
        let ce = tape.cross_entropy_logits(&out.logits, &[ex.answer])?;
        loss_sum += ce.item();
        if argmax(&out.logits.to_vec()) == ex.answer {
            correct += 1;
        }
    }
    Ok(EvalSummary {
        loss: loss_sum / examples.len() as f64,
        accuracy: correct as f64 / examples.len() as f64,
        flops: tape.recorded_flops(),
    })
}

fn check_examples(config: &TrainConfig, examples: &[SynthExample]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Input("training data file holds no examples".into()));
    }
    let spec = config.task_spec();
    for (i, ex) in examples.iter().enumerate() {
        if ex.question.len() != spec.t_lang {
            return Err(Error::Input(format!(
                "example {i}: question has {} tokens, config wants {}",
                ex.question.len(),
                spec.t_lang
            )));
        }
        if let Some(&t) = ex.question.iter().find(|&&t| t >= config.vocab) {
            return Err(Error::Input(format!(
                "example {i}: token {t} outside vocabulary of {}",
                config.vocab
            )));
        }
        if ex.vision.len() != spec.t_vis * spec.d_vis() {
            return Err(Error::Input(format!(
                "example {i}: vision has {} values, config wants {}x{}",
                ex.vision.len(),
                spec.t_vis,
                spec.d_vis()
            )));
        }
        if ex.answer >= config.classes {
            return Err(Error::Input(format!(
                "example {i}: answer {} outside {} classes",
                ex.answer, config.classes
            )));
        }
    }
    Ok(())
}

fn numeric_abort(
    ckpt: &Path,
    config: &TrainConfig,
    last_good: &[f64],
    step: usize,
    what: &str,
) -> Error {
    match write_checkpoint(ckpt, config, last_good) {
        Ok(()) => Error::Numeric(format!(
            "training diverged at step {step} ({what}); \
             parameters from the last stable step are saved to {}",
            ckpt.display()
        )),
        Err(e) => Error::Numeric(format!(
            "training diverged at step {step} ({what}); \
             saving the last stable parameters also failed: {e}"
        )),
    }
}

struct StepStats {
    loss: f64,
    accuracy: f64,
    executed: ExecutedLayers,
}

/// Forward the batch, backpropagate mean task loss plus span penalty.
/// Gradients are left on the parameters for the caller's optimizer step.
fn run_step(
    tape: &Tape,
    enc: &Encoder,
    spec: &TaskSpec,
    config: &TrainConfig,
    batch: &[SynthExample],
    drop: &DropState,
) -> Result<StepStats> {
    let mut ce_sum: Option<Tensor> = None;
    let mut correct = 0usize;
    let mut executed: Option<ExecutedLayers> = None;
    for ex in batch {
        let vision = vision_tensor(ex, spec)?;
        let out = enc.forward(tape, &ex.question, &vision, drop)?;
        if argmax(&out.logits.to_vec()) == ex.answer {
            correct += 1;
        }
        let ce = tape.cross_entropy_logits(&out.logits, &[ex.answer])?;
        ce_sum = Some(match ce_sum {
            None => ce,
            Some(s) => tape.add(&s, &ce)?,
        });
        executed.get_or_insert(out.executed);
    }
    let ce_mean = tape.scale(&ce_sum.expect("batch is non-empty"), 1.0 / batch.len() as f64)?;

    // Length penalty: the mean of every span parameter, weighted by the
    // configured coefficient. Sites all have the same head count, so the
    // per-site mean of means is the global mean.
    let span_params = enc.span_params();
    let total = if config.span_penalty > 0.0 && !span_params.is_empty() {
        let mut z_sum: Option<Tensor> = None;
        for sp in &span_params {
            let m = tape.mean_all(&sp.z)?;
            z_sum = Some(match z_sum {
                None => m,
                Some(s) => tape.add(&s, &m)?,
            });
        }
        let penalty = tape.scale(
            &z_sum.expect("span params are non-empty"),
            config.span_penalty / span_params.len() as f64,
        )?;
        tape.add(&ce_mean, &penalty)?
    } else {
        ce_mean.clone()
    };

    if !total.item().is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    tape.backward(&total)?;
    Ok(StepStats {
        loss: ce_mean.item(),
        accuracy: correct as f64 / batch.len() as f64,
        executed: executed.expect("batch is non-empty"),
    })
}

/// Run the full training loop described by `config`, writing `metrics.csv`
/// and `model.ckpt` under `out_dir`. `data`, when given, replaces the
/// synthetic training stream (cycled in order); evaluation always uses the
/// synthetic held-out stream.
pub fn train(
    config: &TrainConfig,
    out_dir: &Path,
    data: Option<Vec<SynthExample>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some(examples) = &data {
        check_examples(config, examples)?;
    }
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("model.ckpt");
    let metrics_path = out_dir.join("metrics.csv");

    let spec = config.task_spec();
    let enc = Encoder::new(config.encoder_config())?;
    let params: Vec<&Tensor> = enc.registry.entries().iter().map(|e| &e.tensor).collect();
    let mut adam = Adam::new(config.lr);
    let eval_set = eval_examples(&spec, config.seed, config.eval_count);
    let full_label = ExecutedLayers::full(&enc.config).label();
    let mut log = MetricsLog::create(&metrics_path)?;

    let row = |step: usize, split: &str, loss: f64, accuracy: f64, kept: String, flops: u64, ms: u64| {
        MetricsRow {
            step,
            split: split.to_string(),
            loss,
            accuracy,
            spans: enc.span_readout(),
            alphas: enc.alpha_readout(),
            kept_layers: kept,
            flops,
            ms,
        }
    };

    let mut fallback_rows = 0u64;
    let mut alpha_clamps = 0u64;
    let mut last_good = enc.registry.flatten();
    let mut stopped_early = false;
    let mut steps_run = 0usize;

    let ev0 = evaluate(&enc, &spec, &eval_set)?;
    log.append(&row(0, "eval", ev0.loss, ev0.accuracy, full_label.clone(), ev0.flops, 0))?;
    let mut final_eval = ev0;
    let reached = |ev: &EvalSummary| config.stop_accuracy.is_some_and(|t| ev.accuracy >= t);
    if reached(&ev0) {
        stopped_early = true;
    }

    if !stopped_early {
        for step in 1..=config.steps {
            let started = Instant::now();
            let drop = DropState::Sample { seed: config.seed, step: step as u64 };
            let batch: Vec<SynthExample> = (0..config.batch)
                .map(|i| {
                    let idx = (step - 1) * config.batch + i;
                    match &data {
                        Some(examples) => examples[idx % examples.len()].clone(),
                        None => generate_lookup(&spec, config.seed, TRAIN_STREAM, idx as u64),
                    }
                })
                .collect();

            let tape = Tape::new();
            let stats = match run_step(&tape, &enc, &spec, config, &batch, &drop) {
                Ok(stats) => stats,
                Err(Error::NonFinite(what)) => {
                    log.finish()?;
                    return Err(numeric_abort(&ckpt_path, config, &last_good, step, what));
                }
                Err(Error::Numeric(what)) => {
                    log.finish()?;
                    return Err(numeric_abort(&ckpt_path, config, &last_good, step, &what));
                }
                Err(e) => return Err(e),
            };
            adam.step(&params);
            for sp in enc.span_params() {
                sp.clamp_to(config.max_span as f64);
            }
            enc.registry.clear_grads();
            fallback_rows += tape.fallback_rows();
            alpha_clamps += tape.alpha_clamps();
            steps_run = step;

            let snapshot = enc.registry.flatten();
            if snapshot.iter().any(|v| !v.is_finite()) {
                log.finish()?;
                return Err(numeric_abort(
                    &ckpt_path,
                    config,
                    &last_good,
                    step,
                    "optimizer update produced non-finite parameters",
                ));
            }
            last_good = snapshot;

            let record = step % config.eval_interval == 0 || step == config.steps;
            if record {
                let train_ms = if config.wall_clock_csv {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                };
                log.append(&row(
                    step,
                    "train",
                    stats.loss,
                    stats.accuracy,
                    stats.executed.label(),
                    tape.recorded_flops(),
                    train_ms,
                ))?;
                let eval_started = Instant::now();
                let ev = evaluate(&enc, &spec, &eval_set)?;
                let eval_ms = if config.wall_clock_csv {
                    eval_started.elapsed().as_millis() as u64
                } else {
                    0
                };
                log.append(&row(
                    step,
                    "eval",
                    ev.loss,
                    ev.accuracy,
                    full_label.clone(),
                    ev.flops,
                    eval_ms,
                ))?;
                final_eval = ev;
                if reached(&ev) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    log.finish()?;
    write_checkpoint(&ckpt_path, config, &enc.registry.flatten())?;
    Ok(TrainOutcome {
        steps_run,
        final_eval,
        stopped_early,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        fallback_rows,
        alpha_clamps,
    })
}
