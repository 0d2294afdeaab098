//! Synthetic attribute-lookup data for the two-stream encoder, plus a
//! single-stream copy task whose difficulty is a controlled distance.
//!
//! Lookup: a scene of `t_vis` slots, each carrying one value per attribute
//! type, rendered as concatenated one-hot blocks with Gaussian noise. The
//! question names an attribute type and a slot; the answer is that slot's
//! value for that type. Solving it requires routing the right vision
//! position into the pooled language output, which is what the adaptive
//! attention mechanisms are supposed to learn cheaply.
//!
//! Copy: every language position holds a random value token and the answer
//! is the value at a fixed position `distance`. With one self-attention
//! layer the task is solvable if and only if attention can reach that far
//! from position 0, which turns span limits into a measurable accuracy
//! cliff.
//!
//! Generation is counter-keyed: example `i` of a stream is a pure function
//! of `(seed, stream, i)`, so datasets never need to be stored to be
//! reproducible, and a JSONL dump is provided for inspection and interop.

use crate::rng::CounterRng;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

const SYNTH_SALT: u64 = 0x53594E5448; // "SYNTH"

/// Token ids reserved by the question encoding.
pub const PAD_TOKEN: usize = 0;
pub const ASK_TOKEN: usize = 1;
/// First id available for task-specific tokens.
pub const FIRST_CONTENT_TOKEN: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthExample {
    pub question: Vec<usize>,
    /// Scene slot features, row-major; empty for language-only tasks.
    /// The row width comes from the task spec, not the example.
    pub vision: Vec<f64>,
    pub answer: usize,
}

/// Attribute-lookup task shape.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub t_lang: usize,
    pub t_vis: usize,
    pub attr_types: usize,
    pub attr_values: usize,
    pub noise: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            t_lang: 8,
            t_vis: 6,
            attr_types: 3,
            attr_values: 8,
            noise: 0.05,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_lang < 3 {
            return Err(Error::Config(
                "lookup questions need at least 3 language positions".into(),
            ));
        }
        if self.t_vis == 0 || self.attr_types == 0 || self.attr_values < 2 {
            return Err(Error::Config(
                "lookup scenes need slots, attribute types and at least 2 values".into(),
            ));
        }
        Ok(())
    }

    /// Width of one scene slot's feature vector.
    pub fn d_vis(&self) -> usize {
        self.attr_types * self.attr_values
    }

    /// Smallest vocabulary that can express every question token.
    pub fn vocab_needed(&self) -> usize {
        FIRST_CONTENT_TOKEN + self.attr_types + self.t_vis
    }

    pub fn classes(&self) -> usize {
        self.attr_values
    }

    fn attr_token(&self, a: usize) -> usize {
        FIRST_CONTENT_TOKEN + a
    }

    fn slot_token(&self, s: usize) -> usize {
        FIRST_CONTENT_TOKEN + self.attr_types + s
    }
}

/// Example `index` of the lookup stream identified by `(seed, stream)`.
pub fn generate_lookup(spec: &TaskSpec, seed: u64, stream: u64, index: u64) -> SynthExample {
    let mut rng = CounterRng::from_key(&[seed, SYNTH_SALT, stream, index]);
    let asked_type = rng.below(spec.attr_types);
    let asked_slot = rng.below(spec.t_vis);

    let mut values = vec![vec![0usize; spec.attr_types]; spec.t_vis];
    for slot in values.iter_mut() {
        for v in slot.iter_mut() {
            *v = rng.below(spec.attr_values);
        }
    }

    let mut vision = Vec::with_capacity(spec.t_vis * spec.d_vis());
    for slot_values in &values {
        let mut row = vec![0.0; spec.d_vis()];
        for (a, &v) in slot_values.iter().enumerate() {
            row[a * spec.attr_values + v] = 1.0;
        }
        for x in row.iter_mut() {
            *x += rng.normal() * spec.noise;
        }
        vision.extend_from_slice(&row);
    }

    let mut question = vec![PAD_TOKEN; spec.t_lang];
    question[0] = ASK_TOKEN;
    question[1] = spec.attr_token(asked_type);
    question[2] = spec.slot_token(asked_slot);

    SynthExample {
        question,
        vision,
        answer: values[asked_slot][asked_type],
    }
}

/// Copy task shape: answer the value written at `distance`.
#[derive(Debug, Clone)]
pub struct CopySpec {
    pub t_lang: usize,
    pub distance: usize,
    pub values: usize,
}

impl CopySpec {
    pub fn validate(&self) -> Result<()> {
        if self.distance >= self.t_lang {
            return Err(Error::Config(format!(
                "copy distance {} does not fit in {} positions",
                self.distance, self.t_lang
            )));
        }
        if self.values < 2 {
            return Err(Error::Config("copy task needs at least 2 values".into()));
        }
        Ok(())
    }

    pub fn vocab_needed(&self) -> usize {
        FIRST_CONTENT_TOKEN + self.values
    }

    pub fn classes(&self) -> usize {
        self.values
    }
}

/// Example `index` of the copy stream identified by `(seed, stream)`.
pub fn generate_copy(spec: &CopySpec, seed: u64, stream: u64, index: u64) -> SynthExample {
    let mut rng = CounterRng::from_key(&[seed, SYNTH_SALT, stream, index]);
    let tokens: Vec<usize> = (0..spec.t_lang)
        .map(|_| FIRST_CONTENT_TOKEN + rng.below(spec.values))
        .collect();
    let answer = tokens[spec.distance] - FIRST_CONTENT_TOKEN;
    SynthExample {
        question: tokens,
        vision: Vec::new(),
        answer,
    }
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(mut out: W, examples: &[SynthExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<SynthExample>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: SynthExample = serde_json::from_str(&line).map_err(|e| {
            Error::Input(format!("line {}: not a valid example: {e}", lineno + 1))
        })?;
        out.push(ex);
    }
    Ok(out)
}
