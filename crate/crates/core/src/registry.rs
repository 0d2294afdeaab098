//! Central bookkeeping for trainable parameters.
//!
//! Every parameter tensor is created through the registry, which assigns it
//! a stable name, a deterministic initialization drawn from a counter-keyed
//! generator (so construction order elsewhere cannot change init values),
//! and a position in the flat serialization order used by checkpoints. The
//! same order drives the optimizer walk, making runs reproducible
//! bit for bit from a seed.

use crate::numerics::Tensor;
use crate::rng::CounterRng;
use crate::{Error, Result};

const PARAM_SALT: u64 = 0x5041524D; // "PARM"

/// What role a parameter plays; the census groups by this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Norm,
    Embedding,
    Span,
    Alpha,
    RelPos,
}

impl ParamKind {
    pub fn label(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Norm => "norm",
            ParamKind::Embedding => "embedding",
            ParamKind::Span => "span",
            ParamKind::Alpha => "alpha",
            ParamKind::RelPos => "relpos",
        }
    }
}

/// How to fill a freshly registered tensor.
pub enum InitRule {
    Normal(f64),
    Const(f64),
    /// N(0, sqrt(2 / (fan_in + fan_out))) for `[fan_in, fan_out]` matrices.
    /// Keeps activations and gradients on comparable scales at d_model this
    /// small, where a fixed tiny sigma starves the attention scores.
    Xavier,
    /// |N(0, sigma)| clamped to [0, max]; spans start small but nonzero.
    FoldedNormal { sigma: f64, max: f64 },
}

pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

pub struct ParamRegistry {
    seed: u64,
    entries: Vec<Entry>,
}

impl ParamRegistry {
    pub fn new(seed: u64) -> Self {
        ParamRegistry {
            seed,
            entries: Vec::new(),
        }
    }

    /// Create, initialize and record one trainable tensor. Names must be
    /// unique; the draw is keyed by (seed, registration index) only.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        init: InitRule,
    ) -> Tensor {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let index = self.entries.len() as u64;
        let numel: usize = shape.iter().product();
        let mut rng = CounterRng::from_key(&[self.seed, PARAM_SALT, index]);
        let data: Vec<f64> = match init {
            InitRule::Normal(sigma) => (0..numel).map(|_| rng.normal() * sigma).collect(),
            InitRule::Xavier => {
                assert!(shape.len() == 2, "Xavier init needs a [fan_in, fan_out] matrix");
                let sigma = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..numel).map(|_| rng.normal() * sigma).collect()
            }
            InitRule::Const(c) => vec![c; numel],
            InitRule::FoldedNormal { sigma, max } => (0..numel)
                .map(|_| (rng.normal() * sigma).abs().clamp(0.0, max))
                .collect(),
        };
        let tensor = Tensor::param(shape, data).expect("registry shapes are internally consistent");
        self.entries.push(Entry {
            name,
            tensor: tensor.clone(),
            kind,
        });
        tensor
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn count_by_kind(&self, kind: ParamKind) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// All parameter values in registration order, for checkpoints.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_scalars());
        for e in &self.entries {
            out.extend(e.tensor.to_vec());
        }
        out
    }

    /// Restore parameter values from a flat buffer in registration order.
    pub fn unflatten(&self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_scalars() {
            return Err(Error::Corrupt(format!(
                "parameter buffer holds {} values, model wants {}",
                flat.len(),
                self.total_scalars()
            )));
        }
        let mut off = 0;
        for e in &self.entries {
            let n = e.tensor.len();
            e.tensor.set_data(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn clear_grads(&self) {
        for e in &self.entries {
            e.tensor.clear_grad();
        }
    }
}
