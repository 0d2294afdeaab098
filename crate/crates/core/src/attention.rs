//! Multi-head attention with switchable weighting mechanisms, plus the
//! layer blocks that use it.
//!
//! A head's raw scores can be normalized four ways: plain softmax, the
//! sparse family from [`crate::normalizers`] with a learned per-head alpha,
//! or either of those gated by a learned per-head span mask from
//! [`crate::span`]. The span variants key scores by relative distance and
//! evaluate only inside the span band; the non-span variants score every
//! pair and rely on absolute position embeddings added at the input layer.
//!
//! The adaptive state of one attention site (spans, alphas, distance table)
//! lives in an [`AdaptiveGroup`] separate from the projection weights, so a
//! cross-modality block can share one group between the two per-stream
//! self-attention sublayers while keeping their projections independent.

use crate::normalizers::{entmax_rows, AlphaParams};
use crate::numerics::{Tape, Tensor};
use crate::registry::{InitRule, ParamKind, ParamRegistry};
use crate::span::{span_attention, Distances, RelPosTable, SpanNormalizer, SpanParams};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// How attention weights are produced from scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Softmax,
    Entmax,
    SpanSoftmax,
    SpanEntmax,
}

impl Mechanism {
    pub fn uses_spans(self) -> bool {
        matches!(self, Mechanism::SpanSoftmax | Mechanism::SpanEntmax)
    }

    pub fn uses_sparse_normalizer(self) -> bool {
        matches!(self, Mechanism::Entmax | Mechanism::SpanEntmax)
    }

    pub fn label(self) -> &'static str {
        match self {
            Mechanism::Softmax => "softmax",
            Mechanism::Entmax => "entmax",
            Mechanism::SpanSoftmax => "span_softmax",
            Mechanism::SpanEntmax => "span_entmax",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Mechanism::Softmax),
            "entmax" => Ok(Mechanism::Entmax),
            "span_softmax" => Ok(Mechanism::SpanSoftmax),
            "span_entmax" => Ok(Mechanism::SpanEntmax),
            other => Err(Error::Config(format!(
                "unknown mechanism {other:?}; expected softmax, entmax, span_softmax or span_entmax"
            ))),
        }
    }
}

/// The learned adaptive state of one attention site: per-head spans and/or
/// per-head alphas, and the relative-position table used by span scoring.
/// Sites that share behavior (the two self-attention sublayers inside a
/// cross block) share one group.
pub struct AdaptiveGroup {
    pub mechanism: Mechanism,
    pub spans: Option<SpanParams>,
    pub alphas: Option<AlphaParams>,
    pub relpos: Option<RelPosTable>,
    heads: usize,
}

impl AdaptiveGroup {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        mechanism: Mechanism,
        heads: usize,
        d_head: usize,
        max_span: usize,
        ramp: f64,
    ) -> Self {
        let spans = mechanism.uses_spans().then(|| SpanParams {
            z: reg.register(
                format!("{prefix}.span_z"),
                &[heads],
                ParamKind::Span,
                InitRule::FoldedNormal {
                    sigma: 2.0 / (max_span as f64).sqrt(),
                    max: max_span as f64,
                },
            ),
            ramp,
        });
        let alphas = mechanism.uses_sparse_normalizer().then(|| AlphaParams {
            raw: reg.register(
                format!("{prefix}.alpha_raw"),
                &[heads],
                ParamKind::Alpha,
                InitRule::Const(0.0),
            ),
        });
        let relpos = mechanism.uses_spans().then(|| RelPosTable {
            table: reg.register(
                format!("{prefix}.relpos"),
                &[max_span + 1, d_head],
                ParamKind::RelPos,
                InitRule::Xavier,
            ),
        });
        AdaptiveGroup {
            mechanism,
            spans,
            alphas,
            relpos,
            heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Effective reach per head (`z + ramp`), when spans are in play.
    pub fn current_spans(&self) -> Option<Vec<f64>> {
        self.spans
            .as_ref()
            .map(|s| (0..self.heads).map(|h| s.current_span(h)).collect())
    }

    pub fn current_alphas(&self) -> Option<Vec<f64>> {
        self.alphas
            .as_ref()
            .map(|a| (0..self.heads).map(|h| a.alpha(h)).collect())
    }
}

/// Bias-free multi-head attention projections.
pub struct MultiHeadAttention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d_model: usize, heads: usize) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "head count must divide d_model");
        let w = |reg: &mut ParamRegistry, n: &str, init: InitRule| {
            reg.register(
                format!("{prefix}.{n}"),
                &[d_model, d_model],
                ParamKind::Weight,
                init,
            )
        };
        MultiHeadAttention {
            wq: w(reg, "wq", InitRule::Xavier),
            wk: w(reg, "wk", InitRule::Xavier),
            wv: w(reg, "wv", InitRule::Xavier),
            wo: w(reg, "wo", InitRule::Xavier),
            heads,
        }
    }

    /// Attend `queries` over `keys_values` (the same tensor for
    /// self-attention) under the group's mechanism. Inputs are `[t, d_model]`.
    pub fn attend(
        &self,
        tape: &Tape,
        queries: &Tensor,
        keys_values: &Tensor,
        group: &AdaptiveGroup,
    ) -> Result<Tensor> {
        if group.heads() != self.heads {
            return Err(Error::Config(format!(
                "adaptive group has {} heads, attention has {}",
                group.heads(),
                self.heads
            )));
        }
        let (t_q, d_model) = queries.dims2();
        let (t_k, _) = keys_values.dims2();
        let d_head = d_model / self.heads;
        let scale = 1.0 / (d_head as f64).sqrt();

        let q = tape.matmul(queries, &self.wq)?;
        let k = tape.matmul(keys_values, &self.wk)?;
        let v = tape.matmul(keys_values, &self.wv)?;

        let distances = group
            .mechanism
            .uses_spans()
            .then(|| Distances::absolute(t_q, t_k));

        let mut contexts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.col_slice(&q, h * d_head, d_head)?;
            let kh = tape.col_slice(&k, h * d_head, d_head)?;
            let vh = tape.col_slice(&v, h * d_head, d_head)?;
            let ctx = match group.mechanism {
                Mechanism::Softmax | Mechanism::Entmax => {
                    let scores =
                        tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale)?;
                    let weights = match group.mechanism {
                        Mechanism::Softmax => tape.softmax_rows(&scores)?,
                        _ => {
                            let alphas = group.alphas.as_ref().ok_or_else(|| {
                                Error::Config("entmax mechanism without alpha parameters".into())
                            })?;
                            entmax_rows(tape, &scores, alphas, h)?
                        }
                    };
                    tape.matmul(&weights, &vh)?
                }
                Mechanism::SpanSoftmax | Mechanism::SpanEntmax => {
                    let spans = group.spans.as_ref().ok_or_else(|| {
                        Error::Config("span mechanism without span parameters".into())
                    })?;
                    let relpos = group.relpos.as_ref().ok_or_else(|| {
                        Error::Config("span mechanism without a relative-position table".into())
                    })?;
                    let normalizer = match group.mechanism {
                        Mechanism::SpanSoftmax => SpanNormalizer::Softmax,
                        _ => {
                            let alphas = group.alphas.as_ref().ok_or_else(|| {
                                Error::Config(
                                    "sparse span mechanism without alpha parameters".into(),
                                )
                            })?;
                            SpanNormalizer::Entmax { alpha: alphas, head: h }
                        }
                    };
                    span_attention(
                        tape,
                        &qh,
                        &kh,
                        &vh,
                        distances.as_ref().expect("distances built for span modes"),
                        spans,
                        h,
                        relpos,
                        normalizer,
                    )?
                    .context
                }
            };
            contexts.push(ctx);
        }
        tape.matmul(&tape.concat_cols(&contexts)?, &self.wo)
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d_model: usize) -> Self {
        LayerNorm {
            gamma: reg.register(
                format!("{prefix}.gamma"),
                &[d_model],
                ParamKind::Norm,
                InitRule::Const(1.0),
            ),
            beta: reg.register(
                format!("{prefix}.beta"),
                &[d_model],
                ParamKind::Norm,
                InitRule::Const(0.0),
            ),
        }
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// Two-layer position-wise feed-forward, no biases.
pub struct FeedForward {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl FeedForward {
    pub fn new(reg: &mut ParamRegistry, prefix: &str, d_model: usize, d_ff: usize) -> Self {
        FeedForward {
            w1: reg.register(
                format!("{prefix}.w1"),
                &[d_model, d_ff],
                ParamKind::Weight,
                InitRule::Xavier,
            ),
            w2: reg.register(
                format!("{prefix}.w2"),
                &[d_ff, d_model],
                ParamKind::Weight,
                InitRule::Xavier,
            ),
        }
    }

    pub fn apply(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        tape.matmul(&tape.gelu(&tape.matmul(x, &self.w1)?)?, &self.w2)
    }
}

/// One post-norm self-attention transformer layer.
pub struct SelfLayer {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl SelfLayer {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        SelfLayer {
            attn: MultiHeadAttention::new(reg, &format!("{prefix}.attn"), d_model, heads),
            ln_attn: LayerNorm::new(reg, &format!("{prefix}.ln_attn"), d_model),
            ffn: FeedForward::new(reg, &format!("{prefix}.ffn"), d_model, d_ff),
            ln_ffn: LayerNorm::new(reg, &format!("{prefix}.ln_ffn"), d_model),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, group: &AdaptiveGroup) -> Result<Tensor> {
        let attended = self.attn.attend(tape, x, x, group)?;
        let x = self.ln_attn.apply(tape, &tape.add(x, &attended)?)?;
        let fed = self.ffn.apply(tape, &x)?;
        self.ln_ffn.apply(tape, &tape.add(&x, &fed)?)
    }
}

/// One cross-modality block: bidirectional cross-attention over the
/// incoming (pre-update) streams, then per-stream self-attention, then
/// per-stream feed-forward, all with post-norm residuals.
///
/// Each cross direction has its own adaptive group; the two self-attention
/// sublayers share one.
pub struct CrossBlock {
    pub cross_lang: MultiHeadAttention,
    pub cross_vis: MultiHeadAttention,
    pub ln_cross_lang: LayerNorm,
    pub ln_cross_vis: LayerNorm,
    pub group_cross_lang: AdaptiveGroup,
    pub group_cross_vis: AdaptiveGroup,
    pub self_lang: MultiHeadAttention,
    pub self_vis: MultiHeadAttention,
    pub ln_self_lang: LayerNorm,
    pub ln_self_vis: LayerNorm,
    pub group_self: AdaptiveGroup,
    pub ffn_lang: FeedForward,
    pub ffn_vis: FeedForward,
    pub ln_ffn_lang: LayerNorm,
    pub ln_ffn_vis: LayerNorm,
}

pub struct CrossBlockDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_span: usize,
    pub ramp: f64,
}

impl CrossBlock {
    pub fn new(
        reg: &mut ParamRegistry,
        prefix: &str,
        mechanism: Mechanism,
        dims: &CrossBlockDims,
    ) -> Self {
        let d_head = dims.d_model / dims.heads;
        let group = |reg: &mut ParamRegistry, name: &str| {
            AdaptiveGroup::new(
                reg,
                &format!("{prefix}.{name}"),
                mechanism,
                dims.heads,
                d_head,
                dims.max_span,
                dims.ramp,
            )
        };
        CrossBlock {
            cross_lang: MultiHeadAttention::new(
                reg,
                &format!("{prefix}.cross_lang"),
                dims.d_model,
                dims.heads,
            ),
            cross_vis: MultiHeadAttention::new(
                reg,
                &format!("{prefix}.cross_vis"),
                dims.d_model,
                dims.heads,
            ),
            ln_cross_lang: LayerNorm::new(reg, &format!("{prefix}.ln_cross_lang"), dims.d_model),
            ln_cross_vis: LayerNorm::new(reg, &format!("{prefix}.ln_cross_vis"), dims.d_model),
            group_cross_lang: group(reg, "cross_lang_adaptive"),
            group_cross_vis: group(reg, "cross_vis_adaptive"),
            self_lang: MultiHeadAttention::new(
                reg,
                &format!("{prefix}.self_lang"),
                dims.d_model,
                dims.heads,
            ),
            self_vis: MultiHeadAttention::new(
                reg,
                &format!("{prefix}.self_vis"),
                dims.d_model,
                dims.heads,
            ),
            ln_self_lang: LayerNorm::new(reg, &format!("{prefix}.ln_self_lang"), dims.d_model),
            ln_self_vis: LayerNorm::new(reg, &format!("{prefix}.ln_self_vis"), dims.d_model),
            group_self: group(reg, "self_adaptive"),
            ffn_lang: FeedForward::new(reg, &format!("{prefix}.ffn_lang"), dims.d_model, dims.d_ff),
            ffn_vis: FeedForward::new(reg, &format!("{prefix}.ffn_vis"), dims.d_model, dims.d_ff),
            ln_ffn_lang: LayerNorm::new(reg, &format!("{prefix}.ln_ffn_lang"), dims.d_model),
            ln_ffn_vis: LayerNorm::new(reg, &format!("{prefix}.ln_ffn_vis"), dims.d_model),
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        lang: &Tensor,
        vis: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        // Both directions read the incoming streams, so neither sees the
        // other's update from this block.
        let l_cross = self.cross_lang.attend(tape, lang, vis, &self.group_cross_lang)?;
        let v_cross = self.cross_vis.attend(tape, vis, lang, &self.group_cross_vis)?;
        let lang = self.ln_cross_lang.apply(tape, &tape.add(lang, &l_cross)?)?;
        let vis = self.ln_cross_vis.apply(tape, &tape.add(vis, &v_cross)?)?;

        let l_self = self.self_lang.attend(tape, &lang, &lang, &self.group_self)?;
        let v_self = self.self_vis.attend(tape, &vis, &vis, &self.group_self)?;
        let lang = self.ln_self_lang.apply(tape, &tape.add(&lang, &l_self)?)?;
        let vis = self.ln_self_vis.apply(tape, &tape.add(&vis, &v_self)?)?;

        let l_fed = self.ffn_lang.apply(tape, &lang)?;
        let v_fed = self.ffn_vis.apply(tape, &vis)?;
        let lang = self.ln_ffn_lang.apply(tape, &tape.add(&lang, &l_fed)?)?;
        let vis = self.ln_ffn_vis.apply(tape, &tape.add(&vis, &v_fed)?)?;
        Ok((lang, vis))
    }
}
