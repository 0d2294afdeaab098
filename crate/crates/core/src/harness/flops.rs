//! Analytic forward-pass cost model.
//!
//! Counts the same work the tape instruments: matrix products at 2·m·k·n
//! and banded span attention at 6·d_head per evaluated query/key pair (one
//! key dot, one position dot, one context accumulation, two FLOPs each).
//! For any executed layer set and span state, `kernel_total` must equal
//! `Tape::recorded_flops` of an actual forward pass exactly; a test pins
//! that equality per mechanism.
//!
//! Row-normalizer work (softmax or entmax over the scores) is not matmul
//! work and the tape does not instrument it; it is estimated separately
//! per processed score entry and reported as `normalizer_total` so the
//! headline numbers stay auditable against the instrumented counter.

use super::TrainConfig;
use crate::attention::Mechanism;
use crate::layerdrop::prune_every_other;
use crate::model::{Encoder, ExecutedLayers};
use crate::span::mask_value;
use serde::Serialize;

/// Estimated FLOPs per score entry for one softmax row pass: max scan,
/// shift, exponential, sum, divide.
pub const SOFTMAX_ENTRY_COST: u64 = 5;
/// Estimated FLOPs per score entry for one entmax row solve: 60 bisection
/// rounds of roughly four elementwise ops (shift, clamp, power, sum), plus
/// the final probability evaluation.
pub const ENTMAX_ENTRY_COST: u64 = 245;

/// Model and sequence dimensions, detached from any allocated weights so
/// paper-shape configurations can be costed without building them.
#[derive(Debug, Clone)]
pub struct FlopShape {
    pub mechanism: Mechanism,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub lang_layers: usize,
    pub vis_layers: usize,
    pub cross_blocks: usize,
    pub d_vis: usize,
    pub classes: usize,
    pub t_lang: usize,
    pub t_vis: usize,
}

/// Attention reach per head for every adaptive site, or full-width
/// attention. Sites are ordered like the model's readouts: language
/// layers, vision layers, then per cross block the language-reads-vision,
/// vision-reads-language, and shared-self sites.
pub enum SpanWidths {
    Full,
    PerSite(Vec<Vec<f64>>),
}

impl SpanWidths {
    /// Current spans of a live model, in site order.
    pub fn from_encoder(enc: &Encoder) -> SpanWidths {
        let per_head: Vec<(String, f64)> = enc.span_readout();
        if per_head.is_empty() {
            return SpanWidths::Full;
        }
        let heads = enc.config.heads;
        let sites = per_head.len() / heads;
        let mut out = Vec::with_capacity(sites);
        for s in 0..sites {
            out.push(per_head[s * heads..(s + 1) * heads]
                .iter()
                .map(|(_, v)| *v)
                .collect());
        }
        SpanWidths::PerSite(out)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopReport {
    pub t_lang: usize,
    pub t_vis: usize,
    /// Vision projection plus classifier; paid once per pass.
    pub fixed: u64,
    /// Kernel cost of each executed layer, in execution order.
    pub lang_layers: Vec<u64>,
    pub vis_layers: Vec<u64>,
    pub cross_blocks: Vec<u64>,
    /// Matmul and span-pair work; comparable to the tape's counter.
    pub kernel_total: u64,
    /// Estimated score-normalization work; bookkept separately.
    pub normalizer_total: u64,
    pub total: u64,
}

struct SiteCost {
    kernel: u64,
    normalizer: u64,
}

impl FlopShape {
    pub fn from_train_config(cfg: &TrainConfig) -> FlopShape {
        FlopShape {
            mechanism: cfg.mechanism,
            d_model: cfg.d_model,
            heads: cfg.heads,
            d_ff: cfg.d_ff,
            lang_layers: cfg.lang_layers,
            vis_layers: cfg.vis_layers,
            cross_blocks: cfg.cross_blocks,
            d_vis: cfg.task_spec().d_vis(),
            classes: cfg.classes,
            t_lang: cfg.t_lang,
            t_vis: cfg.t_vis,
        }
    }

    pub fn full_executed(&self) -> ExecutedLayers {
        ExecutedLayers {
            lang: (0..self.lang_layers).collect(),
            vis: (0..self.vis_layers).collect(),
            cross: (0..self.cross_blocks).collect(),
        }
    }

    /// Deterministically pruned layer sets at the given per-stream drop
    /// count.
    pub fn pruned_executed(&self, drop_count: usize) -> ExecutedLayers {
        let keep = |n: usize| -> Vec<usize> {
            let dropped = prune_every_other(n, drop_count);
            (0..n).filter(|i| !dropped.contains(i)).collect()
        };
        ExecutedLayers {
            lang: keep(self.lang_layers),
            vis: keep(self.vis_layers),
            cross: keep(self.cross_blocks),
        }
    }

    fn site_span(widths: &SpanWidths, site: usize) -> Option<&[f64]> {
        match widths {
            SpanWidths::Full => None,
            SpanWidths::PerSite(sites) => Some(&sites[site]),
        }
    }

    /// Pairs the banded kernel evaluates for one head: every (query, key)
    /// whose index distance keeps the span mask positive. `reach` is the
    /// head's `z + ramp`; the mask is positive exactly when the distance
    /// falls short of it. Rows where nothing survives fall back to a copy
    /// and cost no pairs.
    fn span_pairs(t_q: usize, t_k: usize, reach: f64) -> u64 {
        let mut pairs = 0u64;
        for t in 0..t_q {
            for r in 0..t_k {
                let dist = (t as f64 - r as f64).abs();
                debug_assert_eq!(
                    dist < reach,
                    mask_value(reach - 1.0, 1.0, dist) > 0.0,
                    "pair predicate must mirror the mask sign"
                );
                if dist < reach {
                    pairs += 1;
                }
            }
        }
        pairs
    }

    /// One attention sublayer: projections, score/context work, output
    /// projection. `spans` is per-head reach, or None for full width.
    /// Span mechanisms run the banded kernel even at full width (three
    /// length-d_head MACs per pair, relative-position dot included), so
    /// their per-pair cost stays 6·d_head rather than the dense 4·d_head.
    fn attention(&self, t_q: usize, t_k: usize, spans: Option<&[f64]>) -> SiteCost {
        let d = self.d_model as u64;
        let d_head = d / self.heads as u64;
        let heads = self.heads as u64;
        let (tq, tk) = (t_q as u64, t_k as u64);
        let projections = 2 * tq * d * d + 4 * tk * d * d + 2 * tq * d * d;
        let entry_cost = if self.mechanism.uses_sparse_normalizer() {
            ENTMAX_ENTRY_COST
        } else {
            SOFTMAX_ENTRY_COST
        };
        if !self.mechanism.uses_spans() {
            return SiteCost {
                kernel: projections + 4 * tq * tk * d,
                normalizer: heads * tq * tk * entry_cost,
            };
        }
        let pairs: u64 = match spans {
            None => heads * tq * tk,
            Some(reaches) => reaches
                .iter()
                .map(|&reach| Self::span_pairs(t_q, t_k, reach))
                .sum(),
        };
        SiteCost {
            kernel: projections + 6 * d_head * pairs,
            normalizer: pairs * entry_cost,
        }
    }

    fn ffn(&self, t: usize) -> u64 {
        4 * t as u64 * self.d_model as u64 * self.d_ff as u64
    }

    fn self_layer(&self, t: usize, spans: Option<&[f64]>) -> SiteCost {
        let attn = self.attention(t, t, spans);
        SiteCost {
            kernel: attn.kernel + self.ffn(t),
            normalizer: attn.normalizer,
        }
    }

    fn cross_block(&self, widths: &SpanWidths, block: usize) -> SiteCost {
        let base = self.lang_layers + self.vis_layers + 3 * block;
        let (tl, tv) = (self.t_lang, self.t_vis);
        // Both self sublayers share the block's third adaptive site.
        let parts = [
            self.attention(tl, tv, Self::site_span(widths, base)),
            self.attention(tv, tl, Self::site_span(widths, base + 1)),
            self.attention(tl, tl, Self::site_span(widths, base + 2)),
            self.attention(tv, tv, Self::site_span(widths, base + 2)),
        ];
        SiteCost {
            kernel: parts.iter().map(|p| p.kernel).sum::<u64>()
                + self.ffn(tl)
                + self.ffn(tv),
            normalizer: parts.iter().map(|p| p.normalizer).sum(),
        }
    }

    /// Cost one forward pass over the given executed layers. With
    /// `SpanWidths::Full`, span mechanisms are costed as if every pair
    /// were inside the mask (the no-truncation upper bound).
    pub fn count(&self, widths: &SpanWidths, executed: &ExecutedLayers) -> FlopReport {
        let d = self.d_model as u64;
        let fixed =
            2 * self.t_vis as u64 * self.d_vis as u64 * d + 4 * d * self.classes as u64;

        let span_sites = self.mechanism.uses_spans();
        let lang_site = |i: usize| if span_sites { Self::site_span(widths, i) } else { None };
        let vis_site = |i: usize| {
            if span_sites {
                Self::site_span(widths, self.lang_layers + i)
            } else {
                None
            }
        };

        let mut normalizer_total = 0u64;
        let mut lang_costs = Vec::new();
        for &i in &executed.lang {
            let c = self.self_layer(self.t_lang, lang_site(i));
            normalizer_total += c.normalizer;
            lang_costs.push(c.kernel);
        }
        let mut vis_costs = Vec::new();
        for &i in &executed.vis {
            let c = self.self_layer(self.t_vis, vis_site(i));
            normalizer_total += c.normalizer;
            vis_costs.push(c.kernel);
        }
        let mut cross_costs = Vec::new();
        for &i in &executed.cross {
            let c = if span_sites {
                self.cross_block(widths, i)
            } else {
                self.cross_block(&SpanWidths::Full, i)
            };
            normalizer_total += c.normalizer;
            cross_costs.push(c.kernel);
        }

        let kernel_total = fixed
            + lang_costs.iter().sum::<u64>()
            + vis_costs.iter().sum::<u64>()
            + cross_costs.iter().sum::<u64>();
        FlopReport {
            t_lang: self.t_lang,
            t_vis: self.t_vis,
            fixed,
            lang_layers: lang_costs,
            vis_layers: vis_costs,
            cross_blocks: cross_costs,
            kernel_total,
            normalizer_total,
            total: kernel_total + normalizer_total,
        }
    }
}
