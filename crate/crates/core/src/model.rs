//! The two-stream encoder and its single-stream sibling.
//!
//! [`Encoder`] reads a token question and a grid of vision features,
//! refines each stream with its own self-attention stack, fuses them with
//! cross-modality blocks, and classifies from a pooled pair (question
//! position 0 concatenated with the mean vision state). [`TextEncoder`] is
//! the language stack alone with first-position pooling, used for tasks
//! that probe attention reach without a second stream in the way.
//!
//! Every parameter lives in a [`ParamRegistry`] and is registered in one
//! fixed order, which pins down three things at once: the init stream each
//! tensor draws from, the flat layout checkpoints use, and the census the
//! parameter-count audit checks against.

use crate::attention::{AdaptiveGroup, CrossBlock, CrossBlockDims, Mechanism, SelfLayer};
use crate::layerdrop::{kept_indices, DropState};
use crate::normalizers::AlphaParams;
use crate::numerics::{Tape, Tensor};
use crate::registry::{InitRule, ParamKind, ParamRegistry};
use crate::span::SpanParams;
use crate::{Error, Result};

/// Stream salts keep drop coins independent across the three stacks.
pub const LANG_STREAM: u64 = 0;
pub const VIS_STREAM: u64 = 1;
pub const CROSS_STREAM: u64 = 2;

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub mechanism: Mechanism,
    pub d_model: usize,
    pub heads: usize,
    pub lang_layers: usize,
    pub vis_layers: usize,
    pub cross_blocks: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub d_vis: usize,
    pub classes: usize,
    /// Upper bound for learned spans; also sizes the relative-position
    /// table and, in non-span modes, the absolute position tables.
    pub max_span: usize,
    /// Width of the soft edge on the span mask.
    pub ramp: f64,
    /// Layers to drop per stream in expectation while training.
    pub drop_count: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "{} heads must evenly divide d_model {}",
                self.heads, self.d_model
            ));
        }
        if self.vocab < 2 || self.classes < 2 {
            return bad("need at least 2 tokens and 2 classes".into());
        }
        if self.d_ff == 0 || self.d_vis == 0 {
            return bad("d_ff and d_vis must be positive".into());
        }
        if self.max_span == 0 {
            return bad("max_span must be at least 1".into());
        }
        if !(self.ramp > 0.0) || !self.ramp.is_finite() {
            return bad(format!("ramp must be a positive finite number, got {}", self.ramp));
        }
        let min_layers = self
            .lang_layers
            .min(self.vis_layers)
            .min(self.cross_blocks);
        if self.drop_count > min_layers {
            return bad(format!(
                "cannot drop {} layers from a stream of {}",
                self.drop_count, min_layers
            ));
        }
        Ok(())
    }

    fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    fn cross_dims(&self) -> CrossBlockDims {
        CrossBlockDims {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            max_span: self.max_span,
            ramp: self.ramp,
        }
    }

    /// Number of adaptive attention sites: one per self layer plus three
    /// per cross block (two cross directions and the shared self pair).
    pub fn adaptive_sites(&self) -> usize {
        self.lang_layers + self.vis_layers + 3 * self.cross_blocks
    }
}

/// Which layers actually ran in one forward pass, per stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutedLayers {
    pub lang: Vec<usize>,
    pub vis: Vec<usize>,
    pub cross: Vec<usize>,
}

impl ExecutedLayers {
    pub fn full(config: &EncoderConfig) -> Self {
        ExecutedLayers {
            lang: (0..config.lang_layers).collect(),
            vis: (0..config.vis_layers).collect(),
            cross: (0..config.cross_blocks).collect(),
        }
    }

    /// Compact `stream:index` listing, e.g. `l:0|l:1|v:0|x:0`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for &i in &self.lang {
            parts.push(format!("l:{i}"));
        }
        for &i in &self.vis {
            parts.push(format!("v:{i}"));
        }
        for &i in &self.cross {
            parts.push(format!("x:{i}"));
        }
        parts.join("|")
    }

    pub fn total(&self) -> usize {
        self.lang.len() + self.vis.len() + self.cross.len()
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[1, classes]` scores for the pooled pair.
    pub logits: Tensor,
    pub executed: ExecutedLayers,
}

/// Scalar counts of registered parameters by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Census {
    pub weights: usize,
    pub norms: usize,
    pub embeddings: usize,
    pub spans: usize,
    pub alphas: usize,
    pub relpos: usize,
    pub total: usize,
}

pub fn census(reg: &ParamRegistry) -> Census {
    Census {
        weights: reg.count_by_kind(ParamKind::Weight),
        norms: reg.count_by_kind(ParamKind::Norm),
        embeddings: reg.count_by_kind(ParamKind::Embedding),
        spans: reg.count_by_kind(ParamKind::Span),
        alphas: reg.count_by_kind(ParamKind::Alpha),
        relpos: reg.count_by_kind(ParamKind::RelPos),
        total: reg.total_scalars(),
    }
}

pub struct Encoder {
    pub config: EncoderConfig,
    pub registry: ParamRegistry,
    token_embedding: Tensor,
    /// Absolute positions, present only when spans are off; span modes get
    /// position information from relative-distance scoring instead.
    lang_position: Option<Tensor>,
    vis_position: Option<Tensor>,
    vision_proj: Tensor,
    lang_layers: Vec<SelfLayer>,
    lang_groups: Vec<AdaptiveGroup>,
    vis_layers: Vec<SelfLayer>,
    vis_groups: Vec<AdaptiveGroup>,
    cross_blocks: Vec<CrossBlock>,
    head_w: Tensor,
    head_b: Tensor,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Encoder> {
        config.validate()?;
        let mut reg = ParamRegistry::new(config.seed);
        let c = &config;

        let embed_sigma = 1.0 / (c.d_model as f64).sqrt();
        let token_embedding = reg.register(
            "embed.tokens",
            &[c.vocab, c.d_model],
            ParamKind::Embedding,
            InitRule::Normal(embed_sigma),
        );
        let positions = !c.mechanism.uses_spans();
        let pos_table = |reg: &mut ParamRegistry, name: &str| {
            reg.register(
                name,
                &[c.max_span + 1, c.d_model],
                ParamKind::Embedding,
                InitRule::Normal(embed_sigma),
            )
        };
        let lang_position = positions.then(|| pos_table(&mut reg, "embed.lang_pos"));
        let vision_proj = reg.register(
            "embed.vis_proj",
            &[c.d_vis, c.d_model],
            ParamKind::Weight,
            InitRule::Xavier,
        );
        let vis_position = positions.then(|| pos_table(&mut reg, "embed.vis_pos"));

        let mut lang_layers = Vec::new();
        let mut lang_groups = Vec::new();
        for i in 0..c.lang_layers {
            let prefix = format!("l.{i}");
            lang_layers.push(SelfLayer::new(&mut reg, &prefix, c.d_model, c.heads, c.d_ff));
            lang_groups.push(AdaptiveGroup::new(
                &mut reg,
                &format!("{prefix}.adaptive"),
                c.mechanism,
                c.heads,
                c.d_head(),
                c.max_span,
                c.ramp,
            ));
        }
        let mut vis_layers = Vec::new();
        let mut vis_groups = Vec::new();
        for i in 0..c.vis_layers {
            let prefix = format!("v.{i}");
            vis_layers.push(SelfLayer::new(&mut reg, &prefix, c.d_model, c.heads, c.d_ff));
            vis_groups.push(AdaptiveGroup::new(
                &mut reg,
                &format!("{prefix}.adaptive"),
                c.mechanism,
                c.heads,
                c.d_head(),
                c.max_span,
                c.ramp,
            ));
        }
        let cross_blocks = (0..c.cross_blocks)
            .map(|i| CrossBlock::new(&mut reg, &format!("x.{i}"), c.mechanism, &c.cross_dims()))
            .collect();

        let head_w = reg.register(
            "head.w",
            &[2 * c.d_model, c.classes],
            ParamKind::Weight,
            InitRule::Xavier,
        );
        let head_b = reg.register(
            "head.b",
            &[c.classes],
            ParamKind::Weight,
            InitRule::Const(0.0),
        );

        Ok(Encoder {
            config,
            registry: reg,
            token_embedding,
            lang_position,
            vis_position,
            vision_proj,
            lang_layers,
            lang_groups,
            vis_layers,
            vis_groups,
            cross_blocks,
            head_w,
            head_b,
        })
    }

    /// Position ids clamped into the position table.
    fn position_ids(&self, t: usize) -> Vec<usize> {
        (0..t).map(|i| i.min(self.config.max_span)).collect()
    }

    fn embed_lang(&self, tape: &Tape, question: &[usize]) -> Result<Tensor> {
        let mut x = tape.embedding(&self.token_embedding, question)?;
        if let Some(pos) = &self.lang_position {
            x = tape.add(&x, &tape.embedding(pos, &self.position_ids(question.len()))?)?;
        }
        Ok(x)
    }

    fn embed_vision(&self, tape: &Tape, vision: &Tensor) -> Result<Tensor> {
        let (t_vis, d_vis) = vision.dims2();
        if d_vis != self.config.d_vis {
            return Err(Error::Input(format!(
                "vision features are {d_vis} wide, model expects {}",
                self.config.d_vis
            )));
        }
        let mut x = tape.matmul(vision, &self.vision_proj)?;
        if let Some(pos) = &self.vis_position {
            x = tape.add(&x, &tape.embedding(pos, &self.position_ids(t_vis))?)?;
        }
        Ok(x)
    }

    /// One pass over a single example. `vision` is `[t_vis, d_vis]` raw
    /// features. The drop state decides which layers run; gradients flow
    /// only through executed layers.
    pub fn forward(
        &self,
        tape: &Tape,
        question: &[usize],
        vision: &Tensor,
        drop: &DropState,
    ) -> Result<ForwardOutput> {
        if question.is_empty() {
            return Err(Error::Input("question has no tokens".into()));
        }
        let c = &self.config;
        let executed = ExecutedLayers {
            lang: kept_indices(drop, c.lang_layers, c.drop_count, LANG_STREAM),
            vis: kept_indices(drop, c.vis_layers, c.drop_count, VIS_STREAM),
            cross: kept_indices(drop, c.cross_blocks, c.drop_count, CROSS_STREAM),
        };

        let mut lang = self.embed_lang(tape, question)?;
        let mut vis = self.embed_vision(tape, vision)?;
        for &i in &executed.lang {
            lang = self.lang_layers[i].forward(tape, &lang, &self.lang_groups[i])?;
        }
        for &i in &executed.vis {
            vis = self.vis_layers[i].forward(tape, &vis, &self.vis_groups[i])?;
        }
        for &i in &executed.cross {
            (lang, vis) = self.cross_blocks[i].forward(tape, &lang, &vis)?;
        }

        let lang_pool = tape.row_slice(&lang, 0, 1)?;
        let vis_pool = tape.mean_rows(&vis)?;
        let pooled = tape.concat_cols(&[lang_pool, vis_pool])?;
        let logits = tape.add_row(&tape.matmul(&pooled, &self.head_w)?, &self.head_b)?;
        Ok(ForwardOutput { logits, executed })
    }

    /// Adaptive groups with their metric key prefixes, in a fixed order:
    /// `l.{i}`, `v.{i}`, then `xl.{i}`, `xv.{i}`, `xs.{i}` per cross block.
    fn labeled_groups(&self) -> Vec<(String, &AdaptiveGroup)> {
        let mut out = Vec::new();
        for (i, g) in self.lang_groups.iter().enumerate() {
            out.push((format!("l.{i}"), g));
        }
        for (i, g) in self.vis_groups.iter().enumerate() {
            out.push((format!("v.{i}"), g));
        }
        for (i, b) in self.cross_blocks.iter().enumerate() {
            out.push((format!("xl.{i}"), &b.group_cross_lang));
            out.push((format!("xv.{i}"), &b.group_cross_vis));
            out.push((format!("xs.{i}"), &b.group_self));
        }
        out
    }

    /// Current span reach per head as `(key, value)` rows keyed
    /// `site.head`. Empty when the mechanism has no spans.
    pub fn span_readout(&self) -> Vec<(String, f64)> {
        readout(self.labeled_groups(), |g| g.current_spans())
    }

    pub fn alpha_readout(&self) -> Vec<(String, f64)> {
        readout(self.labeled_groups(), |g| g.current_alphas())
    }

    pub fn span_params(&self) -> Vec<&SpanParams> {
        self.labeled_groups()
            .into_iter()
            .filter_map(|(_, g)| g.spans.as_ref())
            .collect()
    }

    pub fn alpha_params(&self) -> Vec<&AlphaParams> {
        self.labeled_groups()
            .into_iter()
            .filter_map(|(_, g)| g.alphas.as_ref())
            .collect()
    }

    pub fn census(&self) -> Census {
        census(&self.registry)
    }
}

fn readout<'a>(
    groups: Vec<(String, &'a AdaptiveGroup)>,
    read: impl Fn(&AdaptiveGroup) -> Option<Vec<f64>>,
) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (prefix, g) in groups {
        if let Some(vals) = read(g) {
            for (h, v) in vals.into_iter().enumerate() {
                out.push((format!("{prefix}.{h}"), v));
            }
        }
    }
    out
}

/// Language-only encoder: embed, self-attention stack, classify from
/// position 0. Drop coins use the language stream salt.
pub struct TextEncoder {
    pub config: EncoderConfig,
    pub registry: ParamRegistry,
    token_embedding: Tensor,
    position: Option<Tensor>,
    layers: Vec<SelfLayer>,
    groups: Vec<AdaptiveGroup>,
    head_w: Tensor,
    head_b: Tensor,
}

impl TextEncoder {
    /// Only the language fields of the config are used; vision and cross
    /// counts are ignored.
    pub fn new(config: EncoderConfig) -> Result<TextEncoder> {
        {
            let mut solo = config.clone();
            solo.vis_layers = 0;
            solo.cross_blocks = 0;
            solo.drop_count = 0;
            solo.validate()?;
            if config.drop_count > config.lang_layers {
                return Err(Error::Config(format!(
                    "cannot drop {} layers from a stream of {}",
                    config.drop_count, config.lang_layers
                )));
            }
        }
        let mut reg = ParamRegistry::new(config.seed);
        let c = &config;
        let embed_sigma = 1.0 / (c.d_model as f64).sqrt();
        let token_embedding = reg.register(
            "embed.tokens",
            &[c.vocab, c.d_model],
            ParamKind::Embedding,
            InitRule::Normal(embed_sigma),
        );
        let position = (!c.mechanism.uses_spans()).then(|| {
            reg.register(
                "embed.lang_pos",
                &[c.max_span + 1, c.d_model],
                ParamKind::Embedding,
                InitRule::Normal(embed_sigma),
            )
        });
        let mut layers = Vec::new();
        let mut groups = Vec::new();
        for i in 0..c.lang_layers {
            let prefix = format!("l.{i}");
            layers.push(SelfLayer::new(&mut reg, &prefix, c.d_model, c.heads, c.d_ff));
            groups.push(AdaptiveGroup::new(
                &mut reg,
                &format!("{prefix}.adaptive"),
                c.mechanism,
                c.heads,
                c.d_head(),
                c.max_span,
                c.ramp,
            ));
        }
        let head_w = reg.register(
            "head.w",
            &[c.d_model, c.classes],
            ParamKind::Weight,
            InitRule::Xavier,
        );
        let head_b = reg.register(
            "head.b",
            &[c.classes],
            ParamKind::Weight,
            InitRule::Const(0.0),
        );
        Ok(TextEncoder {
            config,
            registry: reg,
            token_embedding,
            position,
            layers,
            groups,
            head_w,
            head_b,
        })
    }

    pub fn forward(&self, tape: &Tape, tokens: &[usize], drop: &DropState) -> Result<ForwardOutput> {
        if tokens.is_empty() {
            return Err(Error::Input("token sequence is empty".into()));
        }
        let c = &self.config;
        let kept = kept_indices(drop, c.lang_layers, c.drop_count, LANG_STREAM);
        let mut x = tape.embedding(&self.token_embedding, tokens)?;
        if let Some(pos) = &self.position {
            let ids: Vec<usize> = (0..tokens.len()).map(|i| i.min(c.max_span)).collect();
            x = tape.add(&x, &tape.embedding(pos, &ids)?)?;
        }
        for &i in &kept {
            x = self.layers[i].forward(tape, &x, &self.groups[i])?;
        }
        let pooled = tape.row_slice(&x, 0, 1)?;
        let logits = tape.add_row(&tape.matmul(&pooled, &self.head_w)?, &self.head_b)?;
        Ok(ForwardOutput {
            logits,
            executed: ExecutedLayers {
                lang: kept,
                vis: Vec::new(),
                cross: Vec::new(),
            },
        })
    }

    pub fn span_params(&self) -> Vec<&SpanParams> {
        self.groups.iter().filter_map(|g| g.spans.as_ref()).collect()
    }

    pub fn span_readout(&self) -> Vec<(String, f64)> {
        let labeled = self
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| (format!("l.{i}"), g))
            .collect();
        readout(labeled, |g| g.current_spans())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_lookup, TaskSpec};

    fn desk_config(mechanism: Mechanism) -> EncoderConfig {
        EncoderConfig {
            mechanism,
            d_model: 16,
            heads: 2,
            lang_layers: 2,
            vis_layers: 1,
            cross_blocks: 1,
            d_ff: 32,
            vocab: 16,
            d_vis: 24,
            classes: 8,
            max_span: 8,
            ramp: 2.0,
            drop_count: 0,
            seed: 7,
        }
    }

    fn example_tensors(seed: u64, index: u64) -> (Vec<usize>, Tensor, usize) {
        let spec = TaskSpec::default();
        let ex = generate_lookup(&spec, seed, 0, index);
        let rows = ex.vision.len() / spec.d_vis();
        let vision = Tensor::new(&[rows, spec.d_vis()], ex.vision).unwrap();
        (ex.question, vision, ex.answer)
    }

    #[test]
    fn forward_produces_class_logits_for_every_mechanism() {
        for mech in [
            Mechanism::Softmax,
            Mechanism::Entmax,
            Mechanism::SpanSoftmax,
            Mechanism::SpanEntmax,
        ] {
            let enc = Encoder::new(desk_config(mech)).unwrap();
            let tape = Tape::eval();
            let (q, vision, _) = example_tensors(3, 0);
            let out = enc.forward(&tape, &q, &vision, &DropState::Keep).unwrap();
            assert_eq!(out.logits.shape(), vec![1, 8], "{}", mech.label());
            assert!(out.logits.values().iter().all(|v| v.is_finite()));
            assert_eq!(out.executed, ExecutedLayers::full(&enc.config));
        }
    }

    #[test]
    fn census_counts_adaptive_scalars_exactly() {
        let cfg = desk_config(Mechanism::SpanEntmax);
        let enc = Encoder::new(cfg.clone()).unwrap();
        let c = enc.census();
        let sites = cfg.adaptive_sites();
        assert_eq!(sites, 2 + 1 + 3, "2 lang + 1 vis + 3 per cross block");
        assert_eq!(c.spans, sites * cfg.heads);
        assert_eq!(c.alphas, sites * cfg.heads);
        assert_eq!(
            c.relpos,
            sites * (cfg.max_span + 1) * (cfg.d_model / cfg.heads)
        );
        // Span modes carry no absolute position tables.
        assert_eq!(c.embeddings, cfg.vocab * cfg.d_model);
        assert_eq!(
            c.total,
            c.weights + c.norms + c.embeddings + c.spans + c.alphas + c.relpos
        );

        let plain = Encoder::new(desk_config(Mechanism::Softmax)).unwrap().census();
        assert_eq!(plain.spans, 0);
        assert_eq!(plain.alphas, 0);
        assert_eq!(plain.relpos, 0);
        assert_eq!(
            plain.embeddings,
            (16 + 2 * (8 + 1)) * 16,
            "tokens plus two position tables"
        );

        let entmax = Encoder::new(desk_config(Mechanism::Entmax)).unwrap().census();
        assert_eq!(entmax.alphas, sites * cfg.heads);
        assert_eq!(entmax.spans, 0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Encoder::new(desk_config(Mechanism::SpanEntmax)).unwrap();
        let b = Encoder::new(desk_config(Mechanism::SpanEntmax)).unwrap();
        assert_eq!(a.registry.flatten(), b.registry.flatten());
        let mut other = desk_config(Mechanism::SpanEntmax);
        other.seed = 8;
        let c = Encoder::new(other).unwrap();
        assert_ne!(a.registry.flatten(), c.registry.flatten());
    }

    #[test]
    fn pruned_forward_skips_the_scheduled_layers() {
        let mut cfg = desk_config(Mechanism::Softmax);
        cfg.drop_count = 1;
        let enc = Encoder::new(cfg).unwrap();
        let tape = Tape::eval();
        let (q, vision, _) = example_tensors(3, 1);
        let out = enc.forward(&tape, &q, &vision, &DropState::Prune).unwrap();
        assert_eq!(out.executed.lang, vec![0], "2 lang layers, drop 1: second goes");
        assert_eq!(out.executed.vis, Vec::<usize>::new(), "the only vis layer goes");
        assert_eq!(out.executed.cross, Vec::<usize>::new());
        assert_eq!(out.executed.label(), "l:0");
    }

    #[test]
    fn sampled_drop_is_reproducible_and_step_dependent() {
        let mut cfg = desk_config(Mechanism::Softmax);
        cfg.drop_count = 1;
        let enc = Encoder::new(cfg).unwrap();
        let tape = Tape::eval();
        let (q, vision, _) = example_tensors(3, 2);
        let at = |step: u64| {
            enc.forward(&tape, &q, &vision, &DropState::Sample { seed: 7, step })
                .unwrap()
                .executed
        };
        assert_eq!(at(5), at(5), "same step draws the same mask");
        let baseline = at(0);
        assert!(
            (1..60).any(|s| at(s) != baseline),
            "masks should vary across steps"
        );
    }

    #[test]
    fn gradients_reach_both_streams_and_adaptive_state() {
        let enc = Encoder::new(desk_config(Mechanism::SpanEntmax)).unwrap();
        let tape = Tape::new();
        let (q, vision, label) = example_tensors(9, 3);
        let out = enc.forward(&tape, &q, &vision, &DropState::Keep).unwrap();
        let loss = tape.cross_entropy_logits(&out.logits, &[label]).unwrap();
        tape.backward(&loss).unwrap();

        let grad_norm = |name: &str| {
            let g = enc
                .registry
                .by_name(name)
                .unwrap_or_else(|| panic!("missing {name}"))
                .grad()
                .unwrap_or_else(|| panic!("no grad on {name}"));
            g.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        for name in [
            "embed.tokens",
            "embed.vis_proj",
            "l.0.attn.wq",
            "v.0.ffn.w1",
            "x.0.cross_lang.wq",
            "x.0.self_adaptive.span_z",
            "x.0.cross_vis_adaptive.alpha_raw",
            "l.1.adaptive.relpos",
            "head.w",
        ] {
            assert!(
                grad_norm(name) > 0.0,
                "{name} should receive gradient from the pooled loss"
            );
        }
    }

    #[test]
    fn readout_keys_follow_the_site_naming() {
        let enc = Encoder::new(desk_config(Mechanism::SpanEntmax)).unwrap();
        let spans = enc.span_readout();
        let keys: Vec<&str> = spans.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(
            keys,
            vec![
                "l.0.0", "l.0.1", "l.1.0", "l.1.1", "v.0.0", "v.0.1", "xl.0.0", "xl.0.1",
                "xv.0.0", "xv.0.1", "xs.0.0", "xs.0.1"
            ]
        );
        for (k, v) in &spans {
            assert!(
                *v >= enc.config.ramp && *v <= enc.config.max_span as f64 + enc.config.ramp,
                "{k} span {v} outside the reachable range"
            );
        }
        assert_eq!(enc.alpha_readout().len(), spans.len());
        for (_, a) in enc.alpha_readout() {
            assert!((a - 1.5).abs() < 1e-12, "raw 0 means alpha 1.5, got {a}");
        }
        assert!(Encoder::new(desk_config(Mechanism::Softmax))
            .unwrap()
            .span_readout()
            .is_empty());
    }

    #[test]
    fn bad_inputs_are_rejected_as_input_errors() {
        let enc = Encoder::new(desk_config(Mechanism::Softmax)).unwrap();
        let tape = Tape::eval();
        let (q, vision, _) = example_tensors(3, 4);

        let narrow = Tensor::zeros(&[6, 7]);
        let err = enc.forward(&tape, &q, &narrow, &DropState::Keep).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "wrong vision width: {err}");

        let mut bad_q = q.clone();
        bad_q[1] = 99;
        let err = enc.forward(&tape, &bad_q, &vision, &DropState::Keep).unwrap_err();
        assert!(matches!(err, Error::Input(_)), "token beyond vocab: {err}");

        let mut cfg = desk_config(Mechanism::Softmax);
        cfg.drop_count = 2;
        assert!(matches!(Encoder::new(cfg), Err(Error::Config(_))));

        let mut cfg = desk_config(Mechanism::Softmax);
        cfg.heads = 3;
        assert!(matches!(Encoder::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn text_encoder_pools_position_zero() {
        let mut cfg = desk_config(Mechanism::SpanSoftmax);
        cfg.lang_layers = 1;
        cfg.classes = 4;
        cfg.vocab = 8;
        let enc = TextEncoder::new(cfg).unwrap();
        let tape = Tape::new();
        let tokens = vec![2, 3, 4, 5, 2, 3];
        let out = enc.forward(&tape, &tokens, &DropState::Keep).unwrap();
        assert_eq!(out.logits.shape(), vec![1, 4]);
        assert_eq!(out.executed.lang, vec![0]);
        assert!(out.executed.vis.is_empty() && out.executed.cross.is_empty());

        let loss = tape.cross_entropy_logits(&out.logits, &[1]).unwrap();
        tape.backward(&loss).unwrap();
        assert!(enc.registry.by_name("l.0.adaptive.span_z").unwrap().grad().is_some());
        assert_eq!(enc.span_readout().len(), 2, "one layer, two heads");
    }

    #[test]
    fn eval_pass_is_deterministic() {
        let enc = Encoder::new(desk_config(Mechanism::SpanEntmax)).unwrap();
        let (q, vision, _) = example_tensors(5, 5);
        let run = || {
            let tape = Tape::eval();
            enc.forward(&tape, &q, &vision, &DropState::Keep)
                .unwrap()
                .logits
                .to_vec()
        };
        assert_eq!(run(), run());
    }
}
