//! Property-level checks for the invariants the kernels promise on every
//! input, not just the golden cases: normalizer outputs stay on the
//! simplex, masks behave like masks, parameter censuses move exactly as
//! the configuration says they should, and the data generators are pure
//! functions of their arguments.

mod support;

use adattn::attention::Mechanism;
use adattn::harness::checkpoint::{read_checkpoint, write_checkpoint};
use adattn::harness::flops::{FlopShape, SpanWidths};
use adattn::harness::TrainConfig;
use adattn::layerdrop::{kept_indices, DropState};
use adattn::model::{Encoder, EncoderConfig, LANG_STREAM, VIS_STREAM};
use adattn::normalizers::{entmax_row, softmax_row};
use adattn::numerics::{Tape, Tensor};
use adattn::rng::CounterRng;
use adattn::span::{
    mask_value, span_attention, Distances, RelPosTable, SpanNormalizer, SpanParams,
};
use adattn::synth::{generate_copy, generate_lookup, CopySpec};
use adattn::Error;
use proptest::prelude::*;
use support::{max_abs_diff, random_row, temp_dir};

fn desk_encoder_config(mechanism: Mechanism) -> EncoderConfig {
    let mut cfg = TrainConfig::default().encoder_config();
    cfg.mechanism = mechanism;
    cfg.seed = 40;
    cfg
}

proptest! {
    /// Softmax output is a distribution and preserves the score ordering.
    #[test]
    fn softmax_row_stays_on_the_simplex(row in prop::collection::vec(-30.0..30.0f64, 1..48)) {
        let p = softmax_row(&row);
        prop_assert_eq!(p.len(), row.len());
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {} is off the simplex", sum);
        for (i, &pi) in p.iter().enumerate() {
            prop_assert!(pi > 0.0 && pi <= 1.0, "entry {} = {} escaped (0, 1]", i, pi);
        }
        for i in 0..row.len() {
            for j in 0..row.len() {
                if row[i] > row[j] {
                    prop_assert!(p[i] >= p[j], "ordering broke at {} vs {}", i, j);
                }
            }
        }
    }

    /// The bisection solver lands on the simplex for every usable alpha,
    /// and its support flags agree with the probabilities.
    #[test]
    fn entmax_row_stays_on_the_simplex(
        row in prop::collection::vec(-10.0..10.0f64, 1..48),
        alpha in 1.001..=2.0f64,
    ) {
        let sol = entmax_row(&row, alpha).expect("alpha inside (1, 2]");
        prop_assert_eq!(sol.probabilities.len(), row.len());
        let sum: f64 = sol.probabilities.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 2e-6, "sum {} is off the simplex", sum);
        for (i, &pi) in sol.probabilities.iter().enumerate() {
            prop_assert!(pi >= 0.0 && pi <= 1.0 + 1e-12, "entry {} = {} escaped [0, 1]", i, pi);
            prop_assert_eq!(sol.support[i], pi > 0.0, "support flag {} disagrees", i);
        }
        for i in 0..row.len() {
            for j in 0..row.len() {
                if row[i] > row[j] {
                    prop_assert!(
                        sol.probabilities[i] >= sol.probabilities[j],
                        "ordering broke at {} vs {}", i, j
                    );
                }
            }
        }
    }

    /// Alphas outside the family are rejected rather than silently clamped.
    #[test]
    fn entmax_row_rejects_alphas_outside_the_family(
        row in prop::collection::vec(-5.0..5.0f64, 2..16),
        alpha in prop_oneof![-2.0..=1.0f64, 2.0001..5.0f64],
    ) {
        prop_assert!(matches!(entmax_row(&row, alpha), Err(Error::Input(_))));
    }

    /// Layer selection is a pure function of its key: repeatable, sorted,
    /// in range, and exact for the deterministic modes.
    #[test]
    fn kept_indices_is_pure_and_well_formed(
        n in 1usize..12,
        p_raw in 0usize..12,
        seed in any::<u64>(),
        step in any::<u64>(),
        salt in 0u64..4,
    ) {
        let p = p_raw % n;
        let state = DropState::Sample { seed, step };
        let kept = kept_indices(&state, n, p, salt);
        prop_assert_eq!(&kept, &kept_indices(&state, n, p, salt), "sampling must be repeatable");
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]), "kept set must be strictly sorted");
        prop_assert!(kept.iter().all(|&i| i < n), "kept index out of range");

        let full = kept_indices(&DropState::Keep, n, p, salt);
        prop_assert_eq!(full, (0..n).collect::<Vec<_>>(), "keep mode must run everything");
        let pruned = kept_indices(&DropState::Prune, n, p, salt);
        prop_assert_eq!(pruned.len(), n - p, "pruning must remove exactly the budget");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every attention row is a distribution after mask renormalization,
    /// and no weight lands beyond the visible reach except through the
    /// explicit empty-row fallback.
    #[test]
    fn span_attention_rows_stay_on_the_simplex(
        t_q in 2usize..7,
        t_k in 2usize..7,
        z in 0.0..6.0f64,
        ramp in 0.5..4.0f64,
        seed in 0u64..1000,
    ) {
        let d_head = 4usize;
        let mut rng = CounterRng::from_key(&[seed, 77]);
        let q = Tensor::new(&[t_q, d_head], random_row(&mut rng, t_q * d_head, 1.0)).unwrap();
        let k = Tensor::new(&[t_k, d_head], random_row(&mut rng, t_k * d_head, 1.0)).unwrap();
        let v = Tensor::new(&[t_k, d_head], random_row(&mut rng, t_k * d_head, 1.0)).unwrap();
        let spans = SpanParams { z: Tensor::new(&[1], vec![z]).unwrap(), ramp };
        let relpos = RelPosTable::new(8, d_head);
        relpos.table.set_data(&random_row(&mut rng, 9 * d_head, 0.2));
        let distances = Distances::absolute(t_q, t_k);
        let tape = Tape::eval();
        let att = span_attention(
            &tape, &q, &k, &v, &distances, &spans, 0, &relpos, SpanNormalizer::Softmax,
        ).expect("well-formed inputs");

        let weights = att.weights.to_vec();
        let reach = z + ramp;
        for t in 0..t_q {
            let row = &weights[t * t_k..(t + 1) * t_k];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9, "row {} sums to {}", t, sum);
            let fallback = row.iter().filter(|&&w| w > 0.0).count() == 1
                && row.iter().any(|&w| (w - 1.0).abs() <= 1e-12)
                && (0..t_k).all(|r| {
                    (t as f64 - r as f64).abs() >= reach || row[r] > 0.0
                });
            for r in 0..t_k {
                let dist = (t as f64 - r as f64).abs();
                if dist >= reach && !fallback {
                    prop_assert!(
                        row[r] == 0.0,
                        "weight {} leaked beyond reach {} at distance {}", row[r], reach, dist
                    );
                }
            }
        }
    }
}

/// Sparsity rises with alpha in aggregate: the same scores keep at most
/// as many nonzero entries at a higher alpha.
#[test]
fn entmax_sparsity_grows_with_alpha() {
    let mut rng = CounterRng::from_key(&[88, 1]);
    let mut nnz = [0usize; 3];
    let alphas = [1.2, 1.5, 2.0];
    for case in 0..300 {
        let width = 4 + case % 24;
        let row = random_row(&mut rng, width, 2.0);
        for (slot, &alpha) in alphas.iter().enumerate() {
            let sol = entmax_row(&row, alpha).expect("alpha inside (1, 2]");
            nnz[slot] += sol.support.iter().filter(|&&s| s).count();
        }
    }
    assert!(
        nnz[2] < nnz[1] && nnz[1] < nnz[0],
        "support sizes should shrink as alpha rises, got {nnz:?} for alphas {alphas:?}"
    );
}

/// Tiny rows and degenerate widths still behave.
#[test]
fn entmax_row_handles_degenerate_widths() {
    let sol = entmax_row(&[3.7], 1.5).expect("single entry");
    assert!(
        (sol.probabilities[0] - 1.0).abs() <= 1e-9,
        "a single candidate takes all the mass, got {}",
        sol.probabilities[0]
    );
    let sol = entmax_row(&[2.0, 2.0], 2.0).expect("tied pair");
    assert!(
        (sol.probabilities[0] - 0.5).abs() <= 1e-9 && (sol.probabilities[1] - 0.5).abs() <= 1e-9,
        "a tied pair splits evenly, got {:?}",
        sol.probabilities
    );
}

/// The soft mask is a ramp: one inside the span, zero beyond the ramp end,
/// monotone in both the distance and the span parameter.
#[test]
fn mask_value_is_a_monotone_ramp() {
    for &z in &[0.0, 0.7, 2.0, 5.5, 16.0] {
        for &ramp in &[0.5, 1.0, 4.0] {
            let mut previous = f64::INFINITY;
            for step in 0..200 {
                let x = step as f64 * 0.15;
                let m = mask_value(z, ramp, x);
                assert!((0.0..=1.0).contains(&m), "mask {m} escaped [0, 1]");
                assert!(m <= previous, "mask must not grow with distance");
                if x <= z {
                    assert_eq!(m, 1.0, "mask must saturate inside the span (z={z}, x={x})");
                }
                if x >= z + ramp {
                    assert_eq!(m, 0.0, "mask must vanish past the ramp (z={z}, x={x})");
                }
                previous = m;
            }
            assert!(
                mask_value(z + 1.0, ramp, z + 0.9) >= mask_value(z, ramp, z + 0.9),
                "a longer span must never see less"
            );
        }
    }
}

/// Parameter censuses move exactly as the mechanism dictates: alphas add
/// one scalar per head per adaptive site, spans swap absolute position
/// tables for per-site span scalars plus relative position tables.
#[test]
fn parameter_census_tracks_the_mechanism() {
    let base = desk_encoder_config(Mechanism::Softmax);
    let sites = base.adaptive_sites();
    let heads = base.heads;
    let d_head = base.d_model / base.heads;
    let relpos_rows = base.max_span + 1;

    let total = |mechanism: Mechanism| -> usize {
        let enc = Encoder::new(desk_encoder_config(mechanism)).expect("desk config builds");
        enc.registry.total_scalars()
    };
    let softmax = total(Mechanism::Softmax);
    let entmax = total(Mechanism::Entmax);
    let span_softmax = total(Mechanism::SpanSoftmax);
    let span_entmax = total(Mechanism::SpanEntmax);

    assert_eq!(
        entmax - softmax,
        heads * sites,
        "sparse normalization must add exactly one alpha per head per site"
    );
    assert_eq!(
        span_entmax - span_softmax,
        heads * sites,
        "the alpha census delta must not depend on the span setting"
    );
    let span_added = sites * heads + sites * relpos_rows * d_head;
    let positions_removed = 2 * relpos_rows * base.d_model;
    assert_eq!(
        span_softmax + positions_removed,
        softmax + span_added,
        "span mode must trade absolute positions for spans and relative positions"
    );
}

/// Attention projection weight counts scale with the square of the model
/// width, holding depth fixed.
#[test]
fn projection_census_scales_quadratically_in_width() {
    let projection_scalars = |d_model: usize| -> usize {
        let mut cfg = desk_encoder_config(Mechanism::Softmax);
        cfg.d_model = d_model;
        cfg.d_ff = 4 * d_model;
        let enc = Encoder::new(cfg).expect("config builds");
        enc.registry
            .entries()
            .iter()
            .filter(|e| {
                ["wq", "wk", "wv", "wo"]
                    .iter()
                    .any(|n| e.name.ends_with(&format!(".{n}")))
            })
            .map(|e| e.tensor.len())
            .sum()
    };
    let narrow = projection_scalars(32);
    let wide = projection_scalars(64);
    assert_eq!(wide, 4 * narrow, "doubling width must quadruple projection weights");
}

/// A deeper stack always carries more parameters.
#[test]
fn deeper_stacks_carry_more_parameters() {
    let total = |lang: usize, vis: usize, cross: usize| -> usize {
        let cfg = EncoderConfig {
            mechanism: Mechanism::Softmax,
            d_model: 8,
            heads: 2,
            lang_layers: lang,
            vis_layers: vis,
            cross_blocks: cross,
            d_ff: 16,
            vocab: 16,
            d_vis: 24,
            classes: 8,
            max_span: 16,
            ramp: 4.0,
            drop_count: 0,
            seed: 3,
        };
        Encoder::new(cfg).expect("stack builds").registry.total_scalars()
    };
    assert!(total(10, 6, 6) > total(9, 5, 5), "adding layers must add parameters");
}

/// Identical seeds build identical models; different seeds do not.
#[test]
fn encoder_init_is_seeded() {
    let build = |seed: u64| -> Vec<f64> {
        let mut cfg = desk_encoder_config(Mechanism::SpanEntmax);
        cfg.seed = seed;
        Encoder::new(cfg).expect("desk config builds").registry.flatten()
    };
    let a = build(9);
    let b = build(9);
    assert_eq!(a, b, "same seed must reproduce the exact same initialization");
    let c = build(10);
    assert!(
        max_abs_diff(&a, &c) > 1e-9,
        "different seeds should not produce identical weights"
    );
}

/// The lookup generator is a pure function of (spec, seed, stream, index):
/// repeated calls agree, and each key coordinate matters.
#[test]
fn lookup_generator_is_pure_and_keyed() {
    let spec = TrainConfig::default().task_spec();
    let a = generate_lookup(&spec, 12, 0, 34);
    let b = generate_lookup(&spec, 12, 0, 34);
    assert_eq!(a.question, b.question, "question must be deterministic");
    assert_eq!(a.vision, b.vision, "vision must be deterministic");
    assert_eq!(a.answer, b.answer, "answer must be deterministic");

    let differs = |x: &adattn::synth::SynthExample| {
        x.question != a.question || x.vision != a.vision || x.answer != a.answer
    };
    assert!(differs(&generate_lookup(&spec, 13, 0, 34)), "the seed must matter");
    assert!(differs(&generate_lookup(&spec, 12, 1, 34)), "the stream must matter");
    assert!(differs(&generate_lookup(&spec, 12, 0, 35)), "the index must matter");

    for i in 0..200 {
        let ex = generate_lookup(&spec, 12, 0, i);
        assert!(
            ex.answer < spec.classes(),
            "answer {} outside {} classes",
            ex.answer,
            spec.classes()
        );
        assert!(
            ex.question.iter().all(|&t| t < spec.vocab_needed()),
            "question token escaped the vocabulary"
        );
        assert_eq!(ex.vision.len(), spec.t_vis * spec.d_vis(), "vision tensor shape drifted");
        assert!(ex.vision.iter().all(|v| v.is_finite()), "vision features must be finite");
    }
}

/// Labels are near-uniform, so no constant guess can look competent.
#[test]
fn lookup_labels_are_balanced() {
    let spec = TrainConfig::default().task_spec();
    let n = 10_000u64;
    let mut counts = vec![0usize; spec.classes()];
    for i in 0..n {
        counts[generate_lookup(&spec, 77, 0, i).answer] += 1;
    }
    let expected = n as f64 / spec.classes() as f64;
    let mut majority = 0.0f64;
    for (class, &count) in counts.iter().enumerate() {
        let deviation = (count as f64 - expected).abs() / expected;
        assert!(
            deviation <= 0.10,
            "class {class} count {count} drifted {:.1}% from uniform {expected}",
            deviation * 100.0
        );
        majority = majority.max(count as f64 / n as f64);
    }
    assert!(
        (majority - 1.0 / spec.classes() as f64).abs() <= 0.02,
        "majority-class rate {majority:.4} should sit within 2 points of chance"
    );
}

/// The copy task's label is literally the token at the stated distance,
/// and the task carries no vision payload.
#[test]
fn copy_generator_copies_the_stated_position() {
    for distance in [0usize, 2, 4, 7] {
        let spec = CopySpec { t_lang: 8, distance, values: 8 };
        for i in 0..200 {
            let ex = generate_copy(&spec, 21, 0, i);
            assert_eq!(ex.question.len(), spec.t_lang, "sequence length drifted");
            assert!(ex.vision.is_empty(), "the copy task must not carry vision features");
            assert!(ex.answer < spec.values, "answer escaped the value alphabet");
            let token = ex.question[distance];
            assert!(
                token >= 2 && token < 2 + spec.values,
                "content token {token} escaped its range"
            );
            assert_eq!(
                ex.answer,
                token - 2,
                "the answer must be the token at distance {distance}"
            );
        }
    }
    assert!(
        CopySpec { t_lang: 8, distance: 8, values: 8 }.validate().is_err(),
        "a distance outside the sequence must be rejected"
    );
}

/// Narrower learned spans mean strictly cheaper attention, and the sparse
/// normalizer is priced above softmax at the same shape.
#[test]
fn flop_accounting_tracks_spans_and_normalizers() {
    let cfg = desk_encoder_config(Mechanism::SpanEntmax);
    let shape = FlopShape {
        mechanism: Mechanism::SpanEntmax,
        d_model: cfg.d_model,
        heads: cfg.heads,
        d_ff: cfg.d_ff,
        lang_layers: cfg.lang_layers,
        vis_layers: cfg.vis_layers,
        cross_blocks: cfg.cross_blocks,
        d_vis: cfg.d_vis,
        classes: cfg.classes,
        t_lang: 8,
        t_vis: 6,
    };
    let executed = shape.full_executed();

    let enc = Encoder::new(cfg).expect("desk config builds");
    let set_spans = |value: f64| {
        for entry in enc.registry.entries() {
            if entry.name.ends_with(".span_z") {
                entry.tensor.set_data(&vec![value; entry.tensor.len()]);
            }
        }
    };
    set_spans(1.0);
    let narrow = shape.count(&SpanWidths::from_encoder(&enc), &executed).total;
    set_spans(14.0);
    let wide = shape.count(&SpanWidths::from_encoder(&enc), &executed).total;
    let full = shape.count(&SpanWidths::Full, &executed).total;
    assert!(
        narrow < wide && wide <= full,
        "attention cost must grow with the span: narrow {narrow}, wide {wide}, full {full}"
    );

    let softmax_shape = FlopShape { mechanism: Mechanism::Softmax, ..shape.clone() };
    let sparse = shape.count(&SpanWidths::Full, &executed).normalizer_total;
    let plain = softmax_shape
        .count(&SpanWidths::Full, &softmax_shape.full_executed())
        .normalizer_total;
    assert!(
        sparse > plain,
        "the iterative normalizer must cost more than softmax: {sparse} vs {plain}"
    );
}

/// Both input streams reach the logits: zeroing the vision features or
/// permuting the question changes the prediction.
#[test]
fn both_streams_reach_the_logits() {
    let cfg = desk_encoder_config(Mechanism::Softmax);
    let enc = Encoder::new(cfg).expect("desk config builds");
    let spec = TrainConfig::default().task_spec();
    let ex = generate_lookup(&spec, 50, 0, 3);
    let tape = Tape::eval();
    let logits = |question: &[usize], vision: &[f64]| -> Vec<f64> {
        let vision = Tensor::new(&[spec.t_vis, spec.d_vis()], vision.to_vec()).unwrap();
        enc.forward(&tape, question, &vision, &DropState::Keep)
            .expect("forward pass")
            .logits
            .to_vec()
    };
    let reference = logits(&ex.question, &ex.vision);

    let blank = vec![0.0; ex.vision.len()];
    assert!(
        max_abs_diff(&reference, &logits(&ex.question, &blank)) > 1e-9,
        "blanking the vision stream must change the logits"
    );
    let mut shuffled = ex.question.clone();
    shuffled.rotate_left(1);
    assert!(
        max_abs_diff(&reference, &logits(&shuffled, &ex.vision)) > 1e-9,
        "rearranging the question must change the logits"
    );
}

/// Checkpoints reject tampering anywhere in the payload.
#[test]
fn checkpoints_reject_corruption() {
    let dir = temp_dir("props-ckpt");
    let path = dir.join("model.ckpt");
    let cfg = TrainConfig::default();
    let params: Vec<f64> = (0..16).map(|i| i as f64 * 0.25 - 2.0).collect();
    write_checkpoint(&path, &cfg, &params).expect("checkpoint writes");
    let (_, reread) = read_checkpoint(&path).expect("untouched checkpoint reads");
    assert_eq!(reread, params, "the payload must round trip exactly");

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(
        matches!(read_checkpoint(&path), Err(Error::Corrupt(_))),
        "a flipped byte must be caught"
    );

    bytes[mid] ^= 0x40;
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(
        matches!(read_checkpoint(&path), Err(Error::Corrupt(_))),
        "a truncated file must be caught"
    );
    std::fs::remove_dir_all(&dir).ok();
}

/// Layer selection honors the per-stream salt: streams draw independent
/// coins from the same seed and step.
#[test]
fn layer_sampling_differs_across_streams() {
    let mut any_difference = false;
    for step in 0..100u64 {
        let state = DropState::Sample { seed: 5, step };
        let lang = kept_indices(&state, 6, 2, LANG_STREAM);
        let vis = kept_indices(&state, 6, 2, VIS_STREAM);
        if lang != vis {
            any_difference = true;
            break;
        }
    }
    assert!(
        any_difference,
        "a hundred steps with never-diverging streams means the salt is ignored"
    );
}
