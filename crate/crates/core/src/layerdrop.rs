//! Structured layer dropping.
//!
//! During training each layer of a stream is skipped independently so the
//! network learns not to rely on any single one; the per-layer keep
//! probability is `1 - drop_count / n_layers`, so on average `drop_count`
//! layers of that stream are absent from a pass. At inference the same
//! budget is spent deterministically: the "every other" rule removes layers
//! at evenly spaced depths. Skipped layers are bypassed entirely (residual
//! identity), with no rescaling of the surviving ones, and cross-modality
//! blocks drop as whole units.

use crate::rng::coin;

/// Key salt separating layer-keep coins from every other random stream.
const LAYERDROP_SALT: u64 = 0x4C44524F50; // "LDROP"

/// How a forward pass decides which layers run.
pub enum DropState {
    /// Run everything (evaluation during training, or drop disabled).
    Keep,
    /// Independent per-layer coins, reproducible from the key.
    Sample { seed: u64, step: u64 },
    /// Deterministic evenly spaced removal for inference.
    Prune,
}

/// Probability that any single layer runs during sampled training.
pub fn keep_probability(n_layers: usize, drop_count: usize) -> f64 {
    assert!(
        drop_count <= n_layers,
        "cannot drop {drop_count} of {n_layers} layers"
    );
    if n_layers == 0 {
        return 1.0;
    }
    1.0 - drop_count as f64 / n_layers as f64
}

/// Indices removed by the evenly spaced rule: layer `round(k * n / p) - 1`
/// for `k = 1..=p`. Duplicates after rounding collapse, so the result can be
/// shorter than `drop_count` on degenerate shapes.
pub fn prune_every_other(n_layers: usize, drop_count: usize) -> Vec<usize> {
    assert!(
        drop_count <= n_layers,
        "cannot drop {drop_count} of {n_layers} layers"
    );
    let mut out: Vec<usize> = (1..=drop_count)
        .map(|k| {
            let pos = (k as f64 * n_layers as f64 / drop_count as f64).round() as usize;
            pos - 1
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Layer indices that actually execute for one stream on one pass.
/// `stream_salt` keeps coins of different streams independent.
pub fn kept_indices(
    state: &DropState,
    n_layers: usize,
    drop_count: usize,
    stream_salt: u64,
) -> Vec<usize> {
    match state {
        DropState::Keep => (0..n_layers).collect(),
        DropState::Sample { seed, step } => {
            let p_keep = keep_probability(n_layers, drop_count);
            (0..n_layers)
                .filter(|&l| {
                    coin(
                        &[*seed, LAYERDROP_SALT, *step, stream_salt, l as u64],
                        p_keep,
                    )
                })
                .collect()
        }
        DropState::Prune => {
            let dropped = prune_every_other(n_layers, drop_count);
            (0..n_layers).filter(|l| !dropped.contains(l)).collect()
        }
    }
}

/// Expected cost of the listed streams under sampled dropping, in the same
/// unit as the given per-layer costs. Each stream is `(cost_per_layer,
/// n_layers, drop_count)`; the expectation of an independent keep/skip pass
/// is `cost * (n - p)`.
pub fn expected_layer_flops(groups: &[(f64, usize, usize)]) -> f64 {
    groups
        .iter()
        .map(|&(cost, n, p)| {
            assert!(p <= n, "cannot drop {p} of {n} layers");
            cost * (n - p) as f64
        })
        .sum()
}

/// Expected fraction of full layer cost that still runs under sampled
/// dropping.
pub fn expected_flops_ratio(groups: &[(f64, usize, usize)]) -> f64 {
    let full: f64 = groups.iter().map(|&(cost, n, _)| cost * n as f64).sum();
    if full == 0.0 {
        return 1.0;
    }
    expected_layer_flops(groups) / full
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_other_removes_evenly_spaced_layers() {
        assert_eq!(prune_every_other(5, 1), vec![4]);
        assert_eq!(prune_every_other(9, 3), vec![2, 5, 8]);
        assert_eq!(prune_every_other(10, 1), vec![9]);
        assert_eq!(prune_every_other(4, 2), vec![1, 3]);
        assert_eq!(prune_every_other(3, 3), vec![0, 1, 2]);
        assert_eq!(prune_every_other(6, 0), Vec::<usize>::new());
        assert_eq!(prune_every_other(5, 4), vec![0, 2, 3, 4]);
    }

    #[test]
    fn kept_indices_complement_the_pruned_set() {
        let kept = kept_indices(&DropState::Prune, 9, 3, 0);
        assert_eq!(kept, vec![0, 1, 3, 4, 6, 7]);
        let all = kept_indices(&DropState::Keep, 9, 3, 0);
        assert_eq!(all.len(), 9, "Keep ignores the drop budget");
    }

    #[test]
    fn sampled_keeps_are_reproducible_and_step_dependent() {
        let a = kept_indices(&DropState::Sample { seed: 7, step: 12 }, 8, 2, 1);
        let b = kept_indices(&DropState::Sample { seed: 7, step: 12 }, 8, 2, 1);
        assert_eq!(a, b, "same key must give the same pass");
        let mut saw_difference = false;
        for step in 0..50 {
            let c = kept_indices(&DropState::Sample { seed: 7, step }, 8, 2, 1);
            if c != a {
                saw_difference = true;
                break;
            }
        }
        assert!(saw_difference, "coins must vary across steps");
    }

    #[test]
    fn sampled_keep_rate_approaches_the_budget() {
        let n = 10;
        let p = 3;
        let mut kept_total = 0usize;
        let trials = 4000;
        for step in 0..trials {
            kept_total += kept_indices(&DropState::Sample { seed: 3, step }, n, p, 2).len();
        }
        let rate = kept_total as f64 / (trials as usize * n) as f64;
        let want = keep_probability(n, p);
        assert!(
            (rate - want).abs() <= 0.02,
            "empirical keep rate {rate} should approach {want}"
        );
    }

    #[test]
    fn streams_draw_independent_coins() {
        let mut differ = false;
        for step in 0..50 {
            let s0 = kept_indices(&DropState::Sample { seed: 9, step }, 6, 2, 0);
            let s1 = kept_indices(&DropState::Sample { seed: 9, step }, 6, 2, 1);
            if s0 != s1 {
                differ = true;
                break;
            }
        }
        assert!(differ, "stream salts must decorrelate the coins");
    }

    #[test]
    fn expected_ratio_on_one_stream() {
        let r = expected_flops_ratio(&[(123.0, 10, 1)]);
        assert!((r - 0.9).abs() <= 1e-12, "dropping 1 of 10 equal layers keeps 0.9");
        assert_eq!(expected_flops_ratio(&[(5.0, 4, 0)]), 1.0);
    }

    #[test]
    fn expected_cost_of_dropped_wide_stack_matches_smaller_full_stack() {
        // One layer dropped from each stream of a 10-6-6 stack costs, in
        // expectation, exactly what a full 9-5-5 stack costs.
        let (cl, cv, cx) = (17.0, 11.0, 29.5);
        let dropped = expected_layer_flops(&[(cl, 10, 1), (cv, 6, 1), (cx, 6, 1)]);
        let full = expected_layer_flops(&[(cl, 9, 0), (cv, 5, 0), (cx, 5, 0)]);
        assert!((dropped - full).abs() <= 1e-9);
    }

    #[test]
    fn zero_layers_is_a_legal_degenerate_stream() {
        assert_eq!(keep_probability(0, 0), 1.0);
        assert_eq!(kept_indices(&DropState::Keep, 0, 0, 0), Vec::<usize>::new());
        assert_eq!(expected_flops_ratio(&[]), 1.0);
    }
}
