//! Shared helpers for the integration suites: an independent closed-form
//! 1.5-entmax solver (sort-based, no bisection) to check the library's
//! bisection against, plus small utilities for random rows and temp dirs.

// Each integration target includes this module and uses a different subset.
#![allow(dead_code)]

use adattn::rng::CounterRng;
use std::path::PathBuf;

/// Exact 1.5-entmax of one row by the sorted-support algorithm.
///
/// With alpha = 1.5 the solution is p_i = max(z_i/2 - tau, 0)^2 where tau
/// makes the squares sum to 1. Sorting s = z/2 descending, for a support of
/// the k largest entries tau solves k*tau^2 - 2*S_k*tau + (Q_k - 1) = 0
/// (S_k, Q_k the prefix sum and prefix square-sum), and the smaller root is
/// the valid one; k grows while s_k stays above its tau. None of this shares
/// code or method with the bisection under test.
pub fn entmax15_exact(z: &[f64]) -> Vec<f64> {
    assert!(!z.is_empty(), "entmax of an empty row is undefined");
    let mut s: Vec<f64> = z.iter().map(|v| v / 2.0).collect();
    s.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let mut prefix_sum = 0.0;
    let mut prefix_sq = 0.0;
    let mut tau = f64::NAN;
    for (i, &si) in s.iter().enumerate() {
        let k = (i + 1) as f64;
        prefix_sum += si;
        prefix_sq += si * si;
        let disc = prefix_sum * prefix_sum - k * (prefix_sq - 1.0);
        if disc < 0.0 {
            break;
        }
        let candidate = (prefix_sum - disc.sqrt()) / k;
        if si > candidate {
            tau = candidate;
        } else {
            break;
        }
    }
    assert!(tau.is_finite(), "support search must settle on a tau");
    z.iter()
        .map(|v| {
            let t = v / 2.0 - tau;
            if t > 0.0 {
                t * t
            } else {
                0.0
            }
        })
        .collect()
}

/// A reproducible random row with entries scaled to `span`.
pub fn random_row(rng: &mut CounterRng, width: usize, span: f64) -> Vec<f64> {
    (0..width).map(|_| rng.normal() * span).collect()
}

/// Fresh directory under the system temp root, named for the test.
pub fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "adattn-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .expect("clock after epoch")
            .as_nanos()
    ));
    std::fs::create_dir_all(&dir).expect("temp dir creation");
    dir
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rows must be comparable");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn exact_solver_matches_frozen_values() {
    let p = entmax15_exact(&[0.6, 0.4, -2.0]);
    assert!((p[0] - 0.5705336798983294).abs() <= 1e-12);
    assert!((p[1] - 0.4294663201016707).abs() <= 1e-12);
    assert_eq!(p[2], 0.0, "distant entry falls out of the support");
    assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);

    let one = entmax15_exact(&[3.0, 0.0, 0.0, 0.0]);
    assert!(one[0] > 0.99, "dominant score takes nearly all mass");
    let flat = entmax15_exact(&[1.0, 1.0]);
    assert!((flat[0] - 0.5).abs() <= 1e-12 && (flat[1] - 0.5).abs() <= 1e-12);
}
