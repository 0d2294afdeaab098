//! Sparsity-capable row normalizers.
//!
//! Each mechanism here maps a row of attention scores to a probability
//! vector of the form `p_i = [(alpha - 1) * z_i - tau]_+ ^ (1 / (alpha - 1))`,
//! where `tau` is the unique threshold placing `p` on the simplex. As
//! `alpha -> 1` the map approaches softmax and every entry stays positive;
//! at `alpha = 2` it is the Euclidean projection onto the simplex, which
//! zeroes out low-scoring entries entirely. A learned per-head `alpha`
//! therefore controls how aggressively each head prunes its targets.
//!
//! `tau` is found by bisection, which stays robust across the whole
//! `(1, 2]` interval. Gradients with respect to scores use the closed-form
//! Jacobian; gradients with respect to `alpha` use a central finite
//! difference because the closed form degrades near the interval ends.

use crate::numerics::{Tape, Tensor};
use crate::{Error, Result};

/// Below this value of alpha the tape op evaluates plain softmax instead of
/// bisecting; the two maps are numerically indistinguishable there and the
/// exponent `1 / (alpha - 1)` becomes hostile.
pub const ALPHA_SOFTMAX_SWITCH: f64 = 1.001;

/// Half-width of the guard band at each end of `(1, 2)`. Finite-difference
/// probes for the alpha gradient are clamped into
/// `[1 + ALPHA_BAND, 2 - ALPHA_BAND]`.
pub const ALPHA_BAND: f64 = 1e-3;

/// Step used by the central finite difference on alpha.
pub const ALPHA_FD_STEP: f64 = 1e-4;

const BISECT_ITERS: usize = 60;

/// One solved row: the probabilities, the threshold that produced them, and
/// which entries carry nonzero mass.
#[derive(Debug, Clone)]
pub struct EntmaxSolution {
    pub probabilities: Vec<f64>,
    pub tau: f64,
    pub support: Vec<bool>,
}

/// Numerically stable softmax over one row.
pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn check_scores(z: &[f64], op: &'static str) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Input(format!("{op}: empty score row")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op));
    }
    Ok(())
}

/// Solves one row for any `alpha` in `(1, 2]` by bisecting on the threshold.
///
/// The bracket `[(alpha-1) max(z) - 1, (alpha-1) max(z)]` always contains the
/// solution: at the left end the largest term alone already contributes 1,
/// so the total is at least 1; at the right end every term is 0. A fixed 60
/// halvings shrink the bracket below 1e-18, which keeps the probability sum
/// within ~1e-12 of 1 even for hostile rows and makes results reproducible
/// bit for bit. An adaptive stop at a looser residual would leave enough
/// threshold noise to corrupt finite-difference gradient probes.
pub fn entmax_row(z: &[f64], alpha: f64) -> Result<EntmaxSolution> {
    check_scores(z, "entmax_row")?;
    if !alpha.is_finite() || alpha <= 1.0 || alpha > 2.0 {
        return Err(Error::Input(format!(
            "entmax_row: alpha must lie in (1, 2], got {alpha}"
        )));
    }
    let am1 = alpha - 1.0;
    let exp = 1.0 / am1;
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mass = |tau: f64| -> f64 {
        z.iter()
            .map(|&v| {
                let a = am1 * v - tau;
                if a > 0.0 {
                    a.powf(exp)
                } else {
                    0.0
                }
            })
            .sum()
    };
    let mut lo = am1 * max - 1.0;
    let mut hi = am1 * max;
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let probabilities: Vec<f64> = z
        .iter()
        .map(|&v| {
            let a = am1 * v - tau;
            if a > 0.0 {
                a.powf(exp)
            } else {
                0.0
            }
        })
        .collect();
    let support = probabilities.iter().map(|&p| p > 0.0).collect();
    // At extreme score magnitudes (around 1e16 and beyond) the bracket
    // endpoints become adjacent floats and the threshold can no longer be
    // resolved. Well-scaled rows land within ~1e-12 of the simplex, so a
    // miss here means the inputs were outside the solver's usable range.
    let sum: f64 = probabilities.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric(format!(
            "entmax bisection left the row off the simplex (sum {sum}); \
             score magnitudes are too large to resolve"
        )));
    }
    Ok(EntmaxSolution {
        probabilities,
        tau,
        support,
    })
}

/// Exact simplex projection (the `alpha = 2` member of the family) via the
/// sorted cumulative-sum test. Entries tied exactly at the support boundary
/// receive zero mass.
pub fn sparsemax_row(z: &[f64]) -> Result<EntmaxSolution> {
    check_scores(z, "sparsemax_row")?;
    let n = z.len();
    let mut sorted: Vec<f64> = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("scores checked finite"));
    let mut cumsum = 0.0;
    let mut k_star = 1;
    let mut cumsum_star = sorted[0];
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k1 = (k + 1) as f64;
        if 1.0 + k1 * v > cumsum {
            k_star = k + 1;
            cumsum_star = cumsum;
        }
    }
    let tau = (cumsum_star - 1.0) / k_star as f64;
    let probabilities: Vec<f64> = z.iter().map(|&v| (v - tau).max(0.0)).collect();
    let support = (0..n).map(|i| z[i] - tau > 0.0).collect();
    Ok(EntmaxSolution {
        probabilities,
        tau,
        support,
    })
}

/// Pulls an upstream gradient back through the normalizer to the scores.
///
/// On the support the Jacobian is `diag(s) - s s^T / sum(s)` with
/// `s_i = p_i ^ (2 - alpha)`; off the support every derivative is zero. The
/// same formula covers the softmax limit, where `s` degenerates to `p`.
pub fn entmax_backward_z(sol: &EntmaxSolution, upstream: &[f64], alpha: f64) -> Vec<f64> {
    assert_eq!(
        sol.probabilities.len(),
        upstream.len(),
        "upstream length must match the solved row"
    );
    let s: Vec<f64> = sol
        .probabilities
        .iter()
        .zip(&sol.support)
        .map(|(&p, &on)| if on { p.powf(2.0 - alpha) } else { 0.0 })
        .collect();
    let s_sum: f64 = s.iter().sum();
    if s_sum <= 0.0 {
        return vec![0.0; upstream.len()];
    }
    let weighted: f64 = upstream.iter().zip(&s).map(|(u, si)| u * si).sum();
    let avg = weighted / s_sum;
    s.iter().zip(upstream).map(|(si, u)| si * (u - avg)).collect()
}

/// Gradient of `sum(upstream * p)` with respect to alpha, by central finite
/// difference. The differencing center is clamped into
/// `[1 + ALPHA_BAND, 2 - ALPHA_BAND]`; the boolean reports whether clamping
/// occurred, so callers can surface how often training runs against the ends
/// of the interval.
pub fn entmax_backward_alpha(z: &[f64], alpha: f64, upstream: &[f64]) -> Result<(f64, bool)> {
    let lo = 1.0 + ALPHA_BAND;
    let hi = 2.0 - ALPHA_BAND;
    let center = alpha.clamp(lo, hi);
    let clamped = center != alpha;
    let plus = entmax_row(z, center + ALPHA_FD_STEP)?;
    let minus = entmax_row(z, center - ALPHA_FD_STEP)?;
    let mut d = 0.0;
    for i in 0..z.len() {
        d += upstream[i] * (plus.probabilities[i] - minus.probabilities[i]);
    }
    Ok((d / (2.0 * ALPHA_FD_STEP), clamped))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps an unconstrained parameter to `alpha = 1 + sigmoid(raw)`, keeping
/// alpha inside `(1, 2)` by construction. `raw = 0` gives `alpha = 1.5`.
pub fn alpha_of_raw(raw: f64) -> f64 {
    1.0 + sigmoid(raw)
}

/// One unconstrained alpha parameter per attention head.
pub struct AlphaParams {
    pub raw: Tensor,
}

impl AlphaParams {
    /// All heads start at `alpha = 1.5`, the midpoint of the family.
    pub fn new(heads: usize) -> Self {
        AlphaParams {
            raw: Tensor::param(&[heads], vec![0.0; heads])
                .expect("alpha parameter shape is always consistent"),
        }
    }

    pub fn heads(&self) -> usize {
        self.raw.len()
    }

    pub fn alpha(&self, head: usize) -> f64 {
        alpha_of_raw(self.raw.values()[head])
    }
}

/// Tape op: normalizes each row of `scores` with the head's current alpha.
///
/// When alpha sits below [`ALPHA_SOFTMAX_SWITCH`] the forward pass evaluates
/// softmax directly. The backward pass routes score gradients through the
/// closed-form Jacobian and alpha gradients through the finite difference,
/// chaining the latter onto the raw parameter with
/// `d alpha / d raw = (alpha - 1) * (2 - alpha)`.
pub fn entmax_rows(
    tape: &Tape,
    scores: &Tensor,
    alpha_params: &AlphaParams,
    head: usize,
) -> Result<Tensor> {
    let (m, n) = scores.dims2();
    if head >= alpha_params.heads() {
        return Err(Error::Input(format!(
            "entmax_rows: head {head} out of range for {} heads",
            alpha_params.heads()
        )));
    }
    let alpha = alpha_params.alpha(head);
    let score_vals = scores.to_vec();
    if score_vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("entmax_rows"));
    }

    let mut probs = Vec::with_capacity(m * n);
    let mut support = Vec::with_capacity(m * n);
    if alpha < ALPHA_SOFTMAX_SWITCH {
        for r in 0..m {
            let row = softmax_row(&score_vals[r * n..(r + 1) * n]);
            probs.extend_from_slice(&row);
            support.extend(std::iter::repeat(true).take(n));
        }
    } else {
        for r in 0..m {
            let sol = entmax_row(&score_vals[r * n..(r + 1) * n], alpha)?;
            probs.extend_from_slice(&sol.probabilities);
            support.extend_from_slice(&sol.support);
        }
    }

    let out = Tensor::new(&[m, n], probs.clone())?;
    if !tape.is_recording() {
        return Ok(out);
    }
    let band_lo = 1.0 + ALPHA_BAND;
    let band_hi = 2.0 - ALPHA_BAND;
    if alpha < band_lo || alpha > band_hi {
        tape.note_alpha_clamp();
    }
    if !tape.track(&[scores, &alpha_params.raw]) {
        return Ok(out);
    }
    out.set_requires_grad(true);

    let scores_h = scores.clone();
    let raw_h = alpha_params.raw.clone();
    let out_h = out.clone();
    tape.push(move || {
        let upstream = match out_h.grad() {
            Some(g) => g,
            None => return,
        };
        let want_scores = scores_h.requires_grad();
        let want_alpha = raw_h.requires_grad();
        if !want_scores && !want_alpha {
            return;
        }
        let mut dz = vec![0.0; m * n];
        let mut dalpha = 0.0;
        for r in 0..m {
            let lo = r * n;
            let hi = lo + n;
            let sol = EntmaxSolution {
                probabilities: probs[lo..hi].to_vec(),
                tau: 0.0,
                support: support[lo..hi].to_vec(),
            };
            if want_scores {
                let row = entmax_backward_z(&sol, &upstream[lo..hi], alpha);
                dz[lo..hi].copy_from_slice(&row);
            }
            if want_alpha {
                let (d, _) = entmax_backward_alpha(&score_vals[lo..hi], alpha, &upstream[lo..hi])
                    .expect("forward pass accepted these scores");
                dalpha += d;
            }
        }
        if want_scores {
            scores_h.accumulate_grad(&dz);
        }
        if want_alpha {
            let chain = (alpha - 1.0) * (2.0 - alpha);
            let mut draw = vec![0.0; raw_h.len()];
            draw[head] = dalpha * chain;
            raw_h.accumulate_grad(&draw);
        }
    });
    Ok(out)
}
