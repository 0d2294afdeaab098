//! Learnable attention spans with a soft ramp mask.
//!
//! Each head owns a scalar `z >= 0`. A key at integer distance `x` from the
//! query receives mask weight `m(x) = clamp((ramp + z - x) / ramp, 0, 1)`:
//! full weight inside the span, a linear ramp of width `ramp` just outside
//! it, and zero beyond. Because the mask is exactly zero past
//! `z + ramp`, attention can skip those keys entirely; the computation here
//! iterates only over the band `|t - r| <= ceil(z + ramp)` and the skipped
//! work is what the FLOP accountant reports as savings. Gradients through
//! the ramp pull `z` wider when distant keys would reduce the loss and let a
//! penalty on `z` shrink it otherwise.
//!
//! Scores inside the band use relative-position keying: the query dots both
//! the key and a learned per-distance vector, so a trained span transfers to
//! longer sequences than it saw. The masked scores are normalized either by
//! softmax or by the sparse family in [`crate::normalizers`]; in the sparse
//! case the normalizer runs over the open support of the mask (entries with
//! `m > 0`), which keeps banded evaluation exact, and the mask then reweights
//! the result.

use crate::normalizers::{
    entmax_backward_alpha, entmax_backward_z, entmax_row, softmax_row, AlphaParams,
    EntmaxSolution, ALPHA_BAND, ALPHA_SOFTMAX_SWITCH,
};
use crate::numerics::{Tape, Tensor};
use crate::{Error, Result};

/// Mask weight for one query/key pair at distance `x`.
pub fn mask_value(z: f64, ramp: f64, x: f64) -> f64 {
    ((ramp + z - x) / ramp).clamp(0.0, 1.0)
}

/// One learnable span scalar per head for a layer group.
pub struct SpanParams {
    pub z: Tensor,
    pub ramp: f64,
}

impl SpanParams {
    pub fn new(heads: usize, ramp: f64) -> Self {
        assert!(ramp > 0.0, "ramp width must be positive");
        SpanParams {
            z: Tensor::param(&[heads], vec![0.0; heads])
                .expect("span parameter shape is always consistent"),
            ramp,
        }
    }

    pub fn heads(&self) -> usize {
        self.z.len()
    }

    /// Effective reach of this head: every key past `z + ramp` is ignored.
    pub fn current_span(&self, head: usize) -> f64 {
        self.z.at(head) + self.ramp
    }

    /// Band half-width that covers every key with a nonzero mask.
    pub fn window(&self, head: usize) -> usize {
        self.current_span(head).ceil() as usize
    }

    /// Project the stored spans back into `[0, max_span]`. Called after each
    /// optimizer step; the mask formula itself never sees values outside the
    /// range.
    pub fn clamp_to(&self, max_span: f64) {
        let clamped: Vec<f64> = self
            .z
            .to_vec()
            .iter()
            .map(|&v| v.clamp(0.0, max_span))
            .collect();
        self.z.set_data(&clamped);
    }
}

/// Learned per-distance key offsets, one row per integer distance. Distances
/// at or beyond the table length share its last row.
pub struct RelPosTable {
    pub table: Tensor,
}

impl RelPosTable {
    pub fn new(max_distance: usize, d_head: usize) -> Self {
        RelPosTable {
            table: Tensor::param(&[max_distance + 1, d_head], vec![0.0; (max_distance + 1) * d_head])
                .expect("relative position table shape is always consistent"),
        }
    }

    pub fn bucket(&self, distance: f64) -> usize {
        let rows = self.table.shape()[0];
        (distance.round() as usize).min(rows - 1)
    }
}

/// Query/key distance matrix. Both self-attention and cross-attention use
/// absolute index distance, so attending a stream to itself through the
/// cross path reproduces plain self-attention exactly.
pub struct Distances {
    vals: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Distances {
    pub fn absolute(t_q: usize, t_k: usize) -> Self {
        let mut vals = Vec::with_capacity(t_q * t_k);
        for t in 0..t_q {
            for r in 0..t_k {
                vals.push((t as f64 - r as f64).abs());
            }
        }
        Distances {
            vals,
            rows: t_q,
            cols: t_k,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, t: usize, r: usize) -> f64 {
        self.vals[t * self.cols + r]
    }
}

/// Which normalizer runs over the masked scores.
pub enum SpanNormalizer<'a> {
    Softmax,
    Entmax { alpha: &'a AlphaParams, head: usize },
}

/// Output of one span attention head.
pub struct SpanAttention {
    /// `[t_q, d_head]`, differentiable.
    pub context: Tensor,
    /// `[t_q, t_k]` dense copy of the attention weights, for inspection
    /// only; gradients do not flow through it.
    pub weights: Tensor,
}

struct RowRecord {
    /// Key indices with nonzero mask, in ascending order.
    keys: Vec<usize>,
    masks: Vec<f64>,
    scores: Vec<f64>,
    /// Normalizer output over `keys` (softmax or sparse family).
    probs: Vec<f64>,
    /// Final weights over `keys` after mask reweighting.
    weights: Vec<f64>,
    /// Set when every key was masked out; attention collapsed onto this key.
    fallback: Option<usize>,
}

/// One attention head with a learnable span, evaluated only inside the mask
/// band. Rows whose band is entirely masked (possible when query and key
/// sequences have different lengths) collapse onto the nearest key with unit
/// weight and no gradient, and are counted on the tape.
#[allow(clippy::too_many_arguments)]
pub fn span_attention(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    distances: &Distances,
    spans: &SpanParams,
    head: usize,
    relpos: &RelPosTable,
    normalizer: SpanNormalizer<'_>,
) -> Result<SpanAttention> {
    let (t_q, d) = q.dims2();
    let (t_k, dk) = k.dims2();
    let (t_v, dv) = v.dims2();
    if dk != d || dv != d || t_v != t_k {
        return Err(Error::ShapeMismatch {
            op: "span_attention",
            lhs: vec![t_q, d],
            rhs: vec![t_k, dk.max(dv)],
        });
    }
    if distances.shape() != (t_q, t_k) {
        return Err(Error::Input(format!(
            "span_attention: distance matrix is {:?}, queries/keys want ({t_q}, {t_k})",
            distances.shape()
        )));
    }
    if head >= spans.heads() {
        return Err(Error::Input(format!(
            "span_attention: head {head} out of range for {} spans",
            spans.heads()
        )));
    }
    let table_d = relpos.table.shape()[1];
    if table_d != d {
        return Err(Error::ShapeMismatch {
            op: "span_attention_relpos",
            lhs: vec![t_q, d],
            rhs: relpos.table.shape(),
        });
    }

    let z = spans.z.at(head);
    let ramp = spans.ramp;
    if !z.is_finite() {
        return Err(Error::NonFinite("span_attention: span parameter"));
    }
    let window = spans.window(head);
    let scale = 1.0 / (d as f64).sqrt();

    // Entmax variant bookkeeping: the live alpha, and 1.0 standing in for it
    // in the Jacobian when the smooth branch evaluated plain softmax.
    let alpha_info = match &normalizer {
        SpanNormalizer::Softmax => None,
        SpanNormalizer::Entmax { alpha, head: ah } => {
            if *ah >= alpha.heads() {
                return Err(Error::Input(format!(
                    "span_attention: alpha head {ah} out of range for {} heads",
                    alpha.heads()
                )));
            }
            Some((alpha.alpha(*ah), alpha.raw.clone(), *ah))
        }
    };

    let qv = q.to_vec();
    let kv = k.to_vec();
    let vv = v.to_vec();
    let pv = relpos.table.to_vec();
    if qv.iter().chain(kv.iter()).chain(vv.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("span_attention"));
    }

    let mut rows = Vec::with_capacity(t_q);
    let mut context = vec![0.0; t_q * d];
    let mut weights_dense = vec![0.0; t_q * t_k];
    let mut pair_count: u64 = 0;
    let mut fallback_count: u64 = 0;

    for t in 0..t_q {
        let r_lo = t.saturating_sub(window);
        let r_hi = (t + window).min(t_k.saturating_sub(1));
        let mut keys = Vec::new();
        let mut masks = Vec::new();
        if r_lo < t_k {
            for r in r_lo..=r_hi {
                let m = mask_value(z, ramp, distances.at(t, r));
                if m > 0.0 {
                    keys.push(r);
                    masks.push(m);
                }
            }
        }

        if keys.is_empty() {
            // Nothing visible: collapse onto the nearest key so the row still
            // produces a finite context vector.
            let nearest = t.min(t_k - 1);
            fallback_count += 1;
            weights_dense[t * t_k + nearest] = 1.0;
            let src = &vv[nearest * d..(nearest + 1) * d];
            context[t * d..(t + 1) * d].copy_from_slice(src);
            rows.push(RowRecord {
                keys: Vec::new(),
                masks: Vec::new(),
                scores: Vec::new(),
                probs: Vec::new(),
                weights: Vec::new(),
                fallback: Some(nearest),
            });
            continue;
        }

        let qrow = &qv[t * d..(t + 1) * d];
        let mut scores = Vec::with_capacity(keys.len());
        for &r in &keys {
            let bucket = relpos.bucket(distances.at(t, r));
            let krow = &kv[r * d..(r + 1) * d];
            let prow = &pv[bucket * d..(bucket + 1) * d];
            let mut dot = 0.0;
            for i in 0..d {
                dot += qrow[i] * (krow[i] + prow[i]);
            }
            scores.push(scale * dot);
        }
        pair_count += keys.len() as u64;

        let probs = match &alpha_info {
            None => softmax_row(&scores),
            Some((alpha, _, _)) => {
                if *alpha < ALPHA_SOFTMAX_SWITCH {
                    softmax_row(&scores)
                } else {
                    entmax_row(&scores, *alpha)?.probabilities
                }
            }
        };

        let mut weighted: Vec<f64> = probs
            .iter()
            .zip(&masks)
            .map(|(&p, &m)| p * m)
            .collect();
        let total: f64 = weighted.iter().sum();
        for w in weighted.iter_mut() {
            *w /= total;
        }

        let crow = &mut context[t * d..(t + 1) * d];
        for (j, &r) in keys.iter().enumerate() {
            let w = weighted[j];
            weights_dense[t * t_k + r] = w;
            if w != 0.0 {
                let vrow = &vv[r * d..(r + 1) * d];
                for i in 0..d {
                    crow[i] += w * vrow[i];
                }
            }
        }

        rows.push(RowRecord {
            keys,
            masks,
            scores,
            probs,
            weights: weighted,
            fallback: None,
        });
    }

    // Each surviving pair costs one query-key dot, one query-offset dot and
    // one context accumulation: 3 length-d MACs. Fallback rows copy.
    tape.add_flops(6 * (d as u64) * pair_count);

    let context_t = Tensor::new(&[t_q, d], context)?;
    let weights_t = Tensor::new(&[t_q, t_k], weights_dense)?;

    if tape.is_recording() {
        tape.note_fallback_rows(fallback_count);
        if let Some((alpha, _, _)) = &alpha_info {
            if *alpha < 1.0 + ALPHA_BAND || *alpha > 2.0 - ALPHA_BAND {
                tape.note_alpha_clamp();
            }
        }
    }

    let mut tracked_inputs = vec![q, k, v, &spans.z, &relpos.table];
    if let SpanNormalizer::Entmax { alpha, .. } = &normalizer {
        tracked_inputs.push(&alpha.raw);
    }
    if !tape.track(&tracked_inputs) {
        return Ok(SpanAttention {
            context: context_t,
            weights: weights_t,
        });
    }
    context_t.set_requires_grad(true);

    let (qh, kh, vh) = (q.clone(), k.clone(), v.clone());
    let zh = spans.z.clone();
    let ph = relpos.table.clone();
    let out = context_t.clone();
    let buckets: Vec<Vec<usize>> = rows
        .iter()
        .enumerate()
        .map(|(t, row)| {
            row.keys
                .iter()
                .map(|&r| relpos.bucket(distances.at(t, r)))
                .collect()
        })
        .collect();
    let table_rows = relpos.table.shape()[0];

    tape.push(move || {
        let Some(g) = out.grad() else { return };
        let mut dq = vec![0.0; t_q * d];
        let mut dk_ = vec![0.0; t_k * d];
        let mut dv_ = vec![0.0; t_k * d];
        let mut dp_tab = vec![0.0; table_rows * d];
        let mut dz = 0.0;
        let mut dalpha = 0.0;

        for (t, row) in rows.iter().enumerate() {
            let gt = &g[t * d..(t + 1) * d];
            if let Some(nearest) = row.fallback {
                // Constant unit weight: only the value path carries gradient.
                for i in 0..d {
                    dv_[nearest * d + i] += gt[i];
                }
                continue;
            }
            let nkeys = row.keys.len();

            // dL/dw_j = g_t . v_j, plus the value gradient.
            let mut dw = vec![0.0; nkeys];
            for (j, &r) in row.keys.iter().enumerate() {
                let vrow = &vv[r * d..(r + 1) * d];
                let mut s = 0.0;
                for i in 0..d {
                    s += gt[i] * vrow[i];
                    dv_[r * d + i] += row.weights[j] * gt[i];
                }
                dw[j] = s;
            }
            let mix: f64 = dw.iter().zip(&row.weights).map(|(a, b)| a * b).sum();

            // Through the mask renormalization back to scores and masks.
            let mut ds = vec![0.0; nkeys];
            let mut dm = vec![0.0; nkeys];
            match &alpha_info {
                None => {
                    // w = m * exp(s - max) / total
                    let mx = row
                        .scores
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> =
                        row.scores.iter().map(|&s| (s - mx).exp()).collect();
                    let total: f64 = exps
                        .iter()
                        .zip(&row.masks)
                        .map(|(e, m)| e * m)
                        .sum();
                    for j in 0..nkeys {
                        let push = dw[j] - mix;
                        ds[j] = row.weights[j] * push;
                        dm[j] = exps[j] * push / total;
                    }
                }
                Some((alpha, _, _)) => {
                    // w = m * p / total with p from the sparse family.
                    let total: f64 = row
                        .probs
                        .iter()
                        .zip(&row.masks)
                        .map(|(p, m)| p * m)
                        .sum();
                    let mut dprob = vec![0.0; nkeys];
                    for j in 0..nkeys {
                        let dn = (dw[j] - mix) / total;
                        dprob[j] = row.masks[j] * dn;
                        dm[j] = row.probs[j] * dn;
                    }
                    let jac_alpha = if *alpha < ALPHA_SOFTMAX_SWITCH {
                        1.0
                    } else {
                        *alpha
                    };
                    let sol = EntmaxSolution {
                        probabilities: row.probs.clone(),
                        tau: 0.0,
                        support: row.probs.iter().map(|&p| p > 0.0).collect(),
                    };
                    ds = entmax_backward_z(&sol, &dprob, jac_alpha);
                    let (da, _) = entmax_backward_alpha(&row.scores, *alpha, &dprob)
                        .expect("forward pass accepted these scores");
                    dalpha += da;
                }
            }

            // Masks on the ramp feed the span parameter with slope 1/ramp;
            // saturated masks (m = 1) are flat in z.
            for j in 0..nkeys {
                if row.masks[j] < 1.0 {
                    dz += dm[j] / ramp;
                }
            }

            // Scores back to queries, keys and the distance table.
            let qrow = &qv[t * d..(t + 1) * d];
            for (j, &r) in row.keys.iter().enumerate() {
                let gsc = scale * ds[j];
                if gsc == 0.0 {
                    continue;
                }
                let bucket = buckets[t][j];
                let krow = &kv[r * d..(r + 1) * d];
                let prow = &pv[bucket * d..(bucket + 1) * d];
                for i in 0..d {
                    dq[t * d + i] += gsc * (krow[i] + prow[i]);
                    dk_[r * d + i] += gsc * qrow[i];
                    dp_tab[bucket * d + i] += gsc * qrow[i];
                }
            }
        }

        if qh.requires_grad() {
            qh.accumulate_grad(&dq);
        }
        if kh.requires_grad() {
            kh.accumulate_grad(&dk_);
        }
        if vh.requires_grad() {
            vh.accumulate_grad(&dv_);
        }
        if zh.requires_grad() {
            let mut buf = vec![0.0; zh.len()];
            buf[head] = dz;
            zh.accumulate_grad(&buf);
        }
        if ph.requires_grad() {
            ph.accumulate_grad(&dp_tab);
        }
        if let Some((alpha, raw, ah)) = &alpha_info {
            if raw.requires_grad() {
                let chain = (alpha - 1.0) * (2.0 - alpha);
                let mut buf = vec![0.0; raw.len()];
                buf[*ah] = dalpha * chain;
                raw.accumulate_grad(&buf);
            }
        }
    });

    Ok(SpanAttention {
        context: context_t,
        weights: weights_t,
    })
}
