//! The joint model: intermediate intent head → word representations →
//! biaffine span features → slot classification → soft slot vector → final
//! intent head, plus threshold/overlap decoding.
//!
//! Span logits are stored dense over the enumerated spans (all (i, j) with
//! 1 ≤ i ≤ j ≤ n, optionally length-capped), one row per span.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{RngState, Scalar, Tape, Var};
use crate::data::Span;
use crate::encoder::{EncodedUtterance, Encoder, EncoderConfig};
use crate::params::{Bound, ParamId, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output width of the start/end feed-forward networks.
    pub k: usize,
    /// Span feature width.
    pub s: usize,
    /// Longest span enumerated; None enumerates all n(n+1)/2.
    pub max_span_len: Option<usize>,
    /// Ablation: final intent predictions come from the intermediate head.
    pub use_intermediate_as_final: bool,
    /// Ablation: word representations are the bare encoder rows (no
    /// intent-probability prefix).
    pub remove_intermediate: bool,
    /// Stop gradients from flowing into the intermediate head through the
    /// word representations.
    pub detach_intermediate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 300,
            s: 200,
            max_span_len: None,
            use_intermediate_as_final: false,
            remove_intermediate: false,
            detach_intermediate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    /// Intent decision threshold.
    pub t_i: f64,
    /// When no intent clears the threshold, emit the single best one.
    pub fallback_argmax: bool,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            t_i: 0.5,
            fallback_argmax: true,
        }
    }
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.t_i > 0.0 && self.t_i < 1.0) {
            return Err(format!("intent threshold {} outside (0, 1)", self.t_i));
        }
        Ok(())
    }
}

/// Every intermediate quantity of one forward pass, as tape variables.
#[derive(Debug)]
pub struct Activations {
    /// Student (pre-slot) intent logits, width l.
    pub h_s: Var,
    /// Intermediate intent probabilities, width l.
    pub p: Var,
    /// Word representations, n×(l+d) (n×d when the intent prefix is ablated).
    pub v: Var,
    pub g_start: Var,
    pub g_end: Var,
    /// Enumerated spans, 1-based inclusive, in row order of `z`/`r`.
    pub spans: Vec<(usize, usize)>,
    /// Span features, spans×s.
    pub z: Var,
    /// Span class logits, spans×(c+1); class c is the non-slot label.
    pub r: Var,
    /// Soft slot vector, width c+1.
    pub h: Var,
    /// Teacher (post-slot) intent logits, width l.
    pub h_t: Var,
    /// Final intent probabilities, width l.
    pub p_final: Var,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub num_intents: usize,
    /// Number of real slot labels; the classifier has this + 1 classes.
    pub num_slots: usize,
    /// Encoder hidden size the heads were built against.
    pub d: usize,
    w_int: ParamId,
    b_int: ParamId,
    start_w1: ParamId,
    start_b1: ParamId,
    start_w2: ParamId,
    start_b2: ParamId,
    end_w1: ParamId,
    end_b1: ParamId,
    end_w2: ParamId,
    end_b2: ParamId,
    u: ParamId,
    w_bi: ParamId,
    b_bi: ParamId,
    w_slot: ParamId,
    b_slot: ParamId,
    w_fin: ParamId,
    b_fin: ParamId,
}

impl Model {
    /// Register all head parameters. The encoder is built separately (it
    /// owns the vocabulary); `d` must match its hidden size.
    pub fn new<F: Scalar>(
        cfg: ModelConfig,
        d: usize,
        num_intents: usize,
        num_slots: usize,
        ps: &mut ParamSet<F>,
        rng: &mut RngState,
    ) -> Model {
        assert!(num_intents >= 1, "need at least one intent label");
        let (k, s) = (cfg.k, cfg.s);
        let l = num_intents;
        let c1 = num_slots + 1;
        let v_width = if cfg.remove_intermediate { d } else { l + d };
        let w_int = ps.xavier("head.intermediate.w", &[l, d], rng);
        let b_int = ps.zeros("head.intermediate.b", &[l]);
        let start_w1 = ps.xavier("head.start.w1", &[k, v_width], rng);
        let start_b1 = ps.zeros("head.start.b1", &[k]);
        let start_w2 = ps.xavier("head.start.w2", &[k, k], rng);
        let start_b2 = ps.zeros("head.start.b2", &[k]);
        let end_w1 = ps.xavier("head.end.w1", &[k, v_width], rng);
        let end_b1 = ps.zeros("head.end.b1", &[k]);
        let end_w2 = ps.xavier("head.end.w2", &[k, k], rng);
        let end_b2 = ps.zeros("head.end.b2", &[k]);
        let u = ps.xavier("head.biaffine.u", &[k, s, k], rng);
        let w_bi = ps.xavier("head.biaffine.w", &[s, 2 * k], rng);
        let b_bi = ps.zeros("head.biaffine.b", &[s]);
        let w_slot = ps.xavier("head.slot.w", &[c1, s], rng);
        let b_slot = ps.zeros("head.slot.b", &[c1]);
        let w_fin = ps.xavier("head.final.w", &[l, d + c1], rng);
        let b_fin = ps.zeros("head.final.b", &[l]);
        Model {
            cfg,
            num_intents,
            num_slots,
            d,
            w_int,
            b_int,
            start_w1,
            start_b1,
            start_w2,
            start_b2,
            end_w1,
            end_b1,
            end_w2,
            end_b2,
            u,
            w_bi,
            b_bi,
            w_slot,
            b_slot,
            w_fin,
            b_fin,
        }
    }

    /// All spans (i, j), 1-based inclusive, i ≤ j ≤ min(n, i+cap-1), in row
    /// order used by `z` and `r`.
    pub fn enumerate_spans(&self, n: usize) -> Vec<(usize, usize)> {
        let cap = self.cfg.max_span_len.unwrap_or(n).max(1);
        let mut out = Vec::new();
        for i in 1..=n {
            for j in i..=n.min(i + cap - 1) {
                out.push((i, j));
            }
        }
        out
    }

    /// Run the heads on one encoded utterance.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        enc: &EncodedUtterance,
    ) -> Activations {
        let n = tape.shape(enc.c)[0];
        let l = self.num_intents;
        let c1 = self.num_slots + 1;

        // intermediate intents from the utterance vector
        let h_s = tape.linear_vec(enc.c0, bound.var(self.w_int), bound.var(self.b_int));
        let p = tape.sigmoid(h_s);

        // word representations: intent probabilities prefixed to every row
        let v = if self.cfg.remove_intermediate {
            enc.c
        } else {
            let p_in = if self.cfg.detach_intermediate {
                tape.detach(p)
            } else {
                p
            };
            let p_rep = tape.repeat_row(p_in, n);
            tape.concat_cols(p_rep, enc.c)
        };

        // start/end representations: one hidden layer each
        let g_start = {
            let h1 = tape.linear(v, bound.var(self.start_w1), bound.var(self.start_b1));
            let h1 = tape.gelu(h1);
            tape.linear(h1, bound.var(self.start_w2), bound.var(self.start_b2))
        };
        let g_end = {
            let h1 = tape.linear(v, bound.var(self.end_w1), bound.var(self.end_b1));
            let h1 = tape.gelu(h1);
            tape.linear(h1, bound.var(self.end_w2), bound.var(self.end_b2))
        };

        // biaffine span features: bilinear term + linear term on [g_s ⊕ g_e]
        let spans = self.enumerate_spans(n);
        let pairs0: Vec<(usize, usize)> = spans.iter().map(|&(i, j)| (i - 1, j - 1)).collect();
        let starts: Vec<usize> = pairs0.iter().map(|&(i, _)| i).collect();
        let ends: Vec<usize> = pairs0.iter().map(|&(_, j)| j).collect();
        let bilinear = tape.bilinear_pairs(g_start, g_end, bound.var(self.u), self.cfg.s, &pairs0);
        let gs_rows = tape.gather_rows(g_start, &starts);
        let ge_rows = tape.gather_rows(g_end, &ends);
        let k = self.cfg.k;
        let w_left = tape.slice_cols(bound.var(self.w_bi), 0, k);
        let w_right = tape.slice_cols(bound.var(self.w_bi), k, 2 * k);
        let lin_s = tape.matmul_nt(gs_rows, w_left);
        let lin_e = tape.matmul_nt(ge_rows, w_right);
        let lin = tape.add(lin_s, lin_e);
        let lin = tape.add_row(lin, bound.var(self.b_bi));
        let z = tape.add(bilinear, lin);

        // shared slot classifier over every span feature
        let r = tape.linear(z, bound.var(self.w_slot), bound.var(self.b_slot));
        debug_assert_eq!(tape.shape(r), &[spans.len(), c1]);

        // soft slot vector: logits summed over all spans, one softmax
        let summed = tape.sum_axis0(r);
        let h = tape.softmax(summed);

        // final intents (or the intermediate ones, under the ablation)
        let (h_t, p_final) = if self.cfg.use_intermediate_as_final {
            (h_s, p)
        } else {
            let x = tape.concat_vec(enc.c0, h);
            let h_t = tape.linear_vec(x, bound.var(self.w_fin), bound.var(self.b_fin));
            let p_final = tape.sigmoid(h_t);
            (h_t, p_final)
        };

        let _ = l;
        Activations {
            h_s,
            p,
            v,
            g_start,
            g_end,
            spans,
            z,
            r,
            h,
            h_t,
            p_final,
        }
    }
}

/// A decoded slot with its winning-class probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPrediction {
    pub start: usize,
    pub end: usize,
    pub label: String,
    pub score: f64,
}

impl SlotPrediction {
    pub fn to_span(&self) -> Span {
        Span::new(self.start, self.end, self.label.clone())
    }

    fn overlaps(&self, other: &SlotPrediction) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Decode span class probabilities to a non-overlapping slot set.
///
/// `q` holds one softmaxed row per enumerated span (spans×(c+1), class
/// `num_slots` = non-slot). Per span the argmax class wins; non-slot spans
/// are dropped; the rest are kept greedily by (score desc, shorter span
/// first, smaller start first) while skipping overlaps; output is sorted
/// by start.
pub fn decode_slots(
    q: &[f64],
    spans: &[(usize, usize)],
    num_slots: usize,
    slot_labels: &[String],
) -> Vec<SlotPrediction> {
    let c1 = num_slots + 1;
    assert_eq!(
        q.len(),
        spans.len() * c1,
        "probability matrix has {} entries for {} spans × {} classes",
        q.len(),
        spans.len(),
        c1
    );
    assert_eq!(slot_labels.len(), num_slots, "one label per real slot class");
    let mut candidates: Vec<SlotPrediction> = Vec::new();
    for (idx, &(i, j)) in spans.iter().enumerate() {
        let row = &q[idx * c1..(idx + 1) * c1];
        let (best, &score) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty class row");
        if best == num_slots {
            continue; // non-slot
        }
        candidates.push(SlotPrediction {
            start: i,
            end: j,
            label: slot_labels[best].clone(),
            score,
        });
    }
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (a.end - a.start).cmp(&(b.end - b.start)))
            .then_with(|| a.start.cmp(&b.start))
    });
    let mut kept: Vec<SlotPrediction> = Vec::new();
    for cand in candidates {
        if kept.iter().all(|k| !k.overlaps(&cand)) {
            kept.push(cand);
        }
    }
    kept.sort_by_key(|p| (p.start, p.end));
    kept
}

/// Threshold decoding of intent probabilities, with an optional argmax
/// fallback when nothing clears the threshold.
pub fn decode_intents(
    p_final: &[f64],
    cfg: &PredictionConfig,
    intent_labels: &[String],
) -> BTreeSet<String> {
    assert_eq!(p_final.len(), intent_labels.len());
    let mut out: BTreeSet<String> = p_final
        .iter()
        .zip(intent_labels)
        .filter(|(&p, _)| p > cfg.t_i)
        .map(|(_, l)| l.clone())
        .collect();
    if out.is_empty() && cfg.fallback_argmax && !p_final.is_empty() {
        let best = p_final
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty probabilities");
        out.insert(intent_labels[best].clone());
    }
    out
}

/// Convenience bundle: encoder + heads + everything needed to run text.
pub struct Pipeline {
    pub encoder: Encoder,
    pub model: Model,
}

impl Pipeline {
    pub fn new<F: Scalar>(
        enc_cfg: EncoderConfig,
        model_cfg: ModelConfig,
        vocab_size: usize,
        num_intents: usize,
        num_slots: usize,
        ps: &mut ParamSet<F>,
        rng: &mut RngState,
    ) -> Result<Pipeline, crate::encoder::EncodeError> {
        let d = enc_cfg.d;
        let encoder = Encoder::new(enc_cfg, vocab_size, ps, rng)?;
        let model = Model::new(model_cfg, d, num_intents, num_slots, ps, rng);
        Ok(Pipeline { encoder, model })
    }
}
