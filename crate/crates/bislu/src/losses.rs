//! The five training objectives: multi-label intent BCE, span-class cross
//! entropy, supervised contrastive losses over utterance and span pools,
//! and the intent self-distillation term, combined by a convex weighting.
//!
//! `oracle` holds deliberately naive scalar re-implementations used by the
//! tests; they share no code with the tape versions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::views::ContrastiveBatch;

/// Probabilities are pulled into this interval before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Per-label penalty weight λ applied inside the utterance-level
/// contrastive loss; the scaled variants take the label's relative
/// frequency in the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyFn {
    Constant,
    Exp { alpha: f64 },
    Pow { alpha: f64 },
}

impl PenaltyFn {
    pub fn weight(&self, freq: f64) -> f64 {
        match *self {
            PenaltyFn::Constant => 1.0,
            PenaltyFn::Exp { alpha } => (alpha * freq).exp(),
            PenaltyFn::Pow { alpha } => freq.powf(alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Similarity temperature; dot products are divided by this.
    pub tau: f64,
    pub penalty: PenaltyFn,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            penalty: PenaltyFn::Constant,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0) {
            return Err(format!("temperature {} must be positive", self.tau));
        }
        Ok(())
    }
}

/// Convex weights over the five objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub intent: f64,
    pub slot: f64,
    pub intent_scl: f64,
    pub slot_scl: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            intent: 0.3,
            slot: 0.3,
            intent_scl: 0.15,
            slot_scl: 0.15,
            distill: 0.1,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.intent,
            self.slot,
            self.intent_scl,
            self.slot_scl,
            self.distill,
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        for (w, name) in self
            .as_array()
            .iter()
            .zip(["intent", "slot", "intent_scl", "slot_scl", "distill"])
        {
            if !(0.0..=1.0).contains(w) {
                return Err(format!("weight {name}={w} outside [0, 1]"));
            }
        }
        let total: f64 = self.as_array().iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(format!("weights sum to {total}, need 1"));
        }
        Ok(())
    }
}

/// Multi-label binary cross-entropy between probabilities `p` (length l)
/// and the gold intent id set, averaged over the l labels.
pub fn intent_bce<F: Scalar>(tape: &mut Tape<F>, p: Var, gold: &BTreeSet<usize>) -> Var {
    let l = tape.shape(p)[0];
    debug_assert!(gold.iter().all(|&m| m < l), "gold intent id out of range");
    let y: Vec<F> = (0..l)
        .map(|m| {
            if gold.contains(&m) {
                F::ONE
            } else {
                F::ZERO
            }
        })
        .collect();
    let y = tape.leaf(y, vec![l]);
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let lp = tape.log(pc);
    let q = tape.sub_from_const(1.0, pc);
    let lq = tape.log(q);
    let yc = tape.sub_from_const(1.0, y);
    let t1 = tape.mul(y, lp);
    let t2 = tape.mul(yc, lq);
    let s = tape.add(t1, t2);
    let total = tape.sum(s);
    tape.scale(total, -1.0 / l as f64)
}

/// Categorical cross-entropy of the span class logits `r` (rows×(c+1))
/// against one gold class per row, averaged over rows.
pub fn span_cross_entropy<F: Scalar>(tape: &mut Tape<F>, r: Var, classes: &[usize]) -> Var {
    let rows = tape.shape(r)[0];
    assert_eq!(rows, classes.len(), "one gold class per span row");
    let q = tape.softmax(r);
    let qc = tape.clamp(q, PROB_EPS, 1.0);
    let lq = tape.log(qc);
    let picked = tape.select_per_row(lq, classes);
    let total = tape.sum(picked);
    tape.scale(total, -1.0 / rows as f64)
}

/// Σ over anchors with positives of −1/|P| Σ_{p∈P} [sim(i,p)/τ −
/// logΣ_{k≠i} exp(sim(i,k)/τ)] over the span pool. Zero when no anchor
/// has a positive.
pub fn slot_scl<F: Scalar>(tape: &mut Tape<F>, cb: &ContrastiveBatch, cfg: &ContrastiveConfig) -> Var {
    let pool = match cb.span_pool {
        Some(p) => p,
        None => return tape.leaf(vec![F::ZERO], vec![1]),
    };
    let n = cb.span_labels.len();
    let sims = tape.matmul_nt(pool, pool);
    let scaled = tape.scale(sims, 1.0 / cfg.tau);
    let mut acc: Option<Var> = None;
    for (ai, &anchor) in cb.span_anchors.iter().enumerate() {
        let pos = &cb.span_positives[ai];
        if pos.is_empty() {
            continue;
        }
        let rest = cb.span_rest(anchor);
        let denom: Vec<usize> = rest.iter().map(|&k| anchor * n + k).collect();
        let dvec = tape.gather_elems(scaled, &denom);
        let lse = tape.logsumexp(dvec);
        let num: Vec<usize> = pos.iter().map(|&p| anchor * n + p).collect();
        let nvec = tape.gather_elems(scaled, &num);
        let nsum = tape.sum(nvec);
        let lse_p = tape.scale(lse, pos.len() as f64);
        let diff = tape.sub(nsum, lse_p);
        let term = tape.scale(diff, -1.0 / pos.len() as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    acc.unwrap_or_else(|| tape.leaf(vec![F::ZERO], vec![1]))
}

/// Utterance-level contrastive loss: for every intent label m in the
/// batch, every pool row carrying m anchors against the other rows
/// carrying m, normalized by the label count and weighted by the
/// per-label penalty. `freqs[m]` is m's relative training frequency
/// (ignored by the constant penalty, which accepts an empty slice).
pub fn intent_scl<F: Scalar>(
    tape: &mut Tape<F>,
    cb: &ContrastiveBatch,
    cfg: &ContrastiveConfig,
    freqs: &[f64],
) -> Var {
    let n = cb.utt_intents.len();
    let m_count = cb.batch_labels.len();
    if m_count == 0 {
        return tape.leaf(vec![F::ZERO], vec![1]);
    }
    let sims = tape.matmul_nt(cb.utt_pool, cb.utt_pool);
    let scaled = tape.scale(sims, 1.0 / cfg.tau);
    let mut acc: Option<Var> = None;
    for la in &cb.batch_labels {
        let lambda = match cfg.penalty {
            PenaltyFn::Constant => 1.0,
            _ => {
                assert!(
                    la.label < freqs.len(),
                    "no training frequency for intent id {}",
                    la.label
                );
                cfg.penalty.weight(freqs[la.label])
            }
        };
        if lambda == 0.0 {
            continue;
        }
        for (anchor, pos) in &la.anchors {
            if pos.is_empty() {
                continue;
            }
            let rest = cb.utt_rest(*anchor);
            let denom: Vec<usize> = rest.iter().map(|&k| anchor * n + k).collect();
            let dvec = tape.gather_elems(scaled, &denom);
            let lse = tape.logsumexp(dvec);
            let num: Vec<usize> = pos.iter().map(|&p| anchor * n + p).collect();
            let nvec = tape.gather_elems(scaled, &num);
            let nsum = tape.sum(nvec);
            let lse_p = tape.scale(lse, pos.len() as f64);
            let diff = tape.sub(nsum, lse_p);
            let term = tape.scale(diff, -lambda / (m_count as f64 * pos.len() as f64));
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
    }
    acc.unwrap_or_else(|| tape.leaf(vec![F::ZERO], vec![1]))
}

/// Per-label Bernoulli KL between the two intent heads, summed over
/// labels: KL(p_S‖p_T) with the teacher logits gradient-detached by
/// default; `reverse` swaps the KL direction (teacher stays the
/// detached side).
pub fn self_distillation<F: Scalar>(
    tape: &mut Tape<F>,
    h_s: Var,
    h_t: Var,
    detach_teacher: bool,
    reverse: bool,
) -> Var {
    let teacher = if detach_teacher { tape.detach(h_t) } else { h_t };
    let (lhs, rhs) = if reverse { (teacher, h_s) } else { (h_s, teacher) };
    let pa_raw = tape.sigmoid(lhs);
    let pb_raw = tape.sigmoid(rhs);
    let pa = tape.clamp(pa_raw, PROB_EPS, 1.0 - PROB_EPS);
    let pb = tape.clamp(pb_raw, PROB_EPS, 1.0 - PROB_EPS);
    let la = tape.log(pa);
    let lb = tape.log(pb);
    let oma = tape.sub_from_const(1.0, pa);
    let omb = tape.sub_from_const(1.0, pb);
    let loma = tape.log(oma);
    let lomb = tape.log(omb);
    let d1 = tape.sub(la, lb);
    let t1 = tape.mul(pa, d1);
    let d2 = tape.sub(loma, lomb);
    let t2 = tape.mul(oma, d2);
    let s = tape.add(t1, t2);
    tape.sum(s)
}

/// The five component losses; entries whose weight is zero may be absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct JointParts {
    pub intent: Option<Var>,
    pub slot: Option<Var>,
    pub intent_scl: Option<Var>,
    pub slot_scl: Option<Var>,
    pub distill: Option<Var>,
}

/// Weighted sum of the component losses. Zero-weighted components are
/// skipped entirely; a positive weight with a missing component panics.
pub fn joint<F: Scalar>(tape: &mut Tape<F>, parts: &JointParts, w: &LossWeights) -> Var {
    if let Err(msg) = w.validate() {
        panic!("invalid loss weights: {msg}");
    }
    let pairs = [
        (w.intent, parts.intent, "intent"),
        (w.slot, parts.slot, "slot"),
        (w.intent_scl, parts.intent_scl, "intent_scl"),
        (w.slot_scl, parts.slot_scl, "slot_scl"),
        (w.distill, parts.distill, "distill"),
    ];
    let mut acc: Option<Var> = None;
    for (lambda, part, name) in pairs {
        if lambda == 0.0 {
            continue;
        }
        let part = part.unwrap_or_else(|| panic!("weight {name}={lambda} but the component is missing"));
        let term = tape.scale(part, lambda);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    acc.unwrap_or_else(|| tape.leaf(vec![F::ZERO], vec![1]))
}

/// Slow scalar reference implementations, for tests only. Each is written
/// as literal loops over `f64` with no shared code with the tape path.
pub mod oracle {
    use std::collections::BTreeSet;

    fn clamp_prob(p: f64) -> f64 {
        p.clamp(super::PROB_EPS, 1.0 - super::PROB_EPS)
    }

    /// Mean binary cross-entropy from probabilities and a multi-hot gold.
    pub fn intent_bce(p: &[f64], y: &[f64]) -> f64 {
        assert_eq!(p.len(), y.len());
        let mut total = 0.0;
        for (&pi, &yi) in p.iter().zip(y) {
            let pi = clamp_prob(pi);
            total += -(yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln());
        }
        total / p.len() as f64
    }

    /// Mean categorical cross-entropy from logit rows and gold classes.
    pub fn span_ce(logits: &[Vec<f64>], classes: &[usize]) -> f64 {
        assert_eq!(logits.len(), classes.len());
        let mut total = 0.0;
        for (row, &gold) in logits.iter().zip(classes) {
            let mut z = 0.0;
            for &v in row {
                z += v.exp();
            }
            total += -(row[gold].exp() / z).ln();
        }
        total / logits.len() as f64
    }

    /// Span-pool contrastive loss, rebuilt from scratch: anchors are the
    /// labeled rows, positives the other rows with the same label.
    pub fn slot_scl(vecs: &[Vec<f64>], labels: &[Option<usize>], tau: f64) -> f64 {
        assert_eq!(vecs.len(), labels.len());
        let n = vecs.len();
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        let mut total = 0.0;
        for i in 0..n {
            let li = match labels[i] {
                Some(l) => l,
                None => continue,
            };
            let positives: Vec<usize> = (0..n)
                .filter(|&p| p != i && labels[p] == Some(li))
                .collect();
            if positives.is_empty() {
                continue;
            }
            let mut denom = 0.0;
            for k in 0..n {
                if k != i {
                    denom += (dot(&vecs[i], &vecs[k]) / tau).exp();
                }
            }
            let mut inner = 0.0;
            for &p in &positives {
                let f = (dot(&vecs[i], &vecs[p]) / tau).exp();
                inner += (f / denom).ln();
            }
            total += -inner / positives.len() as f64;
        }
        total
    }

    /// Utterance-pool contrastive loss, rebuilt from scratch; `lambda`
    /// maps an intent id to its penalty weight.
    pub fn intent_scl(
        vecs: &[Vec<f64>],
        sets: &[BTreeSet<usize>],
        tau: f64,
        lambda: &dyn Fn(usize) -> f64,
    ) -> f64 {
        assert_eq!(vecs.len(), sets.len());
        let n = vecs.len();
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        let mut m_set: BTreeSet<usize> = BTreeSet::new();
        for s in sets {
            m_set.extend(s.iter().copied());
        }
        if m_set.is_empty() {
            return 0.0;
        }
        let m_count = m_set.len() as f64;
        let mut total = 0.0;
        for &m in &m_set {
            for i in 0..n {
                if !sets[i].contains(&m) {
                    continue;
                }
                let positives: Vec<usize> = (0..n)
                    .filter(|&p| p != i && sets[p].contains(&m))
                    .collect();
                if positives.is_empty() {
                    continue;
                }
                let mut denom = 0.0;
                for k in 0..n {
                    if k != i {
                        denom += (dot(&vecs[k], &vecs[i]) / tau).exp();
                    }
                }
                let mut inner = 0.0;
                for &p in &positives {
                    let f = (dot(&vecs[i], &vecs[p]) / tau).exp();
                    inner += (f / denom).ln();
                }
                total += (1.0 / m_count) * (-lambda(m) / positives.len() as f64) * inner;
            }
        }
        total
    }

    /// Summed per-label Bernoulli KL between two logit vectors.
    pub fn self_distillation(h_s: &[f64], h_t: &[f64], reverse: bool) -> f64 {
        assert_eq!(h_s.len(), h_t.len());
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut total = 0.0;
        for (&s, &t) in h_s.iter().zip(h_t) {
            let (a, b) = if reverse {
                (clamp_prob(sig(t)), clamp_prob(sig(s)))
            } else {
                (clamp_prob(sig(s)), clamp_prob(sig(t)))
            };
            total += a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, RngState};
    use crate::views::LabelAnchors;

    fn scalar_of(tape: &Tape<f64>, v: Var) -> f64 {
        assert_eq!(tape.value(v).len(), 1);
        tape.value(v)[0]
    }

    // build a ContrastiveBatch around leaf matrices, deriving the index
    // sets with the documented construction rule
    fn fake_batch(
        tape: &mut Tape<f64>,
        utt_vecs: &[Vec<f64>],
        utt_sets: &[BTreeSet<usize>],
        span_vecs: &[Vec<f64>],
        span_labels: &[Option<usize>],
    ) -> ContrastiveBatch {
        assert_eq!(utt_vecs.len(), utt_sets.len());
        assert_eq!(span_vecs.len(), span_labels.len());
        let d = utt_vecs[0].len();
        let flat: Vec<f64> = utt_vecs.iter().flatten().copied().collect();
        let utt_pool = tape.leaf(flat, vec![utt_vecs.len(), d]);
        let span_pool = if span_vecs.is_empty() {
            None
        } else {
            let s = span_vecs[0].len();
            let flat: Vec<f64> = span_vecs.iter().flatten().copied().collect();
            Some(tape.leaf(flat, vec![span_vecs.len(), s]))
        };
        let present: BTreeSet<usize> = utt_sets.iter().flatten().copied().collect();
        let batch_labels = present
            .into_iter()
            .map(|m| {
                let rows: Vec<usize> = (0..utt_sets.len())
                    .filter(|&r| utt_sets[r].contains(&m))
                    .collect();
                LabelAnchors {
                    label: m,
                    anchors: rows
                        .iter()
                        .map(|&i| (i, rows.iter().copied().filter(|&p| p != i).collect()))
                        .collect(),
                }
            })
            .collect();
        let span_anchors: Vec<usize> = (0..span_labels.len())
            .filter(|&r| span_labels[r].is_some())
            .collect();
        let span_positives = span_anchors
            .iter()
            .map(|&i| {
                (0..span_labels.len())
                    .filter(|&p| p != i && span_labels[p] == span_labels[i])
                    .collect()
            })
            .collect();
        ContrastiveBatch {
            utt_pool,
            utt_intents: utt_sets.to_vec(),
            batch_labels,
            span_pool,
            span_labels: span_labels.to_vec(),
            span_owner: vec![0; span_labels.len()],
            span_anchors,
            span_positives,
        }
    }

    fn rand_vec(rng: &mut RngState, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    // ── intent BCE ────────────────────────────────────────────────────

    #[test]
    fn bce_is_tiny_on_a_perfect_fit() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.leaf(vec![1.0, 0.0, 1.0], vec![3]);
        let gold: BTreeSet<usize> = [0, 2].into();
        let loss = intent_bce(&mut tape, p, &gold);
        assert!(scalar_of(&tape, loss) < 1e-5);
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        for gold in [BTreeSet::from([0]), BTreeSet::from([1, 3]), BTreeSet::new()] {
            let mut tape: Tape<f64> = Tape::new();
            let p = tape.leaf(vec![0.5; 4], vec![4]);
            let loss = intent_bce(&mut tape, p, &gold);
            assert!(
                (scalar_of(&tape, loss) - std::f64::consts::LN_2).abs() < 1e-6,
                "gold {gold:?}"
            );
        }
    }

    #[test]
    fn bce_matches_oracle_on_random_cases() {
        let mut rng = RngState::new(1);
        for _ in 0..100 {
            let l = 1 + rng.below(6);
            let probs: Vec<f64> = (0..l).map(|_| rng.uniform(0.01, 0.99)).collect();
            let gold: BTreeSet<usize> = (0..l).filter(|_| rng.below(2) == 1).collect();
            let y: Vec<f64> = (0..l)
                .map(|m| if gold.contains(&m) { 1.0 } else { 0.0 })
                .collect();
            let mut tape: Tape<f64> = Tape::new();
            let p = tape.leaf(probs.clone(), vec![l]);
            let loss = intent_bce(&mut tape, p, &gold);
            let want = oracle::intent_bce(&probs, &y);
            assert!((scalar_of(&tape, loss) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = RngState::new(2);
        let logits: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let gold: BTreeSet<usize> = [1, 4].into();
        let report = finite_diff_check(&logits, 1e-6, |x| {
            let mut tape: Tape<f64> = Tape::new();
            let h = tape.leaf(x.to_vec(), vec![x.len()]);
            let p = tape.sigmoid(h);
            let loss = intent_bce(&mut tape, p, &gold);
            (tape, loss, vec![h])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    // ── span cross-entropy ────────────────────────────────────────────

    #[test]
    fn span_ce_uniform_logits_give_ln_class_count() {
        let mut tape: Tape<f64> = Tape::new();
        let r = tape.leaf(vec![0.0; 6 * 4], vec![6, 4]);
        let loss = span_cross_entropy(&mut tape, r, &[0, 1, 2, 3, 0, 1]);
        assert!((scalar_of(&tape, loss) - 4.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn span_ce_vanishes_as_correct_logits_grow() {
        let mut tape: Tape<f64> = Tape::new();
        let mut data = vec![0.0; 3 * 4];
        for (row, &gold) in [1usize, 3, 0].iter().enumerate() {
            data[row * 4 + gold] = 30.0;
        }
        let r = tape.leaf(data, vec![3, 4]);
        let loss = span_cross_entropy(&mut tape, r, &[1, 3, 0]);
        assert!(scalar_of(&tape, loss) < 1e-9);
    }

    #[test]
    fn span_ce_matches_oracle_on_a_three_word_toy_and_fuzz() {
        let mut rng = RngState::new(3);
        // n=3 → 6 spans; then random sizes
        for trial in 0..100 {
            let rows = if trial == 0 { 6 } else { 1 + rng.below(9) };
            let c1 = 2 + rng.below(4);
            let logits: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..c1).map(|_| rng.uniform(-3.0, 3.0)).collect())
                .collect();
            let classes: Vec<usize> = (0..rows).map(|_| rng.below(c1)).collect();
            let mut tape: Tape<f64> = Tape::new();
            let flat: Vec<f64> = logits.iter().flatten().copied().collect();
            let r = tape.leaf(flat, vec![rows, c1]);
            let loss = span_cross_entropy(&mut tape, r, &classes);
            let want = oracle::span_ce(&logits, &classes);
            assert!((scalar_of(&tape, loss) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn span_ce_gradient_matches_finite_differences() {
        let mut rng = RngState::new(4);
        let flat: Vec<f64> = (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let report = finite_diff_check(&flat, 1e-6, |x| {
            let mut tape: Tape<f64> = Tape::new();
            let r = tape.leaf(x.to_vec(), vec![4, 3]);
            let loss = span_cross_entropy(&mut tape, r, &[0, 2, 1, 2]);
            (tape, loss, vec![r])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    // ── span-pool contrastive ─────────────────────────────────────────

    #[test]
    fn slot_scl_single_positive_pair_is_zero() {
        // two rows, same label: A = P = the other row → log 1 = 0
        let mut tape: Tape<f64> = Tape::new();
        let cb = fake_batch(
            &mut tape,
            &[vec![1.0]],
            &[[0].into()],
            &[vec![0.3, -0.2], vec![0.9, 0.4]],
            &[Some(0), Some(0)],
        );
        let cfg = ContrastiveConfig::default();
        let loss = slot_scl(&mut tape, &cb, &cfg);
        assert!(scalar_of(&tape, loss).abs() < 1e-12);
    }

    #[test]
    fn slot_scl_identical_vectors_give_log_pool_size() {
        // 4 identical rows, labels [0,0,0,None]: per anchor |A|=3, |P|=2,
        // uniform similarities → each pair term log(1/3); loss per anchor
        // = log 3; three anchors
        let mut tape: Tape<f64> = Tape::new();
        let v = vec![0.4, -0.1, 0.2];
        let cb = fake_batch(
            &mut tape,
            &[vec![1.0]],
            &[[0].into()],
            &[v.clone(), v.clone(), v.clone(), v],
            &[Some(0), Some(0), Some(0), None],
        );
        let cfg = ContrastiveConfig::default();
        let loss = slot_scl(&mut tape, &cb, &cfg);
        assert!((scalar_of(&tape, loss) - 3.0 * 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn slot_scl_matches_brute_force_on_a_three_span_toy() {
        let vecs = vec![vec![0.2, 0.5], vec![-0.4, 0.1], vec![0.3, 0.3]];
        let labels = vec![Some(0), Some(0), Some(1)];
        let mut tape: Tape<f64> = Tape::new();
        let cb = fake_batch(&mut tape, &[vec![1.0]], &[[0].into()], &vecs, &labels);
        let cfg = ContrastiveConfig {
            tau: 0.25,
            penalty: PenaltyFn::Constant,
        };
        let loss = slot_scl(&mut tape, &cb, &cfg);
        let want = oracle::slot_scl(&vecs, &labels, 0.25);
        assert!((scalar_of(&tape, loss) - want).abs() < 1e-6);
    }

    #[test]
    fn slot_scl_matches_brute_force_on_random_pools() {
        let mut rng = RngState::new(5);
        for _ in 0..200 {
            let n = 2 + rng.below(11); // ≤ 12 rows
            let dim = 1 + rng.below(4);
            let vecs: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, dim)).collect();
            let labels: Vec<Option<usize>> = (0..n)
                .map(|_| match rng.below(4) {
                    0 => None,
                    k => Some(k - 1),
                })
                .collect();
            let tau = rng.uniform(0.05, 1.0);
            let mut tape: Tape<f64> = Tape::new();
            let cb = fake_batch(&mut tape, &[vec![1.0]], &[[0].into()], &vecs, &labels);
            let cfg = ContrastiveConfig {
                tau,
                penalty: PenaltyFn::Constant,
            };
            let loss = slot_scl(&mut tape, &cb, &cfg);
            let want = oracle::slot_scl(&vecs, &labels, tau);
            assert!(
                (scalar_of(&tape, loss) - want).abs() < 1e-6,
                "pool {n}×{dim} τ={tau}"
            );
        }
    }

    #[test]
    fn slot_scl_gradient_matches_finite_differences() {
        let labels = vec![Some(0), Some(0), Some(1), None];
        let mut rng = RngState::new(6);
        let flat: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let report = finite_diff_check(&flat, 1e-6, |x| {
            let mut tape: Tape<f64> = Tape::new();
            let pool = tape.leaf(x.to_vec(), vec![4, 2]);
            let vecs: Vec<Vec<f64>> = x.chunks(2).map(|c| c.to_vec()).collect();
            let mut cb = fake_batch(
                &mut tape,
                &[vec![1.0]],
                &[[0].into()],
                &vecs,
                &labels,
            );
            cb.span_pool = Some(pool); // gradient flows through this leaf
            let cfg = ContrastiveConfig {
                tau: 0.2,
                penalty: PenaltyFn::Constant,
            };
            let loss = slot_scl(&mut tape, &cb, &cfg);
            (tape, loss, vec![pool])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn slot_scl_empty_pool_is_zero_and_finite() {
        let mut tape: Tape<f64> = Tape::new();
        let cb = fake_batch(&mut tape, &[vec![1.0]], &[[0].into()], &[], &[]);
        let cfg = ContrastiveConfig::default();
        let loss = slot_scl(&mut tape, &cb, &cfg);
        assert_eq!(scalar_of(&tape, loss), 0.0);
    }

    // ── utterance-pool contrastive ────────────────────────────────────

    #[test]
    fn intent_scl_single_label_matches_brute_force() {
        let mut rng = RngState::new(7);
        let vecs: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 3)).collect();
        let sets: Vec<BTreeSet<usize>> = vec![[0].into(), [0].into(), [0].into(), [0].into()];
        let mut tape: Tape<f64> = Tape::new();
        let cb = fake_batch(&mut tape, &vecs, &sets, &[], &[]);
        let cfg = ContrastiveConfig {
            tau: 0.3,
            penalty: PenaltyFn::Constant,
        };
        let loss = intent_scl(&mut tape, &cb, &cfg, &[]);
        let want = oracle::intent_scl(&vecs, &sets, 0.3, &|_| 1.0);
        assert!((scalar_of(&tape, loss) - want).abs() < 1e-6);
    }

    #[test]
    fn intent_scl_uniform_similarities_give_log_rest_size() {
        // 3 identical rows all sharing one label: per anchor |A|=2 and
        // every term log(1/2); |M|=1 → loss = 3·log 2
        let v = vec![0.5, 0.5];
        let sets: Vec<BTreeSet<usize>> = vec![[3].into(), [3].into(), [3].into()];
        let mut tape: Tape<f64> = Tape::new();
        let cb = fake_batch(&mut tape, &[v.clone(), v.clone(), v], &sets, &[], &[]);
        let cfg = ContrastiveConfig::default();
        let loss = intent_scl(&mut tape, &cb, &cfg, &[]);
        assert!((scalar_of(&tape, loss) - 3.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn intent_scl_zero_penalty_annihilates_the_loss() {
        let mut rng = RngState::new(8);
        let vecs: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 2)).collect();
        let sets: Vec<BTreeSet<usize>> = vec![[0].into(), [0, 1].into(), [1].into(), [0].into()];
        let mut tape: Tape<f64> = Tape::new();
        let cb = fake_batch(&mut tape, &vecs, &sets, &[], &[]);
        let cfg = ContrastiveConfig {
            tau: 0.1,
            penalty: PenaltyFn::Pow { alpha: 1.0 },
        };
        // zero frequency ⇒ pow weight 0 for every label
        let loss = intent_scl(&mut tape, &cb, &cfg, &[0.0, 0.0]);
        assert_eq!(scalar_of(&tape, loss), 0.0);
    }

    #[test]
    fn intent_scl_matches_brute_force_on_random_multi_label_pools() {
        let mut rng = RngState::new(9);
        for _ in 0..200 {
            let n = 2 + rng.below(11);
            let dim = 1 + rng.below(4);
            let num_labels = 1 + rng.below(3);
            let vecs: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, dim)).collect();
            let sets: Vec<BTreeSet<usize>> = (0..n)
                .map(|_| {
                    let mut s: BTreeSet<usize> =
                        (0..num_labels).filter(|_| rng.below(2) == 1).collect();
                    if s.is_empty() {
                        s.insert(rng.below(num_labels));
                    }
                    s
                })
                .collect();
            let tau = rng.uniform(0.05, 1.0);
            let freqs: Vec<f64> = (0..num_labels).map(|_| rng.uniform(0.05, 1.0)).collect();
            let penalty = match rng.below(3) {
                0 => PenaltyFn::Constant,
                1 => PenaltyFn::Exp { alpha: 1.5 },
                _ => PenaltyFn::Pow { alpha: 0.5 },
            };
            let mut tape: Tape<f64> = Tape::new();
            let cb = fake_batch(&mut tape, &vecs, &sets, &[], &[]);
            let cfg = ContrastiveConfig { tau, penalty };
            let loss = intent_scl(&mut tape, &cb, &cfg, &freqs);
            let want = oracle::intent_scl(&vecs, &sets, tau, &|m| penalty.weight(freqs[m]));
            assert!(
                (scalar_of(&tape, loss) - want).abs() < 1e-6,
                "pool {n}×{dim} τ={tau} penalty {penalty:?}"
            );
        }
    }

    #[test]
    fn intent_scl_gradient_matches_finite_differences() {
        let sets: Vec<BTreeSet<usize>> = vec![[0].into(), [0, 1].into(), [1].into()];
        let mut rng = RngState::new(10);
        let flat: Vec<f64> = (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let report = finite_diff_check(&flat, 1e-6, |x| {
            let mut tape: Tape<f64> = Tape::new();
            let vecs: Vec<Vec<f64>> = x.chunks(3).map(|c| c.to_vec()).collect();
            let mut cb = fake_batch(&mut tape, &vecs, &sets, &[], &[]);
            let pool = tape.leaf(x.to_vec(), vec![3, 3]);
            cb.utt_pool = pool;
            let cfg = ContrastiveConfig {
                tau: 0.2,
                penalty: PenaltyFn::Constant,
            };
            let loss = intent_scl(&mut tape, &cb, &cfg, &[]);
            (tape, loss, vec![pool])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    // ── self-distillation ─────────────────────────────────────────────

    #[test]
    fn distillation_is_zero_on_equal_logits() {
        let mut tape: Tape<f64> = Tape::new();
        let h = tape.leaf(vec![0.7, -1.2, 0.1], vec![3]);
        let h2 = tape.leaf(vec![0.7, -1.2, 0.1], vec![3]);
        let loss = self_distillation(&mut tape, h, h2, true, false);
        assert!(scalar_of(&tape, loss).abs() < 1e-9);
    }

    #[test]
    fn distillation_hand_value_half_versus_quarter() {
        // p_S = 0.5, p_T = 0.25 → 0.5·ln(0.5/0.25) + 0.5·ln(0.5/0.75)
        //                       = 0.5·ln 2 + 0.5·ln(2/3) = 0.5·ln(4/3)
        let mut tape: Tape<f64> = Tape::new();
        let hs = tape.leaf(vec![0.0], vec![1]);
        let ht = tape.leaf(vec![(0.25f64 / 0.75).ln()], vec![1]);
        let loss = self_distillation(&mut tape, hs, ht, true, false);
        let want = 0.5 * (4.0f64 / 3.0).ln();
        assert!((scalar_of(&tape, loss) - want).abs() < 1e-6);
    }

    #[test]
    fn distillation_is_nonnegative_and_matches_oracle() {
        let mut rng = RngState::new(11);
        for _ in 0..100 {
            let l = 1 + rng.below(5);
            let hs: Vec<f64> = (0..l).map(|_| rng.uniform(-4.0, 4.0)).collect();
            let ht: Vec<f64> = (0..l).map(|_| rng.uniform(-4.0, 4.0)).collect();
            let reverse = rng.below(2) == 1;
            let mut tape: Tape<f64> = Tape::new();
            let a = tape.leaf(hs.clone(), vec![l]);
            let b = tape.leaf(ht.clone(), vec![l]);
            let loss = self_distillation(&mut tape, a, b, true, reverse);
            let got = scalar_of(&tape, loss);
            let want = oracle::self_distillation(&hs, &ht, reverse);
            assert!(got >= -1e-12, "negative KL {got}");
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn distillation_detaches_the_teacher() {
        let mut tape: Tape<f64> = Tape::new();
        let hs = tape.leaf(vec![0.4, -0.3], vec![2]);
        let ht = tape.leaf(vec![-0.9, 0.6], vec![2]);
        let loss = self_distillation(&mut tape, hs, ht, true, false);
        tape.backward(loss);
        assert!(tape.grad(hs).unwrap().iter().any(|&g| g != 0.0));
        let tg = tape.grad(ht);
        assert!(
            tg.is_none() || tg.unwrap().iter().all(|&g| g == 0.0),
            "teacher logits received gradient despite detachment"
        );
    }

    #[test]
    fn distillation_without_detachment_reaches_the_teacher() {
        let mut tape: Tape<f64> = Tape::new();
        let hs = tape.leaf(vec![0.4, -0.3], vec![2]);
        let ht = tape.leaf(vec![-0.9, 0.6], vec![2]);
        let loss = self_distillation(&mut tape, hs, ht, false, false);
        tape.backward(loss);
        assert!(tape.grad(ht).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn distillation_gradient_matches_finite_differences() {
        // detachment off: finite differences see the loss's full dependence
        // on both logit vectors, so the analytic side must too (the detach
        // flag is covered by its own zero-gradient test above)
        let mut rng = RngState::new(12);
        let x: Vec<f64> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
        for reverse in [false, true] {
            let report = finite_diff_check(&x, 1e-6, |x| {
                let mut tape: Tape<f64> = Tape::new();
                let hs = tape.leaf(x[..3].to_vec(), vec![3]);
                let ht = tape.leaf(x[3..].to_vec(), vec![3]);
                let loss = self_distillation(&mut tape, hs, ht, false, reverse);
                (tape, loss, vec![hs, ht])
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-6, "reverse={reverse}: {report:?}");
        }
    }

    // ── joint weighting ───────────────────────────────────────────────

    #[test]
    fn joint_simplex_vertex_reproduces_one_component() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(vec![0.37], vec![1]);
        let parts = JointParts {
            intent: Some(a),
            ..JointParts::default()
        };
        let w = LossWeights {
            intent: 1.0,
            slot: 0.0,
            intent_scl: 0.0,
            slot_scl: 0.0,
            distill: 0.0,
        };
        let loss = joint(&mut tape, &parts, &w);
        assert_eq!(scalar_of(&tape, loss), 0.37);
    }

    #[test]
    fn joint_of_equal_components_is_their_common_value() {
        let mut tape: Tape<f64> = Tape::new();
        let one = tape.leaf(vec![1.0], vec![1]);
        let parts = JointParts {
            intent: Some(one),
            slot: Some(one),
            intent_scl: Some(one),
            slot_scl: Some(one),
            distill: Some(one),
        };
        let w = LossWeights {
            intent: 0.2,
            slot: 0.2,
            intent_scl: 0.2,
            slot_scl: 0.2,
            distill: 0.2,
        };
        let loss = joint(&mut tape, &parts, &w);
        assert!((scalar_of(&tape, loss) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_is_linear_in_each_component() {
        let w = LossWeights::default();
        let build = |v: f64| -> f64 {
            let mut tape: Tape<f64> = Tape::new();
            let var = tape.leaf(vec![v], vec![1]);
            let rest = tape.leaf(vec![2.0], vec![1]);
            let parts = JointParts {
                intent: Some(var),
                slot: Some(rest),
                intent_scl: Some(rest),
                slot_scl: Some(rest),
                distill: Some(rest),
            };
            let loss = joint(&mut tape, &parts, &w);
            scalar_of(&tape, loss)
        };
        let (f0, f1, f2) = (build(0.0), build(1.0), build(2.0));
        assert!((f2 - f1 - (f1 - f0)).abs() < 1e-12, "not affine in λ1-slot");
        assert!((f1 - f0 - w.intent).abs() < 1e-12);
    }

    #[test]
    fn weight_validation_enforces_the_simplex() {
        assert!(LossWeights::default().validate().is_ok());
        let bad_sum = LossWeights {
            intent: 0.5,
            slot: 0.5,
            intent_scl: 0.5,
            slot_scl: 0.0,
            distill: 0.0,
        };
        assert!(bad_sum.validate().is_err());
        let negative = LossWeights {
            intent: -0.1,
            slot: 0.6,
            intent_scl: 0.5,
            slot_scl: 0.0,
            distill: 0.0,
        };
        assert!(negative.validate().is_err());
    }

    #[test]
    #[should_panic(expected = "component is missing")]
    fn joint_panics_on_weighted_missing_component() {
        let mut tape: Tape<f64> = Tape::new();
        let parts = JointParts::default();
        joint(&mut tape, &parts, &LossWeights::default());
    }

    #[test]
    fn penalty_functions_evaluate_as_documented() {
        assert_eq!(PenaltyFn::Constant.weight(0.7), 1.0);
        let e = PenaltyFn::Exp { alpha: 2.0 }.weight(0.5);
        assert!((e - 1.0f64.exp()).abs() < 1e-12);
        let p = PenaltyFn::Pow { alpha: 2.0 }.weight(0.5);
        assert!((p - 0.25).abs() < 1e-12);
        assert!(ContrastiveConfig::default().validate().is_ok());
        assert!(ContrastiveConfig {
            tau: 0.0,
            penalty: PenaltyFn::Constant
        }
        .validate()
        .is_err());
    }
}
