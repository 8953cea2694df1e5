//! Evaluation measures: exact intent-set accuracy, micro-averaged
//! exact-span F1 (multiset matching on (start, end, label)), and
//! sentence-level semantic frame accuracy.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::AnnotatedUtterance;
use crate::model::SlotPrediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub intent_accuracy: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub sentence_accuracy: f64,
    pub true_positive_spans: usize,
    pub false_positive_spans: usize,
    pub false_negative_spans: usize,
    pub utterances: usize,
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "utterances          {:>8}", self.utterances)?;
        writeln!(f, "intent accuracy     {:>8.4}", self.intent_accuracy)?;
        writeln!(f, "slot precision      {:>8.4}", self.slot_precision)?;
        writeln!(f, "slot recall         {:>8.4}", self.slot_recall)?;
        writeln!(f, "slot f1             {:>8.4}", self.slot_f1)?;
        writeln!(f, "sentence accuracy   {:>8.4}", self.sentence_accuracy)?;
        write!(
            f,
            "span counts         TP {} / FP {} / FN {}",
            self.true_positive_spans, self.false_positive_spans, self.false_negative_spans
        )
    }
}

/// One utterance's predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub intents: BTreeSet<String>,
    pub slots: Vec<SlotPrediction>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Score aligned prediction/gold lists.
///
/// Span matching is by exact (start, end, label) triple; every gold span
/// can absorb at most one prediction, so a duplicated correct prediction
/// counts once as a true positive and once more as a false positive.
pub fn evaluate(preds: &[Prediction], golds: &[AnnotatedUtterance]) -> EvalResult {
    assert_eq!(
        preds.len(),
        golds.len(),
        "predictions and references must align: {} vs {}",
        preds.len(),
        golds.len()
    );
    let mut intent_hits = 0usize;
    let mut sentence_hits = 0usize;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (pred, gold) in preds.iter().zip(golds) {
        let intents_ok = pred.intents == gold.intents;
        if intents_ok {
            intent_hits += 1;
        }
        let mut unmatched: Vec<(usize, usize, &str)> = gold
            .spans
            .iter()
            .map(|s| (s.start, s.end, s.label.as_str()))
            .collect();
        let mut utt_tp = 0usize;
        for p in &pred.slots {
            let key = (p.start, p.end, p.label.as_str());
            if let Some(pos) = unmatched.iter().position(|&g| g == key) {
                unmatched.swap_remove(pos);
                utt_tp += 1;
            } else {
                fp += 1;
            }
        }
        tp += utt_tp;
        fn_ += unmatched.len();
        let slots_ok = unmatched.is_empty() && utt_tp == pred.slots.len();
        if intents_ok && slots_ok {
            sentence_hits += 1;
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    EvalResult {
        intent_accuracy: ratio(intent_hits, preds.len()),
        slot_precision: precision,
        slot_recall: recall,
        slot_f1: f1,
        sentence_accuracy: ratio(sentence_hits, preds.len()),
        true_positive_spans: tp,
        false_positive_spans: fp,
        false_negative_spans: fn_,
        utterances: preds.len(),
    }
}
