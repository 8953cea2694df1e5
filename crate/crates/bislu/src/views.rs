//! Multi-view batch construction for contrastive training.
//!
//! Every utterance in a batch is encoded V times with independent dropout
//! masks and run through the full forward pass on ONE shared tape. The
//! resulting CLS vectors form the utterance pool and the gold-span features
//! (plus a few sampled non-slot spans) form the span pool, together with
//! the anchor/positive index sets the contrastive losses consume.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{RngState, Scalar, Tape, Var};
use crate::data::{AnnotatedUtterance, LabelSets};
use crate::encoder::{EncodeError, Vocab};
use crate::model::{Activations, Pipeline};
use crate::params::Bound;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    /// Views (dropout-augmented encodings) per utterance.
    pub views: usize,
    /// Sampled non-slot spans added to the span pool per (utterance, view)
    /// forward; they join only as negatives.
    pub negatives_per_view: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            views: 3,
            negatives_per_view: 2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ViewError {
    #[error("view count must be at least 1")]
    BadViewCount,
    #[error("empty batch")]
    EmptyBatch,
    #[error("unknown {kind} label '{label}' in batch")]
    UnknownLabel { kind: &'static str, label: String },
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// One (utterance, view) forward pass, kept for the supervised losses.
pub struct ViewForward {
    /// Index of the utterance within the batch.
    pub utterance: usize,
    pub view: usize,
    pub acts: Activations,
    /// Gold intent ids of the utterance.
    pub gold_intents: BTreeSet<usize>,
    /// Gold class id per enumerated span row: the span's slot id where a
    /// gold span sits, `num_slots` (non-slot) everywhere else.
    pub span_classes: Vec<usize>,
}

/// Per-intent-label anchor structure of the utterance pool.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAnchors {
    pub label: usize,
    /// (anchor row, positive rows): every pool row carrying the label,
    /// paired with all OTHER rows carrying it.
    pub anchors: Vec<(usize, Vec<usize>)>,
}

/// The pooled representations and index sets for one contrastive batch.
pub struct ContrastiveBatch {
    /// (B·V)×d matrix of CLS vectors; row u·V + view.
    pub utt_pool: Var,
    /// Gold intent ids per pool row.
    pub utt_intents: Vec<BTreeSet<usize>>,
    /// Anchor/positive structure per intent label present in the batch,
    /// sorted by label id.
    pub batch_labels: Vec<LabelAnchors>,
    /// N×s matrix of span features; None when no span joined the pool.
    pub span_pool: Option<Var>,
    /// Slot id per span-pool row; None marks a sampled non-slot negative.
    pub span_labels: Vec<Option<usize>>,
    /// Owning utterance-pool row per span-pool row.
    pub span_owner: Vec<usize>,
    /// Span-pool rows eligible as anchors (exactly the gold-labeled rows).
    pub span_anchors: Vec<usize>,
    /// Positive rows per anchor, aligned with `span_anchors`: all other
    /// rows sharing the anchor's slot label.
    pub span_positives: Vec<Vec<usize>>,
}

impl ContrastiveBatch {
    /// All rows of the utterance pool except `row`.
    pub fn utt_rest(&self, row: usize) -> Vec<usize> {
        (0..self.utt_intents.len()).filter(|&r| r != row).collect()
    }

    /// All rows of the span pool except `row`.
    pub fn span_rest(&self, row: usize) -> Vec<usize> {
        (0..self.span_labels.len()).filter(|&r| r != row).collect()
    }
}

/// Encode every utterance V times, run the heads, and assemble the pools.
pub fn build_views<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    pipe: &Pipeline,
    vocab: &Vocab,
    labels: &LabelSets,
    batch: &[AnnotatedUtterance],
    cfg: &ViewConfig,
    rng: &mut RngState,
) -> Result<(ContrastiveBatch, Vec<ViewForward>), ViewError> {
    if cfg.views < 1 {
        return Err(ViewError::BadViewCount);
    }
    if batch.is_empty() {
        return Err(ViewError::EmptyBatch);
    }
    let v = cfg.views;
    let mut forwards: Vec<ViewForward> = Vec::with_capacity(batch.len() * v);
    let mut utt_rows: Vec<Var> = Vec::with_capacity(batch.len() * v);
    let mut utt_intents: Vec<BTreeSet<usize>> = Vec::with_capacity(batch.len() * v);
    let mut span_rows: Vec<Var> = Vec::new();
    let mut span_labels: Vec<Option<usize>> = Vec::new();
    let mut span_owner: Vec<usize> = Vec::new();

    for (u, utt) in batch.iter().enumerate() {
        let intent_ids: BTreeSet<usize> = utt
            .intents
            .iter()
            .map(|name| {
                labels.intent_id(name).ok_or(ViewError::UnknownLabel {
                    kind: "intent",
                    label: name.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        let slot_ids: Vec<usize> = utt
            .spans
            .iter()
            .map(|sp| {
                labels.slot_id(&sp.label).ok_or(ViewError::UnknownLabel {
                    kind: "slot",
                    label: sp.label.clone(),
                })
            })
            .collect::<Result<_, _>>()?;

        let encs = pipe.encoder.encode_views(tape, bound, vocab, &utt.words, v, rng)?;
        for (view, enc) in encs.into_iter().enumerate() {
            let pool_row = u * v + view;
            let acts = pipe.model.forward(tape, bound, &enc);

            // gold class per enumerated span; remember gold rows
            let num_slots = pipe.model.num_slots;
            let mut span_classes = vec![num_slots; acts.spans.len()];
            let mut gold_rows: Vec<(usize, usize)> = Vec::new(); // (row, slot id)
            for (sp, &sid) in utt.spans.iter().zip(&slot_ids) {
                if let Some(row) = acts.spans.iter().position(|&p| p == (sp.start, sp.end)) {
                    span_classes[row] = sid;
                    gold_rows.push((row, sid));
                }
                // spans longer than the enumeration cap simply have no row
            }

            // gold spans join the pool as anchor-eligible rows
            for &(row, sid) in &gold_rows {
                let zrow = tape.row(acts.z, row);
                span_rows.push(zrow);
                span_labels.push(Some(sid));
                span_owner.push(pool_row);
            }

            // then a few sampled non-slot rows, negatives only
            let mut non_slot: Vec<usize> = (0..acts.spans.len())
                .filter(|&row| span_classes[row] == num_slots)
                .collect();
            rng.shuffle(&mut non_slot);
            for &row in non_slot.iter().take(cfg.negatives_per_view) {
                let zrow = tape.row(acts.z, row);
                span_rows.push(zrow);
                span_labels.push(None);
                span_owner.push(pool_row);
            }

            utt_rows.push(enc.c0);
            utt_intents.push(intent_ids.clone());
            forwards.push(ViewForward {
                utterance: u,
                view,
                acts,
                gold_intents: intent_ids.clone(),
                span_classes,
            });
        }
    }

    let utt_pool = tape.stack_rows(&utt_rows);
    let span_pool = if span_rows.is_empty() {
        None
    } else {
        Some(tape.stack_rows(&span_rows))
    };

    // utterance anchor structure, per label present in the batch
    let present: BTreeSet<usize> = utt_intents.iter().flatten().copied().collect();
    let batch_labels = present
        .into_iter()
        .map(|m| {
            let rows: Vec<usize> = (0..utt_intents.len())
                .filter(|&r| utt_intents[r].contains(&m))
                .collect();
            let anchors = rows
                .iter()
                .map(|&i| (i, rows.iter().copied().filter(|&p| p != i).collect()))
                .collect();
            LabelAnchors { label: m, anchors }
        })
        .collect();

    // span anchor structure: gold rows only, positives share the label
    let span_anchors: Vec<usize> = (0..span_labels.len())
        .filter(|&r| span_labels[r].is_some())
        .collect();
    let span_positives = span_anchors
        .iter()
        .map(|&i| {
            (0..span_labels.len())
                .filter(|&p| p != i && span_labels[p].is_some() && span_labels[p] == span_labels[i])
                .collect()
        })
        .collect();

    Ok((
        ContrastiveBatch {
            utt_pool,
            utt_intents,
            batch_labels,
            span_pool,
            span_labels,
            span_owner,
            span_anchors,
            span_positives,
        },
        forwards,
    ))
}
