//! Training: AdamW with decoupled weight decay, the epoch loop with
//! validation-based best-checkpoint selection, prediction helpers, and a
//! hyperparameter grid runner.
//!
//! Every batch runs on one tape: all (utterance, view) forwards, the two
//! contrastive pools, and the joint loss, so one backward pass yields the
//! full gradient.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{RngState, Scalar, Tape};
use crate::data::{AnnotatedUtterance, DatasetSplits, LabelSets};
use crate::encoder::{EncodeError, EncoderConfig, Mode, Vocab};
use crate::losses::{self, ContrastiveConfig, JointParts, LossWeights};
use crate::metrics::{self, EvalResult, Prediction};
use crate::model::{decode_intents, decode_slots, ModelConfig, Pipeline, PredictionConfig};
use crate::params::ParamSet;
use crate::views::{build_views, ViewConfig, ViewError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub betas: (f64, f64),
    /// Global gradient-norm ceiling; None disables clipping.
    pub clip_norm: Option<f64>,
    /// Steps of linear learning-rate warmup; 0 keeps lr constant.
    pub warmup_steps: usize,
    /// Words rarer than this in the training split become unknown tokens.
    pub min_word_freq: usize,
    /// Detach the teacher logits inside the distillation loss.
    pub distill_detach: bool,
    /// Reverse the KL direction (teacher stays the detached side).
    pub distill_reverse: bool,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub views: ViewConfig,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub prediction: PredictionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-2,
            adam_eps: 1e-8,
            betas: (0.9, 0.999),
            clip_norm: Some(1.0),
            warmup_steps: 0,
            min_word_freq: 1,
            distill_detach: true,
            distill_reverse: false,
            encoder: EncoderConfig::default(),
            model: ModelConfig::default(),
            views: ViewConfig::default(),
            weights: LossWeights::default(),
            contrastive: ContrastiveConfig::default(),
            prediction: PredictionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0) {
            return Err(format!("learning rate {} must be positive", self.lr));
        }
        if self.epochs < 1 {
            return Err("need at least 1 epoch".into());
        }
        if self.batch_size < 1 {
            return Err("batch size must be at least 1".into());
        }
        if !(self.adam_eps > 0.0) {
            return Err(format!("adam epsilon {} must be positive", self.adam_eps));
        }
        for (b, name) in [(self.betas.0, "beta1"), (self.betas.1, "beta2")] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name}={b} outside [0, 1)"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(format!("clip norm {c} must be positive"));
            }
        }
        if self.model.k < 1 || self.model.s < 1 {
            return Err("model widths k and s must be at least 1".into());
        }
        if self.views.views < 1 {
            return Err("view count must be at least 1".into());
        }
        self.encoder.validate().map_err(|e| e.to_string())?;
        self.weights.validate()?;
        self.contrastive.validate()?;
        self.prediction.validate()?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("gradient for parameter '{param}' is not finite at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        component: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    View(#[from] ViewError),
}

/// Adam moment buffers, aligned with the parameter set's registration
/// order. Moments are held in f64 regardless of the training precision.
pub struct OptimizerState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<F: Scalar>(ps: &ParamSet<F>) -> OptimizerState {
        let m = ps.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = ps.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimizerState { step: 0, m, v }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(ps: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let mut total = 0.0f64;
    for (_, t) in ps.iter() {
        if let Some(g) = &t.grad {
            for &v in g {
                let v = v.to_f64();
                total += v * v;
            }
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for (_, t) in ps.iter_mut() {
            if let Some(g) = &mut t.grad {
                for v in g.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    norm
}

/// One AdamW update from the harvested gradients: decoupled weight decay
/// applied first (p ← p·(1 − lr·wd)), then the bias-corrected Adam step.
pub fn adamw_step<F: Scalar>(
    ps: &mut ParamSet<F>,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    opt.step += 1;
    let t = opt.step;
    let warm = if cfg.warmup_steps > 0 {
        (t as f64 / cfg.warmup_steps as f64).min(1.0)
    } else {
        1.0
    };
    let lr = cfg.lr * warm;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (idx, (name, tensor)) in ps.iter_mut().enumerate() {
        let grads = match &tensor.grad {
            Some(g) => g,
            None => continue,
        };
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: name.to_string(),
                step: t,
            });
        }
        let m = &mut opt.m[idx];
        let v = &mut opt.v[idx];
        for i in 0..tensor.data.len() {
            let g = grads[i].to_f64();
            let mut p = tensor.data[i].to_f64();
            p *= 1.0 - lr * cfg.weight_decay;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            tensor.data[i] = F::from_f64(p);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub loss_intent: f64,
    pub loss_slot: f64,
    pub loss_intent_scl: f64,
    pub loss_slot_scl: f64,
    pub loss_distill: f64,
    pub val_intent_accuracy: f64,
    pub val_slot_f1: f64,
    pub val_sentence_accuracy: f64,
    /// Wall clock; excluded from determinism comparisons.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_sentence_accuracy: f64,
}

impl TrainReport {
    /// Canonical rendering of everything except wall clock, for
    /// determinism comparisons between runs.
    pub fn determinism_key(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n",
                e.epoch,
                e.train_loss,
                e.loss_intent,
                e.loss_slot,
                e.loss_intent_scl,
                e.loss_slot_scl,
                e.loss_distill,
                e.val_intent_accuracy,
                e.val_slot_f1,
                e.val_sentence_accuracy
            ));
        }
        out.push_str(&format!(
            "best {} {:?}",
            self.best_epoch, self.best_sentence_accuracy
        ));
        out
    }
}

/// A finished training run: the best-epoch parameters plus everything
/// needed to run them.
pub struct Trained<F: Scalar> {
    pub report: TrainReport,
    pub params: ParamSet<F>,
    pub pipe: Pipeline,
    pub vocab: Vocab,
}

/// Relative frequency of each intent label over the training utterances.
pub fn intent_frequencies(train: &[AnnotatedUtterance], labels: &LabelSets) -> Vec<f64> {
    let mut counts = vec![0usize; labels.num_intents()];
    for u in train {
        for name in &u.intents {
            if let Some(id) = labels.intent_id(name) {
                counts[id] += 1;
            }
        }
    }
    let total = train.len().max(1) as f64;
    counts.iter().map(|&c| c as f64 / total).collect()
}

/// Run one utterance through the trained pipeline in eval mode; returns the
/// decoded prediction plus the raw per-intent-label probabilities (aligned
/// with `labels.intents`).
pub fn predict_detailed<F: Scalar>(
    ps: &ParamSet<F>,
    pipe: &Pipeline,
    vocab: &Vocab,
    labels: &LabelSets,
    words: &[String],
    pcfg: &PredictionConfig,
) -> Result<(Prediction, Vec<f64>), EncodeError> {
    let mut tape: Tape<F> = Tape::new();
    let bound = ps.bind(&mut tape);
    let mut rng = RngState::new(0); // eval mode draws nothing
    let enc = pipe.encoder.encode(&mut tape, &bound, vocab, words, Mode::Eval, &mut rng)?;
    let acts = pipe.model.forward(&mut tape, &bound, &enc);
    let q = tape.softmax(acts.r);
    let qv: Vec<f64> = tape.value(q).iter().map(|v| v.to_f64()).collect();
    let slots = decode_slots(&qv, &acts.spans, pipe.model.num_slots, &labels.slots);
    let pv: Vec<f64> = tape.value(acts.p_final).iter().map(|v| v.to_f64()).collect();
    let intents = decode_intents(&pv, pcfg, &labels.intents);
    Ok((Prediction { intents, slots }, pv))
}

/// Run one utterance through the trained pipeline in eval mode and decode.
pub fn predict_one<F: Scalar>(
    ps: &ParamSet<F>,
    pipe: &Pipeline,
    vocab: &Vocab,
    labels: &LabelSets,
    words: &[String],
    pcfg: &PredictionConfig,
) -> Result<Prediction, EncodeError> {
    predict_detailed(ps, pipe, vocab, labels, words, pcfg).map(|(p, _)| p)
}

/// Predict every utterance of a split and score against its gold.
pub fn evaluate_split<F: Scalar>(
    ps: &ParamSet<F>,
    pipe: &Pipeline,
    vocab: &Vocab,
    labels: &LabelSets,
    split: &[AnnotatedUtterance],
    pcfg: &PredictionConfig,
) -> Result<EvalResult, EncodeError> {
    let mut preds = Vec::with_capacity(split.len());
    for u in split {
        preds.push(predict_one(ps, pipe, vocab, labels, &u.words, pcfg)?);
    }
    Ok(metrics::evaluate(&preds, split))
}

fn read_scalar<F: Scalar>(tape: &Tape<F>, v: crate::autodiff::Var) -> f64 {
    tape.value(v)[0].to_f64()
}

/// Train a fresh pipeline on the dataset's train split, evaluating on the
/// validation split after every epoch and returning the parameters of the
/// epoch with the highest validation sentence accuracy.
pub fn train<F: Scalar>(data: &DatasetSplits, cfg: &TrainConfig) -> Result<Trained<F>, TrainError> {
    cfg.validate().map_err(TrainError::BadConfig)?;
    let vocab = Vocab::build(&data.train, cfg.min_word_freq)?;
    let labels = &data.labels;
    let mut root = RngState::new(cfg.seed);
    let mut init_rng = root.fork(0x12a7);
    let mut shuffle_rng = root.fork(0x5481);
    let mut step_rng = root.fork(0xd203);

    let mut ps: ParamSet<F> = ParamSet::new();
    let pipe = Pipeline::new(
        cfg.encoder.clone(),
        cfg.model.clone(),
        vocab.len(),
        labels.num_intents(),
        labels.num_slots(),
        &mut ps,
        &mut init_rng,
    )?;
    let mut opt = OptimizerState::new(&ps);
    let freqs = intent_frequencies(&data.train, labels);
    let w = cfg.weights;

    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_sentence_accuracy: -1.0,
    };
    let mut best_params = ps.clone();

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut sums = [0.0f64; 6]; // total, id, sf, id_scl, sf_scl, sd
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<AnnotatedUtterance> =
                chunk.iter().map(|&i| data.train[i].clone()).collect();
            let mut tape: Tape<F> = Tape::new();
            let bound = ps.bind(&mut tape);
            let (cb, forwards) = build_views(
                &mut tape,
                &bound,
                &pipe,
                &vocab,
                labels,
                &batch,
                &cfg.views,
                &mut step_rng,
            )?;

            let nf = forwards.len() as f64;
            let mean_over = |tape: &mut Tape<F>, parts: Vec<crate::autodiff::Var>| {
                let mut acc = parts[0];
                for &p in &parts[1..] {
                    acc = tape.add(acc, p);
                }
                tape.scale(acc, 1.0 / nf)
            };

            let mut parts = JointParts::default();
            if w.intent > 0.0 {
                let per: Vec<_> = forwards
                    .iter()
                    .map(|f| losses::intent_bce(&mut tape, f.acts.p_final, &f.gold_intents))
                    .collect();
                parts.intent = Some(mean_over(&mut tape, per));
            }
            if w.slot > 0.0 {
                let per: Vec<_> = forwards
                    .iter()
                    .map(|f| losses::span_cross_entropy(&mut tape, f.acts.r, &f.span_classes))
                    .collect();
                parts.slot = Some(mean_over(&mut tape, per));
            }
            if w.intent_scl > 0.0 {
                parts.intent_scl = Some(losses::intent_scl(&mut tape, &cb, &cfg.contrastive, &freqs));
            }
            if w.slot_scl > 0.0 {
                parts.slot_scl = Some(losses::slot_scl(&mut tape, &cb, &cfg.contrastive));
            }
            if w.distill > 0.0 {
                let per: Vec<_> = forwards
                    .iter()
                    .map(|f| {
                        losses::self_distillation(
                            &mut tape,
                            f.acts.h_s,
                            f.acts.h_t,
                            cfg.distill_detach,
                            cfg.distill_reverse,
                        )
                    })
                    .collect();
                parts.distill = Some(mean_over(&mut tape, per));
            }
            let loss = losses::joint(&mut tape, &parts, &w);

            let component_values = [
                ("joint", Some(loss)),
                ("intent", parts.intent),
                ("slot", parts.slot),
                ("intent_scl", parts.intent_scl),
                ("slot_scl", parts.slot_scl),
                ("distill", parts.distill),
            ];
            for (name, var) in component_values {
                if let Some(v) = var {
                    if !read_scalar(&tape, v).is_finite() {
                        return Err(TrainError::NonFiniteLoss {
                            component: name,
                            epoch,
                            batch: batch_idx,
                        });
                    }
                }
            }
            sums[0] += read_scalar(&tape, loss);
            for (slot, part) in sums[1..].iter_mut().zip([
                parts.intent,
                parts.slot,
                parts.intent_scl,
                parts.slot_scl,
                parts.distill,
            ]) {
                if let Some(p) = part {
                    *slot += read_scalar(&tape, p);
                }
            }
            batches += 1;

            tape.backward(loss);
            ps.zero_grads();
            ps.harvest_grads(&tape, &bound);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut ps, c);
            }
            adamw_step(&mut ps, &mut opt, cfg)?;
        }

        let val = evaluate_split(&ps, &pipe, &vocab, labels, &data.validation, &cfg.prediction)?;
        let nb = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            train_loss: sums[0] / nb,
            loss_intent: sums[1] / nb,
            loss_slot: sums[2] / nb,
            loss_intent_scl: sums[3] / nb,
            loss_slot_scl: sums[4] / nb,
            loss_distill: sums[5] / nb,
            val_intent_accuracy: val.intent_accuracy,
            val_slot_f1: val.slot_f1,
            val_sentence_accuracy: val.sentence_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        if record.val_sentence_accuracy > report.best_sentence_accuracy {
            report.best_sentence_accuracy = record.val_sentence_accuracy;
            report.best_epoch = epoch;
            best_params = ps.clone();
        }
        report.epochs.push(record);
    }

    Ok(Trained {
        report,
        params: best_params,
        pipe,
        vocab,
    })
}

/// One labeled grid candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub label: String,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub runs: Vec<GridRun>,
    /// Index into `runs` of the winning configuration.
    pub best: usize,
}

/// Train every candidate and keep the one with the highest best-epoch
/// validation sentence accuracy (earliest wins ties).
pub fn grid_search<F: Scalar>(
    data: &DatasetSplits,
    candidates: &[(String, TrainConfig)],
) -> Result<(GridReport, Trained<F>), TrainError> {
    if candidates.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let mut runs = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, Trained<F>)> = None;
    for (idx, (label, cfg)) in candidates.iter().enumerate() {
        let trained = train::<F>(data, cfg)?;
        runs.push(GridRun {
            label: label.clone(),
            report: trained.report.clone(),
        });
        let better = match &best {
            None => true,
            Some((bi, _)) => {
                trained.report.best_sentence_accuracy > runs[*bi].report.best_sentence_accuracy
            }
        };
        if better {
            best = Some((idx, trained));
        }
    }
    let (best_idx, trained) = best.expect("non-empty grid yields a winner");
    Ok((GridReport { runs, best: best_idx }, trained))
}
