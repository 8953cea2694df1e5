//! Finite-difference verification of the training objective, run in 64-bit
//! precision on randomized toy pipelines. Each component isolates one part
//! of the objective; `joint` exercises the full weighted sum.
//!
//! The distillation terms (`sd`, and inside `joint`) run with teacher
//! detachment disabled: shared encoder parameters feed both the student and
//! the teacher path, so a detached teacher changes the loss value under
//! perturbation while correctly contributing nothing to the analytic
//! gradient. Detachment itself is covered by a dedicated zero-gradient
//! unit test in the library.

use std::collections::BTreeSet;

use anyhow::{bail, Result};
use serde::Serialize;

use bislu::autodiff::{finite_diff_check_at, RngState, Tape, Var};
use bislu::data::{AnnotatedUtterance, LabelSets, Span};
use bislu::encoder::{EncoderConfig, Mode, Vocab};
use bislu::losses::{self, ContrastiveConfig, JointParts, LossWeights, PenaltyFn};
use bislu::model::{ModelConfig, Pipeline};
use bislu::params::ParamSet;
use bislu::train::intent_frequencies;
use bislu::views::{build_views, ViewConfig};

pub const COMPONENTS: [&str; 8] = [
    "id", "sf", "id_scl", "sf_scl", "sd", "joint", "encoder", "biaffine",
];

/// Cap on parameter entries differentiated per trial; beyond it a seeded
/// random subset is checked so a trial stays a fraction of a second.
const MAX_CHECKED: usize = 600;

/// Central-difference step per component. The noise on a finite-difference
/// estimate is roughly machine-eps × |loss| / (2·step); the contrastive
/// losses are unnormalized sums, so a step well above the usual 1e-6 keeps
/// that noise below the tolerance floor on true-zero gradient entries,
/// while the truncation error (which grows with the square of the step)
/// stays an order of magnitude under the tolerance. The joint objective is
/// the exception: its loss scale is modest (the big sums arrive damped by
/// their weights) but it inherits the contrastive curvature, so its window
/// sits lower.
fn fd_step(component: &str) -> f64 {
    match component {
        "joint" => 1e-5,
        _ => 5e-5,
    }
}
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub trials: usize,
    pub checked_entries: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

const LEXICON: [&str; 9] = [
    "show", "flights", "from", "boston", "play", "music", "cheap", "the", "morning",
];
const INTENTS: [&str; 2] = ["find_flight", "play_music"];
const SLOTS: [&str; 2] = ["city", "genre"];

fn toy_utterance(rng: &mut RngState) -> AnnotatedUtterance {
    let n = 2 + rng.below(3); // 2..=4 words
    let words: Vec<String> = (0..n)
        .map(|_| LEXICON[rng.below(LEXICON.len())].to_string())
        .collect();
    let mut intents = BTreeSet::new();
    intents.insert(INTENTS[rng.below(INTENTS.len())].to_string());
    if rng.below(2) == 0 {
        intents.insert(INTENTS[rng.below(INTENTS.len())].to_string());
    }
    let mut spans = Vec::new();
    if rng.below(4) > 0 {
        let start = 1 + rng.below(n);
        let max_len = (n - start + 1).min(2);
        let end = start + rng.below(max_len);
        spans.push(Span::new(start, end, SLOTS[rng.below(SLOTS.len())]));
    }
    let u = AnnotatedUtterance {
        words,
        intents,
        spans,
    };
    u.validate().expect("generated utterance is valid");
    u
}

/// Everything one trial needs to rebuild its loss as a pure function of the
/// flat parameter vector.
struct Scenario {
    batch: Vec<AnnotatedUtterance>,
    labels: LabelSets,
    vocab: Vocab,
    enc_cfg: EncoderConfig,
    model_cfg: ModelConfig,
    view_cfg: ViewConfig,
    contrastive: ContrastiveConfig,
    freqs: Vec<f64>,
    init_seed: u64,
    draw_seed: u64,
}

impl Scenario {
    fn new(component: &str, trial_rng: &mut RngState) -> Scenario {
        // two utterances when contrastive pools are in play, else one
        let batch_size = match component {
            "id_scl" | "sf_scl" | "joint" => 2,
            _ => 1,
        };
        let mut batch: Vec<AnnotatedUtterance> =
            (0..batch_size).map(|_| toy_utterance(trial_rng)).collect();
        // guarantee every label is known so frequencies and heads are stable
        batch.push(AnnotatedUtterance {
            words: vec!["show".into(), "music".into()],
            intents: INTENTS.iter().map(|s| s.to_string()).collect(),
            spans: vec![
                Span::new(1, 1, SLOTS[0]),
                Span::new(2, 2, SLOTS[1]),
            ],
        });
        let labels = LabelSets::from_utterances(&batch);
        let vocab = Vocab::build(&batch, 1).expect("non-empty toy corpus");
        let enc_cfg = EncoderConfig {
            d: 10,
            layers: 1,
            heads: 2,
            ffn_dim: 14,
            dropout_rate: 0.15,
            max_seq_len: 10,
            view_rates: None,
        };
        let model_cfg = ModelConfig {
            k: 5,
            s: 4,
            max_span_len: Some(3),
            ..ModelConfig::default()
        };
        let view_cfg = ViewConfig {
            views: 2,
            negatives_per_view: 1,
        };
        // Temperature 1.0: the gradient code path is identical for any
        // τ > 0, but small τ inflates both the loss magnitude (finite-
        // difference rounding noise) and its third derivative (truncation
        // error), squeezing the valid step window from both sides.
        let contrastive = ContrastiveConfig {
            tau: 1.0,
            penalty: PenaltyFn::Exp { alpha: 0.7 },
        };
        let freqs = intent_frequencies(&batch, &labels);
        Scenario {
            batch,
            labels,
            vocab,
            enc_cfg,
            model_cfg,
            view_cfg,
            contrastive,
            freqs,
            init_seed: trial_rng.below(1 << 30) as u64,
            draw_seed: trial_rng.below(1 << 30) as u64,
        }
    }

    fn build_params(&self) -> (ParamSet<f64>, Pipeline) {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = RngState::new(self.init_seed);
        let pipe = Pipeline::new(
            self.enc_cfg.clone(),
            self.model_cfg.clone(),
            self.vocab.len(),
            self.labels.num_intents(),
            self.labels.num_slots(),
            &mut ps,
            &mut rng,
        )
        .expect("toy pipeline config is valid");
        (ps, pipe)
    }

    /// The component loss as one tape, with a fixed draw seed so dropout
    /// masks and negative sampling are identical across perturbations.
    fn loss(&self, component: &str, pvec: &[f64]) -> (Tape<f64>, Var, Vec<Var>) {
        let (mut ps, pipe) = self.build_params();
        ps.load_flat_f64(pvec);
        let mut tape: Tape<f64> = Tape::new();
        let bound = ps.bind(&mut tape);
        let mut rng = RngState::new(self.draw_seed);

        let loss = match component {
            "encoder" => {
                let enc = pipe
                    .encoder
                    .encode(
                        &mut tape,
                        &bound,
                        &self.vocab,
                        &self.batch[0].words,
                        Mode::Train,
                        &mut rng,
                    )
                    .expect("toy encode succeeds");
                let s0 = tape.sigmoid(enc.c0);
                let s = tape.sigmoid(enc.c);
                let a = tape.sum(s0);
                let b = tape.sum(s);
                tape.add(a, b)
            }
            "biaffine" => {
                let enc = pipe
                    .encoder
                    .encode(
                        &mut tape,
                        &bound,
                        &self.vocab,
                        &self.batch[0].words,
                        Mode::Train,
                        &mut rng,
                    )
                    .expect("toy encode succeeds");
                let acts = pipe.model.forward(&mut tape, &bound, &enc);
                let sz = tape.sigmoid(acts.z);
                tape.sum(sz)
            }
            _ => {
                let (cb, forwards) = build_views(
                    &mut tape,
                    &bound,
                    &pipe,
                    &self.vocab,
                    &self.labels,
                    &self.batch,
                    &self.view_cfg,
                    &mut rng,
                )
                .expect("toy views build");
                let nf = forwards.len() as f64;
                let mean = |tape: &mut Tape<f64>, parts: Vec<Var>| {
                    let mut acc = parts[0];
                    for &p in &parts[1..] {
                        acc = tape.add(acc, p);
                    }
                    tape.scale(acc, 1.0 / nf)
                };
                match component {
                    "id" => {
                        let per: Vec<Var> = forwards
                            .iter()
                            .map(|f| losses::intent_bce(&mut tape, f.acts.p_final, &f.gold_intents))
                            .collect();
                        mean(&mut tape, per)
                    }
                    "sf" => {
                        let per: Vec<Var> = forwards
                            .iter()
                            .map(|f| {
                                losses::span_cross_entropy(&mut tape, f.acts.r, &f.span_classes)
                            })
                            .collect();
                        mean(&mut tape, per)
                    }
                    "sd" => {
                        let per: Vec<Var> = forwards
                            .iter()
                            .map(|f| {
                                losses::self_distillation(
                                    &mut tape, f.acts.h_s, f.acts.h_t, false, false,
                                )
                            })
                            .collect();
                        mean(&mut tape, per)
                    }
                    "id_scl" => losses::intent_scl(&mut tape, &cb, &self.contrastive, &self.freqs),
                    "sf_scl" => losses::slot_scl(&mut tape, &cb, &self.contrastive),
                    "joint" => {
                        let bce: Vec<Var> = forwards
                            .iter()
                            .map(|f| losses::intent_bce(&mut tape, f.acts.p_final, &f.gold_intents))
                            .collect();
                        let ce: Vec<Var> = forwards
                            .iter()
                            .map(|f| {
                                losses::span_cross_entropy(&mut tape, f.acts.r, &f.span_classes)
                            })
                            .collect();
                        let sd: Vec<Var> = forwards
                            .iter()
                            .map(|f| {
                                losses::self_distillation(
                                    &mut tape, f.acts.h_s, f.acts.h_t, false, false,
                                )
                            })
                            .collect();
                        let parts = JointParts {
                            intent: Some(mean(&mut tape, bce)),
                            slot: Some(mean(&mut tape, ce)),
                            intent_scl: Some(losses::intent_scl(
                                &mut tape,
                                &cb,
                                &self.contrastive,
                                &self.freqs,
                            )),
                            slot_scl: Some(losses::slot_scl(&mut tape, &cb, &self.contrastive)),
                            distill: Some(mean(&mut tape, sd)),
                        };
                        losses::joint(&mut tape, &parts, &LossWeights::default())
                    }
                    other => unreachable!("component '{other}' was validated earlier"),
                }
            }
        };
        (tape, loss, bound.vars().to_vec())
    }
}

/// Run `trials` randomized finite-difference trials of one component and
/// report the worst relative error seen.
pub fn run_component(component: &str, trials: usize, seed: u64) -> Result<ComponentReport> {
    if !COMPONENTS.contains(&component) {
        bail!(
            "unknown component '{component}' (expected one of: {})",
            COMPONENTS.join(", ")
        );
    }
    if trials == 0 {
        bail!("need at least one trial");
    }
    let mut report = ComponentReport {
        component: component.to_string(),
        trials,
        checked_entries: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut root = RngState::new(seed);
    for trial in 0..trials {
        let mut trial_rng = root.fork(trial as u64);
        let scenario = Scenario::new(component, &mut trial_rng);
        let (ps, _) = scenario.build_params();
        let base = ps.flat_f64();

        let indices: Vec<usize> = if base.len() <= MAX_CHECKED {
            (0..base.len()).collect()
        } else {
            // seeded subset without replacement
            let mut all: Vec<usize> = (0..base.len()).collect();
            trial_rng.shuffle(&mut all);
            let mut subset = all[..MAX_CHECKED].to_vec();
            subset.sort_unstable();
            subset
        };

        let check = finite_diff_check_at(&base, fd_step(component), &indices, |pvec| {
            scenario.loss(component, pvec)
        })
        .map_err(|e| anyhow::anyhow!("trial {trial}: {e}"))?;

        report.checked_entries += check.num_checked;
        if check.max_rel_err >= report.max_rel_err {
            let (name, entry) = ps.locate_flat(check.worst_index);
            report.max_rel_err = check.max_rel_err;
            report.worst_param = name;
            report.worst_entry = entry;
            report.analytic = check.analytic_at_worst;
            report.numeric = check.numeric_at_worst;
        }
    }
    Ok(report)
}
