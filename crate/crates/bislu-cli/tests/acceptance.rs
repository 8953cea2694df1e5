//! End-to-end acceptance checks, one test per release gate: gradient
//! correctness, loss and decoder oracles, training benchmarks, metric
//! arithmetic, determinism, persistence, and corpus round-trips.

use std::collections::BTreeSet;
use std::process::Command;
use std::time::Instant;

use bislu::autodiff::{RngState, Tape};
use bislu::data::{bio_to_spans, parse_corpus_str, spans_to_bio, synth_corpus, AnnotatedUtterance, Span};
use bislu::encoder::{EncoderConfig, Mode};
use bislu::losses::{self, oracle, ContrastiveConfig, LossWeights, PenaltyFn};
use bislu::metrics::{evaluate, Prediction};
use bislu::model::{decode_slots, ModelConfig, Pipeline};
use bislu::params::ParamSet;
use bislu::train::{self, TrainConfig};
use bislu::views::{ContrastiveBatch, LabelAnchors};
use bislu_cli::checkpoint::{self, SavedMetric};

// ── 1. full gradient suite through the installed binary ──────────────

#[test]
fn c01_gradient_suite_all_components() {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_bislu"))
        .args(["gradcheck", "--component", "all", "--trials", "20", "--seed", "1"])
        .output()
        .expect("running the gradcheck subcommand");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let stderr = String::from_utf8_lossy(&out.stderr);
    let elapsed = started.elapsed().as_secs_f64();
    println!("{stdout}");
    assert!(
        out.status.success(),
        "gradcheck exited with {:?}\nstdout:\n{stdout}\nstderr:\n{stderr}",
        out.status.code()
    );
    let ok_lines = stdout.lines().filter(|l| l.ends_with("ok")).count();
    assert_eq!(ok_lines, 8, "expected all 8 components to pass:\n{stdout}");
    assert!(elapsed < 300.0, "gradient suite took {elapsed:.1}s, budget is 300s");
}

// ── 2. contrastive losses against scalar brute force ─────────────────

// Builds the index sets the training loop derives automatically: every
// labeled row anchors against the same-labeled rest, every intent label
// anchors each utterance carrying it against the others carrying it.
fn hand_batch(
    tape: &mut Tape<f64>,
    utt_vecs: &[Vec<f64>],
    utt_sets: &[BTreeSet<usize>],
    span_vecs: &[Vec<f64>],
    span_labels: &[Option<usize>],
) -> ContrastiveBatch {
    let d = utt_vecs[0].len();
    let flat: Vec<f64> = utt_vecs.iter().flatten().copied().collect();
    let utt_pool = tape.leaf(flat, vec![utt_vecs.len(), d]);
    let span_pool = if span_vecs.is_empty() {
        None
    } else {
        let w = span_vecs[0].len();
        let flat: Vec<f64> = span_vecs.iter().flatten().copied().collect();
        Some(tape.leaf(flat, vec![span_vecs.len(), w]))
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

fn rand_vecs(rng: &mut RngState, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect()
}

#[test]
fn c02_contrastive_losses_match_brute_force() {
    let taus = [0.1, 0.3, 1.0];
    let mut rng = RngState::new(2026);

    // span-pool loss
    for case in 0..200 {
        let n = 2 + rng.below(11); // 2..=12 vectors
        let d = 2 + rng.below(4);
        let vecs = rand_vecs(&mut rng, n, d);
        let labels: Vec<Option<usize>> = (0..n)
            .map(|_| match rng.below(4) {
                0 => None,
                l => Some(l - 1),
            })
            .collect();
        let cfg = ContrastiveConfig { tau: taus[rng.below(3)], penalty: PenaltyFn::Constant };
        let mut tape: Tape<f64> = Tape::new();
        let cb = hand_batch(&mut tape, &vecs[..1], &[BTreeSet::new()], &vecs, &labels);
        let loss = losses::slot_scl(&mut tape, &cb, &cfg);
        let got = tape.value(loss)[0];
        let want = oracle::slot_scl(&vecs, &labels, cfg.tau);
        assert!(
            (got - want).abs() < 1e-6,
            "span-pool case {case}: tape {got} vs brute force {want}"
        );
    }

    // utterance-pool loss, cycling through the penalty variants
    for case in 0..200 {
        let n = 2 + rng.below(11);
        let d = 2 + rng.below(4);
        let vecs = rand_vecs(&mut rng, n, d);
        let sets: Vec<BTreeSet<usize>> = (0..n)
            .map(|_| (0..4).filter(|_| rng.below(3) == 0).collect())
            .collect();
        let penalty = match case % 3 {
            0 => PenaltyFn::Constant,
            1 => PenaltyFn::Exp { alpha: rng.uniform(0.2, 1.5) },
            _ => PenaltyFn::Pow { alpha: rng.uniform(0.2, 1.5) },
        };
        let cfg = ContrastiveConfig { tau: taus[rng.below(3)], penalty };
        let freqs: Vec<f64> = (0..4).map(|_| rng.uniform(0.05, 1.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let cb = hand_batch(&mut tape, &vecs, &sets, &[], &[]);
        let loss = losses::intent_scl(&mut tape, &cb, &cfg, &freqs);
        let got = tape.value(loss)[0];
        let lambda: Box<dyn Fn(usize) -> f64> = match penalty {
            PenaltyFn::Constant => Box::new(|_| 1.0),
            PenaltyFn::Exp { alpha } => Box::new(move |m: usize| (alpha * freqs[m]).exp()),
            PenaltyFn::Pow { alpha } => Box::new(move |m: usize| freqs[m].powf(alpha)),
        };
        let want = oracle::intent_scl(&vecs, &sets, cfg.tau, &lambda);
        assert!(
            (got - want).abs() < 1e-6,
            "utterance-pool case {case}: tape {got} vs brute force {want}"
        );
    }
}

// ── 3. closed-form loss values ────────────────────────────────────────

#[test]
fn c03_losses_hit_closed_form_values() {
    // mean binary cross-entropy at p = 0.5 is ln 2 for any gold set
    let mut tape: Tape<f64> = Tape::new();
    let p = tape.leaf(vec![0.5; 4], vec![4]);
    let loss = losses::intent_bce(&mut tape, p, &BTreeSet::from([1, 2]));
    let bce = tape.value(loss)[0];
    assert!((bce - std::f64::consts::LN_2).abs() < 1e-6, "bce at one-half: {bce}");

    // categorical cross-entropy at uniform logits over c+1 classes is ln(c+1)
    let c = 3;
    let mut tape: Tape<f64> = Tape::new();
    let r = tape.leaf(vec![0.0; 2 * (c + 1)], vec![2, c + 1]);
    let loss = losses::span_cross_entropy(&mut tape, r, &[0, 2]);
    let ce = tape.value(loss)[0];
    assert!((ce - ((c + 1) as f64).ln()).abs() < 1e-6, "uniform span loss: {ce}");

    // distillation between equal logits is exactly zero
    let mut tape: Tape<f64> = Tape::new();
    let logits = vec![0.7, -1.3, 0.2];
    let a = tape.leaf(logits.clone(), vec![3]);
    let b = tape.leaf(logits, vec![3]);
    let loss = losses::self_distillation(&mut tape, a, b, true, false);
    let sd0 = tape.value(loss)[0];
    assert!(sd0.abs() < 1e-9, "distillation between equal logits: {sd0}");

    // one label with student probability 1/2 and teacher probability 1/4:
    //   KL = 0.5·ln(0.5/0.25) + 0.5·ln(0.5/0.75)
    //      = 0.5·ln 2 − 0.5·ln(3/2) = 0.5·ln(4/3)
    let want = 0.5 * (4.0f64 / 3.0).ln();
    let mut tape: Tape<f64> = Tape::new();
    let hs = tape.leaf(vec![0.0], vec![1]); // sigmoid 0 = 1/2
    let ht = tape.leaf(vec![-(3.0f64.ln())], vec![1]); // sigmoid −ln3 = 1/4
    let loss = losses::self_distillation(&mut tape, hs, ht, true, false);
    let sd = tape.value(loss)[0];
    assert!((sd - want).abs() < 1e-6, "hand distillation case: {sd} vs {want}");
    let brute = oracle::self_distillation(&[0.0], &[-(3.0f64.ln())], false);
    assert!((brute - want).abs() < 1e-6, "brute-force agrees: {brute} vs {want}");
}

// ── 4. biaffine span features against a literal triple loop ──────────

#[test]
fn c04_biaffine_matches_per_span_equation() {
    let lexicon = ["show", "me", "flights", "from", "boston", "to", "denver", "today"];
    let corpus: Vec<AnnotatedUtterance> = vec![AnnotatedUtterance {
        words: lexicon.iter().map(|w| w.to_string()).collect(),
        intents: BTreeSet::from(["x".to_string()]),
        spans: vec![],
    }];
    let vocab = bislu::encoder::Vocab::build(&corpus, 1).expect("vocab");

    let mut rng = RngState::new(44);
    for case in 0..100 {
        let enc_cfg = EncoderConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 12,
            dropout_rate: 0.0,
            max_seq_len: 16,
            ..EncoderConfig::default()
        };
        let model_cfg = ModelConfig { k: 5, s: 4, max_span_len: None, ..ModelConfig::default() };
        let (k, s) = (model_cfg.k, model_cfg.s);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let pipe = Pipeline::new(enc_cfg, model_cfg, vocab.len(), 2, 3, &mut ps, &mut rng)
            .expect("pipeline");

        let n = 1 + rng.below(8); // 1..=8 words
        let words: Vec<String> =
            (0..n).map(|_| lexicon[rng.below(lexicon.len())].to_string()).collect();
        let mut tape: Tape<f64> = Tape::new();
        let bound = ps.bind(&mut tape);
        let enc = pipe
            .encoder
            .encode(&mut tape, &bound, &vocab, &words, Mode::Eval, &mut rng)
            .expect("encode");
        let acts = pipe.model.forward(&mut tape, &bound, &enc);

        let gs = tape.value(acts.g_start).to_vec();
        let ge = tape.value(acts.g_end).to_vec();
        let z = tape.value(acts.z).to_vec();
        let u = &ps.tensor(ps.by_name("head.biaffine.u").unwrap()).data;
        let w = &ps.tensor(ps.by_name("head.biaffine.w").unwrap()).data;
        let bias = &ps.tensor(ps.by_name("head.biaffine.b").unwrap()).data;

        // z[sp][t] = Σ_ab gs[i][a]·U[a][t][b]·ge[j][b]
        //          + Σ_a W[t][a]·gs[i][a] + Σ_b W[t][k+b]·ge[j][b] + bias[t]
        let mut max_diff = 0.0f64;
        for (sp, &(i1, j1)) in acts.spans.iter().enumerate() {
            let (i, j) = (i1 - 1, j1 - 1); // word-indexed rows
            for t in 0..s {
                let mut acc = bias[t];
                for a in 0..k {
                    for b in 0..k {
                        acc += gs[i * k + a] * u[a * s * k + t * k + b] * ge[j * k + b];
                    }
                }
                for a in 0..k {
                    acc += w[t * 2 * k + a] * gs[i * k + a];
                }
                for b in 0..k {
                    acc += w[t * 2 * k + k + b] * ge[j * k + b];
                }
                max_diff = max_diff.max((acc - z[sp * s + t]).abs());
            }
        }
        assert!(max_diff < 1e-5, "case {case} ({n} words): max abs diff {max_diff:e}");
    }
}

// ── 5. slot decoding properties ───────────────────────────────────────

fn all_spans(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 1..=n {
        for j in i..=n {
            out.push((i, j));
        }
    }
    out
}

// Random non-overlapping gold spans over n words, 1-based inclusive.
fn random_gold_spans(rng: &mut RngState, n: usize, labels: &[String]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut pos = 1;
    while pos <= n {
        if rng.below(2) == 0 {
            let end = (pos + rng.below(2)).min(n);
            out.push(Span::new(pos, end, labels[rng.below(labels.len())].clone()));
            pos = end + 1;
        } else {
            pos += 1;
        }
    }
    out
}

#[test]
fn c05_decoding_is_non_overlapping_and_recovers_one_hot() {
    let labels: Vec<String> = ["place", "time", "name"].iter().map(|s| s.to_string()).collect();
    let c1 = labels.len() + 1;
    let mut rng = RngState::new(55);

    // arbitrary probability tensors never yield overlapping slots
    for case in 0..1000 {
        let n = 1 + rng.below(8);
        let spans = all_spans(n);
        let q: Vec<f64> = (0..spans.len() * c1).map(|_| rng.uniform(0.0, 1.0)).collect();
        let decoded = decode_slots(&q, &spans, labels.len(), &labels);
        for x in 0..decoded.len() {
            for y in x + 1..decoded.len() {
                let (a, b) = (&decoded[x], &decoded[y]);
                assert!(
                    a.end < b.start || b.end < a.start,
                    "case {case}: spans ({},{}) and ({},{}) overlap",
                    a.start,
                    a.end,
                    b.start,
                    b.end
                );
            }
        }
    }

    // one-hot probability rows reproduce any gold span set exactly
    for case in 0..200 {
        let n = 1 + rng.below(8);
        let gold = random_gold_spans(&mut rng, n, &labels);
        let spans = all_spans(n);
        let mut q = vec![0.0; spans.len() * c1];
        for (row, &(i, j)) in spans.iter().enumerate() {
            let class = gold
                .iter()
                .find(|g| g.start == i && g.end == j)
                .map(|g| labels.iter().position(|l| *l == g.label).unwrap())
                .unwrap_or(labels.len());
            q[row * c1 + class] = 1.0;
        }
        let decoded: Vec<Span> =
            decode_slots(&q, &spans, labels.len(), &labels).iter().map(|p| p.to_span()).collect();
        assert_eq!(decoded, gold, "case {case} over {n} words");
    }
}

// ── 6. small-corpus overfit benchmark ─────────────────────────────────

fn benchmark_encoder() -> EncoderConfig {
    EncoderConfig {
        d: 64,
        layers: 2,
        heads: 4,
        ffn_dim: 128,
        dropout_rate: 0.1,
        max_seq_len: 32,
        ..EncoderConfig::default()
    }
}

#[test]
fn c06_overfit_benchmark_clears_accuracy_gates() {
    let started = Instant::now();
    let data = synth_corpus(1, 50, 20, 1).expect("synthetic corpus");
    let cfg = TrainConfig {
        seed: 11,
        epochs: 200,
        batch_size: 4,
        lr: 3e-3,
        warmup_steps: 50,
        encoder: benchmark_encoder(),
        model: ModelConfig { k: 24, s: 16, max_span_len: Some(3), ..ModelConfig::default() },
        views: bislu::views::ViewConfig { views: 3, negatives_per_view: 2 },
        weights: LossWeights {
            intent: 0.3,
            slot: 0.3,
            intent_scl: 0.15,
            slot_scl: 0.15,
            distill: 0.1,
        },
        ..TrainConfig::default()
    };
    let trained = train::train::<f32>(&data, &cfg).expect("training");
    let on_train = train::evaluate_split(
        &trained.params,
        &trained.pipe,
        &trained.vocab,
        &data.labels,
        &data.train,
        &cfg.prediction,
    )
    .expect("evaluating the training split");
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "overfit benchmark: train sentence accuracy {:.3}, best validation {:.3} (epoch {}), {elapsed:.0}s",
        on_train.sentence_accuracy, trained.report.best_sentence_accuracy, trained.report.best_epoch
    );
    assert!(
        on_train.sentence_accuracy >= 0.95,
        "train sentence accuracy {:.3} below 0.95",
        on_train.sentence_accuracy
    );
    assert!(
        trained.report.best_sentence_accuracy >= 0.80,
        "validation sentence accuracy {:.3} below 0.80",
        trained.report.best_sentence_accuracy
    );
    assert!(trained.report.best_epoch < 200, "best epoch {}", trained.report.best_epoch);
    assert!(elapsed < 600.0, "benchmark took {elapsed:.0}s, budget is 600s");
}

// ── 7. ablation: auxiliary losses never hurt validation accuracy ─────

#[test]
fn c07_auxiliary_losses_match_or_beat_plain_supervision() {
    let data = synth_corpus(1, 500, 100, 100).expect("synthetic corpus");
    let shared = TrainConfig {
        epochs: 40,
        batch_size: 16,
        lr: 3e-3,
        warmup_steps: 50,
        encoder: EncoderConfig {
            d: 48,
            layers: 2,
            heads: 4,
            ffn_dim: 96,
            dropout_rate: 0.1,
            max_seq_len: 32,
            ..EncoderConfig::default()
        },
        model: ModelConfig { k: 24, s: 16, max_span_len: Some(3), ..ModelConfig::default() },
        views: bislu::views::ViewConfig { views: 2, negatives_per_view: 2 },
        contrastive: ContrastiveConfig { tau: 0.5, penalty: PenaltyFn::Constant },
        ..TrainConfig::default()
    };
    let plain = LossWeights { intent: 0.5, slot: 0.5, intent_scl: 0.0, slot_scl: 0.0, distill: 0.0 };

    let mut report = String::from("seed  all-five  supervised-only\n");
    let (mut sum_full, mut sum_base) = (0.0, 0.0);
    for seed in [5u64, 6, 7] {
        let full_cfg = TrainConfig { seed, ..shared.clone() };
        let base_cfg = TrainConfig { seed, weights: plain.clone(), ..shared.clone() };
        let full = train::train::<f32>(&data, &full_cfg).expect("full objective run");
        let base = train::train::<f32>(&data, &base_cfg).expect("supervised-only run");
        report.push_str(&format!(
            "{seed:>4}  {:>8.3}  {:>15.3}\n",
            full.report.best_sentence_accuracy, base.report.best_sentence_accuracy
        ));
        sum_full += full.report.best_sentence_accuracy;
        sum_base += base.report.best_sentence_accuracy;
    }
    let (mean_full, mean_base) = (sum_full / 3.0, sum_base / 3.0);
    report.push_str(&format!("mean  {mean_full:>8.3}  {mean_base:>15.3}\n"));
    println!("{report}");
    assert!(
        mean_full >= mean_base,
        "FAILED DIRECTION: the five-loss objective averaged {mean_full:.3}, \
         supervised-only averaged {mean_base:.3}\n{report}"
    );
}

// ── 8. metric arithmetic on a hand-counted example ────────────────────

#[test]
fn c08_metrics_reproduce_hand_counts() {
    // one matched span, one spurious prediction, one missed gold span
    let golds = vec![
        AnnotatedUtterance {
            words: ["book", "a", "room", "tonight"].iter().map(|s| s.to_string()).collect(),
            intents: BTreeSet::from(["book_hotel".to_string(), "get_weather".to_string()]),
            spans: vec![Span::new(3, 3, "room_type"), Span::new(4, 4, "time")],
        },
        AnnotatedUtterance {
            words: ["play", "jazz"].iter().map(|s| s.to_string()).collect(),
            intents: BTreeSet::from(["play_music".to_string()]),
            spans: vec![],
        },
    ];
    let preds = vec![
        Prediction {
            intents: BTreeSet::from(["get_weather".to_string(), "book_hotel".to_string()]),
            slots: vec![
                bislu::model::SlotPrediction { start: 3, end: 3, label: "room_type".into(), score: 0.9 },
                bislu::model::SlotPrediction { start: 1, end: 1, label: "time".into(), score: 0.6 },
            ],
        },
        Prediction { intents: BTreeSet::from(["set_alarm".to_string()]), slots: vec![] },
    ];
    let r = evaluate(&preds, &golds);
    // TP 1, FP 1, FN 1 → precision = recall = f1 = 1/2 exactly
    assert_eq!(r.true_positive_spans, 1, "true positives");
    assert_eq!(r.false_positive_spans, 1, "false positives");
    assert_eq!(r.false_negative_spans, 1, "false negatives");
    assert_eq!(r.slot_precision, 0.5, "precision");
    assert_eq!(r.slot_recall, 0.5, "recall");
    assert_eq!(r.slot_f1, 0.5, "f1");
    // intent accuracy is exact set equality: first matches, second does not
    assert_eq!(r.intent_accuracy, 0.5, "intent accuracy");
    assert_eq!(r.sentence_accuracy, 0.0, "neither frame is fully correct");
}

// ── 9. determinism and checkpoint persistence ─────────────────────────

#[test]
fn c09_reruns_are_identical_and_checkpoints_survive_disk() {
    let data = synth_corpus(3, 30, 10, 1).expect("synthetic corpus");
    let cfg = TrainConfig {
        seed: 9,
        epochs: 6,
        batch_size: 8,
        lr: 2e-3,
        encoder: EncoderConfig {
            d: 32,
            layers: 1,
            heads: 2,
            ffn_dim: 64,
            dropout_rate: 0.1,
            max_seq_len: 32,
            ..EncoderConfig::default()
        },
        model: ModelConfig { k: 12, s: 8, max_span_len: Some(3), ..ModelConfig::default() },
        views: bislu::views::ViewConfig { views: 2, negatives_per_view: 1 },
        ..TrainConfig::default()
    };

    let first = train::train::<f32>(&data, &cfg).expect("first run");
    let second = train::train::<f32>(&data, &cfg).expect("second run");
    assert_eq!(
        first.report.determinism_key(),
        second.report.determinism_key(),
        "same seed and config must reproduce the loss and metric trajectory"
    );
    assert_eq!(
        first.params.flat_f64(),
        second.params.flat_f64(),
        "same seed and config must reproduce the parameters bit for bit"
    );

    let best = &first.report.epochs[first.report.best_epoch];
    let metric = SavedMetric {
        best_epoch: first.report.best_epoch,
        val_sentence_accuracy: first.report.best_sentence_accuracy,
        val_intent_accuracy: best.val_intent_accuracy,
        val_slot_f1: best.val_slot_f1,
    };
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &cfg, &data.labels, &first.vocab, &metric, &first.params)
        .expect("saving checkpoint");
    let loaded = checkpoint::load(&path).expect("loading checkpoint");

    for (i, u) in data.validation.iter().enumerate() {
        let (mem_pred, mem_probs) = train::predict_detailed(
            &first.params,
            &first.pipe,
            &first.vocab,
            &data.labels,
            &u.words,
            &cfg.prediction,
        )
        .expect("in-memory prediction");
        let (disk_pred, disk_probs) = train::predict_detailed(
            &loaded.params,
            &loaded.pipe,
            &loaded.vocab,
            &loaded.labels,
            &u.words,
            &loaded.config.prediction,
        )
        .expect("prediction from the reloaded checkpoint");
        assert_eq!(mem_pred, disk_pred, "utterance {i}: decoded outputs diverge");
        assert_eq!(mem_probs, disk_probs, "utterance {i}: probabilities diverge");
    }
}

// ── 10. tag/span round-trip and the canonical two-clause example ──────

#[test]
fn c10_corpus_round_trip_and_flagship_example() {
    let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut rng = RngState::new(1010);
    for case in 0..1000 {
        let n = 1 + rng.below(12);
        let spans = random_gold_spans(&mut rng, n, &labels);
        let tags = spans_to_bio(n, &spans).expect("valid spans encode");
        let refs: Vec<&str> = tags.iter().map(String::as_str).collect();
        let (back, repaired) = bio_to_spans(&refs).expect("emitted tags parse");
        assert_eq!(back, spans, "case {case}: spans drifted through the tag round trip");
        assert_eq!(repaired, 0, "case {case}: clean tags need no repairs");
    }

    let text = "\
Show O
the O
cheapest B-cost_relative
round B-round_trip
trip I-round_trip
tickets O
and O
airlines O
fly O
from O
atlanta B-fromloc.city_name
to O
washington B-toloc.city_name
DC B-toloc.state_code
atis_airfare#atis_airline
";
    let (us, report) = parse_corpus_str(text).expect("canonical example parses");
    assert_eq!(us.len(), 1, "one utterance");
    assert_eq!(report.repaired_bio, 0, "no repairs");
    let u = &us[0];
    assert_eq!(
        u.intents,
        BTreeSet::from(["atis_airfare".to_string(), "atis_airline".to_string()]),
        "exactly two intents"
    );
    assert_eq!(u.spans.len(), 5, "exactly five spans");
    assert_eq!(u.spans[0], Span::new(3, 3, "cost_relative"));
    assert_eq!(u.spans[1], Span::new(4, 5, "round_trip"));
    assert_eq!(u.spans[2], Span::new(11, 11, "fromloc.city_name"));
    assert_eq!(u.spans[3], Span::new(13, 13, "toloc.city_name"));
    assert_eq!(u.spans[4], Span::new(14, 14, "toloc.state_code"));
}
