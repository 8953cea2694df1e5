//! Corpus handling: the on-disk multi-intent format, BIO↔span conversion,
//! label inventories, and a deterministic synthetic corpus generator.
//!
//! File format: utterances are blank-line-separated blocks. Each block is a
//! run of token lines `word<SPACE>tag` (tags are O / B-label / I-label)
//! followed by a single intent line `intent1#intent2#...`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use crate::autodiff::RngState;

/// A labeled span; token positions are 1-based and inclusive.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Span {
            start,
            end,
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedUtterance {
    pub words: Vec<String>,
    pub intents: BTreeSet<String>,
    /// Non-overlapping, sorted by start.
    pub spans: Vec<Span>,
}

impl AnnotatedUtterance {
    /// Enforce the structural invariants: non-empty text and intent set,
    /// sorted non-overlapping spans inside [1, n].
    pub fn validate(&self) -> Result<(), DataError> {
        if self.words.is_empty() {
            return Err(DataError::Invalid("utterance has zero tokens".into()));
        }
        if self.intents.is_empty() {
            return Err(DataError::Invalid("utterance has no intents".into()));
        }
        let n = self.words.len();
        let mut prev_end = 0usize;
        for s in &self.spans {
            if s.start < 1 || s.end > n || s.start > s.end {
                return Err(DataError::Invalid(format!(
                    "span ({}, {}) out of range for {} tokens",
                    s.start, s.end, n
                )));
            }
            if s.start <= prev_end {
                return Err(DataError::Invalid(format!(
                    "overlapping or unsorted spans at ({}, {})",
                    s.start, s.end
                )));
            }
            prev_end = s.end;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid utterance: {0}")]
    Invalid(String),
    #[error("unknown {kind} label '{label}' in {split} split; training data never saw it")]
    UnknownLabel {
        kind: &'static str,
        label: String,
        split: &'static str,
    },
    #[error("split sizes must all be at least 1 (train={train}, validation={validation}, test={test})")]
    BadSizes {
        train: usize,
        validation: usize,
        test: usize,
    },
    #[error("could not generate {want} distinct utterances; grammar space exhausted")]
    GrammarExhausted { want: usize },
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
}

/// What the loader saw, including how much BIO noise it repaired.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub utterances: usize,
    pub repaired_bio: usize,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "loaded {} utterances ({} ill-formed continuation tags repaired)",
            self.utterances, self.repaired_bio
        )
    }
}

// ── BIO ↔ spans ───────────────────────────────────────────────────────

/// Decode BIO tags to spans. `I-X` opening a span (after O, after a span
/// with a different label, or at the start) is repaired to `B-X`; the
/// second return value counts such repairs.
pub fn bio_to_spans(tags: &[&str]) -> Result<(Vec<Span>, usize), DataError> {
    let mut spans: Vec<Span> = Vec::new();
    let mut open: Option<(usize, String)> = None; // (start, label)
    let mut repairs = 0usize;
    for (idx, &tag) in tags.iter().enumerate() {
        let pos = idx + 1;
        if tag == "O" {
            if let Some((start, label)) = open.take() {
                spans.push(Span::new(start, pos - 1, label));
            }
            continue;
        }
        let (kind, label) = tag.split_once('-').ok_or_else(|| DataError::Invalid(format!(
            "tag '{tag}' is not O, B-<label>, or I-<label>"
        )))?;
        if label.is_empty() || !(kind == "B" || kind == "I") {
            return Err(DataError::Invalid(format!(
                "tag '{tag}' is not O, B-<label>, or I-<label>"
            )));
        }
        let continues = kind == "I" && matches!(&open, Some((_, l)) if l == label);
        if continues {
            continue;
        }
        if kind == "I" {
            repairs += 1; // ill-formed opening: treat as B
        }
        if let Some((start, prev)) = open.take() {
            spans.push(Span::new(start, pos - 1, prev));
        }
        open = Some((pos, label.to_string()));
    }
    if let Some((start, label)) = open {
        spans.push(Span::new(start, tags.len(), label));
    }
    Ok((spans, repairs))
}

/// Encode spans as BIO tags over `n` tokens; exact inverse of `bio_to_spans`
/// on well-formed input.
pub fn spans_to_bio(n: usize, spans: &[Span]) -> Result<Vec<String>, DataError> {
    let mut tags = vec!["O".to_string(); n];
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    let mut prev_end = 0usize;
    for s in sorted {
        if s.start < 1 || s.end > n || s.start > s.end {
            return Err(DataError::Invalid(format!(
                "span ({}, {}) out of range for {} tokens",
                s.start, s.end, n
            )));
        }
        if s.start <= prev_end {
            return Err(DataError::Invalid(format!(
                "overlapping spans near ({}, {})",
                s.start, s.end
            )));
        }
        prev_end = s.end;
        tags[s.start - 1] = format!("B-{}", s.label);
        for t in s.start..s.end {
            tags[t] = format!("I-{}", s.label);
        }
    }
    Ok(tags)
}

// ── parsing ───────────────────────────────────────────────────────────

pub fn parse_corpus_str(text: &str) -> Result<(Vec<AnnotatedUtterance>, LoadReport), DataError> {
    let mut out = Vec::new();
    let mut report = LoadReport::default();

    // (line number, content) per block
    let mut block: Vec<(usize, &str)> = Vec::new();
    let flush = |block: &mut Vec<(usize, &str)>,
                     out: &mut Vec<AnnotatedUtterance>,
                     report: &mut LoadReport|
     -> Result<(), DataError> {
        if block.is_empty() {
            return Ok(());
        }
        let (intent_line_no, intent_line) = *block.last().unwrap();
        if intent_line.split_whitespace().count() != 1 {
            return Err(DataError::Parse {
                line: intent_line_no,
                msg: format!("expected an intent line 'a#b#...', got '{intent_line}'"),
            });
        }
        if block.len() == 1 {
            return Err(DataError::Parse {
                line: intent_line_no,
                msg: "utterance block has an intent line but zero tokens".into(),
            });
        }
        let mut words = Vec::with_capacity(block.len() - 1);
        let mut tags: Vec<&str> = Vec::with_capacity(block.len() - 1);
        for &(line_no, line) in &block[..block.len() - 1] {
            let mut fields = line.split_whitespace();
            let (word, tag) = match (fields.next(), fields.next(), fields.next()) {
                (Some(w), Some(t), None) => (w, t),
                _ => {
                    return Err(DataError::Parse {
                        line: line_no,
                        msg: format!("expected 'token tag', got '{line}'"),
                    })
                }
            };
            if tag != "O" && !tag.starts_with("B-") && !tag.starts_with("I-") {
                return Err(DataError::Parse {
                    line: line_no,
                    msg: format!("tag '{tag}' is not O, B-<label>, or I-<label>"),
                });
            }
            words.push(word.to_string());
            tags.push(tag);
        }
        let (spans, repairs) = bio_to_spans(&tags).map_err(|e| DataError::Parse {
            line: intent_line_no,
            msg: e.to_string(),
        })?;
        report.repaired_bio += repairs;
        let intents: BTreeSet<String> = intent_line
            .split('#')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if intents.is_empty() {
            return Err(DataError::Parse {
                line: intent_line_no,
                msg: "empty intent line".into(),
            });
        }
        let u = AnnotatedUtterance {
            words,
            intents,
            spans,
        };
        u.validate()?;
        out.push(u);
        report.utterances += 1;
        block.clear();
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            flush(&mut block, &mut out, &mut report)?;
        } else {
            block.push((line_no, raw.trim_end()));
        }
    }
    flush(&mut block, &mut out, &mut report)?;
    Ok((out, report))
}

pub fn parse_corpus(path: &Path) -> Result<(Vec<AnnotatedUtterance>, LoadReport), DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus_str(&text)
}

/// Render utterances back to the on-disk format.
pub fn write_corpus(utterances: &[AnnotatedUtterance]) -> Result<String, DataError> {
    let mut out = String::new();
    for u in utterances {
        let tags = spans_to_bio(u.words.len(), &u.spans)?;
        for (w, t) in u.words.iter().zip(&tags) {
            out.push_str(w);
            out.push(' ');
            out.push_str(t);
            out.push('\n');
        }
        let intents: Vec<&str> = u.intents.iter().map(String::as_str).collect();
        out.push_str(&intents.join("#"));
        out.push_str("\n\n");
    }
    Ok(out)
}

// ── label inventories and splits ──────────────────────────────────────

/// Sorted intent and slot label inventories with index lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSets {
    pub intents: Vec<String>,
    pub slots: Vec<String>,
    intent_index: BTreeMap<String, usize>,
    slot_index: BTreeMap<String, usize>,
}

impl LabelSets {
    pub fn from_utterances(utterances: &[AnnotatedUtterance]) -> Self {
        let mut intents: BTreeSet<&str> = BTreeSet::new();
        let mut slots: BTreeSet<&str> = BTreeSet::new();
        for u in utterances {
            intents.extend(u.intents.iter().map(String::as_str));
            slots.extend(u.spans.iter().map(|s| s.label.as_str()));
        }
        Self::from_lists(
            intents.into_iter().map(str::to_string).collect(),
            slots.into_iter().map(str::to_string).collect(),
        )
    }

    pub fn from_lists(intents: Vec<String>, slots: Vec<String>) -> Self {
        let intent_index = intents
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        let slot_index = slots
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        LabelSets {
            intents,
            slots,
            intent_index,
            slot_index,
        }
    }

    pub fn intent_id(&self, label: &str) -> Option<usize> {
        self.intent_index.get(label).copied()
    }

    pub fn slot_id(&self, label: &str) -> Option<usize> {
        self.slot_index.get(label).copied()
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    fn check_coverage(
        &self,
        utterances: &[AnnotatedUtterance],
        split: &'static str,
    ) -> Result<(), DataError> {
        for u in utterances {
            for i in &u.intents {
                if self.intent_id(i).is_none() {
                    return Err(DataError::UnknownLabel {
                        kind: "intent",
                        label: i.clone(),
                        split,
                    });
                }
            }
            for s in &u.spans {
                if self.slot_id(&s.label).is_none() {
                    return Err(DataError::UnknownLabel {
                        kind: "slot",
                        label: s.label.clone(),
                        split,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<AnnotatedUtterance>,
    pub validation: Vec<AnnotatedUtterance>,
    pub test: Vec<AnnotatedUtterance>,
    pub labels: LabelSets,
}

impl DatasetSplits {
    /// Assemble splits; label inventories come from train, and validation /
    /// test utterances with labels outside them are rejected.
    pub fn new(
        train: Vec<AnnotatedUtterance>,
        validation: Vec<AnnotatedUtterance>,
        test: Vec<AnnotatedUtterance>,
    ) -> Result<Self, DataError> {
        let labels = LabelSets::from_utterances(&train);
        labels.check_coverage(&validation, "validation")?;
        labels.check_coverage(&test, "test")?;
        Ok(DatasetSplits {
            train,
            validation,
            test,
            labels,
        })
    }
}

// ── synthetic corpus ──────────────────────────────────────────────────

struct SlotFill {
    label: &'static str,
    values: &'static [&'static str],
}

struct IntentTemplate {
    intent: &'static str,
    /// Clause variants; `$k` refers to the k-th slot fill below.
    variants: &'static [&'static [&'static str]],
    slots: &'static [SlotFill],
}

const CITIES: &[&str] = &[
    "boston", "denver", "atlanta", "chicago", "dallas", "seattle", "miami", "portland",
];
const DAYS: &[&str] = &["monday", "tuesday", "friday", "saturday", "sunday"];
const NIGHTS: &[&str] = &["two", "three", "five", "seven"];
const GENRES: &[&str] = &["jazz", "rock", "pop", "folk", "blues"];
const ARTISTS: &[&str] = &["beatles", "coltrane", "adele", "prince"];
const TIMES: &[&str] = &["noon", "midnight", "dawn", "sunset", "sunrise"];
const DISHES: &[&str] = &["pizza", "ramen", "tacos", "curry", "salad"];
const DRINKS: &[&str] = &["coffee", "soda", "tea", "juice"];

const GRAMMAR: &[IntentTemplate] = &[
    IntentTemplate {
        intent: "find_flight",
        variants: &[
            &["show", "flights", "from", "$0", "to", "$1"],
            &["list", "flights", "from", "$0", "to", "$1"],
            &["find", "me", "flights", "from", "$0", "to", "$1"],
        ],
        slots: &[
            SlotFill { label: "from_city", values: CITIES },
            SlotFill { label: "to_city", values: CITIES },
        ],
    },
    IntentTemplate {
        intent: "book_hotel",
        variants: &[
            &["book", "a", "hotel", "in", "$0", "for", "$1", "nights"],
            &["reserve", "a", "hotel", "in", "$0", "for", "$1", "nights"],
            &["get", "a", "hotel", "room", "in", "$0", "for", "$1", "nights"],
        ],
        slots: &[
            SlotFill { label: "hotel_city", values: CITIES },
            SlotFill { label: "num_nights", values: NIGHTS },
        ],
    },
    IntentTemplate {
        intent: "get_weather",
        variants: &[
            &["what", "is", "the", "weather", "in", "$0", "on", "$1"],
            &["tell", "me", "the", "weather", "in", "$0", "on", "$1"],
            &["how", "is", "the", "weather", "in", "$0", "on", "$1"],
        ],
        slots: &[
            SlotFill { label: "weather_city", values: CITIES },
            SlotFill { label: "weather_day", values: DAYS },
        ],
    },
    IntentTemplate {
        intent: "play_music",
        variants: &[
            &["play", "some", "$0", "music", "by", "$1"],
            &["put", "on", "$0", "music", "by", "$1"],
            &["start", "playing", "$0", "songs", "by", "$1"],
        ],
        slots: &[
            SlotFill { label: "genre", values: GENRES },
            SlotFill { label: "artist", values: ARTISTS },
        ],
    },
    IntentTemplate {
        intent: "set_alarm",
        variants: &[
            &["set", "an", "alarm", "for", "$0"],
            &["wake", "me", "up", "at", "$0"],
            &["make", "an", "alarm", "at", "$0"],
            &["set", "the", "alarm", "to", "$0"],
        ],
        slots: &[SlotFill { label: "alarm_time", values: TIMES }],
    },
    IntentTemplate {
        intent: "order_food",
        variants: &[
            &["order", "some", "$0", "with", "$1"],
            &["get", "me", "$0", "and", "a", "$1"],
            &["i", "want", "$0", "with", "$1"],
        ],
        slots: &[
            SlotFill { label: "dish", values: DISHES },
            SlotFill { label: "drink", values: DRINKS },
        ],
    },
];

/// Render one clause of `template`, appending to `words`/`spans`.
fn emit_clause(t: &IntentTemplate, rng: &mut RngState, words: &mut Vec<String>, spans: &mut Vec<Span>) {
    let variant = t.variants[rng.below(t.variants.len())];
    for &tok in variant {
        if let Some(rest) = tok.strip_prefix('$') {
            let slot_idx: usize = rest.parse().expect("grammar slot reference");
            let fill = &t.slots[slot_idx];
            let value = fill.values[rng.below(fill.values.len())];
            words.push(value.to_string());
            let pos = words.len();
            spans.push(Span::new(pos, pos, fill.label));
        } else {
            words.push(tok.to_string());
        }
    }
}

fn sample_utterance(num_intents: usize, rng: &mut RngState) -> AnnotatedUtterance {
    // pick distinct intents, order fixed by grammar index
    let mut picked: Vec<usize> = (0..GRAMMAR.len()).collect();
    rng.shuffle(&mut picked);
    picked.truncate(num_intents);
    picked.sort_unstable();

    let mut words = Vec::new();
    let mut spans = Vec::new();
    let mut intents = BTreeSet::new();
    for (k, &gi) in picked.iter().enumerate() {
        if k > 0 {
            words.push("and".to_string());
        }
        emit_clause(&GRAMMAR[gi], rng, &mut words, &mut spans);
        intents.insert(GRAMMAR[gi].intent.to_string());
    }
    AnnotatedUtterance {
        words,
        intents,
        spans,
    }
}

fn utterance_key(u: &AnnotatedUtterance) -> String {
    let intents: Vec<&str> = u.intents.iter().map(String::as_str).collect();
    format!("{}|{}", u.words.join(" "), intents.join("#"))
}

/// Generate a deterministic synthetic corpus: utterances carry 1–3 intents
/// in proportions (0.3, 0.5, 0.2), clauses are conjoined with "and", and all
/// utterances are distinct across the three splits. Training data covers
/// every label that appears anywhere.
pub fn synth_corpus(
    seed: u64,
    train: usize,
    validation: usize,
    test: usize,
) -> Result<DatasetSplits, DataError> {
    if train < 1 || validation < 1 || test < 1 {
        return Err(DataError::BadSizes {
            train,
            validation,
            test,
        });
    }
    let total = train + validation + test;
    let mut rng = RngState::new(seed).fork(0x5e_0070);

    // Exact intent-count histogram: (0.3, 0.5, 0.2) of the total.
    let n1 = ((total as f64) * 0.3).round() as usize;
    let n2 = ((total as f64) * 0.5).round() as usize;
    let n3 = total.saturating_sub(n1 + n2);
    let mut counts: Vec<usize> = Vec::with_capacity(total);
    counts.extend(std::iter::repeat(1).take(n1));
    counts.extend(std::iter::repeat(2).take(n2));
    counts.extend(std::iter::repeat(3).take(total - n1 - n2));
    debug_assert_eq!(counts.len(), n1 + n2 + n3.max(total - n1 - n2));
    rng.shuffle(&mut counts);

    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut pool: Vec<AnnotatedUtterance> = Vec::with_capacity(total);
    for &c in &counts {
        let mut tries = 0;
        loop {
            let u = sample_utterance(c, &mut rng);
            let key = utterance_key(&u);
            if seen.insert(key) {
                debug_assert!(u.validate().is_ok());
                pool.push(u);
                break;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(DataError::GrammarExhausted { want: total });
            }
        }
    }
    rng.shuffle(&mut pool);

    // Pull a label-covering subset to the front so it lands in train.
    let mut covered: BTreeSet<String> = BTreeSet::new();
    let all_labels: BTreeSet<String> = pool
        .iter()
        .flat_map(|u| {
            u.intents
                .iter()
                .map(|i| format!("intent:{i}"))
                .chain(u.spans.iter().map(|s| format!("slot:{}", s.label)))
        })
        .collect();
    let mut front = 0usize;
    for i in 0..pool.len() {
        if covered.len() == all_labels.len() || front >= train {
            break;
        }
        let adds_new = pool[i].intents.iter().any(|l| !covered.contains(&format!("intent:{l}")))
            || pool[i]
                .spans
                .iter()
                .any(|s| !covered.contains(&format!("slot:{}", s.label)));
        if adds_new {
            covered.extend(
                pool[i]
                    .intents
                    .iter()
                    .map(|l| format!("intent:{l}"))
                    .chain(pool[i].spans.iter().map(|s| format!("slot:{}", s.label))),
            );
            pool.swap(front, i);
            front += 1;
        }
    }

    let mut it = pool.into_iter();
    let train_set: Vec<_> = it.by_ref().take(train).collect();
    let val_set: Vec<_> = it.by_ref().take(validation).collect();
    let test_set: Vec<_> = it.collect();
    DatasetSplits::new(train_set, val_set, test_set)
}
