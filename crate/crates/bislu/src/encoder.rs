//! Tokenization and contextual encoding. A small trainable transformer maps
//! an utterance to an utterance-level vector c0 plus one contextual vector
//! per word; a leading classification token provides c0, and words that
//! tokenize to several pieces are pooled by summing their piece rows after
//! the final layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{RngState, Scalar, Tape, Var};
use crate::data::AnnotatedUtterance;
use crate::params::{Bound, ParamId, ParamSet};

// ── vocabulary ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>, // id -> token
    index: BTreeMap<String, usize>,
    /// Words routed to ≥1 piece ids instead of a single token id.
    pieces: BTreeMap<String, Vec<usize>>,
}

pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;

const SPECIALS: [&str; 3] = ["[CLS]", "[PAD]", "[UNK]"];

impl Vocab {
    /// Count word frequencies and assign dense ids: specials first, then
    /// tokens with frequency ≥ min_freq by (frequency desc, token asc).
    pub fn build(corpus: &[AnnotatedUtterance], min_freq: usize) -> Result<Vocab, EncodeError> {
        if corpus.is_empty() {
            return Err(EncodeError::EmptyCorpus);
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for u in corpus {
            for w in &u.words {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(_, f)| f >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            index,
            pieces: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Route `word` through the given piece tokens (created as vocabulary
    /// entries if absent). The word itself no longer resolves to one id.
    pub fn add_piece_rule(&mut self, word: &str, piece_tokens: &[&str]) {
        assert!(!piece_tokens.is_empty(), "piece rule for '{word}' is empty");
        let ids = piece_tokens
            .iter()
            .map(|p| match self.index.get(*p) {
                Some(&id) => id,
                None => {
                    let id = self.tokens.len();
                    self.tokens.push(p.to_string());
                    self.index.insert(p.to_string(), id);
                    id
                }
            })
            .collect();
        self.pieces.insert(word.to_string(), ids);
    }

    /// Piece ids for a word: the piece table wins, then the plain token id,
    /// then the unknown-token id. Always at least one id.
    pub fn word_pieces(&self, word: &str) -> Vec<usize> {
        if let Some(ids) = self.pieces.get(word) {
            return ids.clone();
        }
        vec![self.token_id(word).unwrap_or(UNK_ID)]
    }

    /// One token per line; the line number (0-based) is the id.
    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Vocab {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn piece_table(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.pieces
    }

    pub fn set_piece_table(&mut self, table: BTreeMap<String, Vec<usize>>) {
        self.pieces = table;
    }
}

// ── configuration ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
    /// Optional per-view dropout rates; length must equal the view count
    /// when present. Absent means every view uses `dropout_rate`.
    pub view_rates: Option<Vec<f64>>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            dropout_rate: 0.1,
            max_seq_len: 100,
            view_rates: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(EncodeError::BadConfig(
                "hidden size, layers, heads, and feed-forward width must be ≥ 1".into(),
            ));
        }
        if self.d % self.heads != 0 {
            return Err(EncodeError::BadConfig(format!(
                "hidden size {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.max_seq_len < 1 {
            return Err(EncodeError::BadConfig("max_seq_len must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncodeError::BadConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if let Some(rates) = &self.view_rates {
            if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
                return Err(EncodeError::BadConfig(
                    "per-view dropout rates must lie in [0, 1)".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("utterance has {len} pieces but the encoder accepts at most {max}")]
    TooLong { len: usize, max: usize },
    #[error("need at least 1 view, got {0}")]
    BadViewCount(usize),
    #[error("{0} views configured with {1} per-view dropout rates")]
    ViewRateMismatch(usize, usize),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("bad encoder configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ── encoder ───────────────────────────────────────────────────────────

/// One encoding of an utterance, as tape variables.
#[derive(Debug)]
pub struct EncodedUtterance {
    /// Utterance-level vector (the classification-token row), width d.
    pub c0: Var,
    /// Contextual word vectors, n×d.
    pub c: Var,
    /// Unpooled piece rows after the final layer, (1+pieces)×d; row 0 is
    /// the classification token.
    pub piece_rows: Var,
    /// Half-open piece ranges per word, indices into `piece_rows`.
    pub piece_ranges: Vec<(usize, usize)>,
    pub view_id: usize,
}

struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockParams>,
    fin_g: ParamId,
    fin_b: ParamId,
}

const LN_EPS: f64 = 1e-5;

impl Encoder {
    /// Register all encoder parameters (Xavier-uniform weights, unit norm
    /// gains, zero biases) and return the wiring.
    pub fn new<F: Scalar>(
        cfg: EncoderConfig,
        vocab_size: usize,
        ps: &mut ParamSet<F>,
        rng: &mut RngState,
    ) -> Result<Encoder, EncodeError> {
        cfg.validate()?;
        let d = cfg.d;
        let tok_emb = ps.xavier("enc.tok_emb", &[vocab_size, d], rng);
        let pos_emb = ps.xavier("enc.pos_emb", &[cfg.max_seq_len + 1, d], rng);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("enc.block{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: ps.ones(p("ln1.gain"), &[d]),
                ln1_b: ps.zeros(p("ln1.bias"), &[d]),
                wq: ps.xavier(p("attn.wq"), &[d, d], rng),
                bq: ps.zeros(p("attn.bq"), &[d]),
                wk: ps.xavier(p("attn.wk"), &[d, d], rng),
                bk: ps.zeros(p("attn.bk"), &[d]),
                wv: ps.xavier(p("attn.wv"), &[d, d], rng),
                bv: ps.zeros(p("attn.bv"), &[d]),
                wo: ps.xavier(p("attn.wo"), &[d, d], rng),
                bo: ps.zeros(p("attn.bo"), &[d]),
                ln2_g: ps.ones(p("ln2.gain"), &[d]),
                ln2_b: ps.zeros(p("ln2.bias"), &[d]),
                w1: ps.xavier(p("ffn.w1"), &[cfg.ffn_dim, d], rng),
                b1: ps.zeros(p("ffn.b1"), &[cfg.ffn_dim]),
                w2: ps.xavier(p("ffn.w2"), &[d, cfg.ffn_dim], rng),
                b2: ps.zeros(p("ffn.b2"), &[d]),
            });
        }
        let fin_g = ps.ones("enc.final_norm.gain", &[d]);
        let fin_b = ps.zeros("enc.final_norm.bias", &[d]);
        Ok(Encoder {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            fin_g,
            fin_b,
        })
    }

    /// Encode one utterance. In train mode, dropout draws come from `rng`;
    /// eval mode draws nothing and is deterministic.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        vocab: &Vocab,
        words: &[String],
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<EncodedUtterance, EncodeError> {
        self.encode_with_rate(tape, bound, vocab, words, mode, self.cfg.dropout_rate, 0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_with_rate<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        vocab: &Vocab,
        words: &[String],
        mode: Mode,
        rate: f64,
        view_id: usize,
        rng: &mut RngState,
    ) -> Result<EncodedUtterance, EncodeError> {
        // piece ids with the classification token at position 0
        let mut ids = vec![CLS_ID];
        let mut piece_ranges = Vec::with_capacity(words.len());
        for w in words {
            let ps = vocab.word_pieces(w);
            piece_ranges.push((ids.len(), ids.len() + ps.len()));
            ids.extend(ps);
        }
        let n_pieces = ids.len() - 1;
        if words.len() > self.cfg.max_seq_len || n_pieces > self.cfg.max_seq_len {
            return Err(EncodeError::TooLong {
                len: n_pieces.max(words.len()),
                max: self.cfg.max_seq_len,
            });
        }
        let m = ids.len();
        let drop = |tape: &mut Tape<F>, x: Var, rng: &mut RngState| -> Var {
            match mode {
                Mode::Train => tape.dropout(x, rate, rng),
                Mode::Eval => x,
            }
        };

        let tok = tape.gather_rows(bound.var(self.tok_emb), &ids);
        let positions: Vec<usize> = (0..m).collect();
        let pos = tape.gather_rows(bound.var(self.pos_emb), &positions);
        let mut x = tape.add(tok, pos);
        x = drop(tape, x, rng);

        let heads = self.cfg.heads;
        let dh = self.cfg.d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for blk in &self.blocks {
            // attention sublayer, pre-norm
            let normed = tape.layer_norm(x, bound.var(blk.ln1_g), bound.var(blk.ln1_b), LN_EPS);
            let q = tape.linear(normed, bound.var(blk.wq), bound.var(blk.bq));
            let k = tape.linear(normed, bound.var(blk.wk), bound.var(blk.bk));
            let v = tape.linear(normed, bound.var(blk.wv), bound.var(blk.bv));
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
                let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
                let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
                let scores = tape.matmul_nt(qh, kh);
                let scaled = tape.scale(scores, scale);
                let probs = tape.softmax(scaled);
                head_outs.push(tape.matmul(probs, vh));
            }
            let mut ctx = head_outs[0];
            for &ho in &head_outs[1..] {
                ctx = tape.concat_cols(ctx, ho);
            }
            let proj = tape.linear(ctx, bound.var(blk.wo), bound.var(blk.bo));
            let proj = drop(tape, proj, rng);
            x = tape.add(x, proj);

            // feed-forward sublayer, pre-norm
            let normed = tape.layer_norm(x, bound.var(blk.ln2_g), bound.var(blk.ln2_b), LN_EPS);
            let h1 = tape.linear(normed, bound.var(blk.w1), bound.var(blk.b1));
            let h1 = tape.gelu(h1);
            let h2 = tape.linear(h1, bound.var(blk.w2), bound.var(blk.b2));
            let h2 = drop(tape, h2, rng);
            x = tape.add(x, h2);
        }
        let h = tape.layer_norm(x, bound.var(self.fin_g), bound.var(self.fin_b), LN_EPS);

        // pool pieces back to words: a multi-piece word is the sum of its rows
        let c0 = tape.row(h, 0);
        let mut word_rows = Vec::with_capacity(words.len());
        for &(a, b) in &piece_ranges {
            if b - a == 1 {
                word_rows.push(tape.row(h, a));
            } else {
                let chunk = tape.slice_rows(h, a, b);
                word_rows.push(tape.sum_axis0(chunk));
            }
        }
        let c = tape.stack_rows(&word_rows);
        Ok(EncodedUtterance {
            c0,
            c,
            piece_rows: h,
            piece_ranges,
            view_id,
        })
    }

    /// Encode the utterance `v` times with independent dropout masks (and
    /// per-view rates when configured). Train mode only; V=1 is plain
    /// encode.
    pub fn encode_views<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        vocab: &Vocab,
        words: &[String],
        v: usize,
        rng: &mut RngState,
    ) -> Result<Vec<EncodedUtterance>, EncodeError> {
        if v < 1 {
            return Err(EncodeError::BadViewCount(v));
        }
        if let Some(rates) = &self.cfg.view_rates {
            if rates.len() != v {
                return Err(EncodeError::ViewRateMismatch(v, rates.len()));
            }
        }
        let mut out = Vec::with_capacity(v);
        for view in 0..v {
            let rate = match &self.cfg.view_rates {
                Some(rates) => rates[view],
                None => self.cfg.dropout_rate,
            };
            out.push(self.encode_with_rate(
                tape, bound, vocab, words, Mode::Train, rate, view, rng,
            )?);
        }
        Ok(out)
    }
}
