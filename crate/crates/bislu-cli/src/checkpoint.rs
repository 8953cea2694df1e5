//! Checkpoint container: a fixed header, a JSON manifest (config snapshot,
//! label inventories, vocabulary, save-time metric, named-tensor table),
//! and a raw little-endian 32-bit float blob.
//!
//! Loading a file and saving it again reproduces the bytes exactly: the
//! manifest is rebuilt from parsed state with a deterministic field order
//! and floats that round-trip through their shortest decimal form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use bislu::data::LabelSets;
use bislu::encoder::Vocab;
use bislu::model::Pipeline;
use bislu::params::ParamSet;
use bislu::train::TrainConfig;
use bislu::RngState;

const MAGIC: &[u8; 8] = b"BISLUCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor's floats inside the blob.
    pub offset: u64,
}

/// Validation metrics of the epoch whose parameters were saved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedMetric {
    pub best_epoch: usize,
    pub val_sentence_accuracy: f64,
    pub val_intent_accuracy: f64,
    pub val_slot_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainConfig,
    pub intents: Vec<String>,
    pub slots: Vec<String>,
    /// Token per entry; the position is the token id.
    pub vocab: Vec<String>,
    /// Words routed to several piece ids instead of one token id.
    pub pieces: BTreeMap<String, Vec<usize>>,
    pub metric: SavedMetric,
    pub tensors: Vec<TensorEntry>,
}

/// A checkpoint decoded back into runnable state.
pub struct Loaded {
    pub config: TrainConfig,
    pub labels: LabelSets,
    pub vocab: Vocab,
    pub metric: SavedMetric,
    pub params: ParamSet<f32>,
    pub pipe: Pipeline,
}

fn encode(
    config: &TrainConfig,
    labels: &LabelSets,
    vocab: &Vocab,
    metric: &SavedMetric,
    params: &ParamSet<f32>,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            offset: blob.len() as u64,
        });
        for &v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: config.clone(),
        intents: labels.intents.clone(),
        slots: labels.slots.clone(),
        vocab: vocab.to_lines().lines().map(str::to_string).collect(),
        pieces: vocab.piece_table().clone(),
        metric: metric.clone(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).context("serializing manifest")?;

    let mut out = Vec::with_capacity(20 + manifest_bytes.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save(
    path: &Path,
    config: &TrainConfig,
    labels: &LabelSets,
    vocab: &Vocab,
    metric: &SavedMetric,
    params: &ParamSet<f32>,
) -> Result<()> {
    let bytes = encode(config, labels, vocab, metric, params)?;
    fs::write(path, bytes).with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes =
        fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding checkpoint {}", path.display()))
}

fn decode(bytes: &[u8]) -> Result<Loaded> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        bail!("not a checkpoint file (bad magic)");
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        bail!("unsupported checkpoint format version {version} (expected {VERSION})");
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + mlen {
        bail!("truncated manifest: header claims {mlen} bytes");
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[20..20 + mlen]).context("parsing manifest")?;
    let blob = &bytes[20 + mlen..];

    let labels = LabelSets::from_lists(manifest.intents.clone(), manifest.slots.clone());
    let mut vocab = Vocab::from_lines(&(manifest.vocab.join("\n") + "\n"));
    vocab.set_piece_table(manifest.pieces.clone());

    // Rebuild the pipeline to recover parameter registration, then overwrite
    // every tensor from the blob. Names, shapes, and sizes must agree.
    let mut params: ParamSet<f32> = ParamSet::new();
    let mut rng = RngState::new(0);
    let pipe = Pipeline::new(
        manifest.config.encoder.clone(),
        manifest.config.model.clone(),
        vocab.len(),
        labels.num_intents(),
        labels.num_slots(),
        &mut params,
        &mut rng,
    )
    .context("rebuilding the model from the config snapshot")?;

    if manifest.tensors.len() != params.len() {
        bail!(
            "tensor table has {} entries but the model has {} parameters",
            manifest.tensors.len(),
            params.len()
        );
    }
    let mut total_bytes = 0usize;
    for entry in &manifest.tensors {
        let id = params
            .by_name(&entry.name)
            .with_context(|| format!("checkpoint tensor '{}' is not a model parameter", entry.name))?;
        let t = params.tensor_mut(id);
        if t.shape != entry.shape {
            bail!(
                "tensor '{}' has shape {:?} in the checkpoint but {:?} in the model",
                entry.name,
                entry.shape,
                t.shape
            );
        }
        let n = t.numel();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        if end > blob.len() {
            bail!("tensor '{}' runs past the end of the blob", entry.name);
        }
        for (i, chunk) in blob[start..end].chunks_exact(4).enumerate() {
            t.data[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        total_bytes += 4 * n;
    }
    if total_bytes != blob.len() {
        bail!(
            "blob holds {} bytes but the tensor table covers {}",
            blob.len(),
            total_bytes
        );
    }

    Ok(Loaded {
        config: manifest.config,
        labels,
        vocab,
        metric: manifest.metric,
        params,
        pipe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use bislu::data::synth_corpus;
    use bislu::encoder::EncoderConfig;
    use bislu::model::ModelConfig;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig {
                d: 12,
                layers: 1,
                heads: 2,
                ffn_dim: 16,
                dropout_rate: 0.1,
                max_seq_len: 24,
                view_rates: None,
            },
            model: ModelConfig {
                k: 6,
                s: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn fixture() -> (TrainConfig, LabelSets, Vocab, SavedMetric, ParamSet<f32>, Pipeline) {
        let data = synth_corpus(5, 20, 5, 5).unwrap();
        let vocab = Vocab::build(&data.train, 1).unwrap();
        let cfg = tiny_config();
        let mut ps: ParamSet<f32> = ParamSet::new();
        let mut rng = RngState::new(9);
        let pipe = Pipeline::new(
            cfg.encoder.clone(),
            cfg.model.clone(),
            vocab.len(),
            data.labels.num_intents(),
            data.labels.num_slots(),
            &mut ps,
            &mut rng,
        )
        .unwrap();
        let metric = SavedMetric {
            best_epoch: 3,
            val_sentence_accuracy: 0.8,
            val_intent_accuracy: 0.9,
            val_slot_f1: 0.85,
        };
        (cfg, data.labels, vocab, metric, ps, pipe)
    }

    #[test]
    fn round_trip_restores_every_field() {
        let (cfg, labels, vocab, metric, ps, _) = fixture();
        let bytes = encode(&cfg, &labels, &vocab, &metric, &ps).unwrap();
        let loaded = decode(&bytes).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.labels.intents, labels.intents);
        assert_eq!(loaded.labels.slots, labels.slots);
        assert_eq!(loaded.vocab, vocab);
        assert_eq!(loaded.metric, metric);
        assert_eq!(loaded.params.flat_f64(), ps.flat_f64());
    }

    #[test]
    fn load_then_save_is_byte_identical() {
        let (cfg, labels, vocab, metric, ps, _) = fixture();
        let bytes = encode(&cfg, &labels, &vocab, &metric, &ps).unwrap();
        let loaded = decode(&bytes).unwrap();
        let again = encode(
            &loaded.config,
            &loaded.labels,
            &loaded.vocab,
            &loaded.metric,
            &loaded.params,
        )
        .unwrap();
        assert_eq!(bytes, again, "re-encoding a loaded checkpoint must not drift");
    }

    #[test]
    fn corrupted_headers_are_rejected() {
        let (cfg, labels, vocab, metric, ps, _) = fixture();
        let bytes = encode(&cfg, &labels, &vocab, &metric, &ps).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let err = decode(&bad_magic).err().expect("bad magic must fail");
        assert!(err.to_string().contains("magic"));

        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        let err = decode(&bad_version).err().expect("bad version must fail");
        assert!(err.to_string().contains("version"));

        let truncated = &bytes[..bytes.len() - 4];
        assert!(decode(truncated).is_err());
    }

    #[test]
    fn tensor_table_must_match_the_model() {
        let (cfg, labels, vocab, metric, ps, _) = fixture();
        let bytes = encode(&cfg, &labels, &vocab, &metric, &ps).unwrap();
        // rename one tensor in the manifest
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[20..20 + mlen]).unwrap();
        manifest.tensors[0].name = "not.a.parameter".into();
        let mbytes = serde_json::to_vec(&manifest).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(&bytes[..12]);
        forged.extend_from_slice(&(mbytes.len() as u64).to_le_bytes());
        forged.extend_from_slice(&mbytes);
        forged.extend_from_slice(&bytes[20 + mlen..]);
        let err = decode(&forged).err().expect("forged table must fail").to_string();
        assert!(err.contains("not.a.parameter"), "{err}");
    }

    #[test]
    fn predictions_survive_the_round_trip_bit_exactly() {
        let (cfg, labels, vocab, metric, ps, pipe) = fixture();
        let words: Vec<String> = ["show", "me", "flights"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (_, probs_before) = bislu::train::predict_detailed(
            &ps,
            &pipe,
            &vocab,
            &labels,
            &words,
            &cfg.prediction,
        )
        .unwrap();
        let bytes = encode(&cfg, &labels, &vocab, &metric, &ps).unwrap();
        let loaded = decode(&bytes).unwrap();
        let (_, probs_after) = bislu::train::predict_detailed(
            &loaded.params,
            &loaded.pipe,
            &loaded.vocab,
            &loaded.labels,
            &words,
            &loaded.config.prediction,
        )
        .unwrap();
        assert_eq!(probs_before, probs_after);
    }
}
