//! JSON checkpoints for KG embeddings and full QA models. Tensors are
//! stored as base64 little-endian `f64` under per-module sections, with a
//! checksum over all tensor bytes. Writes go through a temporary file and a
//! rename so a failed save never leaves a truncated checkpoint behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use qcmhm_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::embedding::{KgEmbeddings, KgTrainConfig};
use crate::error::{Error, Result};
use crate::model::{QaConfig, QaModel};
use crate::questions::TokenVocab;
use crate::store::KgStore;

pub const FORMAT: &str = "qcmhm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EncodedTensor {
    rows: usize,
    cols: usize,
    data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    kind: String,
    /// Complex embedding dimension `D`; tables are `2D` wide.
    kg_dim: usize,
    entities: usize,
    relations: usize,
    timestamps: usize,
    seed: u64,
    config: serde_json::Value,
    #[serde(default)]
    vocab: Option<Vec<String>>,
    /// Module name, then parameter name.
    sections: BTreeMap<String, BTreeMap<String, EncodedTensor>>,
    checksum: String,
}

/// FNV-1a over every tensor's bytes in section order.
fn checksum(sections: &BTreeMap<String, BTreeMap<String, EncodedTensor>>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (section, tensors) in sections {
        for (name, t) in tensors {
            for b in section.bytes().chain(name.bytes()).chain(t.data.bytes()) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}

fn encode(t: &Tensor) -> EncodedTensor {
    let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    EncodedTensor {
        rows: t.rows(),
        cols: t.cols(),
        data: STANDARD.encode(bytes),
    }
}

fn decode(name: &str, e: &EncodedTensor) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(&e.data)
        .map_err(|err| Error::Checkpoint(format!("{name}: bad base64: {err}")))?;
    if bytes.len() != e.rows * e.cols * 8 {
        return Err(Error::Checkpoint(format!(
            "{name}: expected {} bytes for {}x{}, found {}",
            e.rows * e.cols * 8,
            e.rows,
            e.cols,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Tensor::matrix(e.rows, e.cols, data))
}

/// Groups parameters by the prefix before their first dot.
fn sections_of(params: &ParamStore) -> BTreeMap<String, BTreeMap<String, EncodedTensor>> {
    let mut out: BTreeMap<String, BTreeMap<String, EncodedTensor>> = BTreeMap::new();
    for (_, name, t) in params.iter() {
        let section = name.split('.').next().unwrap_or(name).to_string();
        out.entry(section).or_default().insert(name.to_string(), encode(t));
    }
    out
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read(path: &Path, kind: &str) -> Result<CheckpointFile> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: not a checkpoint: {e}", path.display())))?;
    if file.format != FORMAT {
        return Err(Error::Checkpoint(format!("expected format {FORMAT:?}, found {:?}", file.format)));
    }
    if file.version != VERSION {
        return Err(Error::Checkpoint(format!("expected version {VERSION}, found {}", file.version)));
    }
    if file.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {:?}", file.kind)));
    }
    let sum = checksum(&file.sections);
    if sum != file.checksum {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: expected {}, found {sum}",
            file.checksum
        )));
    }
    Ok(file)
}

fn check_store(file: &CheckpointFile, store: &KgStore) -> Result<()> {
    let expected = (store.num_entities(), store.num_relations(), store.num_timestamps());
    let found = (file.entities, file.relations, file.timestamps);
    if expected != found {
        return Err(Error::Checkpoint(format!(
            "vocabulary sizes (entities, relations, timestamps): expected {expected:?}, found {found:?}"
        )));
    }
    Ok(())
}

fn check_dim(file: &CheckpointFile, expected: Option<usize>) -> Result<()> {
    match expected {
        Some(d) if d != file.kg_dim => Err(Error::Checkpoint(format!(
            "embedding dimension: expected {d}, found {}",
            file.kg_dim
        ))),
        _ => Ok(()),
    }
}

/// Decoded tensors by parameter name.
fn tensors(file: &CheckpointFile) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for tensors in file.sections.values() {
        for (name, e) in tensors {
            out.insert(name.clone(), decode(name, e)?);
        }
    }
    Ok(out)
}

pub fn save_kg(path: impl AsRef<Path>, emb: &KgEmbeddings, config: &KgTrainConfig) -> Result<()> {
    let sections = sections_of(&emb.params);
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        kind: "kg".into(),
        kg_dim: emb.dim(),
        entities: emb.num_entities(),
        relations: emb.num_relations(),
        timestamps: emb.num_timestamps(),
        seed: config.seed,
        config: serde_json::to_value(config)?,
        vocab: None,
        checksum: checksum(&sections),
        sections,
    };
    write_atomic(path.as_ref(), &serde_json::to_string(&file)?)
}

/// Loads KG embeddings, checking them against `store` and, if given, the
/// expected dimension `D`.
pub fn load_kg(path: impl AsRef<Path>, store: &KgStore, expected_dim: Option<usize>) -> Result<(KgEmbeddings, KgTrainConfig)> {
    let file = read(path.as_ref(), "kg")?;
    check_store(&file, store)?;
    check_dim(&file, expected_dim)?;
    let mut t = tensors(&file)?;
    let mut params = ParamStore::new();
    let mut take = |name: &str, rows: usize| -> Result<_> {
        let tensor = t
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if tensor.rows() != rows || tensor.cols() != 2 * file.kg_dim {
            return Err(Error::Checkpoint(format!(
                "{name}: expected {rows}x{}, found {}x{}",
                2 * file.kg_dim,
                tensor.rows(),
                tensor.cols()
            )));
        }
        Ok(params.add(name, tensor))
    };
    let entity = take("kg.entity", file.entities)?;
    let relation = take("kg.relation", file.relations)?;
    let time = take("kg.time", file.timestamps)?;
    let w_ts = take("kg.w_ts", 1)?;
    let config: KgTrainConfig = serde_json::from_value(file.config.clone())?;
    Ok((KgEmbeddings::from_params(params, entity, relation, time, w_ts)?, config))
}

pub fn save_qa(path: impl AsRef<Path>, model: &QaModel) -> Result<()> {
    let sections = sections_of(&model.params);
    let entity = model.params.get(model.kg.entity);
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        kind: "qa".into(),
        kg_dim: entity.cols() / 2,
        entities: entity.rows(),
        relations: model.params.get(model.kg.relation).rows(),
        timestamps: model.params.get(model.kg.time).rows(),
        seed: model.config.seed,
        config: serde_json::to_value(&model.config)?,
        vocab: Some(model.vocab.words().to_vec()),
        checksum: checksum(&sections),
        sections,
    };
    write_atomic(path.as_ref(), &serde_json::to_string(&file)?)
}

/// Rebuilds the model skeleton from the stored config and vocabulary, then
/// overwrites every parameter. Nothing is returned unless every parameter
/// is present with the right shape.
pub fn load_qa(path: impl AsRef<Path>, store: &KgStore, expected_dim: Option<usize>) -> Result<QaModel> {
    let file = read(path.as_ref(), "qa")?;
    check_store(&file, store)?;
    check_dim(&file, expected_dim)?;
    let config: QaConfig = serde_json::from_value(file.config.clone())?;
    let words = file
        .vocab
        .clone()
        .ok_or_else(|| Error::Checkpoint("QA checkpoint without vocabulary".into()))?;
    let vocab = TokenVocab::from_words(words)?;
    let mut t = tensors(&file)?;
    let width = 2 * file.kg_dim;
    let tables = [
        Tensor::zeros(file.entities, width),
        Tensor::zeros(file.relations, width),
        Tensor::zeros(file.timestamps, width),
    ];
    let mut model = QaModel::with_tables(config, vocab, store, tables)?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let tensor = t
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        let want = model.params.get(id);
        if (tensor.rows(), tensor.cols()) != (want.rows(), want.cols()) {
            return Err(Error::Checkpoint(format!(
                "{name}: expected {}x{}, found {}x{}",
                want.rows(),
                want.cols(),
                tensor.rows(),
                tensor.cols()
            )));
        }
        model.params.set(id, tensor);
    }
    if let Some(extra) = t.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    model.refresh_spo_cache()?;
    Ok(model)
}
