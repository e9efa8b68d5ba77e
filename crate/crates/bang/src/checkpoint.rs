//! Checkpoint directory layout: `config.json`, `manifest.json`,
//! `weights.bin` (raw little-endian f32 in manifest order), `vocab.txt`,
//! and optionally `adam.bin` + `train_state.json` for resumable runs.
//! Files are written to a temp name and renamed, manifest last, so an
//! interrupted save never leaves a readable-but-truncated checkpoint.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::model::{ModelConfig, ModelError, Parameters};
use crate::objectives::AdamState;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainStateFile {
    step: usize,
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub vocab: Vocabulary,
    pub adam: Option<AdamState>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn tensor_bytes(tensors: &IndexMap<String, Array2<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors.values() {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(
    dir: &Path,
    config: &ModelConfig,
    params: &Parameters,
    vocab: &Vocabulary,
    adam: Option<&AdamState>,
) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    write_atomic(
        &dir.join("config.json"),
        serde_json::to_string_pretty(config).unwrap().as_bytes(),
    )?;
    vocab
        .save(&dir.join("vocab.txt"))
        .map_err(|e| ModelError::Format(e.to_string()))?;
    write_atomic(&dir.join("weights.bin"), &tensor_bytes(&params.tensors))?;
    if let Some(adam) = adam {
        let mut bytes = tensor_bytes(&adam.m);
        bytes.extend(tensor_bytes(&adam.v));
        write_atomic(&dir.join("adam.bin"), &bytes)?;
        write_atomic(
            &dir.join("train_state.json"),
            serde_json::to_string(&TrainStateFile { step: adam.step })
                .unwrap()
                .as_bytes(),
        )?;
    }
    let manifest: Vec<ManifestEntry> = params
        .tensors
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: vec![t.nrows(), t.ncols()],
            dtype: "f32".into(),
        })
        .collect();
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap().as_bytes(),
    )?;
    Ok(())
}

fn read_tensors(
    bytes: &mut impl Read,
    manifest: &[ManifestEntry],
) -> Result<IndexMap<String, Array2<f32>>, ModelError> {
    let mut out = IndexMap::new();
    for entry in manifest {
        if entry.dtype != "f32" {
            return Err(ModelError::Format(format!(
                "unsupported dtype {} for {}",
                entry.dtype, entry.name
            )));
        }
        let (r, c) = (entry.shape[0], entry.shape[1]);
        let mut buf = vec![0u8; r * c * 4];
        bytes.read_exact(&mut buf).map_err(|_| {
            ModelError::Format(format!("weights.bin truncated at tensor {}", entry.name))
        })?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.insert(
            entry.name.clone(),
            Array2::from_shape_vec((r, c), data).unwrap(),
        );
    }
    Ok(out)
}

pub fn load(dir: &Path) -> Result<Checkpoint, ModelError> {
    let config: ModelConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)
            .map_err(|e| ModelError::Format(format!("config.json: {e}")))?;
    config.validate()?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| ModelError::Format(format!("manifest.json: {e}")))?;
    let mut f = std::fs::File::open(dir.join("weights.bin"))?;
    let tensors = read_tensors(&mut f, &manifest)?;
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ModelError::Format(format!(
            "weights.bin has {} trailing bytes",
            rest.len()
        )));
    }
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))
        .map_err(|e| ModelError::Format(e.to_string()))?;
    let adam = if dir.join("adam.bin").exists() {
        let state: TrainStateFile =
            serde_json::from_str(&std::fs::read_to_string(dir.join("train_state.json"))?)
                .map_err(|e| ModelError::Format(format!("train_state.json: {e}")))?;
        let mut f = std::fs::File::open(dir.join("adam.bin"))?;
        let m = read_tensors(&mut f, &manifest)?;
        let v = read_tensors(&mut f, &manifest)?;
        Some(AdamState { step: state.step, m, v })
    } else {
        None
    };
    Ok(Checkpoint {
        config,
        params: Parameters { tensors },
        vocab,
        adam,
    })
}
