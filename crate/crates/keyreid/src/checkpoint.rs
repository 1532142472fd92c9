//! Checkpoint archive: magic + JSON header + packed 64-bit little-endian
//! value blobs. One file carries model tensors (trainable and state),
//! momentum buffers, center banks, the rng state and the full run config,
//! so a resumed run is bit-identical to an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use keyreid_core::model::KeyReIdModel;
use keyreid_core::objectives::Centers;
use keyreid_core::params::ParamVisit;
use keyreid_core::rng::PrngState;
use keyreid_core::scalar::Real;
use keyreid_core::tensor::Tensor;
use keyreid_core::train::TrainState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::PipelineError;
use crate::Result;

const MAGIC: &[u8; 4] = b"KRCP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    /// Offset and length in f64 units within the data section.
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    epoch: usize,
    best_map: f64,
    rng: PrngState,
    entries: Vec<EntryMeta>,
    /// SHA-256 of the data section, hex; galleries pin against it.
    data_hash: String,
}

fn blob_of<F: Real>(values: &[F]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

fn values_from(blob: &[u8]) -> Vec<f64> {
    blob.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn hash_hex(data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Serialize the full training state.
pub fn save<F: Real>(state: &TrainState<F>, config: &RunConfig, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values_le: Vec<u8>| {
        entries.push(EntryMeta {
            name,
            shape,
            offset: data.len() / 8,
            len: values_le.len() / 8,
        });
        data.extend_from_slice(&values_le);
    };

    state.model.visit_params("", &mut |name, t, _kind| {
        push(format!("model.{name}"), t.shape().to_vec(), blob_of(t.values()));
    });
    for (name, buf) in state.optimizer.buffers() {
        push(format!("momentum.{name}"), vec![buf.len()], blob_of(buf));
    }
    push(
        "centers.global".into(),
        state.centers.global.shape().to_vec(),
        blob_of(state.centers.global.values()),
    );
    for (k, bank) in state.centers.parts.iter().enumerate() {
        push(
            format!("centers.part{k}"),
            bank.shape().to_vec(),
            blob_of(bank.values()),
        );
    }

    let header = Header {
        version: VERSION,
        config: config.clone(),
        epoch: state.epoch,
        best_map: state.best_map,
        rng: state.rng.state(),
        entries,
        data_hash: hash_hex(&data),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut out: Vec<u8> = Vec::with_capacity(16 + header_json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&data);

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    file.write_all(&out).map_err(|e| PipelineError::io(path, e))?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub best_map: f64,
    pub rng: PrngState,
    pub data_hash: String,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl LoadedCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&(Vec<usize>, Vec<f64>)> {
        self.tensors.get(name)
    }

    /// Rebuild a full training state at the stored epoch.
    pub fn into_train_state<F: Real>(self) -> Result<TrainState<F>> {
        let model_config = self.config.model_config()?;
        let mut rng = keyreid_core::rng::Prng::seed_from_u64(0);
        let mut model = KeyReIdModel::<F>::init(model_config, &mut rng)
            .map_err(PipelineError::Core)?;
        let missing = std::cell::RefCell::new(Vec::<String>::new());
        model.visit_params_mut("", &mut |name, t, _| {
            let key = format!("model.{name}");
            match self.tensors.get(&key) {
                Some((shape, values)) if shape == &t.shape().to_vec() => {
                    for (dst, &src) in t.values_mut().iter_mut().zip(values) {
                        *dst = F::from_f64(src);
                    }
                }
                _ => missing.borrow_mut().push(key),
            }
        });
        let missing = missing.into_inner();
        if !missing.is_empty() {
            return Err(PipelineError::Checkpoint {
                path: String::new(),
                message: format!("missing or mismatched tensors: {}", missing.join(", ")),
            });
        }

        let classes = self.config.classes;
        let part_dim = model.config.part_width();
        let dim = model.config.backbone.dim;
        let parts = model.config.num_parts();
        let mut centers = Centers::<F>::zeros(classes, dim, part_dim, parts);
        let restore_bank = |bank: &mut Tensor<F>, name: &str| -> Result<()> {
            let (shape, values) = self.tensors.get(name).ok_or_else(|| {
                PipelineError::Checkpoint {
                    path: String::new(),
                    message: format!("missing {name}"),
                }
            })?;
            if shape != &bank.shape().to_vec() {
                return Err(PipelineError::Checkpoint {
                    path: String::new(),
                    message: format!("{name}: shape mismatch"),
                });
            }
            for (dst, &src) in bank.values_mut().iter_mut().zip(values) {
                *dst = F::from_f64(src);
            }
            Ok(())
        };
        restore_bank(&mut centers.global, "centers.global")?;
        for k in 0..parts {
            let name = format!("centers.part{k}");
            let bank = &mut centers.parts[k];
            restore_bank(bank, &name)?;
        }

        let mut state = TrainState::new(
            model,
            self.config.train.clone(),
            self.config.loss,
            self.config.ablation,
        )
        .map_err(PipelineError::Core)?;
        state.centers = centers;
        state.epoch = self.epoch;
        state.best_map = self.best_map;
        state.rng = keyreid_core::rng::Prng::restore(&self.rng);

        let mut buffers: BTreeMap<String, Vec<F>> = BTreeMap::new();
        for (name, (_shape, values)) in self.tensors.iter() {
            if let Some(param) = name.strip_prefix("momentum.") {
                buffers.insert(
                    param.to_string(),
                    values.iter().map(|&v| F::from_f64(v)).collect(),
                );
            }
        }
        state.optimizer.set_buffers(buffers);
        Ok(state)
    }
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    let fail = |message: String| PipelineError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| fail(format!("bad header: {e}")))?;
    let data = &bytes[16 + header_len..];
    if hash_hex(data) != header.data_hash {
        return Err(fail("data hash mismatch (corrupt file)".into()));
    }
    let mut tensors = BTreeMap::new();
    for e in &header.entries {
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > data.len() {
            return Err(fail(format!("entry {} overruns data section", e.name)));
        }
        tensors.insert(e.name.clone(), (e.shape.clone(), values_from(&data[start..end])));
    }
    Ok(LoadedCheckpoint {
        config: header.config,
        epoch: header.epoch,
        best_map: header.best_map,
        rng: header.rng,
        data_hash: header.data_hash,
        tensors,
    })
}

/// The parameter-section hash of a checkpoint already on disk.
pub fn stored_hash(path: &Path) -> Result<String> {
    Ok(load(path)?.data_hash)
}
