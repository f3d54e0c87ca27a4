//! Versioned single-file checkpoints.
//!
//! Layout: `MAGIC`, format version (u32 LE), header length (u64 LE), JSON
//! header, then raw f64 LE payload: every parameter in store order, followed
//! by the Adam first moments and second moments in the same order.
//!
//! Training randomness is derived from `(train.seed, epoch, record index)`,
//! so `train.seed` plus `epochs_done` is the complete rng state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, ParamStore};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scene::Vocabulary;
use crate::tensor::Matrix;
use crate::train::{EpochStats, TrainState};

pub const MAGIC: &[u8; 8] = b"B2N3DCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: Config,
    vocabulary: Vocabulary,
    epochs_done: usize,
    adam_steps: u64,
    history: Vec<EpochStats>,
    tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to resume or evaluate it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: Config, state: TrainState) -> Self {
        Self { config, state }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let st = &self.state;
        let header = Header {
            config: self.config.clone(),
            vocabulary: st.model.vocab.clone(),
            epochs_done: st.epochs_done,
            adam_steps: st.optimizer.steps(),
            history: st.history.clone(),
            tensors: st
                .params
                .iter()
                .map(|(name, m)| TensorEntry { name: name.to_string(), rows: m.rows(), cols: m.cols() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let (m, v) = st.optimizer.moments();
        let payload = st.params.iter().map(|(_, p)| p).chain(m).chain(v);
        let mut out = Vec::with_capacity(json.len() + 20 + 24 * st.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut cur, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut cur, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let mut len = [0u8; 8];
        read_exact(&mut cur, &mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .ok()
            .filter(|&l| l <= cur.len())
            .ok_or_else(|| Error::Checkpoint("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&cur[..len])?;
        cur = &cur[len..];

        header.config.validate()?;
        let (model, mut params) = Model::new(header.config.model.clone(), header.vocabulary.clone())?;
        if params.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {}",
                header.tensors.len(),
                params.len()
            )));
        }
        for (id, entry) in params.ids().collect::<Vec<_>>().into_iter().zip(&header.tensors) {
            let (name, shape) = (params.name(id), params.get(id).shape());
            if name != entry.name || shape != (entry.rows, entry.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {shape:?} does not match stored {} ({}, {})",
                    entry.name, entry.rows, entry.cols
                )));
            }
        }
        let scalars = params.num_scalars();
        if cur.len() != 3 * 8 * scalars {
            return Err(Error::Checkpoint(format!("payload is {} bytes, expected {}", cur.len(), 24 * scalars)));
        }
        let mut take = |rows: usize, cols: usize| {
            let (head, rest) = cur.split_at(8 * rows * cols);
            cur = rest;
            let data = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            Matrix::from_vec(rows, cols, data)
        };
        for id in params.ids().collect::<Vec<_>>() {
            let (r, c) = params.get(id).shape();
            *params.get_mut(id) = take(r, c);
        }
        let shapes: Vec<(usize, usize)> = params.iter().map(|(_, p)| p.shape()).collect();
        let m = shapes.iter().map(|&(r, c)| take(r, c)).collect();
        let v = shapes.iter().map(|&(r, c)| take(r, c)).collect();
        let optimizer = Adam::from_parts(&params, header.adam_steps, m, v)
            .ok_or_else(|| Error::Checkpoint("optimizer state does not match parameters".into()))?;
        let state = TrainState { model, params, optimizer, epochs_done: header.epochs_done, history: header.history };
        Ok(Self { config: header.config, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf).map_err(|_| Error::Checkpoint("file is truncated".into()))
}
