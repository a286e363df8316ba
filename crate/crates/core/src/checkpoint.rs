//! Binary checkpoints: model configuration, named tensors, Adam moments and
//! a caller-defined state record.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "MTPTCKPT"
//! version  u32      1
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON:
//!          {"model": ModelConfig,
//!           "tensors": [{"name", "rows", "cols"}, ...],
//!           "adam": [null | {"step": n}, ...],     one entry per tensor
//!           "state": <caller state>}
//! values   for each tensor in header order, rows*cols f64
//! moments  for each tensor whose adam entry is non-null, m then v,
//!          rows*cols f64 each
//! ```

use std::path::Path;

use autograd::{AdamSlot, AdamState, Matrix, ParamStore};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artifact::write_atomic;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"MTPTCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct SlotInfo {
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header<S> {
    model: ModelConfig,
    tensors: Vec<TensorInfo>,
    adam: Vec<Option<SlotInfo>>,
    state: S,
}

fn put(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes<S: Serialize>(model: &Model, adam: &AdamState, state: &S) -> Result<Vec<u8>> {
    let slot = |i: usize| adam.slots.get(i).and_then(Option::as_ref);
    let header = Header {
        model: model.config.clone(),
        tensors: model
            .params
            .iter()
            .map(|(_, name, m)| TensorInfo { name: name.to_string(), rows: m.rows(), cols: m.cols() })
            .collect(),
        adam: (0..model.params.len()).map(|i| slot(i).map(|s| SlotInfo { step: s.step })).collect(),
        state,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + model.params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, m) in model.params.iter() {
        put(&mut out, m);
    }
    for i in 0..model.params.len() {
        if let Some(s) = slot(i) {
            put(&mut out, &s.m);
            put(&mut out, &s.v);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

pub fn from_bytes<S: DeserializeOwned>(bytes: &[u8]) -> Result<(Model, AdamState, S)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header<S> =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.adam.len() != header.tensors.len() {
        return Err(Error::Checkpoint("optimizer entries do not match tensors".into()));
    }
    let mut params = ParamStore::new();
    for t in &header.tensors {
        if params.id(&t.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
        }
        let m = r.matrix(t.rows, t.cols)?;
        params.register(t.name.clone(), m);
    }
    let mut adam = AdamState::new(header.tensors.len());
    for (i, (t, s)) in header.tensors.iter().zip(&header.adam).enumerate() {
        if let Some(s) = s {
            let m = r.matrix(t.rows, t.cols)?;
            let v = r.matrix(t.rows, t.cols)?;
            adam.slots[i] = Some(AdamSlot { m, v, step: s.step });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let model = Model::from_params(header.model, params)?;
    Ok((model, adam, header.state))
}

pub fn save<S: Serialize>(path: &Path, model: &Model, adam: &AdamState, state: &S) -> Result<()> {
    write_atomic(path, &to_bytes(model, adam, state)?)
}

pub fn load<S: DeserializeOwned>(path: &Path) -> Result<(Model, AdamState, S)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use autograd::{adam_step, AdamConfig, Gradients};

    use super::*;

    fn tiny() -> Model {
        Model::new(ModelConfig {
            feature_dim: 3,
            model_dim: 8,
            ffn_dim: 16,
            heads: 2,
            layers_speech_enc: 1,
            layers_shared_enc: 1,
            layers_dec: 1,
            phoneme_vocab: 5,
            text_vocab: 6,
            code_vocab: 7,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = tiny();
        let mut adam = AdamState::new(m.params.len());
        let mut g = Gradients::new();
        let id = m.phoneme_embedding_id();
        g.accumulate(id, &Matrix::filled(5, 8, 0.1));
        adam_step(&mut m.params, &g, &mut adam, &AdamConfig::default(), 0.01);
        let bytes = to_bytes(&m, &adam, &("stage", 7u64)).unwrap();
        let (m2, adam2, state): (Model, AdamState, (String, u64)) = from_bytes(&bytes).unwrap();
        assert_eq!(m2.params, m.params);
        assert_eq!(m2.config, m.config);
        assert_eq!(adam2, adam);
        assert_eq!(state, ("stage".to_string(), 7));
        assert_eq!(to_bytes(&m2, &adam2, &state).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = tiny();
        let bytes = to_bytes(&m, &AdamState::default(), &0u8).unwrap();
        assert!(from_bytes::<u8>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<u8>(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<u8>(&extra).is_err());
    }
}
