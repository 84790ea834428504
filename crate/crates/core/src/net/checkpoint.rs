//! Binary checkpoint: `GRCKPT01`, a little-endian `u64` header length, a
//! JSON header, then every parameter as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, Model};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GRCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    /// Free-form role such as `main`, `aux` or `decoder0`.
    pub role: String,
    pub architecture: Architecture,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub seed: u64,
    pub step: u64,
    /// Precision the models were trained in; stored data is always f64.
    pub dtype: String,
    pub models: Vec<ModelEntry>,
}

/// Models loaded from a checkpoint, in file order.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub seed: u64,
    pub step: u64,
    pub models: Vec<(String, Model<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn model(&self, role: &str) -> Result<&Model<T>> {
        self.models
            .iter()
            .find(|(r, _)| r == role)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no model with role {role:?}")))
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    models: &[(&str, &Model<T>)],
    seed: u64,
    step: u64,
) -> Result<()> {
    let header = Header {
        seed,
        step,
        dtype: T::NAME.to_string(),
        models: models
            .iter()
            .map(|(role, m)| ModelEntry {
                role: role.to_string(),
                architecture: m.architecture().clone(),
                params: m
                    .params()
                    .iter()
                    .map(|p| ParamEntry {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, m) in models {
        for p in m.params() {
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_f64().expect("finite").to_le_bytes());
            }
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail(0, "missing GRCKPT01 magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fail(8, format!("header length {len} exceeds file")))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| fail(16, format!("bad header: {e}")))?;

    let mut offset = body;
    let mut models = Vec::new();
    for entry in header.models {
        let mut model = Model::<T>::new(entry.architecture, header.seed)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        let listed: Vec<(String, Vec<usize>)> =
            entry.params.into_iter().map(|p| (p.name, p.shape)).collect();
        if expected != listed {
            return Err(fail(16, format!("parameter list of {:?} does not match its architecture", entry.role)));
        }
        let mut values = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let n: usize = shape.iter().product();
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(fail(offset, format!("truncated data for {name}")));
            }
            let data: Vec<T> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            values.push(Tensor::new(shape, data).map_err(|e| fail(offset, format!("{name}: {e}")))?);
            offset = end;
        }
        model.set_tensors(values)?;
        models.push((entry.role, model));
    }
    if offset != bytes.len() {
        return Err(fail(offset, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Checkpoint {
        seed: header.seed,
        step: header.step,
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::{build_resnet_small, Activation};

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let main = Model::<f64>::new(build_resnet_small([1, 8, 8], 10, 4, 2), 3).unwrap();
        let aux = Model::<f64>::new(
            Architecture::Mlp { dims: vec![4, 3], activation: Activation::Relu },
            9,
        )
        .unwrap();
        save_checkpoint(&path, &[("main", &main), ("aux", &aux)], 7, 42).unwrap();
        let ck = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!((ck.seed, ck.step), (7, 42));
        assert_eq!(ck.model("main").unwrap().tensors(), main.tensors());
        assert_eq!(ck.model("aux").unwrap().tensors(), aux.tensors());
        assert!(ck.model("teacher").is_err());
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f64>::new(
            Architecture::Mlp { dims: vec![2, 2], activation: Activation::Relu },
            0,
        )
        .unwrap();
        save_checkpoint(&path, &[("main", &m)], 0, 0).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint::<f64>(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("expected format error, got {other:?}"),
        }
        fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Format { offset: 0, .. })));
    }
}
