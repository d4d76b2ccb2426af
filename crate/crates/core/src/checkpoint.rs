//! Checkpoint format: `NQCKPT1\0` magic, a little-endian u64 JSON-header
//! length, the JSON header (tensor name → dtype/shape/offset, plus optional
//! optimizer metadata), then raw little-endian f32 blobs. Offsets are
//! relative to the start of the data section; names are stored sorted so
//! identical state always produces identical bytes.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{AdamConfig, AdamState};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"NQCKPT1\0";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    step_count: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, TensorEntry>,
    adam: Option<AdamMeta>,
}

/// Serialize parameters (and optionally Adam moments, stored under
/// `adam.m.*` / `adam.v.*`) to `path`.
pub fn save(path: &Path, params: &ParamStore<f32>, adam: Option<&AdamState<f32>>) -> Result<()> {
    let mut named: Vec<(String, Vec<usize>, &[f32])> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data()))
        .collect();
    if let Some(state) = adam {
        for i in 0..params.len() {
            let id = ParamId(i);
            let (m, v) = state.moments(i);
            let shape = params.get(id).shape().to_vec();
            named.push((format!("adam.m.{}", params.name(id)), shape.clone(), m));
            named.push((format!("adam.v.{}", params.name(id)), shape, v));
        }
    }
    named.sort_by(|a, b| a.0.cmp(&b.0));

    let mut tensors = BTreeMap::new();
    let mut offset = 0u64;
    for (name, shape, data) in &named {
        tensors.insert(
            name.clone(),
            TensorEntry { dtype: "f32".into(), shape: shape.clone(), offset },
        );
        offset += (data.len() * 4) as u64;
    }
    let header = Header {
        tensors,
        adam: adam.map(|s| AdamMeta {
            step_count: s.step_count,
            lr: s.cfg.lr,
            beta1: s.cfg.beta1,
            beta2: s.cfg.beta2,
            eps: s.cfg.eps,
        }),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, _, data) in &named {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Everything read back from a checkpoint file.
pub struct RawCheckpoint {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    adam: Option<AdamMeta>,
}

impl RawCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }
}

pub fn read(path: &Path) -> Result<RawCheckpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::Truncated { expected: (16 + hlen) as u64, got: bytes.len() as u64 });
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])?;
    let data = &bytes[16 + hlen..];
    let mut tensors = BTreeMap::new();
    for (name, entry) in header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::invalid("checkpoint", format!("{name}: unsupported dtype {}", entry.dtype)));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > data.len() {
            return Err(Error::Truncated {
                expected: (16 + hlen + end) as u64,
                got: bytes.len() as u64,
            });
        }
        let values: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, (entry.shape, values));
    }
    Ok(RawCheckpoint { tensors, adam: header.adam })
}

/// Load model parameters (and Adam state when present in the file and
/// requested) into an existing store. Fails without partial effects on any
/// missing tensor or shape mismatch.
pub fn load_into(
    path: &Path,
    params: &mut ParamStore<f32>,
    mut adam: Option<&mut Option<AdamState<f32>>>,
) -> Result<()> {
    let raw = read(path)?;
    // Validate first: no partial loads.
    for i in 0..params.len() {
        let id = ParamId(i);
        let name = params.name(id).to_string();
        let (shape, _) = raw
            .tensor(&name)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor {name}")))?;
        if shape != params.get(id).shape() {
            return Err(Error::TensorShape {
                name,
                stored: shape.to_vec(),
                expected: params.get(id).shape().to_vec(),
            });
        }
    }
    if let Some(slot) = adam.as_deref_mut() {
        if let Some(meta) = &raw.adam {
            let mut ms = Vec::with_capacity(params.len());
            let mut vs = Vec::with_capacity(params.len());
            for i in 0..params.len() {
                let id = ParamId(i);
                let name = params.name(id);
                for (prefix, dst) in [("adam.m.", &mut ms), ("adam.v.", &mut vs)] {
                    let full = format!("{prefix}{name}");
                    let (shape, data) = raw
                        .tensor(&full)
                        .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor {full}")))?;
                    if shape != params.get(id).shape() {
                        return Err(Error::TensorShape {
                            name: full,
                            stored: shape.to_vec(),
                            expected: params.get(id).shape().to_vec(),
                        });
                    }
                    dst.push(data.to_vec());
                }
            }
            let cfg = AdamConfig { lr: meta.lr, beta1: meta.beta1, beta2: meta.beta2, eps: meta.eps };
            *slot = Some(AdamState::from_raw(cfg, meta.step_count, ms, vs));
        } else {
            *slot = None;
        }
    }
    for i in 0..params.len() {
        let id = ParamId(i);
        let name = params.name(id).to_string();
        let (_, data) = raw.tensor(&name).expect("validated above");
        params.replace_data(id, data.to_vec())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{adam_step, Gradients};

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.register("a.w", &[2, 3], vec![1.0, -2.0, 3.5, 0.25, 0.0, 9.0]).unwrap();
        s.register("a.b", &[3], vec![0.5, 0.25, -0.125]).unwrap();
        s
    }

    fn grads_of(s: &ParamStore<f32>) -> Gradients<f32> {
        let w = s.by_name("a.w").unwrap();
        let g = crate::tensor::Tensor::from_vec(w.shape(), vec![0.1; 6]).unwrap();
        w.mul(&g).unwrap().sum().backward().unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut s = store();
        let mut adam = AdamState::new(AdamConfig::default(), &s);
        let g = grads_of(&s);
        adam_step(&mut s, &g, &mut adam).unwrap();
        save(&p1, &s, Some(&adam)).unwrap();

        let mut s2 = store();
        let mut adam2 = None;
        load_into(&p1, &mut s2, Some(&mut adam2)).unwrap();
        save(&p2, &s2, adam2.as_ref()).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        // loaded tensors bitwise equal
        for (name, t) in s.iter() {
            let t2 = s2.by_name(name).unwrap();
            assert_eq!(
                t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn corrupted_magic_is_rejected_without_partial_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let s = store();
        save(&p, &s, None).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        let mut s2 = store();
        let before: Vec<f32> = s2.by_name("a.w").unwrap().data().to_vec();
        assert!(matches!(load_into(&p, &mut s2, None), Err(Error::BadMagic)));
        assert_eq!(s2.by_name("a.w").unwrap().data(), &before[..]);
    }

    #[test]
    fn truncated_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&p, &store(), None).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read(&p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&p, &store(), None).unwrap();
        let mut other = ParamStore::new();
        other.register("a.w", &[3, 2], vec![0.0; 6]).unwrap();
        other.register("a.b", &[3], vec![0.0; 3]).unwrap();
        match load_into(&p, &mut other, None) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "a.w"),
            other => panic!("expected TensorShape error, got {other:?}"),
        }
    }
}
