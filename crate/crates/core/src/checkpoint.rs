//! Named-tensor checkpoint files with a JSON header.
//!
//! Layout: `TDEEDCK1`, u32 header length, header JSON, u32 tensor count,
//! then per tensor: u32 name length, name, u32 rank, u32 dims, f32 payload.
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Model, ModelCfg};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TDEEDCK1";

pub fn write_tensors(path: &Path, header: &Value, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let json = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn read_tensors(path: &Path) -> Result<(Value, Vec<(String, Tensor<f32>)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader(&bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint", path.display())));
    }
    let n = r.u32()?;
    let header: Value = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(len * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if !r.0.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    Ok((header, out))
}

pub fn param_tensors<'a>(store: &'a ParamStore<f32>, prefix: &str) -> Vec<(String, &'a Tensor<f32>)> {
    store.iter().map(|(n, t)| (format!("{prefix}{n}"), t)).collect()
}

/// Copies tensors named `prefix + param` into `store` (names holding a
/// further `:` belong to other sections); every parameter must be present.
pub fn restore_params(store: &mut ParamStore<f32>, tensors: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
    let mut seen = 0;
    for (name, t) in tensors {
        let Some(rest) = name.strip_prefix(prefix) else { continue };
        if rest.contains(':') {
            continue;
        }
        if store.find(rest).is_none() {
            return Err(Error::Format(format!("checkpoint tensor `{name}` unknown to the model")));
        }
        store.set(rest, t.clone())?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {seen} of {} model parameters",
            store.len()
        )));
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &Model, store: &ParamStore<f32>) -> Result<()> {
    let header = serde_json::json!({ "model": model.cfg });
    write_tensors(path, &header, &param_tensors(store, ""))
}

/// Rebuilds the model from the stored config and loads its weights.
pub fn load_model(path: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (header, tensors) = read_tensors(path)?;
    let cfg: ModelCfg = serde_json::from_value(
        header
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint header lacks `model`".into()))?,
    )?;
    let mut store = ParamStore::new();
    let model = Model::new(&cfg, &mut store)?;
    restore_params(&mut store, &tensors, "")?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TemporalModule;
    use crate::sgp::SgpCfg;
    use crate::backbone::BackboneCfg;

    #[test]
    fn model_roundtrip_is_exact() {
        let cfg = ModelCfg {
            clip_len: 8,
            sgp: SgpCfg { d: 16, ..SgpCfg::default() },
            backbone: BackboneCfg { d: 16, ..BackboneCfg::default() },
            temporal_module: TemporalModule::SgpEd,
            ..ModelCfg::default()
        };
        let mut store = ParamStore::new();
        let model = Model::new(&cfg, &mut store).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&p, &model, &store).unwrap();
        let (m2, s2) = load_model(&p).unwrap();
        assert_eq!(m2.cfg, cfg);
        for ((a, ta), (b, tb)) in store.iter().zip(s2.iter()) {
            assert_eq!(a, b);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, b"NOTACKPT....").unwrap();
        assert!(matches!(read_tensors(&p), Err(Error::Format(_))));
        let good = dir.path().join("t");
        let t = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        write_tensors(&good, &serde_json::json!({}), &[("a".into(), &t)]).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_tensors(&p), Err(Error::Format(_))));
    }
}
