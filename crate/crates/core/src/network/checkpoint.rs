//! Checkpoint format: self-describing, versioned, bitwise-exact.
//!
//! Layout: 8-byte magic, u32 version, u64 JSON-header length, JSON header
//! (config, noise seed, completed stages, tensor index), then raw f32
//! little-endian tensor data in index order.

use super::{Model, NetworkConfig, Partition};
use crate::error::{DereflectError, Result};
use crate::nn::param::ParamSet;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DRFLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in f32 elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    noise_seed: u64,
    stages_completed: Vec<String>,
    tensors: Vec<TensorEntry>,
}

fn partition_names_and_shapes(model: &Model) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for p in Partition::ALL {
        model.partition(p).visit("", &mut |view| {
            out.push((view.name.clone(), view.shape.clone(), view.data.to_vec()));
        });
    }
    out
}

/// Serializes the model to `path`.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let tensors = partition_names_and_shapes(model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len() as u64,
        });
        offset += data.len() as u64;
    }
    let header = Header {
        config: model.config.clone(),
        noise_seed: model.noise_seed,
        stages_completed: model.stages_completed.iter().cloned().collect(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for (_, _, data) in &tensors {
        for v in data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Loads a model from `path`, checking magic, version, and that the tensor
/// index covers every parameter with matching shapes.
pub fn load(path: &Path) -> Result<Model> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DereflectError::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    file.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(DereflectError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut buf8 = [0u8; 8];
    file.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let total: u64 = header.tensors.iter().map(|t| t.len).sum();
    let mut data = vec![0f32; total as usize];
    let mut raw = vec![0u8; total as usize * 4];
    file.read_exact(&mut raw)?;
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        data[i] = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
    }

    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
    for t in &header.tensors {
        if by_name.insert(t.name.as_str(), t).is_some() {
            return Err(DereflectError::Checkpoint(format!(
                "duplicate tensor `{}`",
                t.name
            )));
        }
    }

    let mut model = Model::new(header.config.clone(), header.noise_seed);
    model.stages_completed = header.stages_completed.iter().cloned().collect::<BTreeSet<_>>();

    let mut assigned = 0usize;
    for p in Partition::ALL {
        // Names and shapes in visit order, then mutate in the same order.
        let mut expect: Vec<(String, Vec<usize>)> = Vec::new();
        model
            .partition(p)
            .visit("", &mut |view| expect.push((view.name.clone(), view.shape.clone())));
        let mut idx = 0usize;
        let mut failure: Option<DereflectError> = None;
        let part = match p {
            Partition::ThetaDown => &mut model.unet.down as &mut dyn ParamSet,
            Partition::ThetaMid => &mut model.unet.mid,
            Partition::ThetaUp => &mut model.unet.up,
            Partition::Phi => &mut model.phi,
            Partition::Cond => &mut model.cond,
            Partition::Codec => &mut model.codec,
            Partition::Fusion => &mut model.fusion,
        };
        part.visit_mut(&mut |w, _| {
            if failure.is_some() {
                return;
            }
            let (name, shape) = &expect[idx];
            idx += 1;
            let Some(entry) = by_name.get(name.as_str()) else {
                failure = Some(DereflectError::Checkpoint(format!(
                    "missing tensor `{name}`"
                )));
                return;
            };
            let numel: usize = shape.iter().product();
            if entry.shape != *shape || entry.len as usize != numel || w.len() != numel {
                failure = Some(DereflectError::Checkpoint(format!(
                    "shape mismatch for `{name}`: file {:?}, model {:?}",
                    entry.shape, shape
                )));
                return;
            }
            let start = entry.offset as usize;
            w.copy_from_slice(&data[start..start + numel]);
            assigned += 1;
        });
        if let Some(err) = failure {
            return Err(err);
        }
    }
    if assigned != header.tensors.len() {
        return Err(DereflectError::Checkpoint(format!(
            "checkpoint has {} tensors, model consumed {assigned}",
            header.tensors.len()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    #[test]
    fn round_trip_preserves_every_partition() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.drfl");
        let mut model = Model::new(NetworkConfig::default(), 42);
        model.stages_completed.insert("prior".to_string());
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(model.partition_hashes(), back.partition_hashes());
        assert_eq!(back.noise_seed, 42);
        assert!(back.stages_completed.contains("prior"));
        assert_eq!(back.config, model.config);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.drfl");
        let b = dir.path().join("b.drfl");
        let model = Model::new(NetworkConfig::default(), 7);
        save(&model, &a).unwrap();
        save(&model, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.drfl");
        std::fs::write(&path, b"NOTDRFL!restoffile").unwrap();
        assert!(matches!(
            load(&path),
            Err(DereflectError::Checkpoint(_))
        ));
    }
}
