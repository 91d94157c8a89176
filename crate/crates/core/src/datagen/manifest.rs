//! Line-delimited dataset manifests.
//!
//! One record per triple; image files live next to the manifest and are
//! stored as lossless PNGs.

use super::{MixCoefficients, MixTriple, SceneGroup};
use crate::error::{DereflectError, Result};
use crate::img::ImageTensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TripleRecord {
    pub scene_id: String,
    pub t_path: String,
    pub r_path: String,
    pub m_path: String,
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Writes records as JSON lines.
pub fn write_manifest(path: &Path, records: &[TripleRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut file, rec)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a JSON-lines manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<TripleRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TripleRecord = serde_json::from_str(&line).map_err(|e| {
            DereflectError::Validation(format!(
                "manifest {} line {}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Saves a triple's images under `dir/images/` and returns its record.
pub fn save_triple(dir: &Path, index: usize, triple: &MixTriple) -> Result<TripleRecord> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let stem = format!("{}_{index:05}", triple.scene_id);
    let t_path = format!("images/{stem}_t.png");
    let r_path = format!("images/{stem}_r.png");
    let m_path = format!("images/{stem}_m.png");
    triple.transmission.save_png(&dir.join(&t_path))?;
    triple.reflection.save_png(&dir.join(&r_path))?;
    triple.mixed.save_png(&dir.join(&m_path))?;
    Ok(TripleRecord {
        scene_id: triple.scene_id.clone(),
        t_path,
        r_path,
        m_path,
        gamma1: triple.coeffs.gamma1,
        gamma2: triple.coeffs.gamma2,
        score: None,
    })
}

/// Loads one record's images back into a [`MixTriple`].
pub fn load_triple(dir: &Path, rec: &TripleRecord) -> Result<MixTriple> {
    Ok(MixTriple {
        transmission: ImageTensor::load(&dir.join(&rec.t_path))?,
        reflection: ImageTensor::load(&dir.join(&rec.r_path))?,
        mixed: ImageTensor::load(&dir.join(&rec.m_path))?,
        coeffs: MixCoefficients::new(rec.gamma1, rec.gamma2)?,
        scene_id: rec.scene_id.clone(),
    })
}

/// Groups manifest records into scene groups, ordered by scene id.
pub fn load_scene_groups(dir: &Path, records: &[TripleRecord]) -> Result<Vec<SceneGroup>> {
    let mut by_scene: BTreeMap<String, Vec<&TripleRecord>> = BTreeMap::new();
    for rec in records {
        by_scene.entry(rec.scene_id.clone()).or_default().push(rec);
    }
    let mut groups = Vec::with_capacity(by_scene.len());
    for (scene_id, recs) in by_scene {
        let triples: Vec<MixTriple> = recs
            .iter()
            .map(|r| load_triple(dir, r))
            .collect::<Result<_>>()?;
        let transmission = triples[0].transmission.clone();
        groups.push(SceneGroup {
            scene_id,
            transmission,
            triples,
        });
    }
    Ok(groups)
}

/// Manifest path inside a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}
