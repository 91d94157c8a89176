//! Pluggable realism scoring for synthetic triples.
//!
//! The heuristic scorer keeps CI free of model weights; the embedding scorer
//! reproduces the image-text-similarity shape of the original filtering and
//! loads its projection weights from a user-supplied file.

use super::MixTriple;
use crate::error::{DereflectError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Scores how reflection-like a synthetic mixed image looks. Higher is better.
/// Implementations must be deterministic for a fixed input.
pub trait RealismScorer {
    fn score(&self, triple: &MixTriple) -> f64;
    fn name(&self) -> &'static str;
}

/// Dependency-free scorer.
///
/// Rewards mid-band contrast of the residual `M − γ1·T` (a plausible
/// reflection leaves visible, varied structure at moderate intensity) and
/// penalizes clipped highlights (blown-out mixes read as fake).
#[derive(Debug, Clone)]
pub struct HeuristicScorer {
    pub clip_threshold: f32,
    pub clip_penalty: f64,
    pub midband: (f32, f32),
}

impl Default for HeuristicScorer {
    fn default() -> Self {
        Self {
            clip_threshold: 0.995,
            clip_penalty: 2.0,
            midband: (0.05, 0.65),
        }
    }
}

impl RealismScorer for HeuristicScorer {
    fn score(&self, triple: &MixTriple) -> f64 {
        let m = triple.mixed.data();
        let t = triple.transmission.data();
        let g1 = triple.coeffs.gamma1;
        let n = m.len() as f64;

        let mut clipped = 0usize;
        let mut band = Vec::new();
        for (&mv, &tv) in m.iter().zip(t.iter()) {
            if mv >= self.clip_threshold {
                clipped += 1;
            }
            let r = mv as f64 - g1 * tv as f64;
            if r >= self.midband.0 as f64 && r <= self.midband.1 as f64 {
                band.push(r);
            }
        }
        let clip_frac = clipped as f64 / n;
        let contrast = if band.len() < 16 {
            0.0
        } else {
            let mean = band.iter().sum::<f64>() / band.len() as f64;
            (band.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / band.len() as f64)
                .sqrt()
        };
        contrast - self.clip_penalty * clip_frac
    }

    fn name(&self) -> &'static str {
        "heuristic"
    }
}

/// On-disk weights for [`EmbeddingScorer`].
///
/// The image embedder average-pools the mixed image to a `patch × patch`
/// grid, flattens it, and applies a linear projection; the score is cosine
/// similarity against a stored text embedding of the reflection prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingScorerWeights {
    pub dim: usize,
    pub patch: usize,
    /// Row-major `dim × (patch·patch·3)` projection.
    pub projection: Vec<f32>,
    pub bias: Vec<f32>,
    /// Unit-normalized prompt embedding, length `dim`.
    pub text_embedding: Vec<f32>,
}

/// Image-text-embedding scorer backed by an external weights file.
#[derive(Debug, Clone)]
pub struct EmbeddingScorer {
    weights: EmbeddingScorerWeights,
}

impl EmbeddingScorer {
    pub fn new(weights: EmbeddingScorerWeights) -> Result<Self> {
        let in_dim = weights.patch * weights.patch * 3;
        if weights.projection.len() != weights.dim * in_dim {
            return Err(DereflectError::Validation(format!(
                "projection has {} values, expected {}",
                weights.projection.len(),
                weights.dim * in_dim
            )));
        }
        if weights.bias.len() != weights.dim || weights.text_embedding.len() != weights.dim {
            return Err(DereflectError::Validation(
                "bias/text_embedding length must equal dim".into(),
            ));
        }
        Ok(Self { weights })
    }

    /// Loads `embedding_scorer.json` from a cache directory.
    pub fn load_from_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("embedding_scorer.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            DereflectError::Validation(format!(
                "embedding scorer weights not found at {}: {e}",
                path.display()
            ))
        })?;
        let weights: EmbeddingScorerWeights = serde_json::from_str(&text)?;
        Self::new(weights)
    }

    fn embed(&self, triple: &MixTriple) -> Vec<f64> {
        let p = self.weights.patch;
        let (h, w) = triple.mixed.shape();
        let data = triple.mixed.data();
        // Average-pool onto a p x p grid.
        let mut pooled = vec![0.0f64; p * p * 3];
        let mut counts = vec![0.0f64; p * p];
        for y in 0..h {
            let py = (y * p) / h;
            for x in 0..w {
                let px = (x * p) / w;
                counts[py * p + px] += 1.0;
                for c in 0..3 {
                    pooled[(py * p + px) * 3 + c] += data[[y, x, c]] as f64;
                }
            }
        }
        for cell in 0..p * p {
            for c in 0..3 {
                pooled[cell * 3 + c] /= counts[cell].max(1.0);
            }
        }
        let in_dim = p * p * 3;
        (0..self.weights.dim)
            .map(|row| {
                let mut acc = self.weights.bias[row] as f64;
                for (k, v) in pooled.iter().enumerate() {
                    acc += self.weights.projection[row * in_dim + k] as f64 * v;
                }
                acc
            })
            .collect()
    }
}

impl RealismScorer for EmbeddingScorer {
    fn score(&self, triple: &MixTriple) -> f64 {
        let emb = self.embed(triple);
        let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        emb.iter()
            .zip(&self.weights.text_embedding)
            .map(|(e, t)| e / norm * *t as f64)
            .sum()
    }

    fn name(&self) -> &'static str {
        "embedding"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{textures, MixCoefficients, MixTriple};
    use crate::img::ImageTensor;
    use crate::rng;

    fn triple_with_reflection(seed: u64, amp: f32) -> MixTriple {
        let mut rng = rng::stream(seed, "scorer");
        let t = textures::transmission_texture(32, 32, &mut rng);
        let r = ImageTensor::from_clamped(
            textures::reflection_texture(32, 32, &mut rng)
                .into_data()
                .mapv(|v| v * amp),
        )
        .unwrap();
        MixTriple::synthesize("s", t, r, MixCoefficients::new(0.9, 0.8).unwrap()).unwrap()
    }

    #[test]
    fn heuristic_is_deterministic() {
        let t = triple_with_reflection(1, 0.8);
        let s = HeuristicScorer::default();
        assert_eq!(s.score(&t), s.score(&t));
    }

    #[test]
    fn heuristic_prefers_visible_reflection_over_none() {
        let s = HeuristicScorer::default();
        let with = triple_with_reflection(2, 0.9);
        let mut rng = rng::stream(2, "scorer");
        let t = textures::transmission_texture(32, 32, &mut rng);
        let without = MixTriple::synthesize(
            "s",
            t,
            ImageTensor::zeros(32, 32).unwrap(),
            MixCoefficients::new(0.9, 0.8).unwrap(),
        )
        .unwrap();
        assert!(s.score(&with) > s.score(&without));
    }

    #[test]
    fn heuristic_penalizes_clipping() {
        let s = HeuristicScorer::default();
        let moderate = triple_with_reflection(3, 0.7);
        // Saturate: near-white transmission + strong reflection clips M.
        let white = ImageTensor::splat(32, 32, 0.999).unwrap();
        let bright = ImageTensor::splat(32, 32, 1.0).unwrap();
        let clipped = MixTriple::synthesize(
            "s",
            white,
            bright,
            MixCoefficients::new(1.0, 1.0).unwrap(),
        )
        .unwrap();
        assert!(s.score(&moderate) > s.score(&clipped));
    }

    #[test]
    fn embedding_scorer_round_trips_and_scores() {
        let dim = 4;
        let patch = 2;
        let in_dim = patch * patch * 3;
        let weights = EmbeddingScorerWeights {
            dim,
            patch,
            projection: (0..dim * in_dim)
                .map(|i| ((i * 31 % 17) as f32 - 8.0) / 8.0)
                .collect(),
            bias: vec![0.0; dim],
            text_embedding: vec![0.5, 0.5, 0.5, 0.5],
        };
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("embedding_scorer.json"),
            serde_json::to_string(&weights).unwrap(),
        )
        .unwrap();
        let scorer = EmbeddingScorer::load_from_dir(dir.path()).unwrap();
        let t = triple_with_reflection(4, 0.8);
        let a = scorer.score(&t);
        assert!(a.is_finite());
        assert_eq!(a, scorer.score(&t));
    }

    #[test]
    fn embedding_scorer_rejects_bad_shapes() {
        let weights = EmbeddingScorerWeights {
            dim: 4,
            patch: 2,
            projection: vec![0.0; 5],
            bias: vec![0.0; 4],
            text_embedding: vec![0.0; 4],
        };
        assert!(EmbeddingScorer::new(weights).is_err());
    }
}
