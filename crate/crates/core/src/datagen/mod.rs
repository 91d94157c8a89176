//! Synthetic training-pair generation.
//!
//! Mixed images follow the nonlinear superposition
//! `M = γ1·T + γ2·R − γ1·γ2·(T∘R)` with `γ1 ∈ [0.8, 1.0]` and
//! `γ2 ∈ [0.4, 1.0]`. For inputs in `[0, 1]` the pre-clamp result is already
//! within `[0, 1]` (`M = γ1·T·(1−γ2·R) + γ2·R`), so the final clamp only
//! guards float round-off.

pub mod manifest;
pub mod scorer;
pub mod textures;

use crate::error::{DereflectError, Result};
use crate::img::{check_same_shape, ImageTensor};
use crate::rng::Rng;
use ndarray::Array3;
use rand::Rng as _;

pub use scorer::{EmbeddingScorer, HeuristicScorer, RealismScorer};

/// Sampling range for `γ1`.
pub const GAMMA1_RANGE: (f64, f64) = (0.8, 1.0);
/// Sampling range for `γ2`.
pub const GAMMA2_RANGE: (f64, f64) = (0.4, 1.0);

/// Mixing coefficients for one synthetic pair.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixCoefficients {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl MixCoefficients {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        if !(GAMMA1_RANGE.0..=GAMMA1_RANGE.1).contains(&gamma1) {
            return Err(DereflectError::Validation(format!(
                "gamma1 {gamma1} outside [{}, {}]",
                GAMMA1_RANGE.0, GAMMA1_RANGE.1
            )));
        }
        if !(GAMMA2_RANGE.0..=GAMMA2_RANGE.1).contains(&gamma2) {
            return Err(DereflectError::Validation(format!(
                "gamma2 {gamma2} outside [{}, {}]",
                GAMMA2_RANGE.0, GAMMA2_RANGE.1
            )));
        }
        Ok(Self { gamma1, gamma2 })
    }
}

/// An aligned (transmission, reflection, mixed) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct MixTriple {
    pub transmission: ImageTensor,
    pub reflection: ImageTensor,
    pub mixed: ImageTensor,
    pub coeffs: MixCoefficients,
    pub scene_id: String,
}

impl MixTriple {
    /// Builds a triple by applying the mixing formula.
    pub fn synthesize(
        scene_id: impl Into<String>,
        transmission: ImageTensor,
        reflection: ImageTensor,
        coeffs: MixCoefficients,
    ) -> Result<Self> {
        let mixed = mix(&transmission, &reflection, coeffs)?;
        Ok(Self {
            transmission,
            reflection,
            mixed,
            coeffs,
            scene_id: scene_id.into(),
        })
    }

    /// Re-derives the mixed image and checks it against the stored one.
    pub fn verify(&self, tol: f64) -> Result<()> {
        let rederived = mix(&self.transmission, &self.reflection, self.coeffs)?;
        let err = self.mixed.mean_abs_diff(&rederived)?;
        let max_err = self
            .mixed
            .data()
            .iter()
            .zip(rederived.data().iter())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0f64, f64::max);
        if max_err > tol {
            return Err(DereflectError::Validation(format!(
                "mixed image deviates from formula: max {max_err:.2e}, mean {err:.2e}"
            )));
        }
        Ok(())
    }
}

/// One ground-truth transmission with several mixed variants of the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGroup {
    pub scene_id: String,
    pub transmission: ImageTensor,
    pub triples: Vec<MixTriple>,
}

impl SceneGroup {
    pub fn mixed_images(&self) -> impl Iterator<Item = &ImageTensor> {
        self.triples.iter().map(|t| &t.mixed)
    }
}

/// Applies `M = γ1·T + γ2·R − γ1·γ2·(T∘R)`, clamped to `[0, 1]`.
///
/// Per-pixel arithmetic runs in f64 so the result tracks the exact formula
/// to well under 1e-6.
pub fn mix(
    transmission: &ImageTensor,
    reflection: &ImageTensor,
    coeffs: MixCoefficients,
) -> Result<ImageTensor> {
    check_same_shape(transmission, reflection)?;
    // Re-validate: coeffs may have been deserialized without the ctor.
    let coeffs = MixCoefficients::new(coeffs.gamma1, coeffs.gamma2)?;
    let (h, w) = transmission.shape();
    let t = transmission.data();
    let r = reflection.data();
    let mut out = Array3::zeros((h, w, 3));
    for ((idx, val), (&tv, &rv)) in out.indexed_iter_mut().zip(t.iter().zip(r.iter())) {
        let _ = idx;
        let tv = tv as f64;
        let rv = rv as f64;
        let m = coeffs.gamma1 * tv + coeffs.gamma2 * rv - coeffs.gamma1 * coeffs.gamma2 * tv * rv;
        *val = m.clamp(0.0, 1.0) as f32;
    }
    ImageTensor::new(out)
}

/// Draws `γ1 ~ U[0.8, 1.0]`, `γ2 ~ U[0.4, 1.0]`.
pub fn sample_coefficients(rng: &mut Rng) -> MixCoefficients {
    let gamma1 = rng.gen_range(GAMMA1_RANGE.0..=GAMMA1_RANGE.1);
    let gamma2 = rng.gen_range(GAMMA2_RANGE.0..=GAMMA2_RANGE.1);
    MixCoefficients { gamma1, gamma2 }
}

/// Builds a [`SceneGroup`] with one triple per reflection image.
///
/// Each triple gets its own coefficient draw; all share the transmission
/// and the scene id.
pub fn generate_scene(
    scene_id: impl Into<String>,
    transmission: ImageTensor,
    reflections: &[ImageTensor],
    rng: &mut Rng,
) -> Result<SceneGroup> {
    if reflections.is_empty() {
        return Err(DereflectError::Validation(
            "generate_scene needs at least one reflection image".into(),
        ));
    }
    let scene_id = scene_id.into();
    let mut triples = Vec::with_capacity(reflections.len());
    for reflection in reflections {
        let coeffs = sample_coefficients(rng);
        triples.push(MixTriple::synthesize(
            scene_id.clone(),
            transmission.clone(),
            reflection.clone(),
            coeffs,
        )?);
    }
    Ok(SceneGroup {
        scene_id,
        transmission,
        triples,
    })
}

/// Builds a fully procedural corpus: `n_scenes` scene groups with
/// `reflections_per_scene` mixed variants each, at `size`×`size`.
pub fn procedural_scene_groups(
    n_scenes: usize,
    reflections_per_scene: usize,
    size: usize,
    base_seed: u64,
) -> Result<Vec<SceneGroup>> {
    let mut groups = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        // Per-scene streams keep generation order-independent across workers.
        let mut tex = crate::rng::indexed_stream(base_seed, "texture", i as u64);
        let mut mix_rng = crate::rng::indexed_stream(base_seed, "mix", i as u64);
        let transmission = textures::transmission_texture(size, size, &mut tex);
        let reflections: Vec<ImageTensor> = (0..reflections_per_scene)
            .map(|_| textures::reflection_texture(size, size, &mut tex))
            .collect();
        groups.push(generate_scene(
            format!("scene_{i:05}"),
            transmission,
            &reflections,
            &mut mix_rng,
        )?);
    }
    Ok(groups)
}

/// Number of triples kept by [`filter_by_realism`] for `n` inputs.
///
/// Computes `⌈keep_fraction·n⌉` with a small relative guard so fractions
/// that are exact rationals of `n` (e.g. 20833/69443) keep exact counts
/// despite f64 representation error.
pub fn retention_count(n: usize, keep_fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let target = keep_fraction * n as f64;
    let guarded = target - target.abs() * 1e-9 - 1e-12;
    (guarded.ceil().max(1.0) as usize).min(n)
}

/// Keeps the top `⌈keep_fraction·N⌉` triples by realism score.
///
/// Output is ordered by (score descending, scene_id ascending), with input
/// order as the final stable tie-break. `keep_fraction` must be in `(0, 1]`.
pub fn filter_by_realism(
    triples: Vec<MixTriple>,
    scorer: &dyn RealismScorer,
    keep_fraction: f64,
) -> Result<Vec<MixTriple>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(DereflectError::Validation(format!(
            "keep_fraction {keep_fraction} outside (0, 1]"
        )));
    }
    if triples.is_empty() {
        return Ok(Vec::new());
    }
    let keep = retention_count(triples.len(), keep_fraction);
    let scores: Vec<f64> = triples.iter().map(|t| scorer.score(t)).collect();
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| triples[a].scene_id.cmp(&triples[b].scene_id))
            .then_with(|| a.cmp(&b))
    });
    let mut slots: Vec<Option<MixTriple>> = triples.into_iter().map(Some).collect();
    Ok(order
        .into_iter()
        .take(keep)
        .map(|i| slots[i].take().expect("each index selected once"))
        .collect())
}

/// Absolute-threshold variant of the filter: keeps triples scoring at least
/// `min_score`, same ordering as [`filter_by_realism`].
pub fn filter_by_score_threshold(
    triples: Vec<MixTriple>,
    scorer: &dyn RealismScorer,
    min_score: f64,
) -> Vec<MixTriple> {
    let scores: Vec<f64> = triples.iter().map(|t| scorer.score(t)).collect();
    let mut kept: Vec<(f64, MixTriple)> = triples
        .into_iter()
        .zip(scores)
        .filter(|(_, s)| *s >= min_score)
        .map(|(t, s)| (s, t))
        .collect();
    kept.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.scene_id.cmp(&b.1.scene_id))
    });
    kept.into_iter().map(|(_, t)| t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;

    fn coeffs(g1: f64, g2: f64) -> MixCoefficients {
        MixCoefficients::new(g1, g2).unwrap()
    }

    #[test]
    fn mix_zero_reflection_scales_transmission() {
        let t = textures::transmission_texture(16, 16, &mut rng::stream(1, "t"));
        let r = ImageTensor::zeros(16, 16).unwrap();
        let m = mix(&t, &r, coeffs(0.9, 0.5)).unwrap();
        for (mv, tv) in m.data().iter().zip(t.data().iter()) {
            assert_abs_diff_eq!(*mv, 0.9 * tv, epsilon = 1e-6);
        }
    }

    #[test]
    fn mix_zero_transmission_scales_reflection() {
        let t = ImageTensor::zeros(16, 16).unwrap();
        let r = textures::reflection_texture(16, 16, &mut rng::stream(2, "r"));
        let m = mix(&t, &r, coeffs(0.9, 0.5)).unwrap();
        for (mv, rv) in m.data().iter().zip(r.data().iter()) {
            assert_abs_diff_eq!(*mv, 0.5 * rv, epsilon = 1e-6);
        }
    }

    #[test]
    fn mix_single_pixel_matches_scalar_oracle() {
        // 0.8*0.5 + 0.4*0.5 - 0.8*0.4*0.25 = 0.52
        let t = ImageTensor::splat(8, 8, 0.5).unwrap();
        let r = ImageTensor::splat(8, 8, 0.5).unwrap();
        let m = mix(&t, &r, coeffs(0.8, 0.4)).unwrap();
        assert_abs_diff_eq!(m.data()[[0, 0, 0]], 0.52, epsilon = 1e-6);
    }

    #[test]
    fn mix_rejects_shape_mismatch_and_bad_coeffs() {
        let t = ImageTensor::zeros(16, 16).unwrap();
        let r = ImageTensor::zeros(16, 8).unwrap();
        assert!(matches!(
            mix(&t, &r, coeffs(0.9, 0.5)),
            Err(DereflectError::DimensionMismatch(_))
        ));
        assert!(MixCoefficients::new(0.7, 0.5).is_err());
        assert!(MixCoefficients::new(0.9, 1.1).is_err());
    }

    #[test]
    fn mix_is_monotone_in_transmission() {
        // Finite differences: M(T + h) - M(T) >= 0 when gamma2*R < 1.
        let mut rng = rng::stream(3, "mono");
        let t = textures::transmission_texture(16, 16, &mut rng);
        let r = textures::reflection_texture(16, 16, &mut rng);
        let c = coeffs(0.93, 0.77);
        let m0 = mix(&t, &r, c).unwrap();
        let h = 1e-3f32;
        let bumped =
            ImageTensor::from_clamped(t.data().mapv(|v| (v + h).min(1.0))).unwrap();
        let m1 = mix(&bumped, &r, c).unwrap();
        for (a, b) in m1.data().iter().zip(m0.data().iter()) {
            assert!(*a >= *b - 1e-6);
        }
    }

    #[test]
    fn coefficient_sampling_is_seeded_and_in_range() {
        let a = sample_coefficients(&mut rng::stream(9, "gamma"));
        let b = sample_coefficients(&mut rng::stream(9, "gamma"));
        assert_eq!(a, b);

        let mut stream = rng::stream(10, "gamma");
        let draws: Vec<MixCoefficients> =
            (0..10_000).map(|_| sample_coefficients(&mut stream)).collect();
        let g1_min = draws.iter().map(|c| c.gamma1).fold(f64::MAX, f64::min);
        let g1_max = draws.iter().map(|c| c.gamma1).fold(f64::MIN, f64::max);
        assert!(g1_min >= 0.8 && g1_max <= 1.0);
        let g2_mean: f64 = draws.iter().map(|c| c.gamma2).sum::<f64>() / draws.len() as f64;
        assert!((g2_mean - 0.7).abs() < 0.02, "gamma2 mean {g2_mean}");
    }

    #[test]
    fn generate_scene_shares_id_and_is_deterministic() {
        let mut rng = rng::stream(4, "scene");
        let t = textures::transmission_texture(16, 16, &mut rng);
        let rs = vec![
            textures::reflection_texture(16, 16, &mut rng),
            textures::reflection_texture(16, 16, &mut rng),
            textures::reflection_texture(16, 16, &mut rng),
        ];
        let g1 = generate_scene("s0", t.clone(), &rs, &mut rng::stream(5, "mix")).unwrap();
        let g2 = generate_scene("s0", t, &rs, &mut rng::stream(5, "mix")).unwrap();
        assert_eq!(g1.triples.len(), 3);
        assert!(g1.triples.iter().all(|tr| tr.scene_id == "s0"));
        assert_eq!(g1, g2);
        // Distinct coefficient draws per triple.
        assert_ne!(g1.triples[0].coeffs, g1.triples[1].coeffs);
        for tr in &g1.triples {
            tr.verify(1e-6).unwrap();
        }
    }

    #[test]
    fn generate_scene_identity_case() {
        let mut rng = rng::stream(6, "ident");
        let t = textures::transmission_texture(16, 16, &mut rng);
        let zero = ImageTensor::zeros(16, 16).unwrap();
        let triple = MixTriple::synthesize("s", t.clone(), zero, coeffs(1.0, 0.5)).unwrap();
        assert!(triple.mixed.mean_abs_diff(&t).unwrap() < 1e-7);
        assert!(generate_scene("s", t, &[], &mut rng).is_err());
    }

    #[test]
    fn retention_count_handles_exact_rationals() {
        assert_eq!(retention_count(69_443, 20_833.0 / 69_443.0), 20_833);
        assert_eq!(retention_count(10, 1.0), 10);
        assert_eq!(retention_count(10, 0.05), 1);
        assert_eq!(retention_count(0, 0.5), 0);
        assert_eq!(retention_count(7, 0.5), 4); // ceil(3.5)
    }

    fn tiny_triples(n: usize) -> Vec<MixTriple> {
        let mut rng = rng::stream(11, "filter");
        let t = textures::transmission_texture(8, 8, &mut rng);
        (0..n)
            .map(|i| {
                let r = textures::reflection_texture(8, 8, &mut rng);
                MixTriple::synthesize(format!("s{i:04}"), t.clone(), r, coeffs(0.9, 0.8))
                    .unwrap()
            })
            .collect()
    }

    struct IndexScorer;
    impl RealismScorer for IndexScorer {
        fn score(&self, triple: &MixTriple) -> f64 {
            // Distinct, deterministic scores derived from the scene id.
            let n: f64 = triple.scene_id[1..].parse().unwrap();
            ((n * 37.0) % 101.0) - n / 1000.0
        }
        fn name(&self) -> &'static str {
            "index"
        }
    }

    struct ConstScorer;
    impl RealismScorer for ConstScorer {
        fn score(&self, _: &MixTriple) -> f64 {
            1.0
        }
        fn name(&self) -> &'static str {
            "const"
        }
    }

    #[test]
    fn filter_keep_all_sorts_by_score() {
        let triples = tiny_triples(12);
        let out = filter_by_realism(triples, &IndexScorer, 1.0).unwrap();
        assert_eq!(out.len(), 12);
        let scores: Vec<f64> = out.iter().map(|t| IndexScorer.score(t)).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn filter_constant_scores_tie_break_on_scene_id() {
        let triples = tiny_triples(10);
        let out = filter_by_realism(triples, &ConstScorer, 0.5).unwrap();
        let ids: Vec<&str> = out.iter().map(|t| t.scene_id.as_str()).collect();
        assert_eq!(ids, vec!["s0000", "s0001", "s0002", "s0003", "s0004"]);
    }

    #[test]
    fn filter_is_monotone_in_keep_fraction() {
        let triples = tiny_triples(20);
        let small = filter_by_realism(triples.clone(), &IndexScorer, 0.25).unwrap();
        let large = filter_by_realism(triples, &IndexScorer, 0.60).unwrap();
        for t in &small {
            assert!(large.iter().any(|u| u.scene_id == t.scene_id));
        }
    }

    #[test]
    fn filter_empty_and_bad_fraction() {
        assert!(filter_by_realism(Vec::new(), &ConstScorer, 0.3)
            .unwrap()
            .is_empty());
        assert!(filter_by_realism(tiny_triples(2), &ConstScorer, 0.0).is_err());
        assert!(filter_by_realism(tiny_triples(2), &ConstScorer, 1.5).is_err());
    }
}
