//! Seeded synthetic multi-center patch datasets.
//!
//! Every center renders the same kind of tissue through its own stain
//! matrix and concentration scaling. Class 1 patches carry a few extra
//! hematoxylin blobs near the middle of the patch; class 0 patches do not.

use nalgebra::Vector3;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{angular_deviation, calibrate, mean_stain_matrix, StainBudget};
use crate::error::{CasaError, Result};
use crate::image::RgbImage;
use crate::rng;
use crate::stain::{reconstruct, ConcentrationMap, StainMatrix, StainMatrixDocument, CANONICAL_E, CANONICAL_H};
use crate::trainer::{CenterInfo, Dataset, GroundTruth, Patch, Split};

/// Stain appearance of one center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterSpec {
    pub center_id: u32,
    pub w_true: StainMatrix,
    /// Multiplies the (H, E) concentrations of every patch.
    pub concentration_scale: [f64; 2],
    pub patches_per_class: usize,
}

impl CenterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.concentration_scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(CasaError::InvalidConfig(format!("scales {:?} must be positive", self.concentration_scale)));
        }
        Ok(())
    }
}

/// Blob signal that distinguishes class 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalParams {
    pub blob_count: usize,
    /// Gaussian standard deviation in pixels.
    pub blob_sigma: f64,
    /// Peak hematoxylin added by one blob.
    pub blob_amplitude: f64,
    /// Blob centers fall in the middle `blob_region` fraction of each axis.
    pub blob_region: f64,
    /// Background hematoxylin level of class 1 relative to class 0.
    pub density_ratio: f64,
}

impl Default for SignalParams {
    fn default() -> Self {
        Self { blob_count: 4, blob_sigma: 3.0, blob_amplitude: 0.2, blob_region: 0.5, density_ratio: 1.2 }
    }
}

/// Missing fields take their default values when deserializing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub reference_h: [f64; 3],
    pub reference_e: [f64; 3],
    pub train_center_ids: Vec<u32>,
    pub heldout_center_id: u32,
    /// Train center `c` of `T` is rotated by an angle drawn from
    /// `[c, c + 1] * train_max_rotation / T`.
    pub train_max_rotation: f64,
    pub heldout_rotation: f64,
    /// Range of the per-center, per-channel concentration scale.
    pub train_scale_range: [f64; 2],
    /// Requested (H, E) scale of the held-out center.
    pub heldout_scale: [f64; 2],
    /// Held-out parameters are pulled inside this fraction of the budget.
    pub budget_margin: f64,
    pub patch_size: usize,
    pub patches_per_class: usize,
    /// Mean of the uniform per-pixel background concentrations.
    pub background_level: [f64; 2],
    /// Relative per-patch jitter of the background level.
    pub background_jitter: f64,
    /// Fraction of pixels carrying only eosin, and likewise only hematoxylin.
    pub pure_fraction: f64,
    pub signal: SignalParams,
    /// Standard deviation of additive intensity noise (0 disables it).
    pub noise: f64,
    pub delta: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            reference_h: CANONICAL_H,
            reference_e: CANONICAL_E,
            train_center_ids: vec![0, 1, 2],
            heldout_center_id: 3,
            train_max_rotation: 0.25,
            heldout_rotation: 0.15,
            train_scale_range: [0.95, 1.05],
            heldout_scale: [0.6, 1.0],
            budget_margin: 0.9,
            patch_size: 32,
            patches_per_class: 300,
            background_level: [0.5, 0.5],
            background_jitter: 0.05,
            pure_fraction: 0.05,
            signal: SignalParams::default(),
            noise: 0.0,
            delta: 0.05,
            beta: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CasaError::InvalidConfig(msg));
        if self.train_center_ids.len() < 2 {
            return bad("need at least 2 train centers".into());
        }
        let mut ids = self.train_center_ids.clone();
        ids.push(self.heldout_center_id);
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("center ids must be distinct".into());
        }
        let quarter = std::f64::consts::FRAC_PI_4;
        for (name, a) in [("train_max_rotation", self.train_max_rotation), ("heldout_rotation", self.heldout_rotation)] {
            if !(0.0..=quarter).contains(&a) {
                return bad(format!("{name} {a} outside [0, pi/4]"));
            }
        }
        let [lo, hi] = self.train_scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("bad scale range {:?}", self.train_scale_range));
        }
        if self.heldout_scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("bad held-out scale {:?}", self.heldout_scale));
        }
        if !(self.budget_margin > 0.0 && self.budget_margin <= 1.0) {
            return bad(format!("budget margin {}", self.budget_margin));
        }
        if self.patch_size < 16 {
            return bad(format!("patch size {} below 16", self.patch_size));
        }
        if self.patches_per_class == 0 {
            return bad("patches_per_class must be positive".into());
        }
        if self.background_level.iter().any(|&l| !(l > 0.0)) || !(0.0..1.0).contains(&self.background_jitter) {
            return bad("background level must be positive and jitter in [0, 1)".into());
        }
        if !(0.0..0.5).contains(&self.pure_fraction) {
            return bad(format!("pure fraction {} outside [0, 0.5)", self.pure_fraction));
        }
        let s = &self.signal;
        if !(s.blob_sigma > 0.0 && s.blob_amplitude >= 0.0 && s.blob_region > 0.0 && s.blob_region <= 1.0 && s.density_ratio > 0.0) {
            return bad(format!("bad signal parameters {s:?}"));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise {}", self.noise));
        }
        Ok(())
    }

    pub fn reference(&self) -> Result<StainMatrix> {
        StainMatrix::from_directions(self.reference_h, self.reference_e)
    }
}

/// Both columns turn toward the normal of the H-E plane. For the usual H&E
/// directions this keeps them non-negative for rotations up to pi/4.
fn rotation_tangents(reference: &StainMatrix) -> [Vector3<f64>; 2] {
    let normal = reference.hematoxylin().cross(reference.eosin()).normalize();
    [normal, normal]
}

/// The reference with each column rotated by exactly `angle` radians.
pub fn rotated_reference(reference: &StainMatrix, angle: f64) -> Result<StainMatrix> {
    let t = rotation_tangents(reference);
    let cols: [Vector3<f64>; 2] = std::array::from_fn(|k| {
        let v = reference.column(k) * angle.cos() + t[k] * angle.sin();
        v / v.norm()
    });
    StainMatrix::new(cols[0], cols[1])
}

fn render_patch<R: Rng + ?Sized>(
    spec: &CenterSpec,
    config: &SynthConfig,
    label: usize,
    rng: &mut R,
) -> Result<(RgbImage, ConcentrationMap)> {
    let size = config.patch_size;
    let n = size * size;
    let jitter = |rng: &mut R| 1.0 + config.background_jitter * rng.random_range(-1.0..=1.0);
    let sig = &config.signal;
    let density = if label == 1 { sig.density_ratio } else { 1.0 };
    let level = [config.background_level[0] * density * jitter(rng), config.background_level[1] * jitter(rng)];

    let lo = 0.5 * (1.0 - sig.blob_region) * size as f64;
    let span = sig.blob_region * size as f64;
    let blobs: Vec<(f64, f64)> = if label == 1 {
        (0..sig.blob_count)
            .map(|_| (lo + span * rng.random::<f64>(), lo + span * rng.random::<f64>()))
            .collect()
    } else {
        Vec::new()
    };

    let mut hem = Vec::with_capacity(n);
    let mut eos = Vec::with_capacity(n);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let bump: f64 = blobs
                .iter()
                .map(|&(cx, cy)| {
                    let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                    sig.blob_amplitude * (-d2 / (2.0 * sig.blob_sigma * sig.blob_sigma)).exp()
                })
                .sum();
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            let pure: f64 = rng.random();
            let (has_h, has_e) = (pure >= config.pure_fraction, pure < 1.0 - config.pure_fraction);
            hem.push(if has_h { spec.concentration_scale[0] * (level[0] * u + bump) } else { 0.0 });
            eos.push(if has_e { spec.concentration_scale[1] * level[1] * v } else { 0.0 });
        }
    }
    let h = ConcentrationMap::new(hem, eos)?;
    let mut image = reconstruct(&spec.w_true, &h, 1.0, size, size)?;
    if config.noise > 0.0 {
        let data = image
            .data()
            .iter()
            .map(|&x| (x + config.noise * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
            .collect();
        image = RgbImage::new(size, size, data)?;
    }
    Ok((image, h))
}

/// Renders `patches_per_class` patches of each class for one center.
///
/// Patch `i` draws from its own stream derived from a single value of `rng`,
/// so the output does not depend on how patches are scheduled.
pub fn generate_center<R: RngCore + ?Sized>(spec: &CenterSpec, config: &SynthConfig, rng: &mut R) -> Result<Vec<Patch>> {
    spec.validate()?;
    config.validate()?;
    let base = rng.next_u64();
    let per = spec.patches_per_class;
    (0..2 * per)
        .into_par_iter()
        .map(|i| {
            let label = i / per;
            let mut patch_rng = rng::stream(base, &[i as u64]);
            let (image, h) = render_patch(spec, config, label, &mut patch_rng)?;
            Ok(Patch { image, label, center: spec.center_id, truth: Some(GroundTruth { w: spec.w_true, h }) })
        })
        .collect()
}

/// A generated dataset with its calibration and generating parameters.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Budget calibrated from the ground truth of the training patches.
    pub budget: StainBudget,
    /// Train centers first, then the held-out center.
    pub specs: Vec<CenterSpec>,
    pub train_rotations: Vec<f64>,
    /// Held-out rotation before and after being pulled inside the budget.
    pub heldout_rotation_requested: f64,
    pub heldout_rotation: f64,
    /// Angle between the held-out stain matrix and the training mean.
    pub heldout_alpha: f64,
    /// Same angle for the requested (unadjusted) rotation.
    pub heldout_alpha_requested: f64,
}

impl SynthDataset {
    pub fn heldout_id(&self) -> u32 {
        self.specs.last().expect("held-out spec").center_id
    }

    pub fn manifest(&self, config: &SynthConfig) -> Manifest {
        Manifest {
            seed: config.seed,
            config: config.clone(),
            budget: self.budget,
            heldout_rotation: self.heldout_rotation,
            heldout_alpha: self.heldout_alpha,
            centers: self
                .specs
                .iter()
                .zip(self.dataset.centers())
                .map(|(s, c)| ManifestCenter {
                    center_id: s.center_id,
                    split: c.split,
                    w_true: s.w_true.to_document(),
                    concentration_scale: s.concentration_scale,
                    patches_per_class: s.patches_per_class,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCenter {
    pub center_id: u32,
    pub split: Split,
    pub w_true: StainMatrixDocument,
    pub concentration_scale: [f64; 2],
    pub patches_per_class: usize,
}

/// Description of a generated dataset written next to its images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub centers: Vec<ManifestCenter>,
    pub budget: StainBudget,
    pub heldout_rotation: f64,
    pub heldout_alpha: f64,
    pub config: SynthConfig,
}

/// Largest rotation between `from` and `to` whose deviation from `w_bar`
/// stays within `limit`, assuming deviation grows along the way.
fn pull_inside(reference: &StainMatrix, w_bar: &StainMatrix, from: f64, to: f64, limit: f64) -> Result<f64> {
    let alpha = |a: f64| -> Result<f64> { Ok(angular_deviation(&rotated_reference(reference, a)?, w_bar)) };
    if alpha(to)? <= limit {
        return Ok(to);
    }
    let (mut inside, mut outside) = (from, to);
    for _ in 0..60 {
        let mid = 0.5 * (inside + outside);
        if alpha(mid)? <= limit {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    Ok(inside)
}

/// Train centers plus one held-out center whose stain parameters lie inside
/// the budget calibrated on the training patches.
pub fn generate_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let reference = config.reference()?;
    let t = config.train_center_ids.len();
    let mut param_rng = rng::stream(config.seed, &[0xCE17]);

    let mut specs = Vec::with_capacity(t + 1);
    let mut rotations = Vec::with_capacity(t);
    let [lo, hi] = config.train_scale_range;
    for (c, &id) in config.train_center_ids.iter().enumerate() {
        let width = config.train_max_rotation / t as f64;
        let angle = width * (c as f64 + param_rng.random::<f64>());
        let scale = [param_rng.random_range(lo..=hi), param_rng.random_range(lo..=hi)];
        rotations.push(angle);
        specs.push(CenterSpec {
            center_id: id,
            w_true: rotated_reference(&reference, angle)?,
            concentration_scale: scale,
            patches_per_class: config.patches_per_class,
        });
    }

    let mut patches = Vec::new();
    for (c, spec) in specs.iter().enumerate() {
        patches.extend(generate_center(spec, config, &mut rng::stream(config.seed, &[0xDA7A, c as u64]))?);
    }

    let truths: Vec<&GroundTruth> = patches.iter().map(|p| p.truth.as_ref().expect("generated")).collect();
    let matrices: Vec<StainMatrix> = truths.iter().map(|g| g.w).collect();
    let maps: Vec<ConcentrationMap> = truths.iter().map(|g| g.h.clone()).collect();
    let budget = calibrate(&matrices, &maps, config.delta, config.beta)?;
    let w_bar = mean_stain_matrix(&matrices)?;

    // Rotations move along one great circle per column, so the training
    // mean sits at roughly the mean rotation.
    let mean_rotation = rotations.iter().sum::<f64>() / t as f64;
    let limit = config.budget_margin * budget.tau_w;
    let requested = config.heldout_rotation;
    let heldout_rotation = pull_inside(&reference, &w_bar, mean_rotation, requested, limit)?;
    let heldout_w = rotated_reference(&reference, heldout_rotation)?;
    let tau_h = config.budget_margin * budget.tau_h;
    let heldout_scale = config.heldout_scale.map(|s| 1.0 + (s - 1.0).clamp(-tau_h, tau_h));
    let heldout = CenterSpec {
        center_id: config.heldout_center_id,
        w_true: heldout_w,
        concentration_scale: heldout_scale,
        patches_per_class: config.patches_per_class,
    };
    patches.extend(generate_center(&heldout, config, &mut rng::stream(config.seed, &[0xDA7A, t as u64]))?);
    specs.push(heldout);

    let mut centers: Vec<CenterInfo> =
        config.train_center_ids.iter().map(|&id| CenterInfo { id, split: Split::Train }).collect();
    centers.push(CenterInfo { id: config.heldout_center_id, split: Split::Test });

    Ok(SynthDataset {
        dataset: Dataset::new(patches, centers)?,
        budget,
        specs,
        train_rotations: rotations,
        heldout_rotation_requested: requested,
        heldout_rotation,
        heldout_alpha: angular_deviation(&heldout_w, &w_bar),
        heldout_alpha_requested: angular_deviation(&rotated_reference(&reference, requested)?, &w_bar),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::concentration_q99;
    use crate::linalg::angle_between;
    use crate::stain::{macenko_decompose, MacenkoParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> SynthConfig {
        SynthConfig { patches_per_class: 12, ..SynthConfig::default() }
    }

    fn spec(angle: f64) -> CenterSpec {
        CenterSpec {
            center_id: 7,
            w_true: rotated_reference(&StainMatrix::canonical(), angle).unwrap(),
            concentration_scale: [1.0, 1.0],
            patches_per_class: 50,
        }
    }

    #[test]
    fn rotation_angle_is_exact() {
        let w = StainMatrix::canonical();
        for angle in [0.0, 0.05, 0.25, 0.7] {
            let r = rotated_reference(&w, angle).unwrap();
            for k in 0..2 {
                assert!((angle_between(r.column(k), w.column(k)) - angle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn center_generation_is_reproducible() {
        let cfg = small_config();
        let a = generate_center(&spec(0.1), &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_center(&spec(0.1), &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|p| p.label == 1).count(), 50);
    }

    #[test]
    fn ground_truth_reproduces_patch() {
        let cfg = small_config();
        for p in generate_center(&spec(0.2), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap() {
            let g = p.truth.unwrap();
            let img = reconstruct(&g.w, &g.h, 1.0, 32, 32).unwrap();
            assert_eq!(img, p.image);
        }
    }

    #[test]
    fn class_one_has_higher_hematoxylin_q99() {
        let cfg = SynthConfig::default();
        let patches = generate_center(&spec(0.0), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let q = |label| -> Vec<f64> {
            patches
                .iter()
                .filter(|p| p.label == label)
                .map(|p| concentration_q99(&p.truth.as_ref().unwrap().h).unwrap()[0])
                .collect()
        };
        let (q0, q1) = (q(0), q(1));
        let ordered = q0.iter().flat_map(|a| q1.iter().map(move |b| a < b)).filter(|&x| x).count();
        let frac = ordered as f64 / (q0.len() * q1.len()) as f64;
        assert!(frac >= 0.99, "{frac}");
    }

    #[test]
    fn macenko_recovers_generating_matrix() {
        let cfg = small_config();
        for angle in [0.0, 0.12, 0.25] {
            let patches = generate_center(&spec(angle), &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            for p in &patches {
                let (w, _) = macenko_decompose(&p.image, &MacenkoParams::default()).unwrap();
                for k in 0..2 {
                    let err = angle_between(w.column(k), spec(angle).w_true.column(k));
                    assert!(err < 2f64.to_radians(), "column {k}: {} deg", err.to_degrees());
                }
            }
        }
    }

    #[test]
    fn null_spread_gives_near_zero_angle_budget() {
        let cfg = SynthConfig {
            train_max_rotation: 0.0,
            heldout_rotation: 0.0,
            train_scale_range: [1.0, 1.0],
            heldout_scale: [1.0, 1.0],
            ..small_config()
        };
        let synth = generate_dataset(&cfg).unwrap();
        assert!(synth.budget.tau_w <= 0.02, "{}", synth.budget.tau_w);
    }

    #[test]
    fn heldout_center_lies_inside_budget() {
        let synth = generate_dataset(&small_config()).unwrap();
        assert!(synth.heldout_alpha <= synth.budget.tau_w);
        let scale = synth.specs.last().unwrap().concentration_scale;
        assert!(scale.iter().all(|s| (s - 1.0).abs() <= synth.budget.tau_h));
        assert_eq!(synth.dataset.split(Split::Test).len(), 24);
        assert_eq!(synth.dataset.split(Split::Train).len(), 72);
    }

    #[test]
    fn requested_heldout_rotation_is_covered() {
        let covered = (0..20)
            .filter(|&seed| {
                let s = generate_dataset(&SynthConfig { seed, ..small_config() }).unwrap();
                s.heldout_alpha_requested < s.budget.tau_w
            })
            .count();
        assert!(covered >= 19, "{covered}/20");
    }

    #[test]
    fn center_ids_only_relabel() {
        let a = generate_dataset(&small_config()).unwrap();
        let swapped = SynthConfig { train_center_ids: vec![1, 0, 2], ..small_config() };
        let b = generate_dataset(&swapped).unwrap();
        for (pa, pb) in a.dataset.patches().iter().zip(b.dataset.patches()) {
            assert_eq!(pa.image, pb.image);
            assert_eq!(pa.label, pb.label);
        }
        assert_eq!(b.dataset.patches()[0].center, 1);
    }

    #[test]
    fn invalid_configs() {
        let one_center = SynthConfig { train_center_ids: vec![0], ..SynthConfig::default() };
        assert!(generate_dataset(&one_center).is_err());
        let dup = SynthConfig { heldout_center_id: 0, ..SynthConfig::default() };
        assert!(generate_dataset(&dup).is_err());
        let tiny = SynthConfig { patch_size: 8, ..SynthConfig::default() };
        assert!(generate_dataset(&tiny).is_err());
    }
}
