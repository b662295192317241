//! Min-max training with adversarial stain perturbations, the ERM and
//! random-augmentation baselines, and group-wise evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{pgd_attack, PgdConfig, StainTarget};
use crate::calibration::StainBudget;
use crate::error::{CasaError, Result};
use crate::image::RgbImage;
use crate::model::{Classifier, DifferentiableModel, MlpClassifier};
use crate::perturbation::{apply_perturbation, sample_random_perturbation, StainPerturbation};
use crate::rng;
use crate::stain::{macenko_decompose, ConcentrationMap, MacenkoParams, StainMatrix};

pub use crate::model::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Stain matrix and concentrations a patch was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub w: StainMatrix,
    pub h: ConcentrationMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: RgbImage,
    pub label: usize,
    pub center: u32,
    pub truth: Option<GroundTruth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CenterInfo {
    pub id: u32,
    pub split: Split,
}

/// Labelled patches from a set of centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    patches: Vec<Patch>,
    centers: Vec<CenterInfo>,
}

impl Dataset {
    pub fn new(patches: Vec<Patch>, centers: Vec<CenterInfo>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &centers {
            if !seen.insert(c.id) {
                return Err(CasaError::InvalidConfig(format!("duplicate center id {}", c.id)));
            }
        }
        for p in &patches {
            if p.label > 1 {
                return Err(CasaError::InvalidConfig(format!("label {} is not 0 or 1", p.label)));
            }
            if !seen.contains(&p.center) {
                return Err(CasaError::InvalidConfig(format!("patch from unknown center {}", p.center)));
            }
        }
        Ok(Self { patches, centers })
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn centers(&self) -> &[CenterInfo] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.patches.iter().map(|p| p.label).collect()
    }

    fn filter_centers(&self, keep: impl Fn(&CenterInfo) -> bool) -> Self {
        let centers: Vec<CenterInfo> = self.centers.iter().copied().filter(|c| keep(c)).collect();
        let ids: Vec<u32> = centers.iter().map(|c| c.id).collect();
        let patches = self.patches.iter().filter(|p| ids.contains(&p.center)).cloned().collect();
        Self { patches, centers }
    }

    /// Centers tagged `split` with their patches.
    pub fn split(&self, split: Split) -> Self {
        self.filter_centers(|c| c.split == split)
    }

    pub fn center(&self, id: u32) -> Self {
        self.filter_centers(|c| c.id == id)
    }
}

/// Per-epoch training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss on the unperturbed images, before each batch update.
    pub clean_loss: f64,
    /// Mean loss on the images actually trained on, before each update.
    pub adv_loss: f64,
    /// Clean accuracy on the training set after the epoch.
    pub train_acc: f64,
    pub decomposition_failures: usize,
    pub attack_failures: usize,
    pub infeasible_perturbations: usize,
    pub max_angle: f64,
    pub max_abs_delta_h: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Pre-step loss of every batch update, in order.
    pub batch_losses: Vec<f64>,
    /// `(clean, trained-on)` mean loss of every batch, in order.
    pub batch_pairs: Vec<(f64, f64)>,
}

#[derive(Clone, Copy)]
enum Augment<'a> {
    None,
    Adversarial(&'a StainBudget, &'a PgdConfig),
    Random(&'a StainBudget),
}

/// What one image contributes to a batch.
struct Prepared {
    /// `None` means train on the original image.
    image: Option<RgbImage>,
    clean_loss: f64,
    perturbation: Option<StainPerturbation>,
    attack_failed: bool,
}

type Decomposition = Option<(StainMatrix, ConcentrationMap)>;

fn decompose_all(dataset: &Dataset) -> Result<Vec<Decomposition>> {
    let params = MacenkoParams::default();
    dataset
        .patches
        .par_iter()
        .map(|p| match macenko_decompose(&p.image, &params) {
            Ok(d) => Ok(Some(d)),
            Err(CasaError::NoTissue { .. } | CasaError::DegenerateStains(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

fn prepare(
    model: &MlpClassifier,
    patch: &Patch,
    decomposition: &Decomposition,
    augment: Augment<'_>,
    seed: u64,
    epoch: usize,
    index: usize,
) -> Prepared {
    let clean_loss = model.loss(&patch.image, patch.label);
    let clean = |attack_failed| Prepared {
        image: None,
        clean_loss,
        perturbation: None,
        attack_failed,
    };
    let Some((w_ref, h0)) = decomposition else {
        return clean(false);
    };
    let target = StainTarget {
        w_ref,
        h0,
        i0: patch.image.i0(),
        width: patch.image.width(),
        height: patch.image.height(),
    };
    match augment {
        Augment::None => clean(false),
        Augment::Adversarial(budget, pgd) => {
            let cfg = PgdConfig { seed: rng::derive_seed(pgd.seed, &[epoch as u64, index as u64]), ..*pgd };
            match pgd_attack(model, &target, patch.label, budget, &cfg) {
                Err(_) => clean(true),
                Ok(res) if res.perturbation.is_zero() => clean(false),
                Ok(res) => {
                    let loss = model.loss(&res.adversarial_image, patch.label);
                    // The unperturbed image is itself feasible; keep it when
                    // it is the worse of the two.
                    if loss < clean_loss {
                        Prepared { perturbation: Some(res.perturbation), ..clean(false) }
                    } else {
                        Prepared {
                            image: Some(res.adversarial_image),
                            clean_loss,
                            perturbation: Some(res.perturbation),
                            attack_failed: false,
                        }
                    }
                }
            }
        }
        Augment::Random(budget) => {
            let mut rng = rng::stream(seed, &[0xA06, epoch as u64, index as u64]);
            let pert = sample_random_perturbation(w_ref, budget, &mut rng);
            if pert.is_zero() {
                return clean(false);
            }
            match apply_perturbation(w_ref, h0, &pert, target.i0, target.width, target.height) {
                Ok(image) => Prepared { image: Some(image), clean_loss, perturbation: Some(pert), attack_failed: false },
                Err(_) => clean(true),
            }
        }
    }
}

fn train_loop(
    dataset: &Dataset,
    mut model: MlpClassifier,
    augment: Augment<'_>,
    config: &TrainConfig,
) -> Result<(MlpClassifier, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CasaError::EmptyInput("training set"));
    }
    let budget = match augment {
        Augment::None => None,
        Augment::Adversarial(b, pgd) => {
            pgd.validate()?;
            Some(b)
        }
        Augment::Random(b) => Some(b),
    };
    if let Some(b) = budget {
        b.validate()?;
    }
    // Decompositions depend only on the fixed input images, so computing
    // them once gives the same result as recomputing them for every batch.
    let decompositions = match augment {
        Augment::None => vec![None; dataset.len()],
        _ => decompose_all(dataset)?,
    };
    let failures = decompositions.iter().filter(|d| d.is_none()).count();
    let decomposition_failures = if budget.is_some() { failures } else { 0 };

    let n = dataset.len();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ epoch as u64));

        let mut clean_sum = 0.0;
        let mut trained_sum = 0.0;
        let mut attack_failures = 0;
        let mut infeasible = 0;
        let mut max_angle: f64 = 0.0;
        let mut max_dh: f64 = 0.0;

        for batch in order.chunks(config.batch_size) {
            let prepared: Vec<Prepared> = match augment {
                Augment::None => Vec::new(),
                _ => batch
                    .par_iter()
                    .map(|&i| prepare(&model, &dataset.patches[i], &decompositions[i], augment, config.seed, epoch, i))
                    .collect(),
            };
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.patches[i].label).collect();
            let images: Vec<&RgbImage> = if prepared.is_empty() {
                batch.iter().map(|&i| &dataset.patches[i].image).collect()
            } else {
                batch
                    .iter()
                    .zip(&prepared)
                    .map(|(&i, p)| p.image.as_ref().unwrap_or(&dataset.patches[i].image))
                    .collect()
            };
            let step_loss = model.param_step(&images, &labels, config.learning_rate);
            log.batch_losses.push(step_loss);

            let clean_batch = if prepared.is_empty() {
                step_loss
            } else {
                prepared.iter().map(|p| p.clean_loss).sum::<f64>() / batch.len() as f64
            };
            log.batch_pairs.push((clean_batch, step_loss));
            clean_sum += clean_batch * batch.len() as f64;
            trained_sum += step_loss * batch.len() as f64;

            for (p, &i) in prepared.iter().zip(batch) {
                attack_failures += usize::from(p.attack_failed);
                if let (Some(pert), Some((w_ref, _)), Some(b)) = (&p.perturbation, &decompositions[i], budget) {
                    if !pert.is_feasible(w_ref, b) {
                        infeasible += 1;
                    }
                    let angles = pert.column_angles(w_ref);
                    max_angle = max_angle.max(angles[0]).max(angles[1]);
                    max_dh = max_dh.max(pert.delta_h[0].abs()).max(pert.delta_h[1].abs());
                }
            }
        }

        let correct = accuracy(&model, dataset);
        log.epochs.push(EpochLog {
            epoch,
            clean_loss: clean_sum / n as f64,
            adv_loss: trained_sum / n as f64,
            train_acc: correct,
            decomposition_failures,
            attack_failures,
            infeasible_perturbations: infeasible,
            max_angle,
            max_abs_delta_h: max_dh,
        });
    }
    Ok((model, log))
}

fn accuracy<M: Classifier + Sync>(model: &M, dataset: &Dataset) -> f64 {
    let correct: usize = dataset.patches.par_iter().map(|p| usize::from(model.predict(&p.image) == p.label)).sum();
    correct as f64 / dataset.len() as f64
}

/// Plain SGD on the clean images.
pub fn train_erm(dataset: &Dataset, model: MlpClassifier, config: &TrainConfig) -> Result<(MlpClassifier, TrainLog)> {
    train_loop(dataset, model, Augment::None, config)
}

/// Min-max training: every image in every batch is replaced by its PGD
/// worst case within `budget` before the parameter update.
pub fn train_casa(
    dataset: &Dataset,
    model: MlpClassifier,
    budget: &StainBudget,
    pgd: &PgdConfig,
    config: &TrainConfig,
) -> Result<(MlpClassifier, TrainLog)> {
    train_loop(dataset, model, Augment::Adversarial(budget, pgd), config)
}

/// Like [`train_casa`] with uniformly sampled feasible perturbations.
pub fn train_random_aug(
    dataset: &Dataset,
    model: MlpClassifier,
    budget: &StainBudget,
    config: &TrainConfig,
) -> Result<(MlpClassifier, TrainLog)> {
    train_loop(dataset, model, Augment::Random(budget), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub center: u32,
    pub label: usize,
    pub size: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Unweighted mean of the per-group accuracies.
    pub acc_avg: f64,
    /// Lowest per-group accuracy.
    pub acc_wg: f64,
    pub per_group: Vec<GroupAccuracy>,
}

/// Accuracy per (center, label) group of `dataset` for the given predictions.
pub fn evaluate_predictions(dataset: &Dataset, predictions: &[usize]) -> Result<EvalReport> {
    if predictions.len() != dataset.len() {
        return Err(CasaError::DimensionMismatch { expected: dataset.len(), actual: predictions.len() });
    }
    if dataset.centers.is_empty() {
        return Err(CasaError::EmptyInput("evaluation centers"));
    }
    let mut groups: BTreeMap<(u32, usize), (usize, usize)> = BTreeMap::new();
    for c in &dataset.centers {
        for label in 0..2 {
            groups.insert((c.id, label), (0, 0));
        }
    }
    for (p, &pred) in dataset.patches.iter().zip(predictions) {
        let g = groups.get_mut(&(p.center, p.label)).expect("validated center");
        g.0 += 1;
        g.1 += usize::from(pred == p.label);
    }
    let mut per_group = Vec::with_capacity(groups.len());
    for ((center, label), (size, correct)) in groups {
        if size == 0 {
            return Err(CasaError::EmptyGroup { center, label });
        }
        per_group.push(GroupAccuracy { center, label, size, correct, accuracy: correct as f64 / size as f64 });
    }
    let acc_avg = per_group.iter().map(|g| g.accuracy).sum::<f64>() / per_group.len() as f64;
    let acc_wg = per_group.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min);
    Ok(EvalReport { acc_avg, acc_wg, per_group })
}

pub fn evaluate<M: Classifier + Sync>(model: &M, dataset: &Dataset) -> Result<EvalReport> {
    let predictions: Vec<usize> = dataset.patches.par_iter().map(|p| model.predict(&p.image)).collect();
    evaluate_predictions(dataset, &predictions)
}
