//! Projected gradient ascent over stain perturbations.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::calibration::StainBudget;
use crate::error::{CasaError, Result};
use crate::image::RgbImage;
use crate::model::DifferentiableModel;
use crate::perturbation::{
    apply_perturbation, perturbed_matrix, project_cap, project_delta_h, sample_random_perturbation, PerturbationDocument,
    ProjectionMode, StainPerturbation,
};
use crate::rng;
use crate::stain::{ConcentrationMap, StainMatrix};

/// Where the ascent starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PgdInit {
    #[default]
    Zero,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub k_steps: usize,
    /// Radians per step; `None` means `2.5 * tau_w / k_steps`.
    pub step_w: Option<f64>,
    /// Per-step change of each concentration offset; `None` means
    /// `2.5 * tau_h / k_steps`.
    pub step_h: Option<f64>,
    pub init: PgdInit,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self { k_steps: 5, step_w: None, step_h: None, init: PgdInit::Zero, seed: 0 }
    }
}

impl PgdConfig {
    pub fn with_steps(k_steps: usize) -> Self {
        Self { k_steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, step) in [("step_w", self.step_w), ("step_h", self.step_h)] {
            if let Some(s) = step {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(CasaError::InvalidConfig(format!("{name} must be positive, got {s}")));
                }
            }
        }
        Ok(())
    }

    /// Effective `(step_w, step_h)` for `budget`.
    pub fn step_sizes(&self, budget: &StainBudget) -> (f64, f64) {
        let k = self.k_steps.max(1) as f64;
        (self.step_w.unwrap_or(2.5 * budget.tau_w / k), self.step_h.unwrap_or(2.5 * budget.tau_h / k))
    }
}

/// The decomposed image being attacked.
#[derive(Debug, Clone, Copy)]
pub struct StainTarget<'a> {
    pub w_ref: &'a StainMatrix,
    pub h0: &'a ConcentrationMap,
    pub i0: f64,
    pub width: usize,
    pub height: usize,
}

impl StainTarget<'_> {
    pub fn render(&self, pert: &StainPerturbation) -> Result<RgbImage> {
        apply_perturbation(self.w_ref, self.h0, pert, self.i0, self.width, self.height)
    }
}

/// Loss gradient with respect to the stain columns and concentration offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationGradient {
    pub w: [Vector3<f64>; 2],
    pub h: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub perturbation: StainPerturbation,
    /// Loss at the initial point and after each step.
    pub loss_trajectory: Vec<f64>,
    pub adversarial_image: RgbImage,
    /// Index into `loss_trajectory` of the returned iterate.
    pub best_step: usize,
}

impl AttackResult {
    pub fn best_loss(&self) -> f64 {
        self.loss_trajectory[self.best_step]
    }

    pub fn to_document(&self) -> AttackDocument {
        AttackDocument {
            perturbation: self.perturbation.to_document(),
            loss_trajectory: self.loss_trajectory.clone(),
            best_step: self.best_step,
            best_loss: self.best_loss(),
        }
    }
}

/// JSON form of [`AttackResult`] without the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackDocument {
    pub perturbation: PerturbationDocument,
    pub loss_trajectory: Vec<f64>,
    pub best_step: usize,
    pub best_loss: f64,
}

/// Chain rule from an image gradient to the perturbed stain matrix `w_pert`
/// and the concentration offsets.
///
/// Channels whose unclamped intensity `i0 * exp(-a)` exceeds 1 are treated
/// as saturated and contribute nothing.
pub fn grad_wrt_perturbation(
    input_grad: &[f64],
    w_pert: &StainMatrix,
    h0: &ConcentrationMap,
    delta_h: [f64; 2],
    i0: f64,
) -> Result<PerturbationGradient> {
    if input_grad.len() != 3 * h0.n_pixels() {
        return Err(CasaError::DimensionMismatch { expected: 3 * h0.n_pixels(), actual: input_grad.len() });
    }
    let mut gw = [Vector3::zeros(); 2];
    let mut gh = [0.0; 2];
    for j in 0..h0.n_pixels() {
        let base = h0.pixel(j);
        let h = [base[0] * (1.0 + delta_h[0]), base[1] * (1.0 + delta_h[1])];
        let a = w_pert.apply(h);
        // dL/da_c = g_c * (-I_c)
        let mut dl_da = Vector3::zeros();
        for c in 0..3 {
            let intensity = i0 * (-a[c]).exp();
            if intensity <= 1.0 {
                dl_da[c] = -input_grad[3 * j + c] * intensity;
            }
        }
        for k in 0..2 {
            gw[k] += dl_da * h[k];
            gh[k] += dl_da.dot(w_pert.column(k)) * base[k];
        }
    }
    Ok(PerturbationGradient { w: gw, h: gh })
}

/// Pulls a gradient with respect to the normalized column `w_ref_k +
/// delta_w_k` back to the additive offset `delta_w_k`.
pub fn ambient_delta_w_grad(w_ref: &StainMatrix, delta_w: &[Vector3<f64>; 2], grad_w: &[Vector3<f64>; 2]) -> [Vector3<f64>; 2] {
    std::array::from_fn(|k| {
        let v = w_ref.column(k) + delta_w[k];
        let norm = v.norm();
        let u = v / norm;
        (grad_w[k] - u * u.dot(&grad_w[k])) / norm
    })
}

/// Analytic gradient of the end-to-end loss with respect to the additive
/// offsets of `pert`, away from the octant boundary.
pub fn perturbation_gradient<M: DifferentiableModel + ?Sized>(
    model: &M,
    target: &StainTarget<'_>,
    pert: &StainPerturbation,
    label: usize,
) -> Result<PerturbationGradient> {
    let image = target.render(pert)?;
    let w_pert = perturbed_matrix(target.w_ref, &pert.delta_w)?;
    let input_grad = model.input_gradient(&image, label);
    let g = grad_wrt_perturbation(&input_grad, &w_pert, target.h0, pert.delta_h, target.i0)?;
    Ok(PerturbationGradient { w: ambient_delta_w_grad(target.w_ref, &pert.delta_w, &g.w), h: g.h })
}

/// Central differences of the loss with respect to every component of the
/// additive column offsets and the concentration offsets.
pub fn finite_diff_grad<M: DifferentiableModel + ?Sized>(
    model: &M,
    target: &StainTarget<'_>,
    pert: &StainPerturbation,
    label: usize,
    fd_step: f64,
) -> Result<PerturbationGradient> {
    if !(fd_step > 0.0) {
        return Err(CasaError::InvalidConfig(format!("finite-difference step {fd_step}")));
    }
    let loss_at = |p: &StainPerturbation| -> Result<f64> { Ok(model.loss(&target.render(p)?, label)) };
    let mut out = PerturbationGradient { w: [Vector3::zeros(); 2], h: [0.0; 2] };
    for k in 0..2 {
        for c in 0..3 {
            let mut plus = *pert;
            let mut minus = *pert;
            plus.delta_w[k][c] += fd_step;
            minus.delta_w[k][c] -= fd_step;
            out.w[k][c] = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * fd_step);
        }
        let mut plus = *pert;
        let mut minus = *pert;
        plus.delta_h[k] += fd_step;
        minus.delta_h[k] -= fd_step;
        out.h[k] = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * fd_step);
    }
    Ok(out)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Moves the unit vector `u` by `step` radians along the tangent part of
/// `grad`, then back into the non-negative octant and the cap.
fn ascend_column(w_ref_col: &Vector3<f64>, u: &Vector3<f64>, grad: &Vector3<f64>, step: f64, tau_w: f64) -> Result<Vector3<f64>> {
    let tangent = grad - u * u.dot(grad);
    let tn = tangent.norm();
    if !(tn > 1e-300) || !tn.is_finite() {
        return Ok(*u);
    }
    let moved = u * step.cos() + tangent * (step.sin() / tn);
    let clamped = moved.map(|x| x.max(0.0));
    let norm = clamped.norm();
    if norm < 1e-9 {
        return Ok(*u);
    }
    // Both ends of the cap geodesic are non-negative, so the projection
    // stays in the octant.
    project_cap(w_ref_col, &(clamped / norm), tau_w)
}

/// K-step projected gradient ascent on the loss of `model` over the
/// perturbations allowed by `budget`; returns the best iterate seen.
pub fn pgd_attack<M: DifferentiableModel + ?Sized>(
    model: &M,
    target: &StainTarget<'_>,
    label: usize,
    budget: &StainBudget,
    config: &PgdConfig,
) -> Result<AttackResult> {
    config.validate()?;
    budget.validate()?;
    let w_ref = target.w_ref;
    let (step_w, step_h) = config.step_sizes(budget);

    let mut pert = match config.init {
        PgdInit::Zero => StainPerturbation::zero(),
        PgdInit::Random => {
            let mut rng = rng::stream(config.seed, &[0xA77A]);
            sample_random_perturbation(w_ref, budget, &mut rng)
        }
    };
    pert.delta_h = project_delta_h(pert.delta_h, budget.tau_h, ProjectionMode::Intermediate);

    let mut image = target.render(&pert)?;
    let (mut loss, mut input_grad) = if config.k_steps > 0 {
        model.loss_and_input_gradient(&image, label)
    } else {
        (model.loss(&image, label), Vec::new())
    };
    let mut trajectory = Vec::with_capacity(config.k_steps + 1);
    trajectory.push(loss);
    let mut best = (0usize, pert, image.clone());

    for step in 1..=config.k_steps {
        let w_pert = perturbed_matrix(w_ref, &pert.delta_w)?;
        let g = grad_wrt_perturbation(&input_grad, &w_pert, target.h0, pert.delta_h, target.i0)?;

        let mut cols = *w_pert.columns();
        if budget.tau_w > 0.0 {
            for k in 0..2 {
                cols[k] = ascend_column(w_ref.column(k), &cols[k], &g.w[k], step_w, budget.tau_w)?;
            }
        }
        let mut delta_h = pert.delta_h;
        if budget.tau_h > 0.0 {
            for k in 0..2 {
                delta_h[k] += step_h * sign(g.h[k]);
            }
            delta_h = project_delta_h(delta_h, budget.tau_h, ProjectionMode::Intermediate);
        }
        pert = StainPerturbation::from_columns(w_ref, &cols, delta_h);

        image = target.render(&pert)?;
        if step < config.k_steps {
            (loss, input_grad) = model.loss_and_input_gradient(&image, label);
        } else {
            loss = model.loss(&image, label);
        }
        trajectory.push(loss);
        if loss > trajectory[best.0] {
            best = (step, pert, image.clone());
        }
    }

    let (best_step, mut perturbation, mut adversarial_image) = best;
    let final_h = project_delta_h(perturbation.delta_h, budget.tau_h, ProjectionMode::Final);
    if final_h != perturbation.delta_h {
        perturbation.delta_h = final_h;
        adversarial_image = target.render(&perturbation)?;
    }
    Ok(AttackResult { perturbation, loss_trajectory: trajectory, adversarial_image, best_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpClassifier;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `L = g . I`, linear in the image.
    struct LinearLoss {
        g: Vec<f64>,
    }

    impl DifferentiableModel for LinearLoss {
        fn loss(&self, image: &RgbImage, _label: usize) -> f64 {
            image.data().iter().zip(&self.g).map(|(a, b)| a * b).sum()
        }
        fn input_gradient(&self, _image: &RgbImage, _label: usize) -> Vec<f64> {
            self.g.clone()
        }
    }

    struct ConstantLoss;

    impl DifferentiableModel for ConstantLoss {
        fn loss(&self, _image: &RgbImage, _label: usize) -> f64 {
            0.0
        }
        fn input_gradient(&self, image: &RgbImage, _label: usize) -> Vec<f64> {
            vec![0.0; image.data().len()]
        }
    }

    fn random_h(rng: &mut ChaCha8Rng, n: usize) -> ConcentrationMap {
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.2)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.8)).collect();
        ConcentrationMap::new(h, e).unwrap()
    }

    fn random_pert(rng: &mut ChaCha8Rng) -> StainPerturbation {
        StainPerturbation {
            delta_w: std::array::from_fn(|_| Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05))),
            delta_h: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn max_rel_err(a: &PerturbationGradient, b: &PerturbationGradient) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..2 {
            for c in 0..3 {
                worst = worst.max(rel_err(a.w[k][c], b.w[k][c]));
            }
            worst = worst.max(rel_err(a.h[k], b.h[k]));
        }
        worst
    }

    #[test]
    fn zero_input_gradient_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h0 = random_h(&mut rng, 16);
        let g = grad_wrt_perturbation(&[0.0; 48], &StainMatrix::canonical(), &h0, [0.1, -0.1], 1.0).unwrap();
        assert_eq!(g, PerturbationGradient { w: [Vector3::zeros(); 2], h: [0.0; 2] });
    }

    #[test]
    fn zero_concentrations_give_zero() {
        let grad = vec![1.0; 48];
        let g = grad_wrt_perturbation(&grad, &StainMatrix::canonical(), &ConcentrationMap::zeros(16), [0.3, 0.2], 1.0)
            .unwrap();
        assert!(g.w.iter().all(|c| c.norm() == 0.0) && g.h == [0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let h0 = ConcentrationMap::zeros(4);
        let err = grad_wrt_perturbation(&[0.0; 3], &StainMatrix::canonical(), &h0, [0.0; 2], 1.0).unwrap_err();
        assert!(matches!(err, CasaError::DimensionMismatch { expected: 12, actual: 3 }));
    }

    #[test]
    fn analytic_matches_finite_differences_linear_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = StainMatrix::canonical();
        for _ in 0..20 {
            let h0 = random_h(&mut rng, 64);
            let model = LinearLoss { g: (0..192).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let target = StainTarget { w_ref: &w, h0: &h0, i0: 1.0, width: 8, height: 8 };
            let pert = random_pert(&mut rng);
            let analytic = perturbation_gradient(&model, &target, &pert, 0).unwrap();
            let fd = finite_diff_grad(&model, &target, &pert, 0, 1e-5).unwrap();
            assert!(max_rel_err(&analytic, &fd) <= 1e-4, "{analytic:?} vs {fd:?}");
        }
    }

    #[test]
    fn analytic_matches_finite_differences_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = StainMatrix::canonical();
        for seed in 0..10 {
            let model = MlpClassifier::new(4, 4, 8, 1.0, seed);
            let h0 = random_h(&mut rng, 64);
            let target = StainTarget { w_ref: &w, h0: &h0, i0: 1.0, width: 8, height: 8 };
            let pert = random_pert(&mut rng);
            let analytic = perturbation_gradient(&model, &target, &pert, 1).unwrap();
            let fd = finite_diff_grad(&model, &target, &pert, 1, 1e-5).unwrap();
            assert!(max_rel_err(&analytic, &fd) <= 1e-4, "{analytic:?} vs {fd:?}");
        }
    }

    #[test]
    fn saturated_channels_are_ignored() {
        // With i0 = 2 and tiny concentrations every channel is clipped at 1.
        let h0 = ConcentrationMap::new(vec![0.01; 4], vec![0.01; 4]).unwrap();
        let g = grad_wrt_perturbation(&[1.0; 12], &StainMatrix::canonical(), &h0, [0.0; 2], 2.0).unwrap();
        assert_eq!(g.h, [0.0, 0.0]);
    }

    #[test]
    fn constant_loss_has_zero_fd_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = StainMatrix::canonical();
        let h0 = random_h(&mut rng, 4);
        let target = StainTarget { w_ref: &w, h0: &h0, i0: 1.0, width: 2, height: 2 };
        let g = finite_diff_grad(&ConstantLoss, &target, &StainPerturbation::zero(), 0, 1e-5).unwrap();
        assert!(g.w.iter().all(|c| c.norm() == 0.0) && g.h == [0.0, 0.0]);
    }

    #[test]
    fn finite_differences_converge_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = StainMatrix::canonical();
        let h0 = random_h(&mut rng, 16);
        let model = LinearLoss { g: (0..48).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let target = StainTarget { w_ref: &w, h0: &h0, i0: 1.0, width: 4, height: 4 };
        let pert = random_pert(&mut rng);
        let analytic = perturbation_gradient(&model, &target, &pert, 0).unwrap();
        let err = |step: f64| {
            let fd = finite_diff_grad(&model, &target, &pert, 0, step).unwrap();
            (0..2).map(|k| (fd.h[k] - analytic.h[k]).abs() + (fd.w[k] - analytic.w[k]).norm()).sum::<f64>()
        };
        let ratio = err(2e-2) / err(1e-2);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_budget_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = StainMatrix::canonical();
        let h0 = random_h(&mut rng, 64);
        let target = StainTarget { w_ref: &w, h0: &h0, i0: 1.0, width: 8, height: 8 };
        let model = MlpClassifier::new(4, 4, 8, 1.0, 0);
        let res = pgd_attack(&model, &target, 0, &StainBudget::zero(), &PgdConfig::default()).unwrap();
        assert!(res.perturbation.is_zero());
        assert_eq!(res.loss_trajectory.len(), 6);
        assert!(res.loss_trajectory.iter().all(|&l| l == res.loss_trajectory[0]));
        assert_eq!(res.adversarial_image, target.render(&StainPerturbation::zero()).unwrap());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = StainMatrix::canonical();
        let h0 = random_h(&mut rng, 16);
        let target = StainTarget { w_ref: &w, h0: &h0, i0: 1.0, width: 4, height: 4 };
        let model = MlpClassifier::new(4, 4, 8, 1.0, 0);
        let budget = StainBudget::fixed(0.1, 0.2).unwrap();
        let res = pgd_attack(&model, &target, 0, &budget, &PgdConfig::with_steps(0)).unwrap();
        assert_eq!(res.loss_trajectory.len(), 1);
        assert!(res.perturbation.is_zero());

        let cfg = PgdConfig { k_steps: 0, init: PgdInit::Random, seed: 4, ..PgdConfig::default() };
        let res = pgd_attack(&model, &target, 0, &budget, &cfg).unwrap();
        assert!(!res.perturbation.is_zero());
        assert!(res.perturbation.is_feasible(&w, &budget));
    }

    #[test]
    fn single_pixel_linear_loss_reaches_grid_optimum() {
        let w = StainMatrix::canonical();
        let h0 = ConcentrationMap::new(vec![0.8], vec![0.5]).unwrap();
        let target = StainTarget { w_ref: &w, h0: &h0, i0: 1.0, width: 1, height: 1 };
        let tau_h = 0.3;
        let budget = StainBudget::fixed(0.0, tau_h).unwrap();
        // Sign-definite weights make the loss monotone in each offset.
        for g in [[-1.0, -0.5, -0.2], [1.0, 0.2, 0.7], [-0.3, -1.0, -0.9], [0.05, 0.9, 0.4]] {
            let model = LinearLoss { g: g.to_vec() };
            let mut grid_max = f64::NEG_INFINITY;
            let mut argmax = (0, 0);
            for a in 0..100 {
                for b in 0..100 {
                    let d = [-tau_h + 2.0 * tau_h * a as f64 / 99.0, -tau_h + 2.0 * tau_h * b as f64 / 99.0];
                    let p = StainPerturbation { delta_w: [Vector3::zeros(); 2], delta_h: d };
                    let loss = model.loss(&target.render(&p).unwrap(), 0);
                    if loss > grid_max {
                        grid_max = loss;
                        argmax = (a, b);
                    }
                }
            }
            assert!([0, 99].contains(&argmax.0) && [0, 99].contains(&argmax.1));
            let res = pgd_attack(&model, &target, 0, &budget, &PgdConfig::default()).unwrap();
            assert!(res.best_loss() >= grid_max - 0.01 * grid_max.abs(), "{} vs {grid_max}", res.best_loss());
        }
    }

    #[test]
    fn iterates_are_feasible_and_dominate_clean_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = StainMatrix::canonical();
        let budget = StainBudget::fixed(0.2, 0.3).unwrap();
        for seed in 0..20 {
            let model = MlpClassifier::new(4, 4, 8, 1.0, seed);
            let h0 = random_h(&mut rng, 64);
            let target = StainTarget { w_ref: &w, h0: &h0, i0: 1.0, width: 8, height: 8 };
            let res = pgd_attack(&model, &target, (seed % 2) as usize, &budget, &PgdConfig::default()).unwrap();
            assert!(res.perturbation.is_feasible(&w, &budget));
            assert!(res.best_loss() >= res.loss_trajectory[0]);
            assert_eq!(res.adversarial_image, target.render(&res.perturbation).unwrap());
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = StainMatrix::canonical();
        let h0 = random_h(&mut rng, 64);
        let target = StainTarget { w_ref: &w, h0: &h0, i0: 1.0, width: 8, height: 8 };
        let model = MlpClassifier::new(4, 4, 8, 1.0, 3);
        let budget = StainBudget::fixed(0.2, 0.3).unwrap();
        let cfg = PgdConfig { init: PgdInit::Random, seed: 11, ..PgdConfig::default() };
        let a = pgd_attack(&model, &target, 1, &budget, &cfg).unwrap();
        let b = pgd_attack(&model, &target, 1, &budget, &cfg).unwrap();
        assert_eq!(a.perturbation, b.perturbation);
        assert_eq!(a.loss_trajectory, b.loss_trajectory);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let cfg = PgdConfig { step_w: Some(0.0), ..PgdConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
