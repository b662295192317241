//! A two-layer perceptron on bilinearly downsampled patches, with exact
//! hand-written gradients for both its parameters and its input pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};
use crate::image::RgbImage;
use crate::rng;

pub const CHECKPOINT_VERSION: &str = "toy-mlp-v1";
pub const NUM_CLASSES: usize = 2;

/// Classifier whose loss is differentiable with respect to input pixels.
pub trait DifferentiableModel: Sync {
    /// Cross-entropy loss of `image` against `label`.
    fn loss(&self, image: &RgbImage, label: usize) -> f64;

    /// Gradient of [`loss`](Self::loss) with respect to each interleaved
    /// channel intensity of `image`.
    fn input_gradient(&self, image: &RgbImage, label: usize) -> Vec<f64>;

    fn loss_and_input_gradient(&self, image: &RgbImage, label: usize) -> (f64, Vec<f64>) {
        (self.loss(image, label), self.input_gradient(image, label))
    }
}

/// Hard class decision.
pub trait Classifier {
    fn predict(&self, image: &RgbImage) -> usize;
}

/// Bilinear resampling (half-pixel centers, edge clamped) as a sparse
/// linear map from source pixels to target pixels.
#[derive(Debug, Clone)]
struct Resampler {
    taps: Vec<[(usize, f64); 4]>,
}

impl Resampler {
    fn new(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Self {
        let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
            let scale = src as f64 / dst as f64;
            (0..dst)
                .map(|d| {
                    let x = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let x0 = x.floor() as usize;
                    let x1 = (x0 + 1).min(src - 1);
                    (x0, x1, x - x0 as f64)
                })
                .collect()
        };
        let xs = axis(src_w, dst_w);
        let ys = axis(src_h, dst_h);
        let mut taps = Vec::with_capacity(dst_w * dst_h);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                taps.push([
                    (y0 * src_w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * src_w + x1, (1.0 - fy) * fx),
                    (y1 * src_w + x0, fy * (1.0 - fx)),
                    (y1 * src_w + x1, fy * fx),
                ]);
            }
        }
        Self { taps }
    }

    /// Interleaved RGB in, interleaved RGB out.
    fn forward(&self, src: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.taps.len());
        for taps in &self.taps {
            for c in 0..3 {
                out.push(taps.iter().map(|&(i, w)| w * src[3 * i + c]).sum());
            }
        }
        out
    }

    fn backward(&self, grad_out: &[f64], n_src: usize) -> Vec<f64> {
        let mut grad = vec![0.0; 3 * n_src];
        for (t, taps) in self.taps.iter().enumerate() {
            for c in 0..3 {
                let g = grad_out[3 * t + c];
                for &(i, w) in taps {
                    grad[3 * i + c] += w * g;
                }
            }
        }
        grad
    }
}

/// Hyper-parameters of the outer optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, epochs: 5, batch_size: 32, seed: 0, init_scale: 1.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CasaError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(CasaError::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(CasaError::InvalidConfig(format!("init scale {}", self.init_scale)));
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass.
struct Activations {
    input: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: [f64; NUM_CLASSES],
}

/// `logits = W2 relu(W1 x + b1) + b2` on a `side x side x 3` input, where `x`
/// is the resampled patch standardized per channel, `(I_c - mean_c) / std_c`.
/// The standardization defaults to `2 I - 1`. Fitting to data re-centers the
/// channel means and keeps the scale, so coherent intensity shifts of the size
/// the stain budget allows stay in a moderate input range.
///
/// Parameters live in one flat vector laid out as `[W1 | b1 | W2 | b2]`, with
/// `W1` of shape `hidden x input_dim` and `W2` of shape `2 x hidden`, both
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    input_height: usize,
    input_width: usize,
    hidden: usize,
    input_mean: [f64; 3],
    input_std: [f64; 3],
    params: Vec<f64>,
}

impl MlpClassifier {
    /// Uniform `+-scale / sqrt(fan_in)` initialization; biases start at zero.
    pub fn new(input_height: usize, input_width: usize, hidden: usize, init_scale: f64, seed: u64) -> Self {
        let mut model = Self::zeros(input_height, input_width, hidden);
        let mut rng = rng::stream(seed, &[0x1A17]);
        let in_dim = model.input_dim();
        let (w1, rest) = model.params.split_at_mut(hidden * in_dim);
        let bound1 = init_scale / (in_dim as f64).sqrt();
        w1.iter_mut().for_each(|w| *w = rng.random_range(-bound1..=bound1));
        let w2 = &mut rest[hidden..hidden + NUM_CLASSES * hidden];
        let bound2 = init_scale / (hidden as f64).sqrt();
        w2.iter_mut().for_each(|w| *w = rng.random_range(-bound2..=bound2));
        model
    }

    /// Default architecture: 16x16x3 input, 32 hidden units.
    pub fn with_defaults(init_scale: f64, seed: u64) -> Self {
        Self::new(16, 16, 32, init_scale, seed)
    }

    pub fn zeros(input_height: usize, input_width: usize, hidden: usize) -> Self {
        let in_dim = input_height * input_width * 3;
        let n = hidden * in_dim + hidden + NUM_CLASSES * hidden + NUM_CLASSES;
        Self { input_height, input_width, hidden, input_mean: [0.5; 3], input_std: [0.5; 3], params: vec![0.0; n] }
    }

    pub fn input_dim(&self) -> usize {
        self.input_height * self.input_width * 3
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Per-channel `(mean, std)` used to standardize inputs.
    pub fn input_normalization(&self) -> ([f64; 3], [f64; 3]) {
        (self.input_mean, self.input_std)
    }

    /// Sets the per-channel input means to those of the resampled pixels of `images`.
    pub fn fit_input_normalization(&mut self, images: &[&RgbImage]) -> Result<()> {
        if images.is_empty() {
            return Err(CasaError::EmptyInput("normalization images"));
        }
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        for img in images {
            let x = self.resampler(img).forward(img.data());
            for px in x.chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c];
                }
            }
            count += x.len() / 3;
        }
        let n = count as f64;
        for c in 0..3 {
            self.input_mean[c] = sum[c] / n;
        }
        Ok(())
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input_dim();
        let w2 = b1 + self.hidden;
        let b2 = w2 + NUM_CLASSES * self.hidden;
        (b1, w2, b2)
    }

    fn resampler(&self, image: &RgbImage) -> Resampler {
        Resampler::new(image.width(), image.height(), self.input_width, self.input_height)
    }

    fn forward(&self, image: &RgbImage, resampler: &Resampler) -> Activations {
        let in_dim = self.input_dim();
        let (b1_off, w2_off, b2_off) = self.offsets();
        let mut input = resampler.forward(image.data());
        for (i, v) in input.iter_mut().enumerate() {
            *v = (*v - self.input_mean[i % 3]) / self.input_std[i % 3];
        }
        let mut pre = Vec::with_capacity(self.hidden);
        for u in 0..self.hidden {
            let row = &self.params[u * in_dim..(u + 1) * in_dim];
            let z: f64 = row.iter().zip(&input).map(|(w, x)| w * x).sum();
            pre.push(z + self.params[b1_off + u]);
        }
        let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let logits = std::array::from_fn(|c| {
            let row = &self.params[w2_off + c * self.hidden..w2_off + (c + 1) * self.hidden];
            row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>() + self.params[b2_off + c]
        });
        Activations { input, pre, hidden, logits }
    }

    /// Cross-entropy and its gradient with respect to the logits.
    fn softmax_xent(logits: &[f64; NUM_CLASSES], label: usize) -> (f64, [f64; NUM_CLASSES]) {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps = logits.map(|z| (z - m).exp());
        let sum: f64 = exps.iter().sum();
        let loss = m + sum.ln() - logits[label];
        let mut d = exps.map(|e| e / sum);
        d[label] -= 1.0;
        (loss, d)
    }

    pub fn logits(&self, image: &RgbImage) -> [f64; NUM_CLASSES] {
        self.forward(image, &self.resampler(image)).logits
    }

    /// Loss, gradient w.r.t. parameters (accumulated into `grad` with weight
    /// `scale`) and, optionally, gradient w.r.t. the input image.
    fn backward(
        &self,
        image: &RgbImage,
        label: usize,
        param_grad: Option<(&mut [f64], f64)>,
        want_input: bool,
    ) -> (f64, Option<Vec<f64>>) {
        assert!(label < NUM_CLASSES, "label {label} out of range");
        let resampler = self.resampler(image);
        let act = self.forward(image, &resampler);
        let (loss, dlogits) = Self::softmax_xent(&act.logits, label);
        let in_dim = self.input_dim();
        let (b1_off, w2_off, b2_off) = self.offsets();

        let dpre: Vec<f64> = (0..self.hidden)
            .map(|u| {
                if act.pre[u] > 0.0 {
                    (0..NUM_CLASSES).map(|c| self.params[w2_off + c * self.hidden + u] * dlogits[c]).sum()
                } else {
                    0.0
                }
            })
            .collect();

        if let Some((grad, scale)) = param_grad {
            for c in 0..NUM_CLASSES {
                grad[b2_off + c] += scale * dlogits[c];
                for u in 0..self.hidden {
                    grad[w2_off + c * self.hidden + u] += scale * dlogits[c] * act.hidden[u];
                }
            }
            for u in 0..self.hidden {
                if dpre[u] == 0.0 {
                    continue;
                }
                grad[b1_off + u] += scale * dpre[u];
                let g = scale * dpre[u];
                let row = &mut grad[u * in_dim..(u + 1) * in_dim];
                for (w, x) in row.iter_mut().zip(&act.input) {
                    *w += g * x;
                }
            }
        }

        let input_grad = want_input.then(|| {
            let mut dx = vec![0.0; in_dim];
            for u in 0..self.hidden {
                if dpre[u] == 0.0 {
                    continue;
                }
                let row = &self.params[u * in_dim..(u + 1) * in_dim];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += dpre[u] * w;
                }
            }
            for (i, d) in dx.iter_mut().enumerate() {
                *d /= self.input_std[i % 3];
            }
            resampler.backward(&dx, image.n_pixels())
        });
        (loss, input_grad)
    }

    /// Mean batch loss and its gradient with respect to all parameters.
    pub fn parameter_gradient(&self, images: &[&RgbImage], labels: &[usize]) -> (f64, Vec<f64>) {
        assert_eq!(images.len(), labels.len());
        assert!(!images.is_empty(), "empty batch");
        let scale = 1.0 / images.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for (img, &y) in images.iter().zip(labels) {
            let (loss, _) = self.backward(img, y, Some((&mut grad, scale)), false);
            total += loss;
        }
        (total / images.len() as f64, grad)
    }

    /// One SGD step on the mean batch loss; returns the loss before the step.
    pub fn param_step(&mut self, images: &[&RgbImage], labels: &[usize], lr: f64) -> f64 {
        let (loss, grad) = self.parameter_gradient(images, labels);
        if lr != 0.0 {
            for (p, g) in self.params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
        }
        loss
    }

    /// Mean loss over a batch, summed in order.
    pub fn batch_loss(&self, images: &[&RgbImage], labels: &[usize]) -> f64 {
        let total: f64 = images.iter().zip(labels).map(|(img, &y)| self.loss(img, y)).sum();
        total / images.len() as f64
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let in_dim = self.input_dim();
        let (b1, w2, b2) = self.offsets();
        Checkpoint {
            version: CHECKPOINT_VERSION.into(),
            input_height: self.input_height,
            input_width: self.input_width,
            channels: 3,
            hidden: self.hidden,
            classes: NUM_CLASSES,
            input_mean: self.input_mean,
            input_std: self.input_std,
            w1: Tensor { shape: vec![self.hidden, in_dim], data: self.params[..b1].to_vec() },
            b1: Tensor { shape: vec![self.hidden], data: self.params[b1..w2].to_vec() },
            w2: Tensor { shape: vec![NUM_CLASSES, self.hidden], data: self.params[w2..b2].to_vec() },
            b2: Tensor { shape: vec![NUM_CLASSES], data: self.params[b2..].to_vec() },
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(CasaError::InvalidConfig(format!("unsupported checkpoint version {:?}", ck.version)));
        }
        if ck.channels != 3 || ck.classes != NUM_CLASSES {
            return Err(CasaError::InvalidConfig("checkpoint must have 3 channels and 2 classes".into()));
        }
        let mut model = Self::zeros(ck.input_height, ck.input_width, ck.hidden);
        let in_dim = model.input_dim();
        let expected = [
            (&ck.w1, vec![ck.hidden, in_dim]),
            (&ck.b1, vec![ck.hidden]),
            (&ck.w2, vec![NUM_CLASSES, ck.hidden]),
            (&ck.b2, vec![NUM_CLASSES]),
        ];
        let mut params = Vec::with_capacity(model.params.len());
        for (tensor, shape) in expected {
            if tensor.shape != shape || tensor.data.len() != shape.iter().product::<usize>() {
                return Err(CasaError::InvalidConfig(format!(
                    "tensor shape {:?} (len {}) does not match {:?}",
                    tensor.shape,
                    tensor.data.len(),
                    shape
                )));
            }
            params.extend_from_slice(&tensor.data);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CasaError::InvalidConfig("checkpoint has non-finite parameters".into()));
        }
        if ck.input_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || ck.input_mean.iter().any(|m| !m.is_finite()) {
            return Err(CasaError::InvalidConfig("checkpoint has an invalid input normalization".into()));
        }
        model.input_mean = ck.input_mean;
        model.input_std = ck.input_std;
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file)?;
        Self::from_checkpoint(&ck)
    }
}

impl DifferentiableModel for MlpClassifier {
    fn loss(&self, image: &RgbImage, label: usize) -> f64 {
        Self::softmax_xent(&self.logits(image), label).0
    }

    fn input_gradient(&self, image: &RgbImage, label: usize) -> Vec<f64> {
        self.backward(image, label, None, true).1.expect("requested")
    }

    fn loss_and_input_gradient(&self, image: &RgbImage, label: usize) -> (f64, Vec<f64>) {
        let (loss, grad) = self.backward(image, label, None, true);
        (loss, grad.expect("requested"))
    }
}

impl Classifier for MlpClassifier {
    fn predict(&self, image: &RgbImage) -> usize {
        let logits = self.logits(image);
        usize::from(logits[1] > logits[0])
    }
}

/// A shaped, row-major array in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk JSON form of [`MlpClassifier`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub input_height: usize,
    pub input_width: usize,
    pub channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
        let data = (0..w * h * 3).map(|_| rng.random_range(0.05..0.95)).collect();
        RgbImage::new(w, h, data).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn zero_network_has_uniform_loss_and_no_input_gradient() {
        let model = MlpClassifier::zeros(16, 16, 32);
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(0), 32, 32);
        assert!((model.loss(&img, 0) - 2f64.ln()).abs() < 1e-15);
        assert!(model.input_gradient(&img, 1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_vanishes_as_margin_grows() {
        let img = RgbImage::filled(16, 16, [0.5, 0.5, 0.5]).unwrap();
        let mut prev = f64::INFINITY;
        for margin in [2.0, 4.0, 8.0] {
            let mut model = MlpClassifier::zeros(16, 16, 4);
            let (_, _, b2) = model.offsets();
            model.params[b2] = margin;
            let loss = model.loss(&img, 0);
            assert!(loss < prev);
            assert!((loss - (1.0 + (-margin).exp()).ln()).abs() < 1e-15);
            prev = loss;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = MlpClassifier::with_defaults(1.0, 3);
        let b = MlpClassifier::with_defaults(1.0, 3);
        assert_eq!(a, b);
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(1), 32, 32);
        assert_eq!(a.loss(&img, 1).to_bits(), b.loss(&img, 1).to_bits());
        assert_ne!(a, MlpClassifier::with_defaults(1.0, 4));
    }

    #[test]
    fn downsampling_by_two_is_box_average() {
        let r = Resampler::new(4, 4, 2, 2);
        let src: Vec<f64> = (0..48).map(|v| v as f64).collect();
        let out = r.forward(&src);
        // Output pixel 0 averages source pixels 0, 1, 4, 5.
        for c in 0..3 {
            let expect = (src[c] + src[3 + c] + src[12 + c] + src[15 + c]) / 4.0;
            assert!((out[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = MlpClassifier::with_defaults(1.0, 5);
        let img = random_image(&mut rng, 32, 32);
        let grad = model.input_gradient(&img, 1);
        let h = 1e-5;
        for _ in 0..20 {
            let idx = rng.random_range(0..img.data().len());
            let mut plus = img.data().to_vec();
            let mut minus = img.data().to_vec();
            plus[idx] += h;
            minus[idx] -= h;
            let lp = model.loss(&RgbImage::new(32, 32, plus).unwrap(), 1);
            let lm = model.loss(&RgbImage::new(32, 32, minus).unwrap(), 1);
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_err(grad[idx], fd) <= 1e-4, "{} vs {fd}", grad[idx]);
        }
    }

    #[test]
    fn directional_derivative_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = MlpClassifier::with_defaults(1.0, 9);
        let img = random_image(&mut rng, 24, 20);
        let dir: Vec<f64> = (0..img.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = model.input_gradient(&img, 0);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let h = 1e-5;
        let shifted = |s: f64| {
            let data = img.data().iter().zip(&dir).map(|(x, d)| x + s * d).collect();
            model.loss(&RgbImage::new(24, 20, data).unwrap(), 0)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        assert!(rel_err(analytic, fd) <= 1e-4, "{analytic} vs {fd}");
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = MlpClassifier::new(8, 8, 6, 1.0, 2);
        let imgs: Vec<RgbImage> = (0..3).map(|_| random_image(&mut rng, 16, 16)).collect();
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let labels = [0, 1, 1];
        let (_, grad) = model.parameter_gradient(&refs, &labels);
        let h = 1e-5;
        for _ in 0..40 {
            let i = rng.random_range(0..model.params.len());
            let mut p = model.clone();
            p.params[i] += h;
            let lp = p.batch_loss(&refs, &labels);
            p.params[i] -= 2.0 * h;
            let lm = p.batch_loss(&refs, &labels);
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_err(grad[i], fd) <= 1e-4, "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = MlpClassifier::with_defaults(1.0, 1);
        let before = model.clone();
        let img = random_image(&mut rng, 32, 32);
        model.param_step(&[&img], &[1], 0.0);
        assert_eq!(model, before);
    }

    #[test]
    fn separable_batch_is_fit() {
        let dark = RgbImage::filled(16, 16, [0.2, 0.3, 0.4]).unwrap();
        let light = RgbImage::filled(16, 16, [0.8, 0.8, 0.9]).unwrap();
        let mut model = MlpClassifier::with_defaults(1.0, 12);
        let imgs = [&dark, &light, &dark, &light];
        let labels = [1, 0, 1, 0];
        for _ in 0..200 {
            model.param_step(&imgs, &labels, 0.05);
        }
        assert!(model.batch_loss(&imgs, &labels) < 0.1);
    }

    #[test]
    fn small_steps_descend() {
        let mut failures = 0;
        for trial in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let mut model = MlpClassifier::with_defaults(1.0, trial);
            let imgs: Vec<RgbImage> = (0..4).map(|_| random_image(&mut rng, 16, 16)).collect();
            let refs: Vec<&RgbImage> = imgs.iter().collect();
            let labels = [0, 1, 0, 1];
            let before = model.param_step(&refs, &labels, 1e-3);
            if model.batch_loss(&refs, &labels) > before {
                failures += 1;
            }
        }
        assert!(failures <= 2, "{failures} ascent steps");
    }

    #[test]
    fn batch_loss_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = MlpClassifier::with_defaults(1.0, 31);
        let imgs: Vec<RgbImage> = (0..5).map(|_| random_image(&mut rng, 16, 16)).collect();
        let labels = [0, 1, 1, 0, 1];
        let fwd: Vec<&RgbImage> = imgs.iter().collect();
        let rev: Vec<&RgbImage> = imgs.iter().rev().collect();
        let rev_labels: Vec<usize> = labels.iter().rev().copied().collect();
        let a = model.batch_loss(&fwd, &labels);
        let b = model.batch_loss(&rev, &rev_labels);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn fitted_normalization_centers_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<RgbImage> = (0..4).map(|_| random_image(&mut rng, 32, 32)).collect();
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let mut model = MlpClassifier::with_defaults(1.0, 0);
        model.fit_input_normalization(&refs).unwrap();
        assert_eq!(model.input_normalization().1, [0.5; 3]);
        let mut sums = [0.0; 3];
        let mut n = 0.0;
        for img in &imgs {
            let act = model.forward(img, &model.resampler(img));
            for px in act.input.chunks_exact(3) {
                for c in 0..3 {
                    sums[c] += px[c];
                }
                n += 1.0;
            }
        }
        for s in sums {
            assert!((s / n).abs() < 1e-9);
        }
    }

    #[test]
    fn input_gradient_with_fitted_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = random_image(&mut rng, 32, 32);
        let mut model = MlpClassifier::with_defaults(1.0, 6);
        model.fit_input_normalization(&[&img]).unwrap();
        let grad = model.input_gradient(&img, 0);
        let h = 1e-5;
        for _ in 0..20 {
            let idx = rng.random_range(0..img.data().len());
            let mut plus = img.data().to_vec();
            let mut minus = img.data().to_vec();
            plus[idx] += h;
            minus[idx] -= h;
            let fd = (model.loss(&RgbImage::new(32, 32, plus).unwrap(), 0)
                - model.loss(&RgbImage::new(32, 32, minus).unwrap(), 0))
                / (2.0 * h);
            assert!(rel_err(grad[idx], fd) <= 1e-4, "{} vs {fd}", grad[idx]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = MlpClassifier::with_defaults(1.0, 77);
        model.input_mean = [0.7, 0.6, 0.8];
        model.input_std = [0.1, 0.2, 0.05];
        let json = serde_json::to_string(&model.to_checkpoint()).unwrap();
        assert!(json.contains("\"version\":\"toy-mlp-v1\""));
        let ck: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(MlpClassifier::from_checkpoint(&ck).unwrap(), model);

        let mut bad = ck.clone();
        bad.w2.shape = vec![3, 32];
        assert!(MlpClassifier::from_checkpoint(&bad).is_err());
        bad = ck;
        bad.version = "other".into();
        assert!(MlpClassifier::from_checkpoint(&bad).is_err());
    }
}
