//! Beer-Lambert stain model: stain matrices, concentrations, Macenko
//! estimation, least-squares unmixing and reconstruction.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};
use crate::image::{rgb_to_od, OdImage, RgbImage, OD_MAX};
use crate::linalg::{angle_between, symmetric_eigen3};

/// Minimum angle between the two stain columns.
pub const MIN_COLUMN_SEPARATION: f64 = 1e-3;
const UNIT_NORM_TOL: f64 = 1e-9;

/// Hematoxylin direction before normalization.
pub const CANONICAL_H: [f64; 3] = [0.651, 0.701, 0.290];
/// Eosin direction before normalization.
pub const CANONICAL_E: [f64; 3] = [0.216, 0.801, 0.558];

/// Two unit-norm, non-negative absorbance directions: hematoxylin (column 0)
/// and eosin (column 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix {
    columns: [Vector3<f64>; 2],
}

impl StainMatrix {
    /// Validates and wraps two columns that are already unit-norm.
    pub fn new(h: Vector3<f64>, e: Vector3<f64>) -> Result<Self> {
        for (name, c) in [("H", &h), ("E", &e)] {
            if !c.iter().all(|x| x.is_finite()) {
                return Err(CasaError::InvalidStainMatrix(format!("{name} column is not finite")));
            }
            if (c.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(CasaError::InvalidStainMatrix(format!(
                    "{name} column norm {} is not 1",
                    c.norm()
                )));
            }
            if c.iter().any(|&x| x < 0.0) {
                return Err(CasaError::InvalidStainMatrix(format!("{name} column has a negative component")));
            }
        }
        let sep = angle_between(&h, &e);
        if sep < MIN_COLUMN_SEPARATION {
            return Err(CasaError::InvalidStainMatrix(format!("columns only {sep:e} rad apart")));
        }
        Ok(Self { columns: [h, e] })
    }

    /// Normalizes both directions, then validates.
    pub fn from_directions(h: [f64; 3], e: [f64; 3]) -> Result<Self> {
        let h = Vector3::from(h);
        let e = Vector3::from(e);
        if h.norm() < 1e-12 || e.norm() < 1e-12 {
            return Err(CasaError::InvalidStainMatrix("zero column".into()));
        }
        Self::new(h.normalize(), e.normalize())
    }

    /// The conventional H&E reference with both columns normalized.
    pub fn canonical() -> Self {
        Self::from_directions(CANONICAL_H, CANONICAL_E).expect("canonical stains are valid")
    }

    pub fn column(&self, k: usize) -> &Vector3<f64> {
        &self.columns[k]
    }

    pub fn columns(&self) -> &[Vector3<f64>; 2] {
        &self.columns
    }

    pub fn hematoxylin(&self) -> &Vector3<f64> {
        &self.columns[0]
    }

    pub fn eosin(&self) -> &Vector3<f64> {
        &self.columns[1]
    }

    /// Angle between the H and E columns.
    pub fn separation(&self) -> f64 {
        angle_between(&self.columns[0], &self.columns[1])
    }

    /// `W h` for one pixel.
    #[inline]
    pub fn apply(&self, h: [f64; 2]) -> [f64; 3] {
        let [a, b] = self.columns;
        [
            a[0] * h[0] + b[0] * h[1],
            a[1] * h[0] + b[1] * h[1],
            a[2] * h[0] + b[2] * h[1],
        ]
    }

    /// Row-major 3x2 layout.
    pub fn to_rows(&self) -> [[f64; 2]; 3] {
        let [a, b] = self.columns;
        [[a[0], b[0]], [a[1], b[1]], [a[2], b[2]]]
    }

    pub fn from_rows(rows: [[f64; 2]; 3]) -> Result<Self> {
        let h = Vector3::new(rows[0][0], rows[1][0], rows[2][0]);
        let e = Vector3::new(rows[0][1], rows[1][1], rows[2][1]);
        Self::new(h, e)
    }

    pub fn to_document(&self) -> StainMatrixDocument {
        StainMatrixDocument { w: self.to_rows(), order: ["H".into(), "E".into()] }
    }
}

/// JSON form of a stain matrix: row-major 3x2 with the column order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StainMatrixDocument {
    pub w: [[f64; 2]; 3],
    pub order: [String; 2],
}

impl StainMatrixDocument {
    pub fn to_matrix(&self) -> Result<StainMatrix> {
        match (self.order[0].as_str(), self.order[1].as_str()) {
            ("H", "E") => StainMatrix::from_rows(self.w),
            ("E", "H") => {
                let swapped = self.w.map(|r| [r[1], r[0]]);
                StainMatrix::from_rows(swapped)
            }
            _ => Err(CasaError::InvalidStainMatrix(format!("unknown column order {:?}", self.order))),
        }
    }
}

/// Non-negative per-pixel stain amounts, stored as two rows (H, E).
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    rows: [Vec<f64>; 2],
}

impl ConcentrationMap {
    pub fn new(hematoxylin: Vec<f64>, eosin: Vec<f64>) -> Result<Self> {
        if hematoxylin.len() != eosin.len() {
            return Err(CasaError::DimensionMismatch { expected: hematoxylin.len(), actual: eosin.len() });
        }
        if let Some(bad) = hematoxylin.iter().chain(&eosin).find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(CasaError::InvalidConfig(format!("concentration {bad} must be finite and non-negative")));
        }
        Ok(Self { rows: [hematoxylin, eosin] })
    }

    pub fn from_pixels(pixels: &[[f64; 2]]) -> Result<Self> {
        Self::new(pixels.iter().map(|p| p[0]).collect(), pixels.iter().map(|p| p[1]).collect())
    }

    pub fn zeros(n_pixels: usize) -> Self {
        Self { rows: [vec![0.0; n_pixels], vec![0.0; n_pixels]] }
    }

    pub(crate) fn from_rows_unchecked(rows: [Vec<f64>; 2]) -> Self {
        Self { rows }
    }

    pub fn n_pixels(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows[0].is_empty()
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    #[inline]
    pub fn pixel(&self, j: usize) -> [f64; 2] {
        [self.rows[0][j], self.rows[1][j]]
    }

    /// Multiplies each channel by its own factor.
    pub fn scaled(&self, factors: [f64; 2]) -> Self {
        Self {
            rows: [
                self.rows[0].iter().map(|v| v * factors[0]).collect(),
                self.rows[1].iter().map(|v| v * factors[1]).collect(),
            ],
        }
    }
}

/// Tunables for Macenko stain estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacenkoParams {
    /// Pixels whose every channel has OD at or below this are background.
    pub od_threshold: f64,
    /// Percentile (in percent) used for the robust angular extremes.
    pub angle_percentile: f64,
    pub min_tissue_pixels: usize,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self { od_threshold: 0.15, angle_percentile: 1.0, min_tissue_pixels: 50 }
    }
}

impl MacenkoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.od_threshold > 0.0 && self.od_threshold < OD_MAX) {
            return Err(CasaError::InvalidConfig(format!("od_threshold {} outside (0, {OD_MAX})", self.od_threshold)));
        }
        if !(self.angle_percentile > 0.0 && self.angle_percentile < 50.0) {
            return Err(CasaError::InvalidConfig(format!(
                "angle_percentile {} outside (0, 50)",
                self.angle_percentile
            )));
        }
        Ok(())
    }
}

/// Estimates the stain matrix of `image` and unmixes every pixel.
///
/// Only pixels with at least one channel above `od_threshold` take part in
/// estimating the matrix; concentrations are returned for all pixels.
pub fn macenko_decompose(image: &RgbImage, params: &MacenkoParams) -> Result<(StainMatrix, ConcentrationMap)> {
    params.validate()?;
    let od = rgb_to_od(image);
    let tissue: Vec<Vector3<f64>> = od
        .pixels()
        .filter(|p| p.iter().any(|&v| v > params.od_threshold))
        .map(Vector3::from)
        .collect();
    if tissue.len() < params.min_tissue_pixels.max(2) {
        return Err(CasaError::NoTissue { found: tissue.len(), required: params.min_tissue_pixels.max(2) });
    }

    // Fixed-order accumulation keeps the estimate independent of threading.
    let n = tissue.len() as f64;
    let mean = tissue.iter().fold(Vector3::zeros(), |acc, v| acc + v) / n;
    let mut cov = Matrix3::<f64>::zeros();
    for v in &tissue {
        let d = v - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let (_, vecs) = symmetric_eigen3(&cov);
    let (e1, e2) = (vecs[0], vecs[1]);

    let mut angles: Vec<f64> = tissue.iter().map(|v| v.dot(&e2).atan2(v.dot(&e1))).collect();
    angles.sort_by(f64::total_cmp);
    let lo = percentile(&angles, params.angle_percentile);
    let hi = percentile(&angles, 100.0 - params.angle_percentile);
    if hi - lo < MIN_COLUMN_SEPARATION {
        return Err(CasaError::DegenerateStains(format!("extreme angles only {:e} rad apart", hi - lo)));
    }

    let a = make_physical(e1 * lo.cos() + e2 * lo.sin())?;
    let b = make_physical(e1 * hi.cos() + e2 * hi.sin())?;
    let (h, e) = if a[0] >= b[0] { (a, b) } else { (b, a) };
    let w = StainMatrix::new(h, e).map_err(|err| CasaError::DegenerateStains(err.to_string()))?;
    let conc = solve_concentrations(&od, &w)?;
    Ok((w, conc))
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// Flips a direction into the non-negative octant where possible, clamps the
/// remaining negatives and renormalizes.
fn make_physical(v: Vector3<f64>) -> Result<Vector3<f64>> {
    let v = if v.sum() < 0.0 { -v } else { v };
    let v = v.map(|x| x.max(0.0));
    let norm = v.norm();
    if norm < 1e-9 {
        return Err(CasaError::DegenerateStains("stain direction vanished after clamping".into()));
    }
    Ok(v / norm)
}

/// Per-pixel least squares `argmin |W h - OD|` with negatives clamped to 0.
pub fn solve_concentrations(od: &OdImage, w: &StainMatrix) -> Result<ConcentrationMap> {
    let [a, b] = w.columns;
    let g00 = a.dot(&a);
    let g01 = a.dot(&b);
    let g11 = b.dot(&b);
    let det = g00 * g11 - g01 * g01;
    if det.abs() < 1e-12 {
        return Err(CasaError::SingularSystem(det));
    }
    let n = od.n_pixels();
    let mut hem = Vec::with_capacity(n);
    let mut eos = Vec::with_capacity(n);
    for p in od.pixels() {
        let ra = a[0] * p[0] + a[1] * p[1] + a[2] * p[2];
        let rb = b[0] * p[0] + b[1] * p[1] + b[2] * p[2];
        let x = (g11 * ra - g01 * rb) / det;
        let y = (g00 * rb - g01 * ra) / det;
        hem.push(x.max(0.0));
        eos.push(y.max(0.0));
    }
    Ok(ConcentrationMap::from_rows_unchecked([hem, eos]))
}

/// `I_j = i0 * exp(-W h_j)` clamped to `[0, 1]`.
pub fn reconstruct(w: &StainMatrix, h: &ConcentrationMap, i0: f64, width: usize, height: usize) -> Result<RgbImage> {
    if width == 0 || height == 0 {
        return Err(CasaError::InvalidImage(format!("empty image {width}x{height}")));
    }
    if h.n_pixels() != width * height {
        return Err(CasaError::DimensionMismatch { expected: width * height, actual: h.n_pixels() });
    }
    let mut data = Vec::with_capacity(3 * h.n_pixels());
    for j in 0..h.n_pixels() {
        for a in w.apply(h.pixel(j)) {
            data.push((i0 * (-a).exp()).clamp(0.0, 1.0));
        }
    }
    Ok(RgbImage::from_clamped(width, height, data, i0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::od_to_rgb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotate_towards(v: &Vector3<f64>, target: &Vector3<f64>, angle: f64) -> Vector3<f64> {
        let t = (target - v * v.dot(target)).normalize();
        v * angle.cos() + t * angle.sin()
    }

    /// Two stain columns `sep` radians apart around the canonical H vector.
    fn matrix_with_separation(sep: f64) -> StainMatrix {
        let w = StainMatrix::canonical();
        let h = *w.hematoxylin();
        let e = rotate_towards(&h, w.eosin(), sep);
        StainMatrix::new(h, e).unwrap()
    }

    fn random_concentrations(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> ConcentrationMap {
        let hem = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let eos = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        ConcentrationMap::new(hem, eos).unwrap()
    }

    #[test]
    fn canonical_matrix_is_valid() {
        let w = StainMatrix::canonical();
        assert!((w.hematoxylin().norm() - 1.0).abs() < 1e-12);
        assert!(w.separation() > 0.5 && w.separation() < 0.55);
    }

    #[test]
    fn stain_matrix_rejects_invalid_columns() {
        let h = Vector3::new(1.0, 0.0, 0.0);
        assert!(StainMatrix::new(h, h).is_err());
        assert!(StainMatrix::new(h * 2.0, Vector3::new(0.0, 1.0, 0.0)).is_err());
        assert!(StainMatrix::new(h, Vector3::new(0.0, -1.0, 0.0)).is_err());
    }

    #[test]
    fn document_round_trip_and_order() {
        let w = StainMatrix::canonical();
        let doc = w.to_document();
        let json = serde_json::to_string(&doc).unwrap();
        assert!(json.contains("\"order\":[\"H\",\"E\"]"));
        let back: StainMatrixDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_matrix().unwrap(), w);
        let swapped = StainMatrixDocument { w: doc.w.map(|r| [r[1], r[0]]), order: ["E".into(), "H".into()] };
        assert_eq!(swapped.to_matrix().unwrap(), w);
    }

    #[test]
    fn consistent_system_is_solved_exactly() {
        let w = StainMatrix::canonical();
        let od = OdImage::new(1, 1, w.apply([1.0, 0.5]).to_vec()).unwrap();
        let h = solve_concentrations(&od, &w).unwrap();
        assert!((h.pixel(0)[0] - 1.0).abs() < 1e-9);
        assert!((h.pixel(0)[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_columns() {
        let w = StainMatrix::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.6, 0.8)).unwrap();
        let od = OdImage::new(1, 1, vec![2.0, 0.0, 0.0]).unwrap();
        let h = solve_concentrations(&od, &w).unwrap();
        assert_eq!(h.pixel(0), [2.0, 0.0]);
    }

    #[test]
    fn least_squares_matches_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let h_dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..1.0));
            let e_dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..1.0));
            let Ok(w) = StainMatrix::from_directions(h_dir, e_dir) else { continue };
            let data: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..3.0)).collect();
            let od = OdImage::new(20, 1, data.clone()).unwrap();
            let h = solve_concentrations(&od, &w).unwrap();

            // Pseudoinverse through nalgebra's SVD.
            let m = nalgebra::Matrix3x2::from_columns(&[*w.hematoxylin(), *w.eosin()]);
            let pinv = m.pseudo_inverse(1e-14).unwrap();
            for j in 0..20 {
                let x = pinv * Vector3::new(data[3 * j], data[3 * j + 1], data[3 * j + 2]);
                assert!((h.pixel(j)[0] - x[0].max(0.0)).abs() < 1e-8);
                assert!((h.pixel(j)[1] - x[1].max(0.0)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn reconstruct_examples() {
        let w = StainMatrix::canonical();
        let img = reconstruct(&w, &ConcentrationMap::zeros(4), 1.0, 2, 2).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
        assert!(matches!(
            reconstruct(&w, &ConcentrationMap::zeros(3), 1.0, 2, 2),
            Err(CasaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn reconstruct_single_pixel_with_explicit_h_vector() {
        // Column with unit norm whose entries are the canonical H entries
        // divided by the canonical norm; the expected pixel is exp(-W[:,0]).
        let w = StainMatrix::canonical();
        let h = ConcentrationMap::new(vec![1.0], vec![0.0]).unwrap();
        let img = reconstruct(&w, &h, 1.0, 1, 1).unwrap();
        let norm = CANONICAL_H.iter().map(|x| x * x).sum::<f64>().sqrt();
        for c in 0..3 {
            assert!((img.pixel(0)[c] - (-CANONICAL_H[c] / norm).exp()).abs() < 1e-15);
        }
        // Un-normalized check against the literal values (norm is 0.99966).
        assert!((img.pixel(0)[0] - (-0.651f64).exp()).abs() < 3e-4);
        assert!((img.pixel(0)[1] - (-0.701f64).exp()).abs() < 3e-4);
        assert!((img.pixel(0)[2] - (-0.290f64).exp()).abs() < 3e-4);
    }

    #[test]
    fn model_inversion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = StainMatrix::canonical();
        let h = random_concentrations(&mut rng, 64, 0.0, 2.0);
        let img = reconstruct(&w, &h, 1.0, 8, 8).unwrap();
        let back = solve_concentrations(&rgb_to_od(&img), &w).unwrap();
        for j in 0..64 {
            for k in 0..2 {
                assert!((back.pixel(j)[k] - h.pixel(j)[k]).abs() < 1e-6);
            }
        }
        let again = od_to_rgb(&rgb_to_od(&img), 1.0);
        for (a, b) in again.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn macenko_recovers_generated_stains() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let truth = matrix_with_separation(25f64.to_radians());
        let h = random_concentrations(&mut rng, 4096, 0.05, 2.0);
        let img = reconstruct(&truth, &h, 1.0, 64, 64).unwrap();
        let (w, conc) = macenko_decompose(&img, &MacenkoParams::default()).unwrap();
        assert_eq!(conc.n_pixels(), 4096);
        for k in 0..2 {
            let err = angle_between(w.column(k), truth.column(k)).to_degrees();
            assert!(err < 2.0, "column {k} off by {err} deg");
        }
    }

    #[test]
    fn white_image_has_no_tissue() {
        let img = RgbImage::filled(16, 16, [1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            macenko_decompose(&img, &MacenkoParams::default()),
            Err(CasaError::NoTissue { found: 0, .. })
        ));
    }

    #[test]
    fn single_stain_image_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = StainMatrix::canonical();
        let hem = (0..1024).map(|_| rng.random_range(0.2..2.0)).collect();
        let h = ConcentrationMap::new(hem, vec![0.0; 1024]).unwrap();
        let img = reconstruct(&w, &h, 1.0, 32, 32).unwrap();
        assert!(matches!(
            macenko_decompose(&img, &MacenkoParams::default()),
            Err(CasaError::DegenerateStains(_))
        ));
    }

    #[test]
    fn hematoxylin_is_the_redder_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = StainMatrix::canonical();
        let h = random_concentrations(&mut rng, 1024, 0.0, 1.5);
        let img = reconstruct(&truth, &h, 1.0, 32, 32).unwrap();
        let (w, _) = macenko_decompose(&img, &MacenkoParams::default()).unwrap();
        assert!(w.hematoxylin()[0] > w.eosin()[0]);
    }

    #[test]
    fn invalid_params_rejected() {
        let img = RgbImage::filled(4, 4, [0.5, 0.5, 0.5]).unwrap();
        let params = MacenkoParams { angle_percentile: 60.0, ..Default::default() };
        assert!(matches!(macenko_decompose(&img, &params), Err(CasaError::InvalidConfig(_))));
    }
}
