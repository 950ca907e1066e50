//! Frozen feature extractor and the FID, KID and PRD metrics.

use std::fmt::Write as _;

use migs_tensor::{Tape, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MigsError, Result};
use crate::image::RgbImage;
use crate::scenegraph::AnnotatedScene;

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED_F00D;
pub const DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];

/// Fixed convolutional pyramid with seeded, frozen weights. Each level is a
/// stride-2 3×3 convolution followed by ReLU; the embedding is the spatial
/// mean of the last level.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    weights: Vec<Tensor>,
    seed: u64,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_EXTRACTOR_SEED, &DEFAULT_CHANNELS)
    }
}

impl FeatureExtractor {
    pub fn new(seed: u64, channels: &[usize]) -> Self {
        assert!(!channels.is_empty() && !channels.contains(&0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let weights = channels
            .iter()
            .map(|&c| {
                let std = (2.0 / (9 * c_in) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                let w = Tensor::from_fn(&[c, c_in, 3, 3], |_| dist.sample(&mut rng) as f32 as f64);
                c_in = c;
                w
            })
            .collect();
        Self { weights, seed }
    }

    pub fn dim(&self) -> usize {
        self.weights.last().expect("non-empty").dim(0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// SHA-256 over the weight shapes and values, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.weights {
            for &d in w.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in w.data() {
                h.update((v as f32).to_le_bytes());
            }
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Per-level activations for images `[B,3,H,W]` in `[0,1]`.
    pub fn levels(&self, tape: &Tape, images01: Var) -> Vec<Var> {
        let mut x = tape.add_scalar(images01, -0.5);
        self.weights
            .iter()
            .map(|w| {
                x = tape.relu(tape.conv2d(x, tape.constant(w.clone()), 2, 1));
                x
            })
            .collect()
    }

    fn embed_batch(&self, batch: Tensor) -> Tensor {
        let tape = Tape::new();
        let x = tape.constant(batch);
        let last = *self.levels(&tape, x).last().expect("non-empty");
        let v = tape.value(last);
        let (b, c) = (v.dim(0), v.dim(1));
        let hw = v.dim(2) * v.dim(3);
        Tensor::from_fn(&[b, c], |i| {
            v.data()[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64
        })
    }
}

fn images_to_batch(images: &[&RgbImage]) -> Tensor {
    let parts: Vec<Tensor> = images
        .iter()
        .map(|im| im.to_signed_chw().map(|v| (v + 1.0) / 2.0))
        .collect();
    Tensor::stack(&parts)
}

/// Embedding matrix `[N, d]`, one row per image.
pub fn extract_features(
    images: &[&RgbImage],
    extractor: &FeatureExtractor,
) -> Result<DMatrix<f64>> {
    if images.is_empty() {
        return Err(MigsError::Contract("no images to embed".into()));
    }
    let d = extractor.dim();
    let mut out = DMatrix::zeros(images.len(), d);
    for (c, chunk) in images.chunks(16).enumerate() {
        let f = extractor.embed_batch(images_to_batch(chunk));
        for r in 0..chunk.len() {
            for j in 0..d {
                out[(c * 16 + r, j)] = f.data()[r * d + j];
            }
        }
    }
    Ok(out)
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.row_mean().transpose();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centred.transpose() * &centred / (n - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to the rows of `x` and `y`.
pub fn fid(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(MigsError::Contract(
            "FID needs at least 2 samples per side".into(),
        ));
    }
    if x.ncols() != y.ncols() {
        return Err(MigsError::Contract("FID feature dimensions differ".into()));
    }
    let (mx, sx) = mean_cov(x);
    let (my, sy) = mean_cov(y);
    let rx = psd_sqrt(&sx);
    let inner = &rx * &sy * &rx;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let v = (mx - my).norm_squared() + sx.trace() + sy.trace() - 2.0 * cross;
    Ok(v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidEstimate {
    pub value: f64,
    /// Standard error over blocks (0 with a single block).
    pub std_error: f64,
    pub blocks: usize,
}

fn poly_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.ncols() as f64;
    (a * b.transpose()).map(|v| (v / d + 1.0).powi(3))
}

fn mmd2_unbiased(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let (m, n) = (x.nrows() as f64, y.nrows() as f64);
    let kxx = poly_kernel(x, x);
    let kyy = poly_kernel(y, y);
    let kxy = poly_kernel(x, y);
    let off = |k: &DMatrix<f64>| k.sum() - k.trace();
    off(&kxx) / (m * (m - 1.0)) + off(&kyy) / (n * (n - 1.0)) - 2.0 * kxy.sum() / (m * n)
}

/// Unbiased squared MMD with kernel `(xᵀy/d + 1)³`, averaged over disjoint
/// blocks of `block_size` rows.
pub fn kid_estimate(x: &DMatrix<f64>, y: &DMatrix<f64>, block_size: usize) -> Result<KidEstimate> {
    if x.nrows() < 2 || y.nrows() < 2 || block_size < 2 {
        return Err(MigsError::Contract(
            "KID needs at least 2 samples per side".into(),
        ));
    }
    if x.ncols() != y.ncols() {
        return Err(MigsError::Contract("KID feature dimensions differ".into()));
    }
    let blocks = (x.nrows().min(y.nrows()) / block_size).max(1);
    let values: Vec<f64> = if blocks == 1 {
        vec![mmd2_unbiased(x, y)]
    } else {
        (0..blocks)
            .map(|b| {
                let xb = x.rows(b * block_size, block_size).into_owned();
                let yb = y.rows(b * block_size, block_size).into_owned();
                mmd2_unbiased(&xb, &yb)
            })
            .collect()
    };
    let k = values.len() as f64;
    let value = values.iter().sum::<f64>() / k;
    let std_error = if values.len() > 1 {
        let var = values.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        0.0
    };
    Ok(KidEstimate {
        value,
        std_error,
        blocks,
    })
}

pub const KID_BLOCK_SIZE: usize = 100;

pub fn kid(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    Ok(kid_estimate(x, y, KID_BLOCK_SIZE)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrdConfig {
    pub num_clusters: usize,
    pub num_angles: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for PrdConfig {
    fn default() -> Self {
        Self {
            num_clusters: 20,
            num_angles: 1001,
            restarts: 10,
            seed: 0,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` by inertia.
fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centres = vec![points[rng.random_range(0..n)].clone()];
        let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
        while centres.len() < k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut r = rng.random_range(0.0..total);
                let mut idx = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    if r < w {
                        idx = i;
                        break;
                    }
                    r -= w;
                }
                idx
            } else {
                rng.random_range(0..n)
            };
            centres.push(points[pick].clone());
            for (i, p) in points.iter().enumerate() {
                d2[i] = d2[i].min(sq_dist(p, &centres[centres.len() - 1]));
            }
        }
        let mut assign = vec![0usize; n];
        for iter in 0..300 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let c = (0..k)
                    .min_by(|&a, &b| sq_dist(p, &centres[a]).total_cmp(&sq_dist(p, &centres[b])))
                    .expect("k > 0");
                if c != assign[i] || iter == 0 {
                    changed |= c != assign[i];
                    assign[i] = c;
                }
            }
            if !changed && iter > 0 {
                break;
            }
            let dim = points[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &c) in points.iter().zip(&assign) {
                counts[c] += 1;
                for (s, v) in sums[c].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assign)
            .map(|(p, &c)| sq_dist(p, &centres[c]))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    best.expect("at least one restart").1
}

/// PRD curve between a reference set `x` and an evaluated set `y`, as
/// `(precision, recall)` pairs.
pub fn prd_curve(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &PrdConfig) -> Result<Vec<(f64, f64)>> {
    let k = cfg.num_clusters;
    if k == 0 || x.nrows() < k || y.nrows() < k {
        return Err(MigsError::Contract(format!(
            "PRD needs at least {k} samples per side"
        )));
    }
    if cfg.num_angles < 3 {
        return Err(MigsError::Contract("PRD needs at least 3 angles".into()));
    }
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    };
    let mut points = rows(x);
    points.extend(rows(y));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let assign = kmeans(&points, k, cfg.restarts, &mut rng);
    let mut ref_hist = vec![0.0; k];
    let mut eval_hist = vec![0.0; k];
    for (i, &c) in assign.iter().enumerate() {
        if i < x.nrows() {
            ref_hist[c] += 1.0 / x.nrows() as f64;
        } else {
            eval_hist[c] += 1.0 / y.nrows() as f64;
        }
    }
    let eps = 1e-10;
    let top = std::f64::consts::FRAC_PI_2 - eps;
    Ok((0..cfg.num_angles)
        .map(|a| {
            let angle = eps + (top - eps) * a as f64 / (cfg.num_angles - 1) as f64;
            let slope = angle.tan();
            let p: f64 = ref_hist
                .iter()
                .zip(&eval_hist)
                .map(|(r, e)| (r * slope).min(*e))
                .sum();
            let r = p / slope;
            (p.clamp(0.0, 1.0), r.clamp(0.0, 1.0))
        })
        .collect())
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// `(F_8, F_1/8)`: the best recall-weighted and precision-weighted scores
/// along the PRD curve.
pub fn prd_f_scores(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &PrdConfig) -> Result<(f64, f64)> {
    let curve = prd_curve(x, y, cfg)?;
    let best = |beta: f64| {
        curve
            .iter()
            .map(|&(p, r)| f_beta(p, r, beta))
            .fold(0.0, f64::max)
    };
    Ok((best(8.0), best(1.0 / 8.0)))
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task_id: String,
    pub method: String,
    pub decoder: String,
    pub shots: usize,
    pub fid: f64,
    pub kid: f64,
    pub f8: f64,
    pub f1_8: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub extractor_fingerprint: String,
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task_id,method,shots,fid,kid,f8,f1_8,n_real,n_fake\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.task_id, r.method, r.shots, r.fid, r.kid, r.f8, r.f1_8, r.n_real, r.n_fake
            );
        }
        s
    }
}

/// Metrics for one task: one generated image per held-out scene against the
/// real held-out images. `shot_ids` and `test_ids` identify scenes within
/// the task; any overlap is a protocol violation.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_task(
    task_id: &str,
    method: &str,
    decoder: &str,
    shot_ids: &[usize],
    test: &[(usize, &AnnotatedScene)],
    extractor: &FeatureExtractor,
    prd: &PrdConfig,
    mut generate: impl FnMut(usize, &AnnotatedScene) -> Result<RgbImage>,
) -> Result<MetricsRow> {
    if test.is_empty() {
        return Err(MigsError::Contract(format!(
            "task {task_id}: empty test split"
        )));
    }
    if let Some((id, _)) = test.iter().find(|(id, _)| shot_ids.contains(id)) {
        return Err(MigsError::Contract(format!(
            "task {task_id}: scene {id} is both a fine-tuning shot and a test scene"
        )));
    }
    let fakes: Vec<RgbImage> = test
        .iter()
        .map(|(id, s)| generate(*id, s))
        .collect::<Result<_>>()?;
    let reals: Vec<&RgbImage> = test.iter().map(|(_, s)| &s.image).collect();
    let fx = extract_features(&reals, extractor)?;
    let fy = extract_features(&fakes.iter().collect::<Vec<_>>(), extractor)?;
    let prd_cfg = PrdConfig {
        num_clusters: prd.num_clusters.min(test.len()),
        ..*prd
    };
    let (f8, f1_8) = prd_f_scores(&fx, &fy, &prd_cfg)?;
    Ok(MetricsRow {
        task_id: task_id.to_string(),
        method: method.to_string(),
        decoder: decoder.to_string(),
        shots: shot_ids.len(),
        fid: fid(&fx, &fy)?,
        kid: kid(&fx, &fy)?,
        f8,
        f1_8,
        n_real: reals.len(),
        n_fake: fakes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DMatrix::from_fn(50, 4, |_, _| rng.random_range(-1.0..1.0));
        assert!(fid(&x, &x).unwrap() < 1e-6);
    }

    #[test]
    fn fid_needs_two_rows() {
        let x = mat(&[&[1.0]]);
        assert!(fid(&x, &x).is_err());
    }

    #[test]
    fn kid_hand_value() {
        let x = mat(&[&[1.0], &[1.0]]);
        assert_eq!(kid(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn kid_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(30, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(40, 3, |_, _| rng.random_range(0.0..1.0));
        assert!((kid(&x, &y).unwrap() - kid(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn f_beta_values() {
        assert_eq!(f_beta(1.0, 1.0, 8.0), 1.0);
        assert_eq!(f_beta(0.0, 0.0, 8.0), 0.0);
        assert!((f_beta(0.5, 1.0, 1.0) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn extractor_is_deterministic_and_fingerprinted() {
        let a = FeatureExtractor::default();
        let b = FeatureExtractor::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
        assert_ne!(
            a.fingerprint(),
            FeatureExtractor::new(1, &DEFAULT_CHANNELS).fingerprint()
        );
        let im = RgbImage::filled(16, 16, [0.2, 0.5, 0.9]);
        let other = RgbImage::filled(16, 16, [0.9, 0.1, 0.1]);
        let f = extract_features(&[&im, &other, &im], &a).unwrap();
        assert_eq!(f.shape(), (3, 64));
        assert_eq!(f.row(0), f.row(2));
        assert!(extract_features(&[], &a).is_err());
    }
}
