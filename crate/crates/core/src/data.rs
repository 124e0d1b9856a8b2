//! Rotating regular polygons and MNIST digits as point sets.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest MNIST point set at the 0.1307 threshold.
pub const MNIST_N_MAX: usize = 342;
/// Mean MNIST pixel level.
pub const MNIST_THRESHOLD: f64 = 0.1307;
const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const SIDE: usize = 28;

/// A batch of sets stored as `d × n_max` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SetBatch {
    pub x: Vec<Tensor>,
    /// Per-example 1/0 mask over the `n_max` columns.
    pub mask: Vec<Vec<f64>>,
    pub n_valid: Vec<usize>,
    /// Whether the last feature row repeats the mask.
    pub mask_feature: bool,
    /// Class labels; empty for unlabelled sets.
    pub labels: Vec<usize>,
}

impl SetBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Example `i` trimmed to its valid columns.
    pub fn valid(&self, i: usize) -> Tensor {
        self.x[i]
            .leading_columns(self.n_valid[i])
            .expect("n_valid within bounds")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolygonConfig {
    pub n_points: usize,
    pub batch: usize,
    pub seed: u64,
}

/// Vertices of the unit regular `n`-gon with vertex 0 at angle `theta`.
pub fn polygon(n: usize, theta: f64) -> Tensor {
    let angles: Vec<f64> = (0..n).map(|i| theta + TAU * i as f64 / n as f64).collect();
    let mut data: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
    data.extend(angles.iter().map(|a| a.sin()));
    Tensor::new(vec![2, n], data).expect("n >= 1")
}

/// One polygon at a uniform rotation with shuffled columns.
pub fn random_polygon(n: usize, rng: &mut impl Rng) -> Tensor {
    let theta = rng.random_range(0.0..TAU);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    polygon(n, theta)
        .permute_columns(&order)
        .expect("permutation of n")
}

/// Input and target batches; the target is the input itself.
pub fn gen_polygon_batch(cfg: &PolygonConfig, rng: &mut impl Rng) -> Result<(SetBatch, SetBatch)> {
    if cfg.n_points < 2 {
        return Err(Error::Invalid(format!(
            "polygons need at least 2 points, got {}",
            cfg.n_points
        )));
    }
    let sets: Vec<Tensor> = (0..cfg.batch)
        .map(|_| random_polygon(cfg.n_points, rng))
        .collect();
    let input = pad_batch(&sets, cfg.n_points, false)?;
    Ok((input.clone(), input))
}

/// MNIST images as flat 784-vectors in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MnistData {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl MnistData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image file (magic 0x803) into 28×28 images scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let (rows, cols) = (be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    if rows != SIDE || cols != SIDE {
        return Err(Error::Format(format!(
            "expected 28x28 images, got {rows}x{cols}"
        )));
    }
    let body = &bytes[16..];
    let need = count * SIDE * SIDE;
    if body.len() < need {
        return Err(Error::Format(format!(
            "truncated image data: {} of {need} bytes",
            body.len()
        )));
    }
    Ok(body[..need]
        .chunks_exact(SIDE * SIDE)
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect())
}

/// Parses an IDX label file (magic 0x801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format(format!(
            "truncated label data: {} of {count} bytes",
            body.len()
        )));
    }
    let labels: Vec<usize> = body[..count].iter().map(|&b| usize::from(b)).collect();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("label {bad} outside 0..9")));
    }
    Ok(labels)
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistData> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(MnistData { images, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Standard IDX file names inside an MNIST directory.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist_split(dir: &Path, split: Split) -> Result<MnistData> {
    let (images, labels) = mnist_paths(dir, split);
    load_mnist_idx(&images, &labels)
}

/// Pixels brighter than `threshold` as `(col/27, row/27)` columns of a
/// `2 × n` matrix, in random order.
pub fn image_to_set(image: &[f64], threshold: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if image.len() != SIDE * SIDE {
        return Err(Error::Shape(format!("image has {} pixels", image.len())));
    }
    let mut points: Vec<(f64, f64)> = image
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(i, _)| ((i % SIDE) as f64 / 27.0, (i / SIDE) as f64 / 27.0))
        .collect();
    if points.is_empty() {
        return Err(Error::EmptySet("no pixel above threshold".into()));
    }
    points.shuffle(rng);
    let mut data: Vec<f64> = points.iter().map(|p| p.0).collect();
    data.extend(points.iter().map(|p| p.1));
    Tensor::new(vec![2, points.len()], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MnistSetConfig {
    pub sigma: f64,
    pub threshold: f64,
    pub n_max: usize,
    pub mask_feature: bool,
}

impl Default for MnistSetConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            threshold: MNIST_THRESHOLD,
            n_max: MNIST_N_MAX,
            mask_feature: false,
        }
    }
}

/// Labelled point sets extracted from MNIST images.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistSets {
    pub sets: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl MnistSets {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn mean_size(&self) -> f64 {
        self.sets.iter().map(Tensor::cols).sum::<usize>() as f64 / self.sets.len().max(1) as f64
    }

    /// Padded batch of the examples at `indices`.
    pub fn batch(&self, indices: &[usize], cfg: &MnistSetConfig) -> Result<SetBatch> {
        let sets: Vec<Tensor> = indices.iter().map(|&i| self.sets[i].clone()).collect();
        let mut b = pad_batch(&sets, cfg.n_max, cfg.mask_feature)?;
        b.labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(b)
    }
}

/// Converts every image; blank images are skipped with a warning.
pub fn mnist_to_sets(
    data: &MnistData,
    cfg: &MnistSetConfig,
    rng: &mut impl Rng,
) -> Result<MnistSets> {
    let mut sets = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        match image_to_set(img, cfg.threshold, rng) {
            Ok(s) => {
                if s.cols() > cfg.n_max {
                    return Err(Error::Invalid(format!(
                        "image {i} yields {} points, more than n_max {}",
                        s.cols(),
                        cfg.n_max
                    )));
                }
                sets.push(s);
                labels.push(label);
            }
            Err(Error::EmptySet(_)) => log::warn!("skipping blank image {i}"),
            Err(e) => return Err(e),
        }
    }
    Ok(MnistSets { sets, labels })
}

/// Train and test point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistSplits {
    pub train: MnistSets,
    pub test: MnistSets,
}

/// Loads both splits from `dir`, keeping at most `train_limit` / `test_limit`
/// images of each (`None` keeps all).
pub fn load_mnist_sets(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
    cfg: &MnistSetConfig,
    seed: u64,
) -> Result<MnistSplits> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut load = |split, limit: Option<usize>| -> Result<MnistSets> {
        let mut data = load_mnist_split(dir, split)?;
        if let Some(l) = limit {
            data.truncate(l);
        }
        mnist_to_sets(&data, cfg, &mut rng)
    };
    let train = load(Split::Train, train_limit)?;
    let test = load(Split::Test, test_limit)?;
    Ok(MnistSplits { train, test })
}

/// Adds N(0, sigma²) noise to every valid coordinate; padding and the mask
/// feature row stay untouched.
pub fn add_noise(batch: &SetBatch, sigma: f64, rng: &mut impl Rng) -> Result<SetBatch> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("noise stddev {sigma}")));
    }
    let mut out = batch.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    for (x, &nv) in out.x.iter_mut().zip(&batch.n_valid) {
        let (d, n) = x.dims2()?;
        let rows = if batch.mask_feature { d - 1 } else { d };
        let data = x.data_mut();
        for f in 0..rows {
            for v in &mut data[f * n..f * n + nv] {
                *v += normal.sample(rng);
            }
        }
    }
    Ok(out)
}

/// Pads sets (`d × n_i`) to `n_max` columns with zeros; with
/// `mask_feature` a final row carries the mask.
pub fn pad_batch(sets: &[Tensor], n_max: usize, mask_feature: bool) -> Result<SetBatch> {
    let mut x = Vec::with_capacity(sets.len());
    let mut mask = Vec::with_capacity(sets.len());
    let mut n_valid = Vec::with_capacity(sets.len());
    for s in sets {
        let (d, n) = s.dims2()?;
        if n > n_max {
            return Err(Error::Invalid(format!("set of {n} exceeds n_max {n_max}")));
        }
        let rows = if mask_feature { d + 1 } else { d };
        let mut t = Tensor::zeros(&[rows, n_max]);
        for f in 0..d {
            for j in 0..n {
                t.set(f, j, s.at(f, j));
            }
        }
        if mask_feature {
            for j in 0..n {
                t.set(d, j, 1.0);
            }
        }
        x.push(t);
        mask.push((0..n_max).map(|j| if j < n { 1.0 } else { 0.0 }).collect());
        n_valid.push(n);
    }
    Ok(SetBatch {
        x,
        mask,
        n_valid,
        mask_feature,
        labels: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn sorted_points(t: &Tensor) -> Vec<(i64, i64)> {
        let mut v: Vec<(i64, i64)> = (0..t.cols())
            .map(|j| {
                (
                    (t.at(0, j) * 1e9).round() as i64,
                    (t.at(1, j) * 1e9).round() as i64,
                )
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn square_at_zero() {
        let p = polygon(4, 0.0);
        let want =
            Tensor::from_rows(&[vec![1.0, 0.0, -1.0, 0.0], vec![0.0, 1.0, 0.0, -1.0]]).unwrap();
        assert_eq!(sorted_points(&p), sorted_points(&want));
    }

    #[test]
    fn vertices_on_unit_circle_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (input, target) = gen_polygon_batch(
            &PolygonConfig {
                n_points: 7,
                batch: 32,
                seed: 0,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(input, target);
        for x in &input.x {
            for j in 0..7 {
                assert!((x.at(0, j).hypot(x.at(1, j)) - 1.0).abs() < 1e-12);
            }
        }
        for n in [3, 5, 8] {
            let a = polygon(n, 0.4);
            let b = polygon(n, 0.4 + TAU / n as f64);
            assert_eq!(sorted_points(&a), sorted_points(&b));
        }
        let cfg = PolygonConfig {
            n_points: 1,
            batch: 1,
            seed: 0,
        };
        assert!(gen_polygon_batch(&cfg, &mut rng).is_err());
    }

    #[test]
    fn column_order_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4;
        let draws = 8000;
        let mut counts = vec![vec![0usize; n]; n];
        for _ in 0..draws {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let p = polygon(n, 0.1).permute_columns(&order).unwrap();
            let base = polygon(n, 0.1);
            for j in 0..n {
                let v = (0..n)
                    .find(|&k| {
                        (base.at(0, k) - p.at(0, j)).abs() < 1e-12
                            && (base.at(1, k) - p.at(1, j)).abs() < 1e-12
                    })
                    .unwrap();
                counts[v][j] += 1;
            }
        }
        let expect = draws as f64 / n as f64;
        let tol = 4.0 * (draws as f64 * 0.25 * 0.75).sqrt();
        for row in counts {
            for c in row {
                assert!((c as f64 - expect).abs() < tol, "{c}");
            }
        }
    }

    fn idx_images(count: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, count, 28, 28] {
            b.extend(v.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    #[test]
    fn idx_parsing_and_errors() {
        let mut px = vec![0u8; 784 * 2];
        px[5] = 255;
        px[784] = 51;
        let imgs = parse_idx_images(&idx_images(2, &px)).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0][5], 1.0);
        assert!((imgs[1][0] - 0.2).abs() < 1e-12);
        assert!(imgs.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert!(parse_idx_images(&idx_images(3, &px)).is_err());
        let mut bad = idx_images(2, &px);
        bad[3] = 1;
        assert!(parse_idx_images(&bad).is_err());
        assert!(parse_idx_images(&[0, 0]).is_err());

        let mut lb = Vec::new();
        lb.extend(LABEL_MAGIC.to_be_bytes());
        lb.extend(3u32.to_be_bytes());
        lb.extend([7u8, 0, 9]);
        assert_eq!(parse_idx_labels(&lb).unwrap(), vec![7, 0, 9]);
        let mut big = lb.clone();
        big[10] = 12;
        assert!(parse_idx_labels(&big).is_err());
        assert!(parse_idx_labels(&lb[..9]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = mnist_paths(dir.path(), Split::Test);
        std::fs::write(&ip, idx_images(2, &px)).unwrap();
        std::fs::write(&lp, &lb).unwrap();
        assert!(load_mnist_split(dir.path(), Split::Test).is_err());
    }

    #[test]
    fn image_to_set_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            image_to_set(&[0.0; 784], MNIST_THRESHOLD, &mut rng),
            Err(Error::EmptySet(_))
        ));
        let full = image_to_set(&[1.0; 784], MNIST_THRESHOLD, &mut rng).unwrap();
        assert_eq!(full.cols(), 784);
        assert!(full.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut img = [0.0; 784];
        img[28 * 3 + 27] = 0.5;
        img[0] = MNIST_THRESHOLD;
        let s = image_to_set(&img, MNIST_THRESHOLD, &mut rng).unwrap();
        assert_eq!(s.data(), &[1.0, 3.0 / 27.0]);
    }

    #[test]
    fn blank_images_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = MnistData {
            images: vec![vec![0.0; 784], vec![1.0; 784]],
            labels: vec![1, 2],
        };
        let cfg = MnistSetConfig {
            n_max: 784,
            ..Default::default()
        };
        let sets = mnist_to_sets(&data, &cfg, &mut rng).unwrap();
        assert_eq!(sets.labels, vec![2]);
        assert!(mnist_to_sets(&data, &MnistSetConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn padding() {
        let s = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]]).unwrap();
        let b = pad_batch(std::slice::from_ref(&s), 5, false).unwrap();
        assert_eq!(b.mask[0], vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.x[0].row(0), &[0.1, 0.2, 0.3, 0.0, 0.0]);
        assert_eq!(b.valid(0), s);
        let m = pad_batch(std::slice::from_ref(&s), 5, true).unwrap();
        assert_eq!(m.x[0].rows(), 3);
        assert_eq!(m.x[0].row(2), m.mask[0].as_slice());
        let exact = pad_batch(std::slice::from_ref(&s), 3, false).unwrap();
        assert_eq!(exact.x[0], s);
        assert!(pad_batch(&[s], 2, false).is_err());
    }

    #[test]
    fn noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sets: Vec<Tensor> = (0..50).map(|_| Tensor::zeros(&[2, 1000])).collect();
        let b = pad_batch(&sets, 1000, false).unwrap();
        assert_eq!(add_noise(&b, 0.0, &mut rng).unwrap(), b);
        let sigma = 0.05;
        let noisy = add_noise(&b, sigma, &mut rng).unwrap();
        let vals: Vec<f64> = noisy.x.iter().flat_map(|t| t.data().to_vec()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 3.0 * sigma / n.sqrt());
        assert!((sd - sigma).abs() < 0.05 * sigma);
        assert!(add_noise(&b, -1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_skips_padding_and_mask_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let b = pad_batch(&[s], 4, true).unwrap();
        let noisy = add_noise(&b, 0.1, &mut rng).unwrap();
        let x = &noisy.x[0];
        assert_eq!(x.row(2), &[1.0, 1.0, 0.0, 0.0]);
        for f in 0..2 {
            assert_eq!(&x.row(f)[2..], &[0.0, 0.0]);
            assert!(x.row(f)[..2].iter().all(|&v| v != 0.5));
        }
    }
}
