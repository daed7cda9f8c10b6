//! Image-classification datasets: synthetic Gaussian blobs, IDX files,
//! class-wise partitioning and seeded batch iteration.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("{path}: bad IDX magic 0x{found:08X} (expected 0x{expected:08X})")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated IDX file (need {needed} bytes, have {have})")]
    Truncated { path: String, needed: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Images in `[0, 1]` with integer labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    shape: [usize; 3],
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f32>, shape: [usize; 3], labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(DataError::Config(format!("image shape {shape:?} has a zero dimension")));
        }
        if images.len() != per * labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len() / per,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Config(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            images,
            shape,
            labels,
            num_classes,
            split,
        })
    }

    /// Same examples with a wider class set and a new split tag.
    pub fn with_classes(self, num_classes: usize, split: Split) -> Result<Self> {
        Dataset::new(self.images, self.shape, self.labels, num_classes, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Stacks the given examples into a `[B×C×H×W]` tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        let x = Tensor::new(&[indices.len(), c, h, w], data).expect("non-empty batch");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let per = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            shape: self.shape,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
        }
    }

    /// Splits off a seeded random `fraction` of examples as validation data.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((self.len() as f64 * fraction).ceil() as usize).min(self.len());
        let (val, train) = idx.split_at(n_val);
        let mut train = train.to_vec();
        let mut val = val.to_vec();
        train.sort_unstable();
        val.sort_unstable();
        (self.subset(&train, self.split), self.subset(&val, Split::Validation))
    }

    /// Seeded, epoch-dependent shuffled mini-batches; the last one may be short.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
        assert!(batch_size >= 1, "batch size must be positive");
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        Batches {
            data: self,
            order,
            batch_size,
            pos: 0,
        }
    }

    /// In-order batches without shuffling, for evaluation.
    pub fn sequential(&self, batch_size: usize) -> Batches<'_> {
        assert!(batch_size >= 1, "batch size must be positive");
        Batches {
            data: self,
            order: (0..self.len()).collect(),
            batch_size,
            pos: 0,
        }
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTest {
    pub train: Dataset,
    pub test: Dataset,
}

/// Parameters of a synthetic Gaussian-blob image dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    /// `[channels, height, width]`
    pub shape: [usize; 3],
    /// Root-mean-square per-pixel offset of every class mean from the common
    /// center, in units of `noise`.
    pub separation: f64,
    /// Per-pixel noise standard deviation σ.
    pub noise: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn new(num_classes: usize, per_class: usize, shape: [usize; 3], seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            shape,
            separation: 3.0,
            noise: 0.1,
            seed,
        }
    }
}

/// Gaussian class clusters rendered as images.
///
/// Each class mean is `0.5 + separation·σ·√d·u_c` for `d` pixels, where the
/// `u_c` are orthonormalized smooth random patterns (sums of Gaussian bumps). Samples add
/// i.i.d. `N(0, σ²)` pixel noise and are clamped to `[0, 1]`. Per class, the
/// first 80% of samples go to the train split and the rest to test.
pub fn synthetic_blobs(spec: &BlobSpec) -> Result<TrainTest> {
    if spec.num_classes < 2 {
        return Err(DataError::Config(format!(
            "need at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    let [c, h, w] = spec.shape;
    let dim = c * h * w;
    if dim == 0 || spec.per_class == 0 {
        return Err(DataError::Config("empty blob dataset".into()));
    }
    if spec.num_classes > dim {
        return Err(DataError::Config(format!(
            "{} classes cannot have orthogonal means in {dim} dimensions",
            spec.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns = class_patterns(&mut rng, spec.num_classes, spec.shape);
    let scale = spec.separation * spec.noise * (dim as f64).sqrt();
    let n_train = (spec.per_class * 4).div_ceil(5);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let (mut train_y, mut test_y) = (Vec::new(), Vec::new());
    for (class, u) in patterns.iter().enumerate() {
        for i in 0..spec.per_class {
            let (xs, ys) = if i < n_train {
                (&mut train, &mut train_y)
            } else {
                (&mut test, &mut test_y)
            };
            for &ui in u {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = 0.5 + scale * ui + spec.noise * z;
                xs.push(v.clamp(0.0, 1.0) as f32);
            }
            ys.push(class);
        }
    }
    Ok(TrainTest {
        train: Dataset::new(train, spec.shape, train_y, spec.num_classes, Split::Train)?,
        test: Dataset::new(test, spec.shape, test_y, spec.num_classes, Split::Test)?,
    })
}

fn class_patterns(rng: &mut ChaCha8Rng, k: usize, [c, h, w]: [usize; 3]) -> Vec<Vec<f64>> {
    let width = (h.max(w) as f64 / 4.0).max(1.0);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut u = vec![0.0f64; c * h * w];
        for ch in 0..c {
            for _ in 0..4 {
                let cy = rand::Rng::random::<f64>(rng) * h as f64;
                let cx = rand::Rng::random::<f64>(rng) * w as f64;
                let amp: f64 = StandardNormal.sample(rng);
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        u[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * width * width)).exp();
                    }
                }
            }
        }
        // Gram-Schmidt against the previous patterns.
        for prev in &out {
            let dot: f64 = u.iter().zip(prev).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            u.iter_mut().for_each(|a| *a /= norm);
            out.push(u);
        }
    }
    out
}

/// The two class-disjoint halves of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPair {
    pub first: Dataset,
    pub second: Dataset,
    /// Original class ids per half; position = remapped label.
    pub classes: [Vec<usize>; 2],
}

impl PartitionPair {
    /// Maps an original label to `(half, remapped label)`.
    pub fn remap(&self, original: usize) -> Option<(usize, usize)> {
        self.classes
            .iter()
            .enumerate()
            .find_map(|(half, cs)| cs.iter().position(|&c| c == original).map(|j| (half, j)))
    }
}

/// Seeded random class split: `ceil(K/2)` classes for the first half,
/// `floor(K/2)` for the second; labels are remapped to be contiguous.
pub fn split_classes(num_classes: usize, seed: u64) -> Result<[Vec<usize>; 2]> {
    if num_classes < 2 {
        return Err(DataError::Config(format!(
            "partitioning needs at least 2 classes, got {num_classes}"
        )));
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let second = classes.split_off(num_classes.div_ceil(2));
    Ok([classes, second])
}

pub fn partition_by_class(d: &Dataset, seed: u64) -> Result<PartitionPair> {
    let classes = split_classes(d.num_classes(), seed)?;
    let mut lookup = vec![(0usize, 0usize); d.num_classes()];
    for (half, cs) in classes.iter().enumerate() {
        for (j, &c) in cs.iter().enumerate() {
            lookup[c] = (half, j);
        }
    }
    let per = d.image_len();
    let mut parts: [(Vec<f32>, Vec<usize>); 2] = Default::default();
    for i in 0..d.len() {
        let (half, j) = lookup[d.labels[i]];
        parts[half].0.extend_from_slice(&d.images[i * per..(i + 1) * per]);
        parts[half].1.push(j);
    }
    let [(x1, y1), (x2, y2)] = parts;
    Ok(PartitionPair {
        first: Dataset::new(x1, d.shape, y1, classes[0].len(), d.split)?,
        second: Dataset::new(x2, d.shape, y2, classes[1].len(), d.split)?,
        classes,
    })
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_string(),
            needed: at + 4,
            have: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &str) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic {
            path: path.to_string(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Parses an IDX image file (`0x00000803`, big-endian `n × rows × cols`
/// unsigned bytes) and label file (`0x00000801`). Pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8], images_name: &str, labels_name: &str) -> Result<Dataset> {
    check_magic(images, IDX_IMAGES, images_name)?;
    check_magic(labels, IDX_LABELS, labels_name)?;
    let n = be_u32(images, 4, images_name)? as usize;
    let rows = be_u32(images, 8, images_name)? as usize;
    let cols = be_u32(images, 12, images_name)? as usize;
    let n_labels = be_u32(labels, 4, labels_name)? as usize;
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let needed = 16 + n * rows * cols;
    if images.len() < needed {
        return Err(DataError::Truncated {
            path: images_name.to_string(),
            needed,
            have: images.len(),
        });
    }
    if labels.len() < 8 + n {
        return Err(DataError::Truncated {
            path: labels_name.to_string(),
            needed: 8 + n,
            have: labels.len(),
        });
    }
    let pixels = images[16..needed].iter().map(|&b| f32::from(b) / 255.0).collect();
    let ys: Vec<usize> = labels[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    let num_classes = ys.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(pixels, [1, rows, cols], ys, num_classes, Split::Train)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    parse_idx(
        &read(images_path)?,
        &read(labels_path)?,
        &images_path.display().to_string(),
        &labels_path.display().to_string(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, classes: usize) -> Dataset {
        let images = (0..n).map(|i| i as f32 / n as f32).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new(images, [1, 1, 1], labels, classes, Split::Train).unwrap()
    }

    #[test]
    fn ten_classes_split_five_five() {
        let d = tiny(50, 10);
        let p = partition_by_class(&d, 3).unwrap();
        assert_eq!(p.classes[0].len(), 5);
        assert_eq!(p.classes[1].len(), 5);
        assert!(p.classes[0].iter().all(|c| !p.classes[1].contains(c)));
        assert_eq!(p.first.num_classes(), 5);
    }

    #[test]
    fn odd_class_count() {
        let p = partition_by_class(&tiny(9, 3), 0).unwrap();
        assert_eq!((p.classes[0].len(), p.classes[1].len()), (2, 1));
        assert_eq!(p.first.len() + p.second.len(), 9);
    }

    #[test]
    fn one_class_cannot_be_partitioned() {
        let d = Dataset::new(vec![0.0; 3], [1, 1, 1], vec![0; 3], 1, Split::Train).unwrap();
        assert!(matches!(partition_by_class(&d, 0), Err(DataError::Config(_))));
    }

    #[test]
    fn remap_points_back_to_original() {
        let d = tiny(40, 8);
        let p = partition_by_class(&d, 5).unwrap();
        for orig in 0..8 {
            let (half, j) = p.remap(orig).unwrap();
            assert_eq!(p.classes[half][j], orig);
        }
        // instance images follow their labels
        let (half, j) = p.remap(d.labels()[0]).unwrap();
        let part = if half == 0 { &p.first } else { &p.second };
        let pos = part.labels().iter().position(|&l| l == j).unwrap();
        assert_eq!(part.image(pos), d.image(0));
    }

    #[test]
    fn blob_counts_and_determinism() {
        let spec = BlobSpec::new(8, 100, [1, 8, 8], 42);
        let a = synthetic_blobs(&spec).unwrap();
        assert_eq!(a.train.len() + a.test.len(), 800);
        assert_eq!(a.train.len(), 640);
        assert_eq!(a, synthetic_blobs(&spec).unwrap());
        assert!(a.train.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let other = synthetic_blobs(&BlobSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.train.images, other.train.images);
    }

    #[test]
    fn batches_cover_dataset() {
        let d = tiny(10, 3);
        let sizes: Vec<usize> = d.batches(4, 1, 0).map(|(_, y)| y.len()).collect();
        assert_eq!(sizes, [4, 4, 2]);
        let a: Vec<_> = d.batches(4, 1, 2).flat_map(|(_, y)| y).collect();
        let b: Vec<_> = d.batches(4, 1, 2).flat_map(|(_, y)| y).collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        let mut want = d.labels().to_vec();
        want.sort_unstable();
        assert_eq!(sorted, want);
    }

    #[test]
    fn shuffle_depends_on_epoch() {
        let d = tiny(64, 4);
        let a: Vec<f32> = d.batches(64, 1, 0).next().unwrap().0.data().to_vec();
        let b: Vec<f32> = d.batches(64, 1, 1).next().unwrap().0.data().to_vec();
        assert_ne!(a, b);
    }

    #[test]
    fn validation_split_is_disjoint() {
        let d = tiny(100, 4);
        let (train, val) = d.split_validation(0.1, 9);
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 90);
        assert_eq!(val.split(), Split::Validation);
        let mut all: Vec<f32> = train.images.iter().chain(&val.images).copied().collect();
        all.sort_by(f32::total_cmp);
        let mut want = d.images.clone();
        want.sort_by(f32::total_cmp);
        assert_eq!(all, want);
    }
}
