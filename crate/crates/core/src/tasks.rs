//! Datasets and continual-learning task sequences.
//!
//! A [`TaskSequence`] is a base dataset plus an ordered list of input
//! transforms (pixel permutations, image rotations, or random rotations of a
//! synthetic feature space). Each task gets its own seeded train/validation
//! split; task data is materialized on demand.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::model::Batch;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const MNIST_PIXELS: usize = MNIST_SIDE * MNIST_SIDE;
pub const MNIST_CLASSES: usize = 10;

/// Fraction of each task's shuffled pool held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One example per row.
    pub images: Mat,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Mat, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::structural(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::structural(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.cols()
    }

    pub fn example(&self, i: usize) -> (&[f64], usize) {
        (self.images.row(i), self.labels[i])
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        Batch::new(
            Mat::from_vec(indices.len(), d, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        let b = self.batch(indices)?;
        Dataset::new(b.x, b.y, self.num_classes, split)
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl IdxReader<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.at + 4;
        let field = self
            .bytes
            .get(self.at..end)
            .ok_or_else(|| self.fail(self.at, "truncated header"))?;
        let v = u32::from_be_bytes(field.try_into().expect("four bytes"));
        self.at = end;
        Ok(v)
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.at + len;
        if self.bytes.len() < end {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated payload: expected {len} bytes after offset {}", self.at),
            ));
        }
        let p = &self.bytes[self.at..end];
        self.at = end;
        Ok(p)
    }
}

/// Reads an IDX image/label file pair (optionally gzip-compressed).
/// Pixels are scaled to [0, 1].
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let bytes = read_maybe_gzip(images_path)?;
    let mut r = IdxReader {
        path: images_path,
        bytes: &bytes,
        at: 0,
    };
    let magic = r.u32()?;
    if magic != IMAGES_MAGIC {
        return Err(r.fail(0, format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(r.fail(8, format!("image dims {rows}x{cols}, expected 28x28")));
    }
    let pixels: Vec<f64> = r
        .payload(n * MNIST_PIXELS)?
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();

    let bytes = read_maybe_gzip(labels_path)?;
    let mut r = IdxReader {
        path: labels_path,
        bytes: &bytes,
        at: 0,
    };
    let magic = r.u32()?;
    if magic != LABELS_MAGIC {
        return Err(r.fail(0, format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n_labels = r.u32()? as usize;
    if n_labels != n {
        return Err(r.fail(4, format!("{n_labels} labels for {n} images")));
    }
    let payload = r.payload(n)?.to_vec();
    if let Some(pos) = payload.iter().position(|&l| usize::from(l) >= MNIST_CLASSES) {
        return Err(r.fail(8 + pos, format!("label {} out of range", payload[pos])));
    }
    let labels = payload.iter().map(|&l| usize::from(l)).collect();

    Dataset::new(
        Mat::from_vec(n, MNIST_PIXELS, pixels)?,
        labels,
        MNIST_CLASSES,
        Split::Train,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    /// Pixel permutation drawn from the given seed (`None`: identity).
    Permuted { seed: Option<u64> },
    /// Image rotation about the center, counter-clockwise, in degrees.
    Rotated { degrees: f64 },
    /// Random orthogonal rotation of the input space drawn from the seed.
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// Zero-based position in the sequence.
    pub index: usize,
    pub kind: TaskKind,
}

#[derive(Debug, Clone)]
enum Transform {
    Permutation(Vec<usize>),
    Rotation { degrees: f64, side: usize },
    Linear(Mat),
}

impl Transform {
    fn apply(&self, input: &[f64], out: &mut [f64]) {
        match self {
            Transform::Permutation(p) => apply_permutation(p, input, out),
            Transform::Rotation { degrees, side } => rotate_image(input, *side, *degrees, out),
            Transform::Linear(q) => {
                for (o, row) in out.iter_mut().zip(0..q.rows()) {
                    *o = dot(q.row(row), input);
                }
            }
        }
    }
}

/// Writes `out[i] = input[perm[i]]`.
pub fn apply_permutation(perm: &[usize], input: &[f64], out: &mut [f64]) {
    for (o, &src) in out.iter_mut().zip(perm) {
        *o = input[src];
    }
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Uniformly random permutation of `0..len` drawn from `(master_seed, stream)`.
pub fn seeded_permutation(len: usize, master_seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(&mut rng);
    p
}

/// Rotates a square `side × side` image counter-clockwise by `degrees` about
/// its center, by inverse mapping with bilinear interpolation. Samples falling
/// outside the source contribute zero; output is clamped to [0, 1].
pub fn rotate_image(input: &[f64], side: usize, degrees: f64, out: &mut [f64]) {
    debug_assert_eq!(input.len(), side * side);
    let center = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let pixel = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= side as isize || c >= side as isize {
            0.0
        } else {
            input[r as usize * side + c as usize]
        }
    };
    for r in 0..side {
        for c in 0..side {
            // Cartesian offsets with y pointing up.
            let x = c as f64 - center;
            let y = center - r as f64;
            let xs = x * cos + y * sin;
            let ys = -x * sin + y * cos;
            let src_c = center + xs;
            let src_r = center - ys;
            let r0 = src_r.floor();
            let c0 = src_c.floor();
            let fr = src_r - r0;
            let fc = src_c - c0;
            let (r0, c0) = (r0 as isize, c0 as isize);
            let v = (1.0 - fr) * (1.0 - fc) * pixel(r0, c0)
                + (1.0 - fr) * fc * pixel(r0, c0 + 1)
                + fr * (1.0 - fc) * pixel(r0 + 1, c0)
                + fr * fc * pixel(r0 + 1, c0 + 1);
            out[r * side + c] = v.clamp(0.0, 1.0);
        }
    }
}

/// Random orthogonal matrix (Gram–Schmidt on a Gaussian matrix).
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for q in &rows {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    Mat::from_rows(&rows).expect("square")
}

/// How each task's examples are split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub seed: u64,
    /// Cap on training examples per task; the validation share is unaffected.
    pub train_subset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct TaskSplit {
    train: Vec<usize>,
    validation: Vec<usize>,
}

/// Materialized data of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub validation: Dataset,
}

#[derive(Debug, Clone)]
pub struct TaskSequence {
    base: Dataset,
    specs: Vec<TaskSpec>,
    transforms: Vec<Transform>,
    splits: Vec<TaskSplit>,
}

impl TaskSequence {
    /// Builds a sequence from explicit specs over `base`.
    pub fn new(base: Dataset, kinds: Vec<TaskKind>, split: SplitConfig) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::structural("a task sequence needs at least one task"));
        }
        if base.len() < 2 {
            return Err(Error::structural("base dataset needs at least two examples"));
        }
        let d = base.input_dim();
        let mut transforms = Vec::with_capacity(kinds.len());
        for (i, kind) in kinds.iter().enumerate() {
            transforms.push(match kind {
                TaskKind::Permuted { seed } => Transform::Permutation(match seed {
                    Some(s) => seeded_permutation(d, *s, i as u64),
                    None => (0..d).collect(),
                }),
                TaskKind::Rotated { degrees } => {
                    if !degrees.is_finite() {
                        return Err(Error::structural(format!("task {i}: non-finite angle")));
                    }
                    let side = (d as f64).sqrt().round() as usize;
                    if side * side != d {
                        return Err(Error::structural(format!(
                            "rotation needs square images, got {d} inputs"
                        )));
                    }
                    Transform::Rotation {
                        degrees: *degrees,
                        side,
                    }
                }
                TaskKind::Synthetic { seed } => {
                    Transform::Linear(random_orthogonal(d, &mut ChaCha8Rng::seed_from_u64(*seed)))
                }
            });
        }
        let splits = (0..kinds.len())
            .map(|i| make_split(base.len(), split, i as u64))
            .collect();
        let specs = kinds
            .into_iter()
            .enumerate()
            .map(|(index, kind)| TaskSpec { index, kind })
            .collect();
        Ok(TaskSequence {
            base,
            specs,
            transforms,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn base(&self) -> &Dataset {
        &self.base
    }

    pub fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.base.num_classes
    }

    /// Pixel permutation of task `k`, if it is a permutation task.
    pub fn permutation(&self, k: usize) -> Option<&[usize]> {
        match self.transforms.get(k)? {
            Transform::Permutation(p) => Some(p),
            _ => None,
        }
    }

    pub fn train_indices(&self, k: usize) -> &[usize] {
        &self.splits[k].train
    }

    pub fn validation_indices(&self, k: usize) -> &[usize] {
        &self.splits[k].validation
    }

    fn materialize(&self, k: usize, indices: &[usize], split: Split) -> Result<Dataset> {
        let transform = self
            .transforms
            .get(k)
            .ok_or_else(|| Error::structural(format!("no task {k}")))?;
        let d = self.input_dim();
        let mut images = Mat::zeros(indices.len(), d);
        for (row, &i) in indices.iter().enumerate() {
            transform.apply(self.base.images.row(i), images.row_mut(row));
        }
        Dataset::new(
            images,
            indices.iter().map(|&i| self.base.labels[i]).collect(),
            self.base.num_classes,
            split,
        )
    }

    pub fn train(&self, k: usize) -> Result<Dataset> {
        self.materialize(k, &self.splits[k].train, Split::Train)
    }

    pub fn validation(&self, k: usize) -> Result<Dataset> {
        self.materialize(k, &self.splits[k].validation, Split::Validation)
    }

    pub fn task(&self, k: usize) -> Result<TaskData> {
        Ok(TaskData {
            spec: self.specs[k].clone(),
            train: self.train(k)?,
            validation: self.validation(k)?,
        })
    }
}

fn make_split(n: usize, cfg: SplitConfig, task: u64) -> TaskSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1_000_000 + task);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * VALIDATION_FRACTION).ceil() as usize).clamp(1, n - 1);
    let validation = order.split_off(n - n_val);
    if let Some(cap) = cfg.train_subset {
        order.truncate(cap.max(1));
    }
    TaskSplit {
        train: order,
        validation,
    }
}

/// Permuted tasks: task `i` permutes pixels with a permutation drawn from
/// `(master_seed, i)`. With `identity_first`, task 0 keeps the original order.
pub fn make_permuted(
    base: Dataset,
    k_tasks: usize,
    master_seed: u64,
    identity_first: bool,
    split: SplitConfig,
) -> Result<TaskSequence> {
    let kinds = (0..k_tasks)
        .map(|i| TaskKind::Permuted {
            seed: if identity_first && i == 0 {
                None
            } else {
                Some(master_seed)
            },
        })
        .collect();
    TaskSequence::new(base, kinds, split)
}

/// Rotated tasks, one per angle (degrees).
pub fn make_rotated(base: Dataset, angles_degrees: &[f64], split: SplitConfig) -> Result<TaskSequence> {
    let kinds = angles_degrees
        .iter()
        .map(|&degrees| TaskKind::Rotated { degrees })
        .collect();
    TaskSequence::new(base, kinds, split)
}

/// `step·k` for `k = 0..count`.
pub fn rotation_schedule(count: usize, step_degrees: f64) -> Vec<f64> {
    (0..count).map(|k| step_degrees * k as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDims {
    pub inputs: usize,
    pub classes: usize,
    pub per_class: usize,
}

impl Default for SyntheticDims {
    fn default() -> Self {
        SyntheticDims {
            inputs: 10,
            classes: 3,
            per_class: 100,
        }
    }
}

/// Gaussian class clusters in `dims.inputs` dimensions.
pub fn synthetic_base(dims: SyntheticDims, seed: u64) -> Result<Dataset> {
    if dims.inputs == 0 || dims.inputs > 20 || dims.classes < 2 || dims.classes > 4 || dims.per_class == 0 {
        return Err(Error::structural(
            "synthetic tasks need 1..=20 inputs, 2..=4 classes and a positive class size",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Well-separated means: random directions of length 3.
    let means: Vec<Vec<f64>> = (0..dims.classes)
        .map(|_| {
            let v: Vec<f64> = (0..dims.inputs).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = dot(&v, &v).sqrt().max(1e-12);
            v.iter().map(|x| 3.0 * x / n).collect()
        })
        .collect();
    let total = dims.classes * dims.per_class;
    let mut rows = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % dims.classes;
        let noise: f64 = 0.3;
        rows.push(
            means[class]
                .iter()
                .map(|m| m + noise * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<f64>>(),
        );
        labels.push(class);
    }
    Dataset::new(Mat::from_rows(&rows)?, labels, dims.classes, Split::Train)
}

/// Synthetic tasks: one shared cluster dataset, each task rotating the input
/// space by its own random orthogonal matrix.
pub fn make_synthetic(n_tasks: usize, dims: SyntheticDims, seed: u64) -> Result<TaskSequence> {
    let base = synthetic_base(dims, seed)?;
    let kinds = (0..n_tasks)
        .map(|k| TaskKind::Synthetic {
            seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1),
        })
        .collect();
    TaskSequence::new(
        base,
        kinds,
        SplitConfig {
            seed,
            train_subset: None,
        },
    )
}
