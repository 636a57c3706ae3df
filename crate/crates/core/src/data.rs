//! Dataset ingestion (IDX image/label files, gzip-transparent) and task
//! stream construction: class-incremental splits, domain-incremental
//! sequences, synthetic Gaussian streams, and task reordering.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Batch;
use crate::sampling;
use crate::seeds;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    ClassIncremental,
    DomainIncremental,
    InstanceIncremental,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::ClassIncremental => "class_incremental",
            Scenario::DomainIncremental => "domain_incremental",
            Scenario::InstanceIncremental => "instance_incremental",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_incremental" => Ok(Scenario::ClassIncremental),
            "domain_incremental" => Ok(Scenario::DomainIncremental),
            "instance_incremental" => Ok(Scenario::InstanceIncremental),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario `{other}`; valid: class_incremental, domain_incremental, instance_incremental"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Hard,
}

/// One task: train/test splits plus the classes it covers.
#[derive(Debug, Clone)]
pub struct Task {
    pub task_id: usize,
    pub train: Batch,
    pub test: Batch,
    pub class_set: Vec<usize>,
    pub difficulty_tag: Option<Difficulty>,
}

/// Ordered tasks with their scenario kind. Construction validates the
/// scenario's class-set discipline and label membership.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub scenario: Scenario,
    pub total_classes: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, scenario: Scenario, total_classes: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("a task stream needs at least one task".into()));
        }
        let mut ids: Vec<usize> = tasks.iter().map(|t| t.task_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != tasks.len() {
            return Err(Error::InvalidArgument("task ids must be unique".into()));
        }
        for task in &tasks {
            if task.class_set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "task {} class_set must be sorted and duplicate-free",
                    task.task_id
                )));
            }
            if task.class_set.iter().any(|&c| c >= total_classes) {
                return Err(Error::InvalidArgument(format!(
                    "task {} references a class outside 0..{total_classes}",
                    task.task_id
                )));
            }
            for split in [&task.train, &task.test] {
                if let Some(&bad) = split.labels().iter().find(|l| !task.class_set.contains(l)) {
                    return Err(Error::InvalidArgument(format!(
                        "task {} contains label {bad} outside its class set {:?}",
                        task.task_id, task.class_set
                    )));
                }
            }
        }
        match scenario {
            Scenario::ClassIncremental => {
                for i in 0..tasks.len() {
                    for j in i + 1..tasks.len() {
                        if tasks[i].class_set.iter().any(|c| tasks[j].class_set.contains(c)) {
                            return Err(Error::InvalidArgument(format!(
                                "class-incremental class sets must be disjoint; tasks {} and {} overlap",
                                tasks[i].task_id, tasks[j].task_id
                            )));
                        }
                    }
                }
            }
            Scenario::DomainIncremental | Scenario::InstanceIncremental => {
                if tasks.iter().any(|t| t.class_set != tasks[0].class_set) {
                    return Err(Error::InvalidArgument(format!(
                        "{scenario} streams require identical class sets across tasks"
                    )));
                }
            }
        }
        Ok(TaskStream {
            tasks,
            scenario,
            total_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.tasks[0].train.feature_dim()
    }
}

// ─── IDX ingestion ─────────────────────────────────────

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                what: "gzip stream",
                offset: 0,
                detail: e.to_string(),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path, what: &'static str) -> Result<u32> {
    let slice = bytes.get(offset..offset + 4).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        what,
        offset: offset as u64,
        detail: format!("file ends after {} bytes", bytes.len()),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4-byte slice")))
}

/// Loads an IDX image file and its IDX label file into one batch. Pixels are
/// scaled to `[0, 1]` by dividing by 255 and flattened row-major. Files
/// whose names end in `.gz` are decompressed transparently.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Batch> {
    let img = read_maybe_gz(images_path)?;
    let magic = be_u32(&img, 0, images_path, "magic number")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            what: "magic number",
            offset: 0,
            detail: format!("expected {IDX_IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = be_u32(&img, 4, images_path, "image count")? as usize;
    let rows = be_u32(&img, 8, images_path, "row count")? as usize;
    let cols = be_u32(&img, 12, images_path, "column count")? as usize;
    let pixels = count * rows * cols;
    if img.len() < 16 + pixels {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            what: "pixel payload",
            offset: img.len() as u64,
            detail: format!("need {} payload bytes, found {}", pixels, img.len() - 16),
        });
    }

    let lab = read_maybe_gz(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path, "magic number")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            what: "magic number",
            offset: 0,
            detail: format!("expected {IDX_LABEL_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let label_count = be_u32(&lab, 4, labels_path, "label count")? as usize;
    if lab.len() < 8 + label_count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            what: "label payload",
            offset: lab.len() as u64,
            detail: format!("need {} payload bytes, found {}", label_count, lab.len() - 8),
        });
    }
    if label_count != count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            what: "item count",
            offset: 4,
            detail: format!("labels file has {label_count} items but images file has {count}"),
        });
    }

    let data: Vec<f64> = img[16..16 + pixels].iter().map(|&b| b as f64 / 255.0).collect();
    let features = Matrix::from_vec(count, rows * cols, data)?;
    let labels: Vec<usize> = lab[8..8 + count].iter().map(|&b| b as usize).collect();
    Batch::new(features, labels)
}

/// 2x2 (or `factor`x`factor`) mean-pool of row-major `width`x`height`
/// images, used by the optional downscale flag.
pub fn mean_pool(batch: &Batch, width: usize, height: usize, factor: usize) -> Result<Batch> {
    if factor == 0 || width % factor != 0 || height % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot mean-pool {width}x{height} by factor {factor}"
        )));
    }
    if batch.feature_dim() != width * height {
        return Err(Error::shape("mean_pool", width * height, batch.feature_dim()));
    }
    let (w2, h2) = (width / factor, height / factor);
    let mut pooled = Matrix::zeros(batch.len(), w2 * h2);
    let norm = 1.0 / (factor * factor) as f64;
    for i in 0..batch.len() {
        let src = batch.features().row(i);
        let dst = pooled.row_mut(i);
        for r in 0..h2 {
            for c in 0..w2 {
                let mut acc = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        acc += src[(r * factor + dr) * width + c * factor + dc];
                    }
                }
                dst[r * w2 + c] = acc * norm;
            }
        }
    }
    Batch::new(pooled, batch.labels().to_vec())
}

// ─── Stream constructors ───────────────────────────────

fn max_label(batch: &Batch) -> Option<usize> {
    batch.labels().iter().copied().max()
}

/// Splits a labelled dataset into `n_tasks` contiguous-class tasks. Each
/// task keeps at most `per_task_train_cap` training samples, drawn uniformly
/// by seed; test splits keep every matching sample.
pub fn make_class_incremental(
    train: &Batch,
    test: &Batch,
    n_tasks: usize,
    per_task_train_cap: usize,
    seed: u64,
) -> Result<TaskStream> {
    if n_tasks == 0 || per_task_train_cap == 0 {
        return Err(Error::InvalidArgument(
            "n_tasks and per_task_train_cap must be positive".into(),
        ));
    }
    let n_classes = max_label(train).max(max_label(test)).map_or(0, |m| m + 1);
    if n_classes == 0 {
        return Err(Error::InvalidArgument("dataset has no samples".into()));
    }
    if n_classes % n_tasks != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n_classes} classes are not divisible into {n_tasks} tasks"
        )));
    }
    let per_task = n_classes / n_tasks;
    let mut tasks = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let class_set: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
        let mut train_idx: Vec<usize> = (0..train.len())
            .filter(|&i| class_set.contains(&train.labels()[i]))
            .collect();
        if train_idx.len() > per_task_train_cap {
            let mut rng = seeds::rng(seed, &[seeds::tag::STREAM, t as u64]);
            let picked = sampling::sample_without_replacement(train_idx.len(), per_task_train_cap, &mut rng);
            train_idx = picked.into_iter().map(|i| train_idx[i]).collect();
            train_idx.sort_unstable();
        }
        let test_idx: Vec<usize> = (0..test.len())
            .filter(|&i| class_set.contains(&test.labels()[i]))
            .collect();
        tasks.push(Task {
            task_id: t,
            train: train.select(&train_idx),
            test: test.select(&test_idx),
            class_set,
            difficulty_tag: None,
        });
    }
    TaskStream::new(tasks, Scenario::ClassIncremental, n_classes)
}

/// One task per (train, test) pair; all pairs must share the same label
/// universe.
pub fn make_domain_incremental(parts: &[(Batch, Batch)]) -> Result<TaskStream> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument("need at least one domain batch".into()));
    }
    let universe = |train: &Batch, test: &Batch| -> Vec<usize> {
        let mut classes: Vec<usize> = train.labels().iter().chain(test.labels()).copied().collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    };
    let class_set = universe(&parts[0].0, &parts[0].1);
    for (i, (train, test)) in parts.iter().enumerate() {
        if universe(train, test) != class_set {
            return Err(Error::InvalidArgument(format!(
                "domain batch {i} has a different label universe"
            )));
        }
    }
    let total = class_set.last().map_or(0, |&c| c + 1);
    let tasks = parts
        .iter()
        .enumerate()
        .map(|(t, (train, test))| Task {
            task_id: t,
            train: train.clone(),
            test: test.clone(),
            class_set: class_set.clone(),
            difficulty_tag: None,
        })
        .collect();
    TaskStream::new(tasks, Scenario::DomainIncremental, total)
}

/// Parameters for a synthetic Gaussian-cluster stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub scenario: Scenario,
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dims: usize,
    pub cluster_spread: f64,
    /// Per-task mean shift and noise growth for domain-incremental streams;
    /// zero makes all domain tasks i.i.d.
    pub domain_shift: f64,
    pub per_task_n: usize,
}

/// Builds a synthetic stream of Gaussian class clusters in `[0,1]^dims`.
///
/// Class means are drawn from the seed; samples are `mean + N(0, spread^2)`
/// clipped to the unit cube. Domain-incremental tasks add `t * domain_shift`
/// along a fixed random direction and scale the noise by
/// `1 + t * domain_shift`; the first half of those tasks is tagged easy, the
/// rest hard. Each task gets `per_task_n` training and `per_task_n` test
/// samples, balanced over its classes.
pub fn synth_stream(spec: &SynthSpec, seed: u64) -> Result<TaskStream> {
    if spec.n_tasks == 0 || spec.classes_per_task == 0 || spec.dims == 0 || spec.per_task_n == 0 {
        return Err(Error::InvalidArgument(format!("degenerate synth spec: {spec:?}")));
    }
    if !(spec.cluster_spread >= 0.0 && spec.domain_shift >= 0.0) {
        return Err(Error::InvalidArgument("spread and shift must be non-negative".into()));
    }
    let total_classes = match spec.scenario {
        Scenario::ClassIncremental => spec.n_tasks * spec.classes_per_task,
        _ => spec.classes_per_task,
    };

    let mut mean_rng = seeds::rng(seed, &[seeds::tag::STREAM, 0]);
    let means: Vec<Vec<f64>> = (0..total_classes)
        .map(|_| (0..spec.dims).map(|_| rand::Rng::random::<f64>(&mut mean_rng)).collect())
        .collect();
    let shift_dir: Vec<f64> = {
        let raw: Vec<f64> = (0..spec.dims)
            .map(|_| rand::Rng::random::<f64>(&mut mean_rng) * 2.0 - 1.0)
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        raw.iter().map(|v| v / norm).collect()
    };

    let mut tasks = Vec::with_capacity(spec.n_tasks);
    for t in 0..spec.n_tasks {
        let class_set: Vec<usize> = match spec.scenario {
            Scenario::ClassIncremental => {
                (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect()
            }
            _ => (0..spec.classes_per_task).collect(),
        };
        let (shift, spread) = match spec.scenario {
            Scenario::DomainIncremental => (
                t as f64 * spec.domain_shift,
                spec.cluster_spread * (1.0 + t as f64 * spec.domain_shift),
            ),
            _ => (0.0, spec.cluster_spread),
        };

        let build_split = |split_tag: u64| -> Result<Batch> {
            let mut rng = seeds::rng(seed, &[seeds::tag::STREAM, 1 + t as u64, split_tag]);
            let mut features = Matrix::empty(spec.dims);
            let mut labels = Vec::with_capacity(spec.per_task_n);
            for &class in class_set.iter().cycle().take(spec.per_task_n) {
                let noise = sampling::standard_normals(1, spec.dims, &mut rng);
                let row: Vec<f64> = means[class]
                    .iter()
                    .zip(noise.row(0))
                    .zip(&shift_dir)
                    .map(|((m, n), d)| (m + shift * d + spread * n).clamp(0.0, 1.0))
                    .collect();
                features.push_row(&row);
                labels.push(class);
            }
            Batch::new(features, labels)
        };

        let train = build_split(0)?;
        let test = build_split(1)?;
        let difficulty_tag = match spec.scenario {
            Scenario::DomainIncremental if spec.n_tasks >= 2 => {
                if t < spec.n_tasks.div_ceil(2) {
                    Some(Difficulty::Easy)
                } else {
                    Some(Difficulty::Hard)
                }
            }
            _ => None,
        };
        tasks.push(Task {
            task_id: t,
            train,
            test,
            class_set,
            difficulty_tag,
        });
    }
    TaskStream::new(tasks, spec.scenario, total_classes)
}

// ─── Reordering ────────────────────────────────────────

/// How to order tasks before training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OrderSpec {
    /// Keep the stream's own order.
    Default,
    /// Explicit permutation: position `i` of the result is task `p[i]` of
    /// the input.
    Permutation(Vec<usize>),
    EasyFirst,
    HardFirst,
}

impl fmt::Display for OrderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderSpec::Default => f.write_str("default"),
            OrderSpec::EasyFirst => f.write_str("easy_first"),
            OrderSpec::HardFirst => f.write_str("hard_first"),
            OrderSpec::Permutation(p) => {
                let parts: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

/// Reorders tasks; task ids are preserved so metrics keep tracking the
/// original identities.
pub fn reorder(stream: &TaskStream, order: &OrderSpec) -> Result<TaskStream> {
    let n = stream.len();
    let positions: Vec<usize> = match order {
        OrderSpec::Default => (0..n).collect(),
        OrderSpec::Permutation(p) => {
            let mut check: Vec<usize> = p.clone();
            check.sort_unstable();
            if check != (0..n).collect::<Vec<_>>() {
                return Err(Error::InvalidArgument(format!(
                    "permutation {p:?} is not a bijection on 0..{n}"
                )));
            }
            p.clone()
        }
        OrderSpec::EasyFirst | OrderSpec::HardFirst => {
            if stream.tasks.iter().any(|t| t.difficulty_tag.is_none()) {
                return Err(Error::InvalidArgument(
                    "easy/hard ordering requires difficulty tags on every task".into(),
                ));
            }
            let want_first = if matches!(order, OrderSpec::EasyFirst) {
                Difficulty::Easy
            } else {
                Difficulty::Hard
            };
            let mut first: Vec<usize> = Vec::new();
            let mut rest: Vec<usize> = Vec::new();
            for (i, t) in stream.tasks.iter().enumerate() {
                if t.difficulty_tag == Some(want_first) {
                    first.push(i);
                } else {
                    rest.push(i);
                }
            }
            first.extend(rest);
            first
        }
    };
    let tasks: Vec<Task> = positions.iter().map(|&i| stream.tasks[i].clone()).collect();
    TaskStream::new(tasks, stream.scenario, stream.total_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_batch(labels: &[usize], dim: usize) -> Batch {
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                (0..dim)
                    .map(|d| ((l * 31 + i * 7 + d) % 97) as f64 / 96.0)
                    .collect()
            })
            .collect();
        Batch::new(Matrix::from_rows(&rows).unwrap(), labels.to_vec()).unwrap()
    }

    // build the spec's hand-built IDX byte sequences
    fn idx_image_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_IMAGE_MAGIC.to_be_bytes());
        b.extend(count.to_be_bytes());
        b.extend(rows.to_be_bytes());
        b.extend(cols.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_label_bytes(count: u32, labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_LABEL_MAGIC.to_be_bytes());
        b.extend(count.to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn load_idx_hand_built_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images-idx3-ubyte");
        let lab_path = dir.path().join("labels-idx1-ubyte");
        std::fs::write(
            &img_path,
            idx_image_bytes(2, 2, 2, &[0, 255, 128, 64, 255, 0, 0, 255]),
        )
        .unwrap();
        std::fs::write(&lab_path, idx_label_bytes(2, &[3, 7])).unwrap();

        let batch = load_idx(&img_path, &lab_path).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.feature_dim(), 4);
        assert_eq!(batch.features().row(0)[0], 0.0);
        assert_eq!(batch.features().row(0)[1], 1.0);
        assert!((batch.features().row(0)[2] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(batch.features().row(1), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(batch.labels(), &[3, 7]);
    }

    #[test]
    fn load_idx_gzip_transparent() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images-idx3-ubyte.gz");
        let lab_path = dir.path().join("labels-idx1-ubyte.gz");
        for (path, bytes) in [
            (&img_path, idx_image_bytes(1, 1, 3, &[10, 20, 30])),
            (&lab_path, idx_label_bytes(1, &[5])),
        ] {
            let f = std::fs::File::create(path).unwrap();
            let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
            enc.write_all(&bytes).unwrap();
            enc.finish().unwrap();
        }
        let batch = load_idx(&img_path, &lab_path).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch.labels(), &[5]);
    }

    #[test]
    fn load_idx_error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");

        // bad magic
        std::fs::write(&img, [0, 0, 8, 9, 0, 0, 0, 0]).unwrap();
        std::fs::write(&lab, idx_label_bytes(0, &[])).unwrap();
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");

        // truncated payload
        std::fs::write(&img, idx_image_bytes(2, 2, 2, &[1, 2, 3])).unwrap();
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(matches!(err, Error::Format { what: "pixel payload", .. }), "{err}");

        // count mismatch: 3 images, 2 labels
        std::fs::write(&img, idx_image_bytes(3, 1, 1, &[1, 2, 3])).unwrap();
        std::fs::write(&lab, idx_label_bytes(2, &[0, 1])).unwrap();
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(
            matches!(err, Error::Format { what: "item count", offset: 4, .. }),
            "{err}"
        );
    }

    #[test]
    fn class_incremental_mnist_shape() {
        let labels: Vec<usize> = (0..200).map(|i| i % 10).collect();
        let train = tiny_batch(&labels, 4);
        let test = tiny_batch(&labels, 4);
        let stream = make_class_incremental(&train, &test, 5, 1000, 1).unwrap();
        assert_eq!(stream.len(), 5);
        let sets: Vec<Vec<usize>> = stream.tasks.iter().map(|t| t.class_set.clone()).collect();
        assert_eq!(
            sets,
            vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]
        );
        for t in &stream.tasks {
            assert_eq!(t.train.len(), 40);
            assert_eq!(t.test.len(), 40);
        }
    }

    #[test]
    fn class_incremental_single_task_holds_everything() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let b = tiny_batch(&labels, 2);
        let stream = make_class_incremental(&b, &b, 1, 100, 1).unwrap();
        assert_eq!(stream.len(), 1);
        assert_eq!(stream.tasks[0].class_set, vec![0, 1, 2]);
        assert_eq!(stream.tasks[0].train.len(), 30);
    }

    #[test]
    fn class_incremental_cap_is_seeded() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let b = tiny_batch(&labels, 2);
        let a = make_class_incremental(&b, &b, 1, 10, 7).unwrap();
        let c = make_class_incremental(&b, &b, 1, 10, 7).unwrap();
        let d = make_class_incremental(&b, &b, 1, 10, 8).unwrap();
        assert_eq!(a.tasks[0].train, c.tasks[0].train);
        assert_ne!(a.tasks[0].train, d.tasks[0].train);
        assert_eq!(a.tasks[0].train.len(), 10);
    }

    #[test]
    fn class_incremental_indivisible_errors() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let b = tiny_batch(&labels, 2);
        assert!(make_class_incremental(&b, &b, 2, 10, 1).is_err());
    }

    #[test]
    fn domain_incremental_shares_class_sets() {
        let a = tiny_batch(&[0, 1, 0, 1], 3);
        let b = tiny_batch(&[1, 0, 1, 0], 3);
        let stream = make_domain_incremental(&[(a.clone(), a.clone()), (b.clone(), b)]).unwrap();
        assert_eq!(stream.len(), 2);
        assert_eq!(stream.scenario, Scenario::DomainIncremental);
        assert_eq!(stream.tasks[0].class_set, stream.tasks[1].class_set);

        let c = tiny_batch(&[0, 2], 3);
        assert!(make_domain_incremental(&[(a.clone(), a), (c.clone(), c)]).is_err());
    }

    #[test]
    fn synth_class_incremental_disjoint_sets() {
        let spec = SynthSpec {
            scenario: Scenario::ClassIncremental,
            n_tasks: 2,
            classes_per_task: 2,
            dims: 8,
            cluster_spread: 0.05,
            domain_shift: 0.0,
            per_task_n: 40,
        };
        let stream = synth_stream(&spec, 3).unwrap();
        assert_eq!(stream.tasks[0].class_set, vec![0, 1]);
        assert_eq!(stream.tasks[1].class_set, vec![2, 3]);
        assert_eq!(stream.total_classes, 4);
        assert_eq!(stream.tasks[0].train.len(), 40);
        // determinism
        let again = synth_stream(&spec, 3).unwrap();
        assert_eq!(stream.tasks[1].train, again.tasks[1].train);
    }

    #[test]
    fn synth_zero_shift_domains_share_distribution() {
        let spec = SynthSpec {
            scenario: Scenario::DomainIncremental,
            n_tasks: 2,
            classes_per_task: 3,
            dims: 4,
            cluster_spread: 0.1,
            domain_shift: 0.0,
            per_task_n: 60,
        };
        let stream = synth_stream(&spec, 5).unwrap();
        // identical class sets, different draws, same underlying means:
        // compare per-class sample means across tasks
        for class in 0..3 {
            let mean_of = |task: &Task| -> Vec<f64> {
                let idx: Vec<usize> = (0..task.train.len())
                    .filter(|&i| task.train.labels()[i] == class)
                    .collect();
                let sel = task.train.select(&idx);
                sel.features().col_means()
            };
            let m0 = mean_of(&stream.tasks[0]);
            let m1 = mean_of(&stream.tasks[1]);
            for (a, b) in m0.iter().zip(&m1) {
                assert!((a - b).abs() < 0.15, "class {class}: {a} vs {b}");
            }
        }
        assert_ne!(stream.tasks[0].train, stream.tasks[1].train);
    }

    #[test]
    fn synth_tiny_spread_is_nearest_centroid_separable() {
        let spec = SynthSpec {
            scenario: Scenario::ClassIncremental,
            n_tasks: 2,
            classes_per_task: 2,
            dims: 12,
            cluster_spread: 1e-4,
            domain_shift: 0.0,
            per_task_n: 30,
        };
        let stream = synth_stream(&spec, 11).unwrap();
        // nearest-centroid oracle: centroids from train, classify test
        let mut centroids: Vec<(usize, Vec<f64>)> = Vec::new();
        for task in &stream.tasks {
            for &class in &task.class_set {
                let idx: Vec<usize> = (0..task.train.len())
                    .filter(|&i| task.train.labels()[i] == class)
                    .collect();
                centroids.push((class, task.train.select(&idx).features().col_means()));
            }
        }
        for task in &stream.tasks {
            for i in 0..task.test.len() {
                let x = task.test.features().row(i);
                let pred = centroids
                    .iter()
                    .min_by(|a, b| {
                        crate::matrix::dist2(x, &a.1).total_cmp(&crate::matrix::dist2(x, &b.1))
                    })
                    .unwrap()
                    .0;
                assert_eq!(pred, task.test.labels()[i]);
            }
        }
    }

    #[test]
    fn synth_rejects_degenerate_specs() {
        let spec = SynthSpec {
            scenario: Scenario::ClassIncremental,
            n_tasks: 0,
            classes_per_task: 2,
            dims: 4,
            cluster_spread: 0.1,
            domain_shift: 0.0,
            per_task_n: 10,
        };
        assert!(synth_stream(&spec, 1).is_err());
    }

    #[test]
    fn reorder_identity_and_inverse() {
        let spec = SynthSpec {
            scenario: Scenario::ClassIncremental,
            n_tasks: 3,
            classes_per_task: 1,
            dims: 2,
            cluster_spread: 0.1,
            domain_shift: 0.0,
            per_task_n: 6,
        };
        let stream = synth_stream(&spec, 2).unwrap();
        let same = reorder(&stream, &OrderSpec::Permutation(vec![0, 1, 2])).unwrap();
        let ids = |s: &TaskStream| s.tasks.iter().map(|t| t.task_id).collect::<Vec<_>>();
        assert_eq!(ids(&stream), ids(&same));

        let p = vec![2, 0, 1];
        let shuffled = reorder(&stream, &OrderSpec::Permutation(p)).unwrap();
        assert_eq!(ids(&shuffled), vec![2, 0, 1]);
        // inverse of [2,0,1] is [1,2,0]
        let back = reorder(&shuffled, &OrderSpec::Permutation(vec![1, 2, 0])).unwrap();
        assert_eq!(ids(&back), ids(&stream));

        assert!(reorder(&stream, &OrderSpec::Permutation(vec![0, 0, 1])).is_err());
        assert!(reorder(&stream, &OrderSpec::Permutation(vec![0, 1])).is_err());
    }

    #[test]
    fn reorder_by_difficulty() {
        let mut stream = synth_stream(
            &SynthSpec {
                scenario: Scenario::ClassIncremental,
                n_tasks: 2,
                classes_per_task: 1,
                dims: 2,
                cluster_spread: 0.1,
                domain_shift: 0.0,
                per_task_n: 4,
            },
            9,
        )
        .unwrap();
        assert!(reorder(&stream, &OrderSpec::EasyFirst).is_err());

        stream.tasks[0].difficulty_tag = Some(Difficulty::Hard);
        stream.tasks[1].difficulty_tag = Some(Difficulty::Easy);
        let easy_first = reorder(&stream, &OrderSpec::EasyFirst).unwrap();
        assert_eq!(easy_first.tasks[0].task_id, 1);
        assert_eq!(easy_first.tasks[1].task_id, 0);
        let hard_first = reorder(&stream, &OrderSpec::HardFirst).unwrap();
        assert_eq!(hard_first.tasks[0].task_id, 0);
    }

    #[test]
    fn stream_invariants_enforced() {
        let b = tiny_batch(&[0, 1], 2);
        let t0 = Task {
            task_id: 0,
            train: b.clone(),
            test: b.clone(),
            class_set: vec![0, 1],
            difficulty_tag: None,
        };
        let mut t1 = t0.clone();
        t1.task_id = 1;
        // class-incremental with overlapping sets
        assert!(TaskStream::new(vec![t0.clone(), t1], Scenario::ClassIncremental, 2).is_err());
        // label outside class set
        let bad = Task {
            class_set: vec![0],
            ..t0.clone()
        };
        assert!(TaskStream::new(vec![bad], Scenario::ClassIncremental, 2).is_err());
        // duplicate ids
        assert!(TaskStream::new(vec![t0.clone(), t0], Scenario::DomainIncremental, 2).is_err());
    }

    #[test]
    fn mean_pool_downscales() {
        let rows = vec![(0..16).map(|v| v as f64 / 16.0).collect::<Vec<f64>>()];
        let batch = Batch::new(Matrix::from_rows(&rows).unwrap(), vec![0]).unwrap();
        let pooled = mean_pool(&batch, 4, 4, 2).unwrap();
        assert_eq!(pooled.feature_dim(), 4);
        // top-left 2x2 block of a row-major 4x4 ramp: (0 + 1 + 4 + 5) / 4 / 16
        assert!((pooled.features().row(0)[0] - 10.0 / 4.0 / 16.0).abs() < 1e-12);
        assert!(mean_pool(&batch, 5, 3, 2).is_err());
    }
}
