//! Datasets, the task-split protocol and mini-batch ordering.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Immutable labelled sample collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(GapError::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(GapError::LabelRange { label, n_classes });
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Features and labels of the given rows, in the given order.
    pub fn gather(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    /// Every row repeated `times` times, in blocks.
    pub fn repeated(&self, times: usize) -> Dataset {
        let rows: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        let (features, labels) = self.gather(&rows);
        Dataset {
            features,
            labels,
            n_classes: self.n_classes,
        }
    }
}

/// Gaussian class clusters.
///
/// Class means are drawn uniformly from `[-4, 4]^dim`; each sample is its
/// class mean plus `spread` times standard-normal noise, so `spread` sets the
/// class overlap. Each class contributes `round(0.8 n)` training samples and
/// the rest to the test set; rows are grouped by class.
pub fn gen_blobs(
    seed: u64,
    n_classes: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
) -> Result<(Dataset, Dataset)> {
    if n_classes < 2 {
        return Err(GapError::Argument("blobs need at least 2 classes".into()));
    }
    if dim < 2 {
        return Err(GapError::Argument("blobs need dim >= 2".into()));
    }
    if n_per_class < 2 {
        return Err(GapError::Argument("blobs need at least 2 samples per class".into()));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(GapError::Argument(format!("spread must be positive, got {spread}")));
    }
    let mut rng = Rng::new(seed);
    let means: Vec<f64> = (0..n_classes * dim).map(|_| rng.uniform(-4.0, 4.0)).collect();
    let n_train = ((4 * n_per_class + 2) / 5).clamp(1, n_per_class - 1);
    let n_test = n_per_class - n_train;

    let mut train_x = Vec::with_capacity(n_classes * n_train * dim);
    let mut test_x = Vec::with_capacity(n_classes * n_test * dim);
    let mut train_y = Vec::with_capacity(n_classes * n_train);
    let mut test_y = Vec::with_capacity(n_classes * n_test);
    for c in 0..n_classes {
        let mean = &means[c * dim..(c + 1) * dim];
        for s in 0..n_per_class {
            let (xs, ys) = if s < n_train {
                (&mut train_x, &mut train_y)
            } else {
                (&mut test_x, &mut test_y)
            };
            for &m in mean {
                xs.push(m + spread * rng.standard_normal());
            }
            ys.push(c);
        }
    }
    let train = Dataset::new(
        Tensor::new(vec![n_classes * n_train, dim], train_x)?,
        train_y,
        n_classes,
    )?;
    let test = Dataset::new(
        Tensor::new(vec![n_classes * n_test, dim], test_x)?,
        test_y,
        n_classes,
    )?;
    Ok((train, test))
}

/// Shape and count of a raw byte dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMeta {
    /// Per-record shape, e.g. `[3, 32, 32]` for channels x height x width.
    pub shape: Vec<usize>,
    pub count: usize,
    pub n_classes: usize,
}

/// Loads one-byte-per-value features (scaled by 1/255) and one-byte labels.
pub fn load_raw(features_path: &Path, labels_path: &Path, meta: &RawMeta) -> Result<Dataset> {
    if meta.count == 0 || meta.shape.is_empty() || meta.shape.contains(&0) {
        return Err(GapError::Argument(format!("invalid raw metadata {meta:?}")));
    }
    let record: usize = meta.shape.iter().product();
    let features = fs::read(features_path).map_err(|e| GapError::io(features_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| GapError::io(labels_path, e))?;
    let fname = features_path.display().to_string();
    let lname = labels_path.display().to_string();

    let want = record * meta.count;
    if features.len() < want {
        let rec = features.len() / record;
        return Err(GapError::format_at_byte(
            fname,
            features.len() as u64,
            format!("truncated in record {rec}: expected {want} bytes for {} records", meta.count),
        ));
    }
    if features.len() > want {
        return Err(GapError::format_at_byte(
            fname,
            want as u64,
            format!("{} trailing bytes after {} records", features.len() - want, meta.count),
        ));
    }
    if labels.len() != meta.count {
        return Err(GapError::format_at_byte(
            lname,
            labels.len().min(meta.count) as u64,
            format!("expected {} label bytes, found {}", meta.count, labels.len()),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l as usize >= meta.n_classes) {
        return Err(GapError::format_at_byte(
            lname,
            pos as u64,
            format!("label {} out of range for {} classes", labels[pos], meta.n_classes),
        ));
    }
    let mut shape = vec![meta.count];
    shape.extend_from_slice(&meta.shape);
    let data = features.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(
        Tensor::new(shape, data)?,
        labels.iter().map(|&l| l as usize).collect(),
        meta.n_classes,
    )
}

/// Quantizes features into bytes with `round(255 (x - lo) / (hi - lo))`, clamped.
pub fn quantize(features: &Tensor, lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    features
        .data()
        .iter()
        .map(|&x| (255.0 * (x - lo) / span).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes a dataset in the raw byte format; `(lo, hi)` maps onto `[0, 255]`.
pub fn save_raw(ds: &Dataset, features_path: &Path, labels_path: &Path, lo: f64, hi: f64) -> Result<RawMeta> {
    if ds.n_classes() > 256 {
        return Err(GapError::Argument("raw labels hold at most 256 classes".into()));
    }
    fs::write(features_path, quantize(ds.features(), lo, hi)).map_err(|e| GapError::io(features_path, e))?;
    let labels: Vec<u8> = ds.labels().iter().map(|&l| l as u8).collect();
    fs::write(labels_path, labels).map_err(|e| GapError::io(labels_path, e))?;
    Ok(RawMeta {
        shape: ds.sample_shape().to_vec(),
        count: ds.len(),
        n_classes: ds.n_classes(),
    })
}

/// Disjoint task index sets over a training set, plus the joint flag.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    task_indices: Vec<Vec<usize>>,
    fractions: Vec<f64>,
    joint: bool,
    n_samples: usize,
}

impl TaskSequence {
    pub fn n_tasks(&self) -> usize {
        self.task_indices.len()
    }

    pub fn task(&self, k: usize) -> &[usize] {
        &self.task_indices[k]
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn joint(&self) -> bool {
        self.joint
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Indices the trainer draws from while on task `k`: the union of tasks
    /// `0..=k` in the joint setting, task `k` alone otherwise.
    pub fn pool(&self, k: usize) -> Vec<usize> {
        if self.joint {
            self.task_indices[..=k].concat()
        } else {
            self.task_indices[k].clone()
        }
    }
}

fn task_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut sizes: Vec<usize> = fractions[..fractions.len() - 1]
        .iter()
        .map(|f| (f * n as f64 / 100.0).round() as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    sizes.push(n.saturating_sub(used));
    sizes
}

fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(GapError::Argument("at least one task fraction is required".into()));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 100.0)) {
        return Err(GapError::Argument(format!("fractions must be in (0, 100]: {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 100.0).abs() > 1e-9 {
        return Err(GapError::Argument(format!("fractions sum to {sum}, not 100")));
    }
    Ok(())
}

/// Per-class, per-task counts: floors of the exact shares, topped up so that
/// every class total and every task size is met. Top-ups go to the classes
/// with the most leftover first, each to the task with the largest remaining
/// need (lowest index on ties), one unit per (class, task) pair while possible.
fn apportion(class_counts: &[usize], fractions: &[f64], sizes: &[usize]) -> Vec<Vec<usize>> {
    let k = fractions.len();
    let mut alloc: Vec<Vec<usize>> = class_counts
        .iter()
        .map(|&nc| {
            fractions
                .iter()
                .map(|f| (f * nc as f64 / 100.0).floor() as usize)
                .collect()
        })
        .collect();
    let mut need: Vec<isize> = (0..k)
        .map(|t| sizes[t] as isize - alloc.iter().map(|row| row[t] as isize).sum::<isize>())
        .collect();
    let mut left: Vec<usize> = class_counts
        .iter()
        .zip(&alloc)
        .map(|(&nc, row)| nc - row.iter().sum::<usize>())
        .collect();

    let mut order: Vec<usize> = (0..class_counts.len()).collect();
    order.sort_by(|&a, &b| left[b].cmp(&left[a]).then(a.cmp(&b)));
    for &c in &order {
        let mut used = vec![false; k];
        while left[c] > 0 {
            let pick = (0..k)
                .filter(|&t| !used[t] && need[t] > 0)
                .max_by(|&a, &b| need[a].cmp(&need[b]).then(b.cmp(&a)));
            match pick {
                Some(t) => {
                    used[t] = true;
                    alloc[c][t] += 1;
                    need[t] -= 1;
                    left[c] -= 1;
                }
                None => break,
            }
        }
    }
    // Anything still unplaced goes where demand remains, then to the last task.
    for c in 0..class_counts.len() {
        while left[c] > 0 {
            let t = (0..k).find(|&t| need[t] > 0).unwrap_or(k - 1);
            alloc[c][t] += 1;
            need[t] -= 1;
            left[c] -= 1;
        }
    }
    alloc
}

/// Splits `train` into disjoint tasks holding the given percentages of samples.
///
/// With `stratified` the split is done per class so every task sees each class
/// in proportion; otherwise one seeded permutation is cut into consecutive
/// chunks. Task index sets are returned sorted.
pub fn split_tasks(
    train: &Dataset,
    fractions: &[f64],
    joint: bool,
    seed: u64,
    stratified: bool,
) -> Result<TaskSequence> {
    validate_fractions(fractions)?;
    let n = train.len();
    if n == 0 {
        return Err(GapError::Argument("cannot split an empty dataset".into()));
    }
    let sizes = task_sizes(n, fractions);
    let mut rng = Rng::new(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);

    let mut tasks: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    if stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.n_classes()];
        for &i in &perm {
            by_class[train.labels()[i]].push(i);
        }
        let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let alloc = apportion(&counts, fractions, &sizes);
        for (members, row) in by_class.iter().zip(&alloc) {
            let mut start = 0;
            for (t, &cnt) in row.iter().enumerate() {
                tasks[t].extend_from_slice(&members[start..start + cnt]);
                start += cnt;
            }
        }
    } else {
        let mut start = 0;
        for (t, &size) in sizes.iter().enumerate() {
            tasks[t].extend_from_slice(&perm[start..start + size]);
            start += size;
        }
    }
    if let Some(t) = tasks.iter().position(Vec::is_empty) {
        return Err(GapError::Argument(format!(
            "task {t} is empty for {n} samples and fractions {fractions:?}"
        )));
    }
    for t in &mut tasks {
        t.sort_unstable();
    }
    Ok(TaskSequence {
        task_indices: tasks,
        fractions: fractions.to_vec(),
        joint,
        n_samples: n,
    })
}

/// Mini-batches over a pool for a number of epochs.
///
/// Each epoch restores the pool order and applies a fresh Fisher–Yates shuffle,
/// then emits consecutive batches; the final short batch of an epoch is kept.
pub struct BatchIter<'a> {
    pool: &'a [usize],
    order: Vec<usize>,
    batch_size: usize,
    epochs_left: usize,
    pos: usize,
    rng: &'a mut Rng,
}

pub fn batch_iter<'a>(pool: &'a [usize], batch_size: usize, epochs: usize, rng: &'a mut Rng) -> BatchIter<'a> {
    assert!(batch_size > 0, "batch size must be positive");
    BatchIter {
        pool,
        order: Vec::new(),
        batch_size,
        epochs_left: epochs,
        pos: pool.len(),
        rng,
    }
}

/// Total batches `batch_iter` yields.
pub fn batch_count(pool_len: usize, batch_size: usize, epochs: usize) -> usize {
    epochs * pool_len.div_ceil(batch_size)
}

impl Iterator for BatchIter<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pool.is_empty() {
            return None;
        }
        if self.pos >= self.order.len() {
            if self.epochs_left == 0 {
                return None;
            }
            self.epochs_left -= 1;
            self.order.clear();
            self.order.extend_from_slice(self.pool);
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(n_per_class: usize, n_classes: usize) -> Dataset {
        let n = n_per_class * n_classes;
        let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
        Dataset::new(Tensor::zeros(vec![n, 2]), labels, n_classes).unwrap()
    }

    #[test]
    fn blob_split_sizes() {
        let (train, test) = gen_blobs(1, 8, 250, 32, 6.0).unwrap();
        assert_eq!(train.len(), 1600);
        assert_eq!(test.len(), 400);
        assert_eq!(train.class_counts(), vec![200; 8]);
        assert_eq!(test.class_counts(), vec![50; 8]);
    }

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(gen_blobs(3, 4, 20, 5, 1.0).unwrap(), gen_blobs(3, 4, 20, 5, 1.0).unwrap());
        assert_ne!(gen_blobs(3, 4, 20, 5, 1.0).unwrap().0, gen_blobs(4, 4, 20, 5, 1.0).unwrap().0);
    }

    #[test]
    fn vanishing_spread_collapses_to_mean() {
        let (train, test) = gen_blobs(2, 3, 10, 4, 1e-300).unwrap();
        for ds in [&train, &test] {
            for c in 0..3 {
                let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == c).collect();
                let first = ds.features().row(rows[0]).to_vec();
                for &r in &rows {
                    assert_eq!(ds.features().row(r), first.as_slice());
                }
            }
        }
        // Test rows of a class share the mean with its training rows.
        assert_eq!(train.features().row(0), test.features().row(0));
    }

    #[test]
    fn blob_argument_errors() {
        assert!(matches!(gen_blobs(0, 1, 10, 4, 1.0), Err(GapError::Argument(_))));
        assert!(matches!(gen_blobs(0, 3, 10, 1, 1.0), Err(GapError::Argument(_))));
        assert!(matches!(gen_blobs(0, 3, 10, 4, 0.0), Err(GapError::Argument(_))));
    }

    #[test]
    fn joint_pools_grow() {
        let ds = labelled(125, 8);
        let seq = split_tasks(&ds, &[50.0, 50.0], true, 7, true).unwrap();
        assert_eq!(seq.pool(0).len(), 500);
        assert_eq!(seq.pool(1).len(), 1000);
    }

    #[test]
    fn disjoint_pools_follow_fractions() {
        let ds = labelled(125, 8);
        let seq = split_tasks(&ds, &[75.0, 25.0], false, 7, true).unwrap();
        assert_eq!(seq.pool(0).len(), 750);
        assert_eq!(seq.pool(1).len(), 250);
        let seq = split_tasks(&ds, &[75.0, 25.0], false, 7, false).unwrap();
        assert_eq!(seq.pool(1).len(), 250);
    }

    #[test]
    fn rejects_bad_fractions() {
        let ds = labelled(10, 2);
        assert!(split_tasks(&ds, &[50.0, 40.0], true, 0, true).is_err());
        assert!(split_tasks(&ds, &[], true, 0, true).is_err());
        assert!(split_tasks(&ds, &[-10.0, 110.0], true, 0, true).is_err());
    }

    #[test]
    fn batches_keep_short_tail() {
        let pool: Vec<usize> = (0..130).collect();
        let mut rng = Rng::new(0);
        let sizes: Vec<usize> = batch_iter(&pool, 64, 1, &mut rng).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
        assert_eq!(batch_count(130, 64, 1), 3);
    }

    #[test]
    fn batches_are_reproducible_and_cover_each_epoch() {
        let pool: Vec<usize> = (100..150).collect();
        let mut r1 = Rng::new(5);
        let mut r2 = Rng::new(5);
        let a: Vec<Vec<usize>> = batch_iter(&pool, 8, 2, &mut r1).collect();
        let b: Vec<Vec<usize>> = batch_iter(&pool, 8, 2, &mut r2).collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), batch_count(50, 8, 2));
        let mut counts = std::collections::HashMap::new();
        for i in a.concat() {
            *counts.entry(i).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 50);
        assert!(counts.values().all(|&c| c == 2));
    }

    #[test]
    fn raw_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let fpath = dir.path().join("f.bin");
        let lpath = dir.path().join("l.bin");
        let bytes: Vec<u8> = (0..10 * 3 * 32 * 32).map(|i| (i % 256) as u8).collect();
        fs::write(&fpath, &bytes).unwrap();
        fs::write(&lpath, [0u8, 1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        let meta = RawMeta {
            shape: vec![3, 32, 32],
            count: 10,
            n_classes: 10,
        };
        let ds = load_raw(&fpath, &lpath, &meta).unwrap();
        assert_eq!(ds.features().shape(), &[10, 3, 32, 32]);
        assert_eq!(ds.features().data()[255], 1.0);
        assert_eq!(ds.features().data()[0], 0.0);

        fs::write(&fpath, &bytes[..bytes.len() - 7]).unwrap();
        match load_raw(&fpath, &lpath, &meta) {
            Err(GapError::Format { location, .. }) => {
                assert_eq!(location, crate::error::FormatLocation::ByteOffset(bytes.len() as u64 - 7))
            }
            other => panic!("expected format error, got {other:?}"),
        }

        fs::write(&fpath, &bytes).unwrap();
        fs::write(&lpath, [0u8, 1, 2, 3, 4, 5, 6, 7, 8, 12]).unwrap();
        match load_raw(&fpath, &lpath, &meta) {
            Err(GapError::Format { location, .. }) => {
                assert_eq!(location, crate::error::FormatLocation::ByteOffset(9))
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn saved_blobs_reload_with_same_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = gen_blobs(1, 3, 10, 4, 1.0).unwrap();
        let f = dir.path().join("f");
        let l = dir.path().join("l");
        let meta = save_raw(&train, &f, &l, -10.0, 10.0).unwrap();
        let back = load_raw(&f, &l, &meta).unwrap();
        assert_eq!(back.labels(), train.labels());
        for (a, b) in back.features().data().iter().zip(train.features().data()) {
            let restored = -10.0 + 20.0 * a;
            assert!((restored - b).abs() <= 20.0 / 255.0);
        }
    }
}
