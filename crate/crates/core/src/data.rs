//! Desk-scale data sources: seeded synthetic generators, CSV ingestion,
//! and the mini/micro-batch iterator.
//!
//! Features are projected onto the unit sphere (the training analysis
//! assumes `‖x‖ = 1`), so every generator normalizes and `load_csv` can.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::model::{forward_stage, NetworkModel, Sample};
use crate::rngstream::stream_rng;

const STREAM_TEACHER: u64 = 0x11;
const STREAM_FEATURES: u64 = 0x12;
const STREAM_MIXTURE: u64 = 0x13;
const STREAM_SHUFFLE: u64 = 0x14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

/// An immutable sample collection.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feature_dim: usize,
    pub label_dim: usize,
    pub task: Task,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Split off the last `n` samples as a held-out set.
    pub fn split_holdout(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::config(format!(
                "holdout size {n} invalid for dataset of {} samples",
                self.len()
            )));
        }
        let held = self.samples.split_off(self.len() - n);
        let eval = Dataset {
            samples: held,
            feature_dim: self.feature_dim,
            label_dim: self.label_dim,
            task: self.task,
        };
        Ok((self, eval))
    }
}

fn unit_sphere_feature<R: Rng>(d: usize, rng: &mut R) -> Vector {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return Vector::new(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

fn normalize_to_sphere(v: &Vector) -> Result<Vector> {
    let norm = v.l2_norm();
    if norm <= 1e-12 {
        return Err(Error::config("cannot normalize a zero feature vector"));
    }
    Ok(Vector::new(v.iter().map(|x| x / norm).collect()))
}

/// Labels produced by running `teacher` forward over the given features.
pub fn labels_from_teacher(teacher: &NetworkModel, features: &[Vector]) -> Result<Vec<Vector>> {
    features
        .iter()
        .map(|x| {
            let mut v = x.clone();
            for stage in &teacher.stages {
                v = forward_stage(stage, &v)?.x_out;
            }
            Ok(v)
        })
        .collect()
}

/// Build the frozen random teacher used by [`gen_teacher_regression`]:
/// `teacher_stages` tanh stages of width `d` feeding a scalar output.
pub fn teacher_network(seed: u64, d: usize, teacher_stages: usize) -> NetworkModel {
    use crate::device::DeviceConfig;
    use crate::model::{ActivationKind, LossKind};
    let mut dims = vec![d; teacher_stages];
    dims.insert(0, d);
    *dims.last_mut().unwrap() = 1;
    let mut rng = stream_rng(seed, STREAM_TEACHER);
    NetworkModel::random(
        &dims,
        ActivationKind::Tanh,
        LossKind::Mse,
        DeviceConfig::digital(),
        &mut rng,
    )
    .expect("teacher dims are valid by construction")
}

/// Regression data: unit-sphere features, labels from a frozen random
/// teacher network. Deterministic per seed.
pub fn gen_teacher_regression(seed: u64, n: usize, d: usize, teacher_stages: usize) -> Dataset {
    assert!(n >= 1 && d >= 1 && teacher_stages >= 1);
    let teacher = teacher_network(seed, d, teacher_stages);
    let mut rng = stream_rng(seed, STREAM_FEATURES);
    let features: Vec<Vector> = (0..n).map(|_| unit_sphere_feature(d, &mut rng)).collect();
    let labels = labels_from_teacher(&teacher, &features)
        .expect("teacher forward is finite on the unit sphere");
    let samples = features
        .into_iter()
        .zip(labels)
        .map(|(x, y)| Sample { x, y })
        .collect();
    Dataset {
        samples,
        feature_dim: d,
        label_dim: 1,
        task: Task::Regression,
    }
}

/// Classification data: Gaussian clouds around separated class means,
/// re-normalized to the unit sphere, one-hot labels. Deterministic per
/// seed. Requires `2 <= classes <= d`.
pub fn gen_gaussian_mixture(seed: u64, n: usize, d: usize, classes: usize) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("gaussian mixture needs at least 2 classes"));
    }
    if classes > d {
        return Err(Error::config(format!(
            "gaussian mixture with {classes} classes needs feature_dim >= {classes}, got {d}"
        )));
    }
    let cloud_std = 0.25;
    let mut rng = stream_rng(seed, STREAM_MIXTURE);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        // Mean is the unit basis vector e_class.
        let mut v: Vec<f64> = (0..d)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * cloud_std
            })
            .collect();
        v[class] += 1.0;
        let x = normalize_to_sphere(&Vector::new(v))?;
        let y = Vector::new((0..classes).map(|c| if c == class { 1.0 } else { 0.0 }).collect());
        samples.push(Sample { x, y });
    }
    Ok(Dataset {
        samples,
        feature_dim: d,
        label_dim: classes,
        task: Task::Classification,
    })
}

/// Load a dataset from CSV with header `x1,...,xd,y1,...,yc`. With
/// `normalize`, features are projected to the unit sphere.
pub fn load_csv(path: &Path, normalize: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::config(format!("{}: bad header: {e}", path.display())))?
        .clone();
    let mut d = 0;
    let mut c = 0;
    for (idx, name) in headers.iter().enumerate() {
        let expect_x = format!("x{}", idx + 1);
        let expect_y = format!("y{}", idx - d + 1);
        if c == 0 && name == expect_x {
            d += 1;
        } else if name == expect_y {
            c += 1;
        } else {
            return Err(Error::config(format!(
                "{}: header column {} is '{name}', expected '{expect_x}' or '{expect_y}'",
                path.display(),
                idx + 1
            )));
        }
    }
    if d == 0 || c == 0 {
        return Err(Error::config(format!(
            "{}: header must name at least one feature and one label column",
            path.display()
        )));
    }

    let mut samples = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 2; // 1-based, after header
        let record =
            record.map_err(|e| Error::config(format!("{}: row {row}: {e}", path.display())))?;
        if record.len() != d + c {
            return Err(Error::config(format!(
                "{}: row {row} has {} fields, expected {}",
                path.display(),
                record.len(),
                d + c
            )));
        }
        let mut values = Vec::with_capacity(d + c);
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::config(format!(
                    "{}: row {row}, column {} ('{}'): not a number: '{field}'",
                    path.display(),
                    col + 1,
                    headers.get(col).unwrap_or("?")
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::config(format!(
                    "{}: row {row}, column {}: non-finite value",
                    path.display(),
                    col + 1
                )));
            }
            values.push(v);
        }
        let mut x = Vector::new(values[..d].to_vec());
        if normalize {
            x = normalize_to_sphere(&x)
                .map_err(|_| Error::config(format!("{}: row {row}: zero feature vector", path.display())))?;
        }
        let y = Vector::new(values[d..].to_vec());
        samples.push(Sample { x, y });
    }
    if samples.is_empty() {
        return Err(Error::config(format!(
            "{}: no data rows",
            path.display()
        )));
    }

    let one_hot = c >= 2
        && samples.iter().all(|s| {
            let mut ones = 0;
            for v in s.y.iter() {
                if *v == 1.0 {
                    ones += 1;
                } else if *v != 0.0 {
                    return false;
                }
            }
            ones == 1
        });
    Ok(Dataset {
        samples,
        feature_dim: d,
        label_dim: c,
        task: if one_hot { Task::Classification } else { Task::Regression },
    })
}

/// Write a dataset as CSV (shortest round-trip float formatting, so
/// `load_csv` reproduces it exactly).
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))?;
    let mut header = Vec::new();
    for i in 0..ds.feature_dim {
        header.push(format!("x{}", i + 1));
    }
    for i in 0..ds.label_dim {
        header.push(format!("y{}", i + 1));
    }
    writer
        .write_record(&header)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    for s in &ds.samples {
        let rec: Vec<String> = s
            .x
            .iter()
            .chain(s.y.iter())
            .map(|v| format!("{v}"))
            .collect();
        writer
            .write_record(&rec)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Mini/micro-batch plan: each mini-batch of `b_mini` samples is split
/// into `b_mini / b_micro` micro-batches.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub b_mini: usize,
    pub b_micro: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(b_mini: usize, b_micro: usize, seed: u64) -> Result<Self> {
        if b_mini == 0 || b_micro == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if b_mini % b_micro != 0 {
            return Err(Error::config(format!(
                "B_mini ({b_mini}) not divisible by B_micro ({b_micro})"
            )));
        }
        Ok(Self {
            b_mini,
            b_micro,
            seed,
        })
    }

    /// Micro-batches per mini-batch.
    pub fn micro_per_mini(&self) -> usize {
        self.b_mini / self.b_micro
    }

    /// The epoch's micro-batches as index lists: a seeded shuffle of
    /// `0..n`, chunked into `⌊n/B_mini⌋` mini-batches of `B` micro-batches
    /// each. Leftover samples (`n mod B_mini`) are dropped. Deterministic
    /// per (seed, epoch).
    pub fn epoch_microbatches(&self, n: usize, epoch: u64) -> Result<Vec<Vec<usize>>> {
        if n < self.b_mini {
            return Err(Error::config(format!(
                "dataset of {n} samples is smaller than B_mini = {}",
                self.b_mini
            )));
        }
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(self.seed ^ STREAM_SHUFFLE.rotate_left(17), epoch);
        perm.shuffle(&mut rng);

        let minis = n / self.b_mini;
        let mut out = Vec::with_capacity(minis * self.micro_per_mini());
        for mini in 0..minis {
            let base = mini * self.b_mini;
            for micro in 0..self.micro_per_mini() {
                let start = base + micro * self.b_micro;
                out.push(perm[start..start + self.b_micro].to_vec());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::{ActivationKind, LossKind, StageState};
    use std::collections::HashSet;

    #[test]
    fn teacher_dataset_deterministic_and_normalized() {
        let a = gen_teacher_regression(3, 50, 6, 2);
        let b = gen_teacher_regression(3, 50, 6, 2);
        assert_eq!(a.samples, b.samples);
        for s in &a.samples {
            assert!((s.x.l2_norm() - 1.0).abs() <= 1e-9);
            assert!(s.y.all_finite());
        }
        let c = gen_teacher_regression(4, 50, 6, 2);
        assert_ne!(a.samples[0].x, c.samples[0].x);
    }

    #[test]
    fn zero_teacher_gives_zero_labels() {
        let teacher = NetworkModel::new(
            vec![
                StageState::new(
                    Matrix::zeros(4, 4),
                    ActivationKind::Tanh,
                    crate::device::DeviceConfig::digital(),
                ),
                StageState::new(
                    Matrix::zeros(1, 4),
                    ActivationKind::Tanh,
                    crate::device::DeviceConfig::digital(),
                ),
            ],
            LossKind::Mse,
        )
        .unwrap();
        let mut rng = stream_rng(0, 1);
        let xs: Vec<Vector> = (0..10).map(|_| unit_sphere_feature(4, &mut rng)).collect();
        for y in labels_from_teacher(&teacher, &xs).unwrap() {
            assert_eq!(y.as_slice(), &[0.0]);
        }
    }

    #[test]
    fn sphere_features_have_small_mean() {
        let d = 8;
        let n = 4000;
        let ds = gen_teacher_regression(9, n, d, 1);
        for j in 0..d {
            let mean: f64 = ds.samples.iter().map(|s| s.x[j]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "coord {j} mean {mean}");
        }
    }

    #[test]
    fn mixture_labels_one_hot_and_deterministic() {
        let a = gen_gaussian_mixture(5, 64, 8, 3).unwrap();
        let b = gen_gaussian_mixture(5, 64, 8, 3).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.task, Task::Classification);
        for s in &a.samples {
            let sum: f64 = s.y.iter().sum();
            assert_eq!(sum, 1.0);
            assert!(s.y.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!((s.x.l2_norm() - 1.0).abs() <= 1e-9);
        }
        assert!(gen_gaussian_mixture(5, 64, 2, 3).is_err());
        assert!(gen_gaussian_mixture(5, 64, 8, 1).is_err());
    }

    #[test]
    fn mixture_linearly_separable_baseline() {
        // A linear softmax model should fit two well-separated classes to
        // >95% train accuracy within 200 digital SGD updates.
        use crate::device::{analog_update, DeviceConfig};
        use crate::model::full_gradient;

        let ds = gen_gaussian_mixture(11, 256, 8, 2).unwrap();
        let mut model = NetworkModel::new(
            vec![StageState::new(
                Matrix::zeros(2, 8),
                ActivationKind::Identity,
                DeviceConfig::digital(),
            )],
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap();
        let dev = DeviceConfig::digital();
        for step in 0..200 {
            let batch: Vec<_> = ds
                .samples
                .iter()
                .cycle()
                .skip((step * 32) % ds.len())
                .take(32)
                .cloned()
                .collect();
            let (_, grads) = full_gradient(&model, &batch).unwrap();
            model.stages[0].weight =
                analog_update(&model.stages[0].weight, &grads[0], 0.5, &dev).unwrap();
        }
        let mut correct = 0;
        for s in &ds.samples {
            let out = model.stages[0].weight.matvec(&s.x);
            if out.argmax() == s.y.argmax() {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.95, "train accuracy {acc}");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();

        let ds = gen_gaussian_mixture(2, 16, 4, 2).unwrap();
        let path = dir.path().join("mix.csv");
        save_csv(&ds, &path).unwrap();
        let loaded = load_csv(&path, false).unwrap();
        assert_eq!(loaded.len(), 16);
        assert_eq!(loaded.feature_dim, 4);
        assert_eq!(loaded.label_dim, 2);
        assert_eq!(loaded.task, Task::Classification);
        for (a, b) in ds.samples.iter().zip(&loaded.samples) {
            for (x1, x2) in a.x.iter().zip(b.x.iter()) {
                assert!((x1 - x2).abs() <= 1e-12);
            }
            assert_eq!(a.y, b.y);
        }

        let tiny = dir.path().join("tiny.csv");
        std::fs::write(&tiny, "x1,x2,y1\n0.6,0.8,1.0\n0.0,1.0,2.0\n").unwrap();
        let t = load_csv(&tiny, false).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.task, Task::Regression);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "x1,y1\n0.5,1.0\nabc,2.0\n").unwrap();
        let err = load_csv(&bad, false).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        assert!(err.contains("x1"), "{err}");

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "x1,y1\n").unwrap();
        assert!(load_csv(&empty, false).is_err());

        let badhdr = dir.path().join("badhdr.csv");
        std::fs::write(&badhdr, "a,b\n1,2\n").unwrap();
        assert!(load_csv(&badhdr, false).is_err());
    }

    #[test]
    fn batch_plan_validation() {
        assert!(BatchPlan::new(10, 3, 0).is_err());
        assert!(BatchPlan::new(0, 1, 0).is_err());
        let plan = BatchPlan::new(128, 16, 0).unwrap();
        assert_eq!(plan.micro_per_mini(), 8);
    }

    #[test]
    fn iterator_shapes_and_partition() {
        let plan = BatchPlan::new(128, 16, 7).unwrap();
        let n = 300; // 2 mini-batches, 44 dropped
        let mbs = plan.epoch_microbatches(n, 0).unwrap();
        assert_eq!(mbs.len(), 2 * 8);
        let mut seen = HashSet::new();
        for mb in &mbs {
            assert_eq!(mb.len(), 16);
            for &i in mb {
                assert!(i < n);
                assert!(seen.insert(i), "index {i} appears twice");
            }
        }
        assert_eq!(seen.len(), 256);

        // Deterministic per (seed, epoch), different across epochs.
        let again = plan.epoch_microbatches(n, 0).unwrap();
        assert_eq!(mbs, again);
        let other = plan.epoch_microbatches(n, 1).unwrap();
        assert_ne!(mbs, other);
    }

    #[test]
    fn single_micro_per_mini() {
        let plan = BatchPlan::new(8, 8, 1).unwrap();
        let mbs = plan.epoch_microbatches(20, 0).unwrap();
        assert_eq!(mbs.len(), 2);
        assert_eq!(mbs[0].len(), 8);
    }
}
