//! Labelled datasets: synthetic generators and the `DSET` binary format.
//!
//! `DSET` layout (little-endian): magic `"DSET"`, `u32` sample count, `u32`
//! feature dim, `u32` class count, `f32` features row-major, `u16` labels.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const DSET_MAGIC: &[u8; 4] = b"DSET";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.ndim() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "features {:?} with {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > usize::from(u16::MAX) + 1 {
            return Err(Error::InvalidInput(format!("{num_classes} classes")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `idx` as a (features, labels) batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(idx)?;
        Dataset::new(x, y, self.num_classes)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    pub fn to_dset_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(DSET_MAGIC);
        w.u32(binio::to_u32(self.len(), "sample count")?);
        w.u32(binio::to_u32(self.feature_dim(), "feature dim")?);
        w.u32(binio::to_u32(self.num_classes, "class count")?);
        w.f32s(self.features.data());
        let labels: Vec<u16> = self.labels.iter().map(|&y| y as u16).collect();
        w.u16s(&labels);
        Ok(w.buf)
    }

    pub fn from_dset_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(buf, path);
        r.magic(DSET_MAGIC)?;
        let n = r.u32("sample count")? as usize;
        let d = r.u32("feature dim")? as usize;
        let c = r.u32("class count")? as usize;
        if n == 0 || d == 0 || c == 0 {
            return Err(r.corrupt_at(4, format!("empty header n={n} d={d} classes={c}")));
        }
        let feat_len = n
            .checked_mul(d)
            .ok_or_else(|| r.corrupt("feature count overflows"))?;
        let features = r.f32s(feat_len, "features")?;
        let label_pos = r.position();
        let labels = r.u16s(n, "labels")?;
        r.finish()?;
        if let Some(i) = labels.iter().position(|&y| usize::from(y) >= c) {
            return Err(r.corrupt_at(
                label_pos + 2 * i,
                format!("label {} out of range for {c} classes", labels[i]),
            ));
        }
        Dataset::new(
            Tensor::matrix(n, d, features)?,
            labels.into_iter().map(usize::from).collect(),
            c,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_dset_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_dset_bytes(&binio::read_file(path)?, path)
    }
}

/// Built-in generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticSpec {
    /// Each class is a mixture of Gaussian clusters whose centers are drawn
    /// from `N(0, center_scale²)`.
    Blobs {
        classes: usize,
        features: usize,
        clusters_per_class: usize,
        center_scale: f64,
        noise: f64,
        train: usize,
        test: usize,
    },
    /// Interleaved spiral arms, one per class, in the plane.
    Spirals {
        classes: usize,
        turns: f64,
        noise: f64,
        train: usize,
        test: usize,
    },
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (classes, train, test) = match *self {
            SyntheticSpec::Blobs {
                classes,
                features,
                clusters_per_class,
                center_scale,
                noise,
                train,
                test,
            } => {
                if features == 0 || clusters_per_class == 0 {
                    return Err(Error::config(
                        "dataset.synthetic",
                        "features and clusters_per_class must be >= 1",
                    ));
                }
                if !(center_scale >= 0.0 && noise >= 0.0) {
                    return Err(Error::config(
                        "dataset.synthetic",
                        "center_scale and noise must be >= 0",
                    ));
                }
                (classes, train, test)
            }
            SyntheticSpec::Spirals {
                classes,
                turns,
                noise,
                train,
                test,
            } => {
                if !(turns > 0.0 && noise >= 0.0) {
                    return Err(Error::config(
                        "dataset.synthetic",
                        "turns must be > 0 and noise >= 0",
                    ));
                }
                (classes, train, test)
            }
        };
        if classes < 2 {
            return Err(Error::config("dataset.synthetic.classes", "need at least 2 classes"));
        }
        if train == 0 || test == 0 {
            return Err(Error::config("dataset.synthetic", "train and test must be >= 1"));
        }
        Ok(())
    }

    /// Generates `(train, test)` from independent seed streams.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        match *self {
            SyntheticSpec::Blobs {
                classes,
                features,
                clusters_per_class,
                center_scale,
                noise,
                train,
                test,
            } => {
                let mut crng = rng::stream(seed, "blob-centers", &[]);
                let centers: Vec<Vec<f64>> = (0..classes * clusters_per_class)
                    .map(|_| {
                        (0..features)
                            .map(|_| center_scale * normal(&mut crng))
                            .collect()
                    })
                    .collect();
                let make = |n: usize, tag: &str| {
                    let mut r = rng::stream(seed, tag, &[]);
                    let mut x = Vec::with_capacity(n * features);
                    let mut y = Vec::with_capacity(n);
                    for i in 0..n {
                        let class = i % classes;
                        let cluster = r.random_range(0..clusters_per_class);
                        let c = &centers[class * clusters_per_class + cluster];
                        x.extend(c.iter().map(|&m| (m + noise * normal(&mut r)) as f32));
                        y.push(class);
                    }
                    Dataset::new(Tensor::matrix(n, features, x)?, y, classes)
                };
                Ok((make(train, "blobs-train")?, make(test, "blobs-test")?))
            }
            SyntheticSpec::Spirals {
                classes,
                turns,
                noise,
                train,
                test,
            } => {
                let make = |n: usize, tag: &str| {
                    let mut r = rng::stream(seed, tag, &[]);
                    let mut x = Vec::with_capacity(n * 2);
                    let mut y = Vec::with_capacity(n);
                    for i in 0..n {
                        let class = i % classes;
                        let t: f64 = r.random_range(0.05..1.0);
                        let angle =
                            2.0 * PI * turns * t + 2.0 * PI * class as f64 / classes as f64;
                        x.push((t * angle.cos() + noise * normal(&mut r)) as f32);
                        x.push((t * angle.sin() + noise * normal(&mut r)) as f32);
                        y.push(class);
                    }
                    Dataset::new(Tensor::matrix(n, 2, x)?, y, classes)
                };
                Ok((make(train, "spirals-train")?, make(test, "spirals-test")?))
            }
        }
    }
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}
