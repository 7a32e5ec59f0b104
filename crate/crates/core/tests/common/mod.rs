//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use std::collections::HashMap;

use edgefl_core::overlay::{CacheKey, Decision};
use edgefl_core::{Activation, LayerStack, Tensor};
use nalgebra::DMatrix;
use rand_distr::StandardNormal;

/// Row-major `rows x cols` standard normal samples.
pub fn gaussian(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Vec<f32> {
    (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}

struct Layer64 {
    w: Vec<f64>,
    b: Vec<f64>,
    inp: usize,
    out: usize,
    relu: bool,
}

/// A dense network evaluated entirely in f64.
pub struct Net64 {
    layers: Vec<Layer64>,
}

impl Net64 {
    pub fn from_stack(m: &LayerStack) -> Self {
        Net64 {
            layers: m
                .layers()
                .iter()
                .map(|l| Layer64 {
                    w: l.weight().data().iter().map(|&v| f64::from(v)).collect(),
                    b: l.bias().data().iter().map(|&v| f64::from(v)).collect(),
                    inp: l.in_dim(),
                    out: l.out_dim(),
                    relu: l.activation() == Activation::Relu,
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.w.len() {
                return &mut l.w[idx];
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                return &mut l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Mean softmax cross-entropy and the sign pattern of every ReLU input.
    pub fn loss(&self, x: &[f64], rows: usize, labels: &[usize]) -> (f64, Vec<bool>) {
        let mut a = x.to_vec();
        let mut pattern = Vec::new();
        for l in &self.layers {
            let mut z = vec![0.0; rows * l.out];
            for r in 0..rows {
                for o in 0..l.out {
                    let mut s = l.b[o];
                    for i in 0..l.inp {
                        s += a[r * l.inp + i] * l.w[i * l.out + o];
                    }
                    z[r * l.out + o] = s;
                }
            }
            if l.relu {
                for v in &mut z {
                    pattern.push(*v > 0.0);
                    *v = v.max(0.0);
                }
            }
            a = z;
        }
        let classes = self.layers.last().map_or(0, |l| l.out);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &a[r * classes..(r + 1) * classes];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        (total / rows as f64, pattern)
    }

    /// Central differences for every parameter. Entries whose perturbation
    /// flips a ReLU are `None`: the loss is not differentiable there.
    pub fn fd_gradient(&self, x: &Tensor, labels: &[usize], eps: f64) -> Vec<Option<f64>> {
        let xs: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
        let rows = x.rows();
        let mut net = Net64 {
            layers: self
                .layers
                .iter()
                .map(|l| Layer64 {
                    w: l.w.clone(),
                    b: l.b.clone(),
                    inp: l.inp,
                    out: l.out,
                    relu: l.relu,
                })
                .collect(),
        };
        (0..self.param_count())
            .map(|p| {
                let orig = *net.param_mut(p);
                *net.param_mut(p) = orig + eps;
                let (lp, pp) = net.loss(&xs, rows, labels);
                *net.param_mut(p) = orig - eps;
                let (lm, pm) = net.loss(&xs, rows, labels);
                *net.param_mut(p) = orig;
                (pp == pm).then(|| (lp - lm) / (2.0 * eps))
            })
            .collect()
    }
}

fn center(m: &mut DMatrix<f64>) {
    for mut c in m.column_iter_mut() {
        let mean = c.mean();
        c.add_scalar_mut(-mean);
    }
}

/// Centered view projected on its top singular directions holding
/// `fraction` of the variance.
fn reduce(values: &[f32], rows: usize, cols: usize, fraction: f64) -> DMatrix<f64> {
    let mut m = DMatrix::from_row_iterator(rows, cols, values.iter().map(|&v| f64::from(v)));
    center(&mut m);
    let svd = m.clone().svd(true, false);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let u = svd.u.expect("left singular vectors");
    let mut kept = Vec::new();
    let mut acc = 0.0;
    for &k in &order {
        kept.push(u.column(k) * svd.singular_values[k]);
        acc += svd.singular_values[k].powi(2);
        if acc >= fraction * total * (1.0 - 1e-12) {
            break;
        }
    }
    DMatrix::from_columns(&kept)
}

/// SVCCA score computed with nalgebra: truncation by SVD, then canonical
/// correlations as singular values of `Qx^T Qy` from thin QR bases.
pub fn svcca_oracle(a: &[f32], b: &[f32], rows: usize, cols_a: usize, cols_b: usize) -> f64 {
    let ra = reduce(a, rows, cols_a, 0.99);
    let rb = reduce(b, rows, cols_b, 0.99);
    let qa = ra.qr().q();
    let qb = rb.qr().q();
    let k = qa.ncols().min(qb.ncols());
    let mut rho: Vec<f64> = (qa.transpose() * qb).singular_values().iter().copied().collect();
    rho.sort_by(|x, y| y.total_cmp(x));
    rho.truncate(k);
    (rho.iter().sum::<f64>() / k as f64).clamp(0.0, 1.0)
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut impl rand::Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Multiplies a row-major `rows x cols` matrix by `q` on the right.
pub fn right_multiply(values: &[f32], rows: usize, cols: usize, q: &DMatrix<f64>) -> Vec<f32> {
    let m = DMatrix::from_row_iterator(rows, cols, values.iter().map(|&v| f64::from(v)));
    let p = m * q;
    let mut out = Vec::with_capacity(rows * p.ncols());
    for r in 0..rows {
        for c in 0..p.ncols() {
            out.push(p[(r, c)] as f32);
        }
    }
    out
}

/// Empirical quantile `q` of `xs` (nearest rank).
pub fn quantile(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let rank = ((q * xs.len() as f64).ceil() as usize).clamp(1, xs.len());
    xs[rank - 1]
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct RefEntry {
    interval: u32,
    counter: u32,
}

/// Straight transcription of the transmission controller: a request for an
/// unknown key is sent; a known key is sent once its counter reaches its
/// interval and skipped (counter + 1) otherwise. After a send the key's
/// interval becomes `clamp(round(1 / (1 - s)), 1, max)` for the score `s` of
/// the new activation, 1 for a first upload, and the counter restarts at 0.
pub struct RefController {
    max: u32,
    ids: HashMap<CacheKey, RefEntry>,
}

impl RefController {
    pub fn new(max: u32) -> Self {
        RefController {
            max,
            ids: HashMap::new(),
        }
    }

    pub fn request(&mut self, key: CacheKey) -> Decision {
        match self.ids.get_mut(&key) {
            None => Decision::SendRequired,
            Some(e) if e.counter == e.interval => Decision::SendRequired,
            Some(e) => {
                e.counter += 1;
                Decision::Skip
            }
        }
    }

    pub fn receive(&mut self, key: CacheKey, score: f64) {
        let interval = if !self.ids.contains_key(&key) {
            1
        } else if score >= 1.0 {
            self.max
        } else {
            let raw = (1.0 / (1.0 - score)).round();
            if raw < 1.0 {
                1
            } else if raw > f64::from(self.max) {
                self.max
            } else {
                raw as u32
            }
        };
        self.ids.insert(
            key,
            RefEntry {
                interval,
                counter: 0,
            },
        );
    }

    pub fn interval(&self, key: CacheKey) -> Option<u32> {
        self.ids.get(&key).map(|e| e.interval)
    }
}

/// A random activation record tensor with labels.
pub fn random_batch(rows: usize, cols: usize, classes: usize, rng: &mut impl rand::Rng) -> (Tensor, Vec<usize>) {
    let t = Tensor::matrix(rows, cols, gaussian(rows, cols, rng)).expect("shape");
    let y = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    (t, y)
}
