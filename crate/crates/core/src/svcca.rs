//! SVCCA similarity between two activation matrices.
//!
//! Both views are column-centered, truncated to the leading singular
//! directions that explain `variance_fraction` of their energy, and then
//! compared with canonical correlation analysis. The score is the mean
//! canonical correlation, so 1.0 means the two views span the same subspace
//! and values near 0 mean they are unrelated.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Mat};
use crate::tensor::Tensor;

/// Samples × neurons view over `f32` activations.
#[derive(Clone, Copy, Debug)]
pub struct ActivationMatrix<'a> {
    rows: usize,
    cols: usize,
    values: &'a [f32],
}

impl<'a> ActivationMatrix<'a> {
    pub fn new(rows: usize, cols: usize, values: &'a [f32]) -> Result<Self> {
        if rows < 2 {
            return Err(Error::InvalidInput(format!(
                "SVCCA needs at least 2 samples, got {rows}"
            )));
        }
        if cols < 1 || rows * cols != values.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} activation matrix with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite activation".into()));
        }
        Ok(ActivationMatrix { rows, cols, values })
    }

    pub fn from_tensor(t: &'a Tensor) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(Error::Shape(format!("expected a matrix, got {:?}", t.shape())));
        }
        Self::new(t.rows(), t.cols(), t.data())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvccaConfig {
    /// Share of squared singular value mass kept by the truncation.
    pub variance_fraction: f64,
    /// Relative floor below which singular values count as zero.
    pub epsilon: f64,
}

impl Default for SvccaConfig {
    fn default() -> Self {
        SvccaConfig {
            variance_fraction: 0.99,
            epsilon: 1e-8,
        }
    }
}

impl SvccaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance_fraction > 0.0 && self.variance_fraction <= 1.0) {
            return Err(Error::config(
                "variance_fraction",
                format!("{} not in (0, 1]", self.variance_fraction),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", format!("{} must be > 0", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvccaScore {
    /// Mean canonical correlation in `[0, 1]`.
    pub value: f64,
    /// Set when either view has no variance; `value` is then 0.
    pub degenerate: bool,
    /// Directions kept for each view after truncation.
    pub ranks: (usize, usize),
}

impl SvccaScore {
    fn degenerate() -> Self {
        SvccaScore {
            value: 0.0,
            degenerate: true,
            ranks: (0, 0),
        }
    }
}

/// Centered data projected onto its top singular directions, or `None`
/// when the view carries no variance.
fn reduce(a: &ActivationMatrix<'_>, cfg: &SvccaConfig) -> Option<Mat> {
    let mut m = Mat::from_f32(a.rows, a.cols, a.values);
    let raw_energy = m.frobenius_sq();
    m.center_columns();
    let total = m.frobenius_sq();
    if total <= 1e-24 * raw_energy.max(1.0) || total == 0.0 {
        return None;
    }
    let d = svd(&m);
    let target = cfg.variance_fraction * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    let mut keep = 0;
    for &s in &d.s {
        acc += s * s;
        keep += 1;
        if acc >= target {
            break;
        }
    }
    let mut proj = d.u.take_cols(keep);
    for i in 0..proj.rows() {
        for (k, &s) in d.s[..keep].iter().enumerate() {
            proj.set(i, k, proj.get(i, k) * s);
        }
    }
    Some(proj)
}

/// Orthonormal basis of the column space, dropping directions whose singular
/// value falls below `epsilon` relative to the largest.
fn whiten(x: &Mat, epsilon: f64) -> Mat {
    let d = svd(x);
    let smax = d.s.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..d.s.len())
        .filter(|&k| d.s[k] > epsilon * smax && d.s[k] > 0.0)
        .collect();
    d.u.select_cols(&keep)
}

/// Canonical correlations between the column spaces of `x` and `y`, descending.
pub fn canonical_correlations(x: &Mat, y: &Mat, epsilon: f64) -> Vec<f64> {
    let wx = whiten(x, epsilon);
    let wy = whiten(y, epsilon);
    if wx.cols() == 0 || wy.cols() == 0 {
        return Vec::new();
    }
    let k = wx.cols().min(wy.cols());
    let cross = wx.transpose().matmul(&wy);
    let mut rho = svd(&cross).s;
    rho.truncate(k);
    rho
}

pub fn svcca_score(
    a: &ActivationMatrix<'_>,
    b: &ActivationMatrix<'_>,
    cfg: &SvccaConfig,
) -> Result<SvccaScore> {
    cfg.validate()?;
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "SVCCA views have {} and {} samples",
            a.rows, b.rows
        )));
    }
    let (Some(ra), Some(rb)) = (reduce(a, cfg), reduce(b, cfg)) else {
        warn!("SVCCA on a view without variance; scoring 0");
        return Ok(SvccaScore::degenerate());
    };
    let rho = canonical_correlations(&ra, &rb, cfg.epsilon);
    if rho.is_empty() {
        warn!("SVCCA found no usable directions; scoring 0");
        return Ok(SvccaScore::degenerate());
    }
    let mean = rho.iter().sum::<f64>() / rho.len() as f64;
    Ok(SvccaScore {
        value: mean.clamp(0.0, 1.0),
        degenerate: false,
        ranks: (ra.cols(), rb.cols()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(rows: usize, cols: usize, v: &[f32]) -> ActivationMatrix<'_> {
        ActivationMatrix::new(rows, cols, v).unwrap()
    }

    #[test]
    fn constant_input_is_degenerate_not_an_error() {
        let z = vec![3.0f32; 8];
        let x = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 7.0, 1.0, 0.0];
        let s = svcca_score(&view(4, 2, &z), &view(4, 2, &x), &SvccaConfig::default()).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn invalid_inputs() {
        let x = [1.0f32, 2.0];
        assert!(ActivationMatrix::new(1, 2, &x).is_err());
        assert!(ActivationMatrix::new(2, 2, &x).is_err());
        let nan = [1.0f32, f32::NAN];
        assert!(ActivationMatrix::new(2, 1, &nan).is_err());

        let a = [1.0f32, 2.0, 3.0];
        let b = [1.0f32, 2.0];
        assert!(svcca_score(&view(3, 1, &a), &view(2, 1, &b), &SvccaConfig::default()).is_err());
        let bad = SvccaConfig {
            variance_fraction: 0.0,
            ..Default::default()
        };
        assert!(svcca_score(&view(3, 1, &a), &view(3, 1, &a), &bad).is_err());
    }

    #[test]
    fn linear_relation_scores_one() {
        let a = [1.0f32, 0.0, 0.0, 1.0, 2.0, 1.0, -1.0, 3.0];
        let b: Vec<f32> = a.chunks(2).flat_map(|r| [r[0] + r[1], r[0] - 2.0 * r[1]]).collect();
        let s = svcca_score(&view(4, 2, &a), &view(4, 2, &b), &SvccaConfig::default()).unwrap();
        assert!((s.value - 1.0).abs() < 1e-9, "{s:?}");
    }
}
