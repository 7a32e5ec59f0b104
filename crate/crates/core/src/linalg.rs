//! Small dense `f64` matrices and a one-sided Jacobi SVD.

/// Row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::new: {rows}x{cols} vs {}", data.len());
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Mat::new(rows, cols, data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "Mat::matmul inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.get(i, p);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(p, j);
                }
            }
        }
        out
    }

    /// The first `k` columns.
    pub fn take_cols(&self, k: usize) -> Mat {
        self.select_cols(&(0..k).collect::<Vec<_>>())
    }

    pub fn select_cols(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            for (c, &j) in idx.iter().enumerate() {
                out.set(i, c, self.get(i, j));
            }
        }
        out
    }

    /// Subtracts each column's mean.
    pub fn center_columns(&mut self) {
        for j in 0..self.cols {
            let mean = (0..self.rows).map(|i| self.get(i, j)).sum::<f64>() / self.rows as f64;
            for i in 0..self.rows {
                self.data[i * self.cols + j] -= mean;
            }
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Thin SVD `A = U · diag(s) · Vᵀ` with `s` sorted descending.
///
/// For an `m × n` input, `u` is `m × r`, `v` is `n × r` with `r = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub v: Mat,
    pub sweeps: usize,
}

/// Relative orthogonality threshold for a column pair.
pub const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Mat) -> Svd {
    if a.rows() < a.cols() {
        let t = svd(&a.transpose());
        return Svd {
            u: t.v,
            s: t.s,
            v: t.u,
            sweeps: t.sweeps,
        };
    }
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (dot(c, c).sqrt(), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let mut u = Mat::zeros(m, n);
    let mut v = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        if sigma > 0.0 {
            for (i, &x) in cols[j].iter().enumerate() {
                u.set(i, k, x / sigma);
            }
        }
        for (i, &x) in vcols[j].iter().enumerate() {
            v.set(i, k, x);
        }
    }
    Svd { u, s, v, sweeps }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(svd: &Svd) -> Mat {
        let mut us = svd.u.clone();
        for i in 0..us.rows() {
            for (k, &s) in svd.s.iter().enumerate() {
                us.set(i, k, us.get(i, k) * s);
            }
        }
        us.matmul(&svd.v.transpose())
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn diagonal_matrix() {
        let a = Mat::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 2.0]);
        let d = svd(&a);
        assert_eq!(d.s, vec![3.0, 2.0, 1.0]);
        assert_close(&reconstruct(&d), &a, 1e-14);
    }

    #[test]
    fn wide_and_tall_reconstruct() {
        let tall = Mat::new(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.5]);
        let d = svd(&tall);
        assert_close(&reconstruct(&d), &tall, 1e-12);
        let wide = tall.transpose();
        let d = svd(&wide);
        assert_eq!(d.u.rows(), 2);
        assert_eq!(d.v.rows(), 4);
        assert_close(&reconstruct(&d), &wide, 1e-12);
    }

    #[test]
    fn rank_deficient_has_zero_singular_value() {
        let a = Mat::new(3, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let d = svd(&a);
        assert!(d.s[1].abs() < 1e-12);
        assert!((d.s[0] - (70.0f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn centering_zeroes_column_means() {
        let mut a = Mat::new(2, 2, vec![1.0, 10.0, 3.0, 20.0]);
        a.center_columns();
        assert_eq!(a.data(), &[-1.0, -5.0, 1.0, 5.0]);
    }
}
