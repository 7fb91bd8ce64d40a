//! Small dense vectors and matrices of dimension 2 or 3, stored inline.
//!
//! Geometry and coefficient evaluation run in tight per-point loops, so these
//! types are `Copy` and never allocate. Entries outside the active `n x n`
//! block are kept at zero.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

pub const MAX_DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    pub n: usize,
    pub c: [f64; MAX_DIM],
}

impl Vector {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1 && n <= MAX_DIM, "dimension {n} unsupported");
        Self { n, c: [0.0; MAX_DIM] }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let mut v = Self::zeros(s.len());
        v.c[..s.len()].copy_from_slice(s);
        v
    }

    pub fn unit(n: usize, i: usize) -> Self {
        let mut v = Self::zeros(n);
        v.c[i] = 1.0;
        v
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.c[..self.n]
    }

    pub fn dot(&self, o: &Vector) -> f64 {
        (0..self.n).map(|i| self.c[i] * o.c[i]).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.as_slice().iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scale(&self, s: f64) -> Vector {
        let mut r = *self;
        for i in 0..self.n {
            r.c[i] *= s;
        }
        r
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.c[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.c[i]
    }
}

impl Add for Vector {
    type Output = Vector;
    fn add(mut self, o: Vector) -> Vector {
        for i in 0..self.n {
            self.c[i] += o.c[i];
        }
        self
    }
}

impl Sub for Vector {
    type Output = Vector;
    fn sub(mut self, o: Vector) -> Vector {
        for i in 0..self.n {
            self.c[i] -= o.c[i];
        }
        self
    }
}

impl Neg for Vector {
    type Output = Vector;
    fn neg(self) -> Vector {
        self.scale(-1.0)
    }
}

impl Mul<f64> for Vector {
    type Output = Vector;
    fn mul(self, s: f64) -> Vector {
        self.scale(s)
    }
}

/// Square matrix, row-major, `a[row][col]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub n: usize,
    pub a: [[f64; MAX_DIM]; MAX_DIM],
}

impl Mat {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1 && n <= MAX_DIM, "dimension {n} unsupported");
        Self { n, a: [[0.0; MAX_DIM]; MAX_DIM] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i][i] = 1.0;
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, x) in d.iter().enumerate() {
            m.a[i][i] = *x;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n);
            m.a[i][..n].copy_from_slice(r);
        }
        m
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vector]) -> Self {
        let n = cols.len();
        let mut m = Self::zeros(n);
        for (j, c) in cols.iter().enumerate() {
            for i in 0..n {
                m.a[i][j] = c.c[i];
            }
        }
        m
    }

    pub fn column(&self, j: usize) -> Vector {
        let mut v = Vector::zeros(self.n);
        for i in 0..self.n {
            v.c[i] = self.a[i][j];
        }
        v
    }

    pub fn row(&self, i: usize) -> Vector {
        let mut v = Vector::zeros(self.n);
        v.c[..self.n].copy_from_slice(&self.a[i][..self.n]);
        v
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.a[j][i] = self.a[i][j];
            }
        }
        t
    }

    pub fn det(&self) -> f64 {
        let a = &self.a;
        match self.n {
            1 => a[0][0],
            2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
            _ => {
                a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                    - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                    + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
            }
        }
    }

    /// Inverse by cofactors; `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Mat> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let a = &self.a;
        let mut r = Mat::zeros(self.n);
        match self.n {
            1 => r.a[0][0] = 1.0 / d,
            2 => {
                r.a[0][0] = a[1][1] / d;
                r.a[0][1] = -a[0][1] / d;
                r.a[1][0] = -a[1][0] / d;
                r.a[1][1] = a[0][0] / d;
            }
            _ => {
                for i in 0..3 {
                    for j in 0..3 {
                        let (i1, i2) = ((j + 1) % 3, (j + 2) % 3);
                        let (j1, j2) = ((i + 1) % 3, (i + 2) % 3);
                        r.a[i][j] = (a[i1][j1] * a[i2][j2] - a[i1][j2] * a[i2][j1]) / d;
                    }
                }
            }
        }
        Some(r)
    }

    pub fn mul_vec(&self, v: &Vector) -> Vector {
        let mut r = Vector::zeros(self.n);
        for i in 0..self.n {
            let mut s = 0.0;
            for j in 0..self.n {
                s += self.a[i][j] * v.c[j];
            }
            r.c[i] = s;
        }
        r
    }

    /// `u^T M v`.
    pub fn form(&self, u: &Vector, v: &Vector) -> f64 {
        u.dot(&self.mul_vec(v))
    }

    pub fn scale(&self, s: f64) -> Mat {
        let mut r = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                r.a[i][j] *= s;
            }
        }
        r
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[i][i]).sum()
    }

    pub fn frobenius(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self.a[i][j] * self.a[i][j];
            }
        }
        s.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                m = m.max(self.a[i][j].abs());
            }
        }
        m
    }

    pub fn sym_part(&self) -> Mat {
        (*self + self.transpose()).scale(0.5)
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn sym_eigenvalues(&self) -> Vec<f64> {
        let n = self.n;
        if n == 1 {
            return vec![self.a[0][0]];
        }
        if n == 2 {
            let (a, d) = (self.a[0][0], self.a[1][1]);
            let b = 0.5 * (self.a[0][1] + self.a[1][0]);
            let m = 0.5 * (a + d);
            let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            return vec![m - r, m + r];
        }
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (self.a[i][j] + self.a[j][i]));
        let mut e: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e
    }

    /// Eigenvalues of the pencil `S w = lambda G w` for symmetric `S` and SPD `G`, ascending.
    pub fn generalized_sym_eigenvalues(s: &Mat, g: &Mat) -> Vec<f64> {
        let l = g.cholesky().expect("metric must be SPD");
        let li = l.inverse().expect("cholesky factor invertible");
        (li * s.sym_part() * li.transpose()).sym_eigenvalues()
    }

    /// Lower Cholesky factor of an SPD matrix.
    pub fn cholesky(&self) -> Option<Mat> {
        let n = self.n;
        let mut l = Mat::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.a[i][j];
                for k in 0..j {
                    s -= l.a[i][k] * l.a[j][k];
                }
                if i == j {
                    if s <= 0.0 {
                        return None;
                    }
                    l.a[i][i] = s.sqrt();
                } else {
                    l.a[i][j] = s / l.a[j][j];
                }
            }
        }
        Some(l)
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.n, |i, j| self.a[i][j])
    }

    pub fn rows_vec(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.a[i][..self.n].to_vec()).collect()
    }
}

impl Add for Mat {
    type Output = Mat;
    fn add(mut self, o: Mat) -> Mat {
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[i][j] += o.a[i][j];
            }
        }
        self
    }
}

impl Sub for Mat {
    type Output = Mat;
    fn sub(mut self, o: Mat) -> Mat {
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[i][j] -= o.a[i][j];
            }
        }
        self
    }
}

impl Mul for Mat {
    type Output = Mat;
    fn mul(self, o: Mat) -> Mat {
        let n = self.n;
        let mut r = Mat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += self.a[i][k] * o.a[k][j];
                }
                r.a[i][j] = s;
            }
        }
        r
    }
}

/// Fixed-order pairwise summation; results do not depend on thread scheduling.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..lx.len() {
        num += (lx[i] - mx) * (ly[i] - my);
        den += (lx[i] - mx) * (lx[i] - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip_3x3() {
        let m = Mat::from_rows(&[&[2.0, 0.3, -0.1], &[0.1, 1.5, 0.2], &[0.0, -0.4, 3.0]]);
        let p = m * m.inverse().unwrap();
        assert!((p - Mat::identity(3)).max_abs() < 1e-14);
    }

    #[test]
    fn generalized_eigs_match_scaled_identity() {
        let g = Mat::from_rows(&[&[2.0, 0.3], &[0.3, 1.0]]);
        let e = Mat::generalized_sym_eigenvalues(&g.scale(3.0), &g);
        assert!((e[0] - 3.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [0.02, 0.01, 0.005];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.7)).collect();
        assert!((loglog_slope(&x, &y) - 0.7).abs() < 1e-12);
    }
}
