//! Small dense symmetric linear algebra for the Fréchet distance.

use crate::error::{Error, Result};

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::dim(
                "matrix",
                format!("{} values for a {n}x{n} matrix", data.len()),
            ));
        }
        Ok(SquareMatrix { n, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn matmul(&self, other: &SquareMatrix) -> SquareMatrix {
        let n = self.n;
        let mut out = SquareMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// `(A + Aᵀ)/2`, removing round-off asymmetry.
    pub fn symmetrized(&self) -> SquareMatrix {
        let n = self.n;
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: SquareMatrix,
}

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
pub fn symmetric_eigen(a: &SquareMatrix) -> SymmetricEigen {
    let n = a.n;
    let mut m = a.symmetrized();
    let mut v = SquareMatrix::identity(n);
    let scale: f64 = m.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m.get(p, p), m.get(q, q));
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    SymmetricEigen {
        values: (0..n).map(|i| m.get(i, i)).collect(),
        vectors: v,
    }
}

/// Eigenvalues below `-tol · max(1, λ_max)` are an error; the rest are clamped at 0.
pub fn clamp_psd(values: &[f64], tol: f64) -> Result<Vec<f64>> {
    let top = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    values
        .iter()
        .map(|&v| {
            if v < -tol * top {
                Err(Error::Contract(format!(
                    "matrix is not positive semi-definite: eigenvalue {v:e} below tolerance"
                )))
            } else {
                Ok(v.max(0.0))
            }
        })
        .collect()
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrt_psd(a: &SquareMatrix, tol: f64) -> Result<SquareMatrix> {
    let eig = symmetric_eigen(a);
    let vals = clamp_psd(&eig.values, tol)?;
    let n = a.n;
    let mut out = SquareMatrix::zeros(n);
    for (k, lam) in vals.iter().enumerate() {
        let r = lam.sqrt();
        if r == 0.0 {
            continue;
        }
        for i in 0..n {
            let vi = eig.vectors.get(i, k) * r;
            for j in 0..n {
                out.data[i * n + j] += vi * eig.vectors.get(j, k);
            }
        }
    }
    Ok(out.symmetrized())
}
