//! Time-indexed (optionally path-indexed) vector and matrix data.
//!
//! A process with `n_paths == None` is shared by every path, which is how
//! deterministic inputs are represented. Matrices are stored column-major.

use nalgebra::{DMatrix, DVector};

use crate::error::{domain, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct VectorProcess {
    dim: usize,
    len: usize,
    n_paths: Option<usize>,
    data: Vec<f64>,
}

impl VectorProcess {
    pub fn zeros(dim: usize, len: usize) -> Self {
        Self {
            dim,
            len,
            n_paths: None,
            data: vec![0.0; dim * len],
        }
    }

    /// Same value at every index and on every path.
    pub fn constant(v: &DVector<f64>, len: usize) -> Self {
        Self::deterministic(v.len(), len, |_| v.clone())
    }

    pub fn deterministic(dim: usize, len: usize, f: impl Fn(usize) -> DVector<f64>) -> Self {
        let mut data = Vec::with_capacity(dim * len);
        for j in 0..len {
            let v = f(j);
            assert_eq!(v.len(), dim, "process value has wrong dimension");
            data.extend_from_slice(v.as_slice());
        }
        Self {
            dim,
            len,
            n_paths: None,
            data,
        }
    }

    pub fn per_path(
        n_paths: usize,
        dim: usize,
        len: usize,
        f: impl Fn(usize, usize) -> DVector<f64>,
    ) -> Self {
        let mut data = Vec::with_capacity(n_paths * dim * len);
        for p in 0..n_paths {
            for j in 0..len {
                let v = f(p, j);
                assert_eq!(v.len(), dim, "process value has wrong dimension");
                data.extend_from_slice(v.as_slice());
            }
        }
        Self {
            dim,
            len,
            n_paths: Some(n_paths),
            data,
        }
    }

    /// Builds a per-path process from raw path-major storage.
    pub fn from_raw(n_paths: usize, dim: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_paths * dim * len {
            return domain(format!(
                "raw process data has {} entries, expected {}",
                data.len(),
                n_paths * dim * len
            ));
        }
        Ok(Self {
            dim,
            len,
            n_paths: Some(n_paths),
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_paths(&self) -> Option<usize> {
        self.n_paths
    }

    pub fn is_shared(&self) -> bool {
        self.n_paths.is_none()
    }

    pub fn at(&self, path: usize, idx: usize) -> &[f64] {
        let p = if self.n_paths.is_some() { path } else { 0 };
        let off = (p * self.len + idx) * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn vec_at(&self, path: usize, idx: usize) -> DVector<f64> {
        DVector::from_column_slice(self.at(path, idx))
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= c);
        out
    }

    /// Checks that the process can be evaluated for `n_paths` paths, `len`
    /// indices and values of dimension `dim`.
    pub(crate) fn check_shape(&self, what: &str, n_paths: usize, len: usize, dim: usize) -> Result<()> {
        if self.dim != dim {
            return domain(format!("{what}: dimension {} but expected {dim}", self.dim));
        }
        if self.len < len {
            return domain(format!("{what}: {} time indices but need {len}", self.len));
        }
        if let Some(p) = self.n_paths {
            if p != n_paths {
                return domain(format!("{what}: {p} paths but ensemble has {n_paths}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixProcess {
    n: usize,
    len: usize,
    n_paths: Option<usize>,
    symmetric: bool,
    data: Vec<f64>,
}

impl MatrixProcess {
    pub fn zeros(n: usize, len: usize) -> Self {
        Self {
            n,
            len,
            n_paths: None,
            symmetric: true,
            data: vec![0.0; n * n * len],
        }
    }

    pub fn constant(m: &DMatrix<f64>, len: usize) -> Self {
        Self::deterministic(m.nrows(), len, |_| m.clone())
    }

    pub fn deterministic(n: usize, len: usize, f: impl Fn(usize) -> DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(n * n * len);
        for j in 0..len {
            let m = f(j);
            assert_eq!(m.shape(), (n, n), "matrix process value has wrong shape");
            data.extend_from_slice(m.as_slice());
        }
        let mut out = Self {
            n,
            len,
            n_paths: None,
            symmetric: false,
            data,
        };
        out.symmetric = out.max_asymmetry() <= 1e-9;
        out
    }

    pub fn per_path(
        n_paths: usize,
        n: usize,
        len: usize,
        f: impl Fn(usize, usize) -> DMatrix<f64>,
    ) -> Self {
        let mut data = Vec::with_capacity(n_paths * n * n * len);
        for p in 0..n_paths {
            for j in 0..len {
                let m = f(p, j);
                assert_eq!(m.shape(), (n, n), "matrix process value has wrong shape");
                data.extend_from_slice(m.as_slice());
            }
        }
        let mut out = Self {
            n,
            len,
            n_paths: Some(n_paths),
            symmetric: false,
            data,
        };
        out.symmetric = out.max_asymmetry() <= 1e-9;
        out
    }

    pub(crate) fn from_raw(n_paths: Option<usize>, n: usize, len: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n_paths.unwrap_or(1) * n * n * len);
        let mut out = Self {
            n,
            len,
            n_paths,
            symmetric: false,
            data,
        };
        out.symmetric = out.max_asymmetry() <= 1e-9;
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_paths(&self) -> Option<usize> {
        self.n_paths
    }

    pub fn is_shared(&self) -> bool {
        self.n_paths.is_none()
    }

    /// Tagged symmetric when every slice satisfies `‖M − Mᵀ‖_max ≤ 1e-9`.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Column-major slice of the matrix at `(path, idx)`.
    pub fn at(&self, path: usize, idx: usize) -> &[f64] {
        let p = if self.n_paths.is_some() { path } else { 0 };
        let sz = self.n * self.n;
        let off = (p * self.len + idx) * sz;
        &self.data[off..off + sz]
    }

    pub fn matrix_at(&self, path: usize, idx: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, self.at(path, idx))
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= c);
        out
    }

    /// Entrywise `self + c·other`; the result is per-path if either input is.
    pub fn add_scaled(&self, c: f64, other: &MatrixProcess) -> Result<Self> {
        if self.n != other.n || self.len != other.len {
            return domain("matrix processes have different shapes");
        }
        let paths = match (self.n_paths, other.n_paths) {
            (Some(a), Some(b)) if a != b => return domain("matrix processes have different path counts"),
            (Some(a), _) | (None, Some(a)) => Some(a),
            (None, None) => None,
        };
        let sz = self.n * self.n;
        let mut data = Vec::with_capacity(paths.unwrap_or(1) * self.len * sz);
        for p in 0..paths.unwrap_or(1) {
            for j in 0..self.len {
                data.extend(self.at(p, j).iter().zip(other.at(p, j)).map(|(a, b)| a + c * b));
            }
        }
        Ok(Self::from_raw(paths, self.n, self.len, data))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for chunk in self.data.chunks(n * n) {
            for c in 0..n {
                for r in (c + 1)..n {
                    worst = worst.max((chunk[c * n + r] - chunk[r * n + c]).abs());
                }
            }
        }
        worst
    }

    pub(crate) fn check_shape(&self, what: &str, n_paths: usize, len: usize, n: usize) -> Result<()> {
        if self.n != n {
            return domain(format!("{what}: matrices are {}x{} but expected {n}x{n}", self.n, self.n));
        }
        if self.len < len {
            return domain(format!("{what}: {} time indices but need {len}", self.len));
        }
        if let Some(p) = self.n_paths {
            if p != n_paths {
                return domain(format!("{what}: {p} paths but ensemble has {n_paths}"));
            }
        }
        Ok(())
    }
}
