//! Dense row-major matrices plus the on-disk tensor format.
//!
//! Every value (data batch, parameter block, feature matrix, gradient) is a
//! [`Tensor`]. Shapes are validated at op boundaries; there is no broadcasting
//! here — the expression graph layer decides which ops broadcast.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// On-disk tensor magic: "PHT1", then u32 rows, u32 cols, f64 values, all
/// little-endian, row-major.
pub const TENSOR_MAGIC: [u8; 4] = *b"PHT1";

/// A dense `rows x cols` matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Real = f64> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 12 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<S: Real> Tensor<S> {
    /// Builds a tensor from row-major data; the length must be `rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "tensor {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// 1 x n row vector.
    pub fn row_vector(data: Vec<S>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    /// n x 1 column vector.
    pub fn col_vector(data: Vec<S>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Tensor { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn same_shape(&self, other: &Tensor<S>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: {}x{} vs {}x{}",
                what, self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.same_shape(other, "zip_map")?;
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        self.map(|x| x * c)
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: S, other: &Tensor<S>) -> Result<()> {
        self.same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum::<S>().sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn transpose(&self) -> Tensor<S> {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Column means as a 1 x cols row vector.
    pub fn col_means(&self) -> Tensor<S> {
        let mut means = vec![S::zero(); self.cols];
        for i in 0..self.rows {
            for (m, &v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let inv = S::one() / S::of(self.rows.max(1) as f64);
        for m in &mut means {
            *m *= inv;
        }
        Tensor::row_vector(means)
    }

    /// Subtracts column means; returns (centered, means).
    pub fn center_columns(&self) -> (Tensor<S>, Tensor<S>) {
        let means = self.col_means();
        let mut out = self.clone();
        for i in 0..out.rows {
            let row = &mut out.data[i * out.cols..(i + 1) * out.cols];
            for (v, &m) in row.iter_mut().zip(means.data()) {
                *v -= m;
            }
        }
        (out, means)
    }

    /// Per-row Euclidean norms.
    pub fn row_norms(&self) -> Vec<S> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|&x| x * x).sum::<S>().sqrt())
            .collect()
    }

    /// `self @ rhs`.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} @ {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let n = rhs.cols;
        let mut out = vec![S::zero(); self.rows * n];
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &rhs.data[k * n..(k + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(Tensor { rows: self.rows, cols: n, data: out })
    }

    /// `self @ rhs^T` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.cols != rhs.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt {}x{} @ ({}x{})^T",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let n = rhs.rows;
        let mut out = vec![S::zero(); self.rows * n];
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = rhs.row(j);
                let mut acc = S::zero();
                for (&a, &b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                *o = acc;
            }
        }
        Ok(Tensor { rows: self.rows, cols: n, data: out })
    }

    /// `self^T @ rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul_tn ({}x{})^T @ {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (r, c) = (self.cols, rhs.cols);
        let mut out = vec![S::zero(); r * c];
        for i in 0..self.rows {
            let arow = self.row(i);
            let brow = rhs.row(i);
            for (k, &aik) in arow.iter().enumerate() {
                let crow = &mut out[k * c..(k + 1) * c];
                for (o, &b) in crow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(Tensor { rows: r, cols: c, data: out })
    }

    /// Stacks tensors vertically (same column count).
    pub fn vstack(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::ShapeMismatch("vstack: column counts differ".into()));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Copies the given rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::InvalidArg(format!("row index {} out of {}", i, self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor { rows: idx.len(), cols: self.cols, data })
    }

    // ---- serialization ---------------------------------------------------

    /// Writes the binary tensor format (values stored as f64 little-endian).
    pub fn write_to(&self, w: &mut impl IoWrite) -> std::io::Result<()> {
        if self.rows > u32::MAX as usize || self.cols > u32::MAX as usize {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "tensor dimensions exceed u32",
            ));
        }
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the binary tensor format. Rejects bad magic, truncation,
    /// trailing bytes, and non-finite values.
    pub fn read_from(r: &mut impl IoRead) -> Result<Tensor<S>> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::MalformedTensor("missing magic".into()))?;
        if magic != TENSOR_MAGIC {
            return Err(Error::MalformedTensor(format!("bad magic {:?}", magic)));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| Error::MalformedTensor("missing row count".into()))?;
        let rows = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)
            .map_err(|_| Error::MalformedTensor("missing column count".into()))?;
        let cols = u32::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)
                .map_err(|_| Error::MalformedTensor("truncated values".into()))?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::MalformedTensor("non-finite value".into()));
            }
            data.push(S::of(v));
        }
        if r.read(&mut buf).map_err(|e| Error::MalformedTensor(e.to_string()))? != 0 {
            return Err(Error::MalformedTensor("trailing bytes".into()));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor<S>> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = std::io::BufReader::new(file);
        Self::read_from(&mut r)
    }
}
