//! Dense tensor and matrix algebra: mode-n unfolding, mode-n tensor-matrix
//! products, Tucker reconstruction, and Kronecker products.
//!
//! Storage is a flat `Vec<f64>` in row-major order with the last index
//! fastest; this is the single canonical layout and every index formula
//! below is written against it. Modes are 1-indexed (`1..=3`) to match the
//! usual tensor-algebra convention.
//!
//! Unfolding convention for a 3-D tensor of shape `(I1, I2, I3)`:
//!   mode 1: `M[i1, i2*I3 + i3]`
//!   mode 2: `M[i2, i1*I3 + i3]`
//!   mode 3: `M[i3, i1*I2 + i2]`
//! `fold` is the exact inverse permutation, so `fold(unfold(T,n),n) == T`
//! bit-identically without any arithmetic.

use crate::error::{Result, SweetError};

/// Dense multi-dimensional array, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Dense matrix, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(SweetError::Argument(format!(
                "tensor extents must all be >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SweetError::Shape {
                op: "DenseTensor::new",
                expected: format!("{n} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        DenseTensor::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Element access for 3-D tensors.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k] = v;
    }

    pub fn from_matrix(m: &DenseMatrix) -> Self {
        DenseTensor {
            shape: vec![m.rows, m.cols],
            data: m.data.clone(),
        }
    }

    pub fn to_matrix(&self) -> Result<DenseMatrix> {
        if self.shape.len() != 2 {
            return Err(SweetError::Shape {
                op: "to_matrix",
                expected: "2-D tensor".into(),
                got: format!("{:?}", self.shape),
            });
        }
        DenseMatrix::new(self.shape[0], self.shape[1], self.data.clone())
    }

    fn require_3d(&self, op: &'static str) -> Result<()> {
        if self.shape.len() != 3 {
            return Err(SweetError::Shape {
                op,
                expected: "3-D tensor".into(),
                got: format!("{}-D", self.shape.len()),
            });
        }
        Ok(())
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(SweetError::Argument(format!(
                "matrix extents must be >= 1, got {rows}x{cols}"
            )));
        }
        if rows * cols != data.len() {
            return Err(SweetError::Shape {
                op: "DenseMatrix::new",
                expected: format!("{} elements for {rows}x{cols}", rows * cols),
                got: format!("{}", data.len()),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        DenseMatrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        DenseMatrix {
            rows: n,
            cols: n,
            data,
        }
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        DenseMatrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Prefix sub-block `[0..r) x [0..c)`.
    pub fn prefix(&self, r: usize, c: usize) -> Result<DenseMatrix> {
        if r > self.rows || c > self.cols {
            return Err(SweetError::Argument(format!(
                "prefix {r}x{c} exceeds matrix {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * self.cols..i * self.cols + c]);
        }
        DenseMatrix::new(r, c, data)
    }
}

/// `C = A * B` with the fixed i-k-j loop order; accumulation order is part
/// of the determinism contract.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(SweetError::Shape {
            op: "matmul",
            expected: format!("lhs cols == rhs rows ({})", a.cols),
            got: format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    DenseMatrix::new(m, n, out)
}

fn check_mode(n: usize) -> Result<usize> {
    if !(1..=3).contains(&n) {
        return Err(SweetError::Argument(format!(
            "mode index must be in 1..=3, got {n}"
        )));
    }
    Ok(n - 1)
}

/// Mode-n unfolding of a 3-D tensor into an `I_n x (product of the rest)`
/// matrix; row i holds the mode-n fibers with fixed index i.
pub fn unfold(t: &DenseTensor, n: usize) -> Result<DenseMatrix> {
    t.require_3d("unfold")?;
    let m = check_mode(n)?;
    let (i1, i2, i3) = (t.shape[0], t.shape[1], t.shape[2]);
    match m {
        // Contiguous in the row-major layout: a pure reshape.
        0 => DenseMatrix::new(i1, i2 * i3, t.data.clone()),
        1 => {
            let mut out = vec![0.0; i1 * i2 * i3];
            for a in 0..i1 {
                for b in 0..i2 {
                    for c in 0..i3 {
                        out[b * (i1 * i3) + a * i3 + c] = t.at3(a, b, c);
                    }
                }
            }
            DenseMatrix::new(i2, i1 * i3, out)
        }
        _ => {
            let mut out = vec![0.0; i1 * i2 * i3];
            for a in 0..i1 {
                for b in 0..i2 {
                    for c in 0..i3 {
                        out[c * (i1 * i2) + a * i2 + b] = t.at3(a, b, c);
                    }
                }
            }
            DenseMatrix::new(i3, i1 * i2, out)
        }
    }
}

/// Exact inverse of `unfold`: `shape` is the target 3-D shape whose mode-n
/// extent equals `m.rows`.
pub fn fold(m: &DenseMatrix, n: usize, shape: &[usize]) -> Result<DenseTensor> {
    let mode = check_mode(n)?;
    if shape.len() != 3 {
        return Err(SweetError::Shape {
            op: "fold",
            expected: "3-D target shape".into(),
            got: format!("{shape:?}"),
        });
    }
    let (i1, i2, i3) = (shape[0], shape[1], shape[2]);
    let rest: usize = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != mode)
        .map(|(_, &e)| e)
        .product();
    if m.rows != shape[mode] || m.cols != rest {
        return Err(SweetError::Shape {
            op: "fold",
            expected: format!("{}x{rest} for shape {shape:?} mode {n}", shape[mode]),
            got: format!("{}x{}", m.rows, m.cols),
        });
    }
    match mode {
        0 => DenseTensor::new(shape.to_vec(), m.data.clone()),
        1 => {
            let mut out = vec![0.0; i1 * i2 * i3];
            for b in 0..i2 {
                for a in 0..i1 {
                    for c in 0..i3 {
                        out[(a * i2 + b) * i3 + c] = m.data[b * (i1 * i3) + a * i3 + c];
                    }
                }
            }
            DenseTensor::new(shape.to_vec(), out)
        }
        _ => {
            let mut out = vec![0.0; i1 * i2 * i3];
            for c in 0..i3 {
                for a in 0..i1 {
                    for b in 0..i2 {
                        out[(a * i2 + b) * i3 + c] = m.data[c * (i1 * i2) + a * i2 + b];
                    }
                }
            }
            DenseTensor::new(shape.to_vec(), out)
        }
    }
}

/// Mode-n tensor-matrix product: contracts mode n of `t` with the columns
/// of `m` (shape `J x I_n`), replacing extent `I_n` by `J`.
///
/// Implemented as unfold -> matmul -> fold so every product runs through
/// one multiply kernel.
pub fn mode_n_product(t: &DenseTensor, m: &DenseMatrix, n: usize) -> Result<DenseTensor> {
    t.require_3d("mode_n_product")?;
    let mode = check_mode(n)?;
    if m.cols != t.shape[mode] {
        return Err(SweetError::Shape {
            op: "mode_n_product",
            expected: format!("matrix cols == mode-{n} extent {}", t.shape[mode]),
            got: format!("{}x{}", m.rows, m.cols),
        });
    }
    let unfolded = unfold(t, n)?;
    let product = matmul(m, &unfolded)?;
    let mut shape = t.shape.clone();
    shape[mode] = m.rows;
    fold(&product, n, &shape)
}

/// Tucker reconstruction `G x1 X x2 U x3 V`, always chained in mode order
/// 1, 2, 3 so repeated reconstructions are bit-identical.
pub fn tucker_reconstruct(
    g: &DenseTensor,
    x: &DenseMatrix,
    u: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<DenseTensor> {
    let t1 = mode_n_product(g, x, 1)?;
    let t2 = mode_n_product(&t1, u, 2)?;
    mode_n_product(&t2, v, 3)
}

/// Kronecker product: `out[(i*p+k), (j*q+l)] = A[i,j] * B[k,l]`.
pub fn kronecker(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (m, n, p, q) = (a.rows, a.cols, b.rows, b.cols);
    let mut out = vec![0.0; m * p * n * q];
    let oc = n * q;
    for i in 0..m {
        for j in 0..n {
            let av = a.at(i, j);
            for k in 0..p {
                for l in 0..q {
                    out[(i * p + k) * oc + (j * q + l)] = av * b.at(k, l);
                }
            }
        }
    }
    DenseMatrix {
        rows: m * p,
        cols: n * q,
        data: out,
    }
}

/// Arranges a `(m*n, p, q)` tensor of blocks into the `(m*p, n*q)` matrix
/// whose `(i,j)` block is slice `i*n + j`.
pub fn flatten_blocks(t: &DenseTensor, m: usize, n: usize) -> Result<DenseMatrix> {
    t.require_3d("flatten_blocks")?;
    let (s, p, q) = (t.shape[0], t.shape[1], t.shape[2]);
    if s != m * n {
        return Err(SweetError::Shape {
            op: "flatten_blocks",
            expected: format!("mode-1 extent {} == m*n", m * n),
            got: format!("{s}"),
        });
    }
    let mut out = vec![0.0; m * p * n * q];
    let oc = n * q;
    for i in 0..m {
        for j in 0..n {
            for k in 0..p {
                for l in 0..q {
                    out[(i * p + k) * oc + (j * q + l)] = t.at3(i * n + j, k, l);
                }
            }
        }
    }
    DenseMatrix::new(m * p, n * q, out)
}

/// Expresses `kronecker(A, B)` as a Tucker system: the core carries `B` as
/// its single mode-1 slice, `X` holds the entries of `A` row-major, and the
/// width factors are identities. `flatten_blocks(tucker_reconstruct(..),
/// A.rows, A.cols)` then equals `kronecker(A, B)` elementwise.
pub fn kronecker_as_tucker(
    a: &DenseMatrix,
    b: &DenseMatrix,
) -> (DenseTensor, DenseMatrix, DenseMatrix, DenseMatrix) {
    let g = DenseTensor {
        shape: vec![1, b.rows, b.cols],
        data: b.data.clone(),
    };
    let x = DenseMatrix {
        rows: a.rows * a.cols,
        cols: 1,
        data: a.data.clone(),
    };
    (
        g,
        x,
        DenseMatrix::identity(b.rows),
        DenseMatrix::identity(b.cols),
    )
}

/// Relative Frobenius distance ||a - b||_F / ||b||_F (plain ||a - b||_F
/// when b is all zero). Used by tests and the verify command.
pub fn rel_frobenius_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    if den == 0.0 {
        return num.sqrt();
    }
    (num / den).sqrt()
}
