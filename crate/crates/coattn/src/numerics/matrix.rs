use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. All model math runs in 64-bit floats;
/// only the on-disk embedding format narrows to `f32`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dimension(
                    "from_rows",
                    format!("row of {c}"),
                    format!("row of {}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// 1 x n row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
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

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "expected 1x1 scalar, got {}",
                self.shape_string()
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dimension("matmul", a.shape_string(), b.shape_string()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::dimension(
            "matmul_nt",
            a.shape_string(),
            b.shape_string(),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut s = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out.data[i * b.rows + j] = s;
        }
    }
    Ok(out)
}

pub fn transpose(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    out
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.same_shape(b) {
        return Err(Error::dimension("add", a.shape_string(), b.shape_string()));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

pub fn scale(a: &Matrix, c: f64) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().map(|x| x * c).collect(),
    }
}

/// Row-wise softmax, stabilized by per-row max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out.data[r * x.cols..(r + 1) * x.cols];
        let mut sum = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Row-wise layer normalization with affine scale/shift of length `x.cols`.
/// Each row is shifted to zero mean and scaled to unit variance (biased
/// variance estimate over the feature axis) before the affine transform.
pub fn layer_norm_rows(x: &Matrix, gamma: &Matrix, beta: &Matrix, epsilon: f64) -> Result<Matrix> {
    if gamma.rows * gamma.cols != x.cols || beta.rows * beta.cols != x.cols {
        return Err(Error::dimension(
            "layer_norm",
            x.shape_string(),
            format!(
                "scale {} / shift {}",
                gamma.shape_string(),
                beta.shape_string()
            ),
        ));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config(format!(
            "layer_norm epsilon must be positive, got {epsilon}"
        )));
    }
    let d = x.cols as f64;
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + epsilon).sqrt();
        let orow = &mut out.data[r * x.cols..(r + 1) * x.cols];
        for c in 0..x.cols {
            orow[c] = (row[c] - mean) * inv * gamma.data[c] + beta.data[c];
        }
    }
    Ok(out)
}

/// Mean over rows: `n x d -> 1 x d`.
pub fn mean_rows(x: &Matrix) -> Result<Matrix> {
    if x.rows == 0 {
        return Err(Error::Contract("mean_rows over an empty matrix".into()));
    }
    let mut out = Matrix::zeros(1, x.cols);
    for r in 0..x.rows {
        for c in 0..x.cols {
            out.data[c] += x.data[r * x.cols + c];
        }
    }
    let n = x.rows as f64;
    for v in &mut out.data {
        *v /= n;
    }
    Ok(out)
}

/// Repeat a `1 x d` row `n` times.
pub fn broadcast_rows(x: &Matrix, n: usize) -> Result<Matrix> {
    if x.rows != 1 {
        return Err(Error::dimension(
            "broadcast_rows",
            x.shape_string(),
            format!("1x{}", x.cols),
        ));
    }
    let mut data = Vec::with_capacity(n * x.cols);
    for _ in 0..n {
        data.extend_from_slice(&x.data);
    }
    Ok(Matrix {
        rows: n,
        cols: x.cols,
        data,
    })
}

/// Horizontal concatenation; all parts must share a row count.
pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
    let rows = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of zero matrices".into()))?
        .rows;
    let cols: usize = parts.iter().map(|m| m.cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut offset = 0;
        for m in parts {
            if m.rows != rows {
                return Err(Error::dimension(
                    "concat_cols",
                    format!("{rows} rows"),
                    format!("{} rows", m.rows),
                ));
            }
            out.data[r * cols + offset..r * cols + offset + m.cols].copy_from_slice(m.row(r));
            offset += m.cols;
        }
    }
    Ok(out)
}

/// Vertical concatenation; all parts must share a column count.
pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
    let cols = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of zero matrices".into()))?
        .cols;
    let mut data = Vec::new();
    let mut rows = 0;
    for m in parts {
        if m.cols != cols {
            return Err(Error::dimension(
                "concat_rows",
                format!("{cols} cols"),
                format!("{} cols", m.cols),
            ));
        }
        data.extend_from_slice(&m.data);
        rows += m.rows;
    }
    Ok(Matrix { rows, cols, data })
}

/// Scale each row to unit L2 norm. Zero-norm rows are degenerate input.
pub fn normalize_rows(x: &Matrix) -> Result<Matrix> {
    let mut out = x.clone();
    for r in 0..x.rows {
        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "row {r} has zero norm and cannot be normalized"
            )));
        }
        for v in &mut out.data[r * x.cols..(r + 1) * x.cols] {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Sum of all entries as a `1 x 1` matrix.
pub fn sum_all(x: &Matrix) -> Matrix {
    Matrix {
        rows: 1,
        cols: 1,
        data: vec![x.data.iter().sum()],
    }
}
