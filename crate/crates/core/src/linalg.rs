//! Row-major matrix view and the vector kernels shared by the scorers.
//!
//! All reductions accumulate in `f64` sequentially in element order so that
//! results are reproducible bit-for-bit regardless of how callers schedule
//! work across threads.

/// Dense row-major `rows × cols` matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Returns `None` when `data.len() != rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Option<Self> {
        (rows.checked_mul(cols)? == data.len()).then_some(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Gathers the listed rows into a new matrix, in the given order.
    pub fn gather_rows(&self, rows: impl IntoIterator<Item = usize>) -> Matrix {
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            data.extend_from_slice(self.row(r));
            n += 1;
        }
        Matrix {
            rows: n,
            cols: self.cols,
            data,
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

pub fn squared_norm(a: &[f32]) -> f64 {
    dot(a, a)
}

/// Cosine from a dot product and the two squared norms; 0 when either norm is 0.
///
/// Taking one square root of the product makes identical vectors come out at
/// exactly 1.
#[inline]
pub fn cosine_from_parts(dot: f64, squared_norm_a: f64, squared_norm_b: f64) -> f64 {
    let denom = squared_norm_a * squared_norm_b;
    if denom == 0.0 {
        0.0
    } else {
        dot / denom.sqrt()
    }
}

/// Cosine similarity, defined as 0 when either vector is all zeros.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    cosine_from_parts(dot(a, b), squared_norm(a), squared_norm(b))
}

/// Euclidean norm of `a - b`.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (&x, &y)| {
            let d = x as f64 - y as f64;
            acc + d * d
        })
        .sqrt()
}
