//! Flat row-major storage for small-dimensional vector/matrix time series,
//! plus slice arithmetic helpers. State dimensions here are tiny (d <= ~4),
//! while the time axis is long, so a single contiguous buffer per series is
//! both cache-friendly and allocation-free in inner loops.

/// A sequence of `len` rows, each a `[f64; width]`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Flat {
    width: usize,
    data: Vec<f64>,
}

impl Flat {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Flat {
            width,
            data: vec![0.0; rows * width],
        }
    }

    pub fn with_capacity(rows: usize, width: usize) -> Self {
        Flat {
            width,
            data: Vec::with_capacity(rows * width),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, width: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            assert_eq!(r.len(), width);
            data.extend_from_slice(&r);
        }
        Flat { width, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.width);
        self.data.extend_from_slice(row);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// out = a - b
#[inline]
pub fn sub(a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..a.len() {
        out[i] = a[i] - b[i];
    }
}

/// Frobenius inner product of two row-major matrices stored as slices.
#[inline]
pub fn frob(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

/// out (rows r, cols c, row-major) = m (r x k) * v (k)
#[inline]
pub fn matvec(m: &[f64], r: usize, k: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), r * k);
    debug_assert_eq!(v.len(), k);
    debug_assert_eq!(out.len(), r);
    for i in 0..r {
        out[i] = dot(&m[i * k..(i + 1) * k], v);
    }
}

/// out (d x d, row-major) += a * u v^T where u, v have length d.
#[inline]
pub fn add_outer(a: f64, u: &[f64], v: &[f64], out: &mut [f64]) {
    let d = u.len();
    debug_assert_eq!(out.len(), d * v.len());
    for i in 0..d {
        for j in 0..v.len() {
            out[i * v.len() + j] += a * u[i] * v[j];
        }
    }
}

/// Euclidean norm.
#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip() {
        let mut f = Flat::zeros(3, 2);
        f.row_mut(1).copy_from_slice(&[1.0, 2.0]);
        assert_eq!(f.row(0), &[0.0, 0.0]);
        assert_eq!(f.row(1), &[1.0, 2.0]);
        assert_eq!(f.rows(), 3);
    }

    #[test]
    fn slice_math() {
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
        let mut y = [1.0, 1.0];
        axpy(2.0, &[1.0, 3.0], &mut y);
        assert_eq!(y, [3.0, 7.0]);
        let mut out = [0.0; 4];
        add_outer(2.0, &[1.0, 2.0], &[3.0, 4.0], &mut out);
        assert_eq!(out, [6.0, 8.0, 12.0, 16.0]);
        let mut mv = [0.0; 2];
        matvec(&[1.0, 0.0, 0.0, 2.0], 2, 2, &[5.0, 7.0], &mut mv);
        assert_eq!(mv, [5.0, 14.0]);
    }
}
