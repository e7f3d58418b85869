//! Minimal row-major `f64` matrices over `matrixmultiply::dgemm`.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_f32(rows: usize, cols: usize, values: &[f32]) -> Self {
        assert_eq!(values.len(), rows * cols, "matrix data length");
        Self {
            rows,
            cols,
            data: values.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    #[cfg(test)]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.data.chunks_exact_mut(self.cols)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A strided view of a block inside a row-major buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Mat) -> Self {
        Self {
            data: &m.data,
            offset: 0,
            rows: m.rows,
            cols: m.cols,
            row_stride: m.cols,
            col_stride: 1,
        }
    }

    /// Columns `start..start + width` of `m`.
    pub fn columns(m: &'a Mat, start: usize, width: usize) -> Self {
        assert!(start + width <= m.cols);
        Self {
            data: &m.data,
            offset: start,
            rows: m.rows,
            cols: width,
            row_stride: m.cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `out[.., col_offset..col_offset + b.cols] = a · b`, where `out` is row-major
/// with `out.cols` columns.
pub(crate) fn gemm_into(a: View<'_>, b: View<'_>, out: &mut Mat, col_offset: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!(a.rows, out.rows, "output rows");
    assert!(col_offset + b.cols <= out.cols, "output columns");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for r in 0..out.rows {
            out.row_mut(r)[col_offset..col_offset + b.cols].fill(0.0);
        }
        return;
    }
    assert!(a.last_index() < a.data.len() && b.last_index() < b.data.len());
    // SAFETY: the asserts above bound every element dgemm reads from `a` and
    // `b` and writes to `out` (rows × b.cols starting at col_offset).
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            out.data.as_mut_ptr().add(col_offset),
            out.cols as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm_into(View::of(a), View::of(b), &mut out, 0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_f32(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_f32(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(matmul(&a, &b).data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn strided_blocks() {
        // a: 2x4, take columns 2..4 and multiply by the transpose of b's columns 2..4
        let a = Mat::from_f32(2, 4, &[0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 3.0, 4.0]);
        let b = Mat::from_f32(3, 4, &[9.0, 9.0, 1.0, 0.0, 9.0, 9.0, 0.0, 1.0, 9.0, 9.0, 1.0, 1.0]);
        let mut out = Mat::zeros(2, 5);
        gemm_into(View::columns(&a, 2, 2), View::columns(&b, 2, 2).t(), &mut out, 1);
        assert_eq!(out.row(0), &[0.0, 1.0, 2.0, 3.0, 0.0]);
        assert_eq!(out.row(1), &[0.0, 3.0, 4.0, 7.0, 0.0]);
    }
}
