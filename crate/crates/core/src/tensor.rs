//! Minimal dense containers used across the crate: a rank-3 image/activation
//! tensor in (row, col, channel) layout and a flat row-major matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// H×W×C tensor of reals, row-major with channel fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor3 {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_data(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                h,
                w,
                c
            )));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    /// Rectangular window of side `side`, anchored at (top, left).
    pub fn crop(&self, top: usize, left: usize, side: usize) -> Result<Tensor3> {
        if top + side > self.h || left + side > self.w {
            return Err(Error::Crop(format!(
                "crop {}x{} at ({},{}) exceeds image {}x{}",
                side, side, top, left, self.h, self.w
            )));
        }
        let mut out = Tensor3::zeros(side, side, self.c);
        for y in 0..side {
            for x in 0..side {
                for ch in 0..self.c {
                    let v = self.get(top + y, left + x, ch);
                    out.set(y, x, ch, v);
                }
            }
        }
        Ok(out)
    }

    /// Left-right mirror. Applying it twice recovers the original.
    pub fn mirror_h(&self) -> Tensor3 {
        let mut out = Tensor3::zeros(self.h, self.w, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    out.set(y, self.w - 1 - x, ch, self.get(y, x, ch));
                }
            }
        }
        out
    }
}

/// Flat row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * cols);
        for r in &rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows in matrix".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: n,
            cols,
            data,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_mirror() {
        // 2x2 single channel [[1,2],[3,4]]
        let t = Tensor3::from_data(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = t.mirror_h();
        assert_eq!(m.data, vec![2.0, 1.0, 4.0, 3.0]);
        assert_eq!(m.mirror_h(), t);

        let c = t.crop(0, 0, 1).unwrap();
        assert_eq!(c.data, vec![1.0]);
        assert!(t.crop(1, 1, 2).is_err());
    }

    #[test]
    fn matrix_rows() {
        let m = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0]);
        assert!(Matrix::from_rows(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
