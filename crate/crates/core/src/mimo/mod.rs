//! System model: complex channels, constellations, noise, the real-valued
//! embedding and dataset construction.

mod channel;
mod dataset;
mod modulation;
mod noise;

pub use channel::{
    gen_correlated_channel, gen_exp_correlation, gen_rayleigh, hardening_ratio, hermitian_sqrt, ChannelModel,
    ChannelSampler,
};
pub use dataset::{
    derive_seed, gen_dataset, Dataset, DatasetConfig, DatasetMeta, Sample, TrialGenerator, DATASET_VERSION,
};
pub use modulation::{demap_min_distance, modulate, Demapped, Modulation, SymbolAlphabet};
pub use noise::{add_noise, SnrSpec};

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Dense row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex::new(T::zero(), T::zero()); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::new(T::one(), T::zero());
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("ComplexMatrix::from_vec", rows * cols, data.len()));
        }
        Ok(ComplexMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn mul_vec(&self, x: &[Complex<T>]) -> Vec<Complex<T>> {
        assert_eq!(x.len(), self.cols, "mul_vec dimension");
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .fold(Complex::new(T::zero(), T::zero()), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    pub fn matmul(&self, rhs: &ComplexMatrix<T>) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul dimension");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] = out.data[i * rhs.cols + j] + a * rhs[(k, j)];
                }
            }
        }
        out
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)].conj();
            }
        }
        t
    }

    pub fn scale(&self, c: T) -> Self {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.scale(c)).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for ComplexMatrix<T> {
    type Output = Complex<T>;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex<T> {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for ComplexMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[i * self.cols + j]
    }
}

/// Real embedding `[[Re H, −Im H], [Im H, Re H]]` of an `nr×nt` channel.
pub fn real_embed_matrix<T: Scalar>(h: &ComplexMatrix<T>) -> Matrix<T> {
    let (nr, nt) = (h.rows(), h.cols());
    let mut m = Matrix::zeros(2 * nr, 2 * nt);
    for i in 0..nr {
        for j in 0..nt {
            let z = h[(i, j)];
            m[(i, j)] = z.re;
            m[(i, j + nt)] = -z.im;
            m[(i + nr, j)] = z.im;
            m[(i + nr, j + nt)] = z.re;
        }
    }
    m
}

/// Stacks real parts over imaginary parts.
pub fn embed_vec<T: Scalar>(v: &[Complex<T>]) -> Vec<T> {
    v.iter().map(|z| z.re).chain(v.iter().map(|z| z.im)).collect()
}

/// Inverse of [`embed_vec`]. Panics on odd lengths.
pub fn unembed_vec<T: Scalar>(v: &[T]) -> Vec<Complex<T>> {
    assert!(v.len() % 2 == 0, "embedded vector must have even length");
    let n = v.len() / 2;
    (0..n).map(|i| Complex::new(v[i], v[i + n])).collect()
}
