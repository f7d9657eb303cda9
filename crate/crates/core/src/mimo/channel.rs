use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ComplexMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Statistical channel model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelModel {
    /// i.i.d. circularly-symmetric Gaussian entries of variance `1/nt`.
    Rayleigh,
    /// Kronecker model with exponential correlation `r` at both ends.
    ExpCorrelated { r: f64 },
}

impl std::fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelModel::Rayleigh => write!(f, "rayleigh"),
            ChannelModel::ExpCorrelated { r } => write!(f, "exp:{r}"),
        }
    }
}

impl std::str::FromStr for ChannelModel {
    type Err = Error;

    /// Parses `rayleigh` or `exp:<r>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("rayleigh") {
            return Ok(ChannelModel::Rayleigh);
        }
        if let Some(r) = s.strip_prefix("exp:") {
            let r: f64 = r
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad correlation in `{s}`")))?;
            return Ok(ChannelModel::ExpCorrelated { r });
        }
        Err(Error::InvalidArgument(format!(
            "unknown channel model `{s}` (expected rayleigh or exp:<r>)"
        )))
    }
}

fn check_dims(nt: usize, nr: usize) -> Result<()> {
    if nt == 0 || nr == 0 {
        return Err(Error::InvalidArgument(format!(
            "channel dimensions must be positive (nt={nt}, nr={nr})"
        )));
    }
    if nt > nr {
        log::warn!("nt={nt} exceeds nr={nr}; linear detectors degrade badly");
    }
    Ok(())
}

fn rayleigh_with_rng<T: Scalar, R: Rng + ?Sized>(nt: usize, nr: usize, rng: &mut R) -> ComplexMatrix<T> {
    let std = T::lit((0.5 / nt as f64).sqrt());
    let data = (0..nr * nt)
        .map(|_| {
            let re = T::standard_normal(rng) * std;
            let im = T::standard_normal(rng) * std;
            Complex::new(re, im)
        })
        .collect();
    ComplexMatrix::from_vec(nr, nt, data).expect("shape is consistent")
}

/// `nr×nt` Rayleigh channel with per-entry variance `1/nt`.
pub fn gen_rayleigh<T: Scalar>(nt: usize, nr: usize, seed: u64) -> Result<ComplexMatrix<T>> {
    check_dims(nt, nr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rayleigh_with_rng(nt, nr, &mut rng))
}

/// Exponential correlation matrix: `r_ij = r^(j−i)` for `i ≤ j`, Hermitian below.
pub fn gen_exp_correlation<T: Scalar>(n: usize, r: Complex<f64>) -> Result<ComplexMatrix<T>> {
    if !(r.norm() <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "correlation coefficient |r| = {} exceeds 1",
            r.norm()
        )));
    }
    let mut m = ComplexMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = r.powu((j - i) as u32);
            let v = Complex::new(T::lit(v.re), T::lit(v.im));
            m[(i, j)] = v;
            m[(j, i)] = v.conj();
        }
    }
    Ok(m)
}

/// Hermitian square root by eigendecomposition, clamping negative eigenvalues to zero.
///
/// The decomposition runs in `f64` regardless of `T`.
pub fn hermitian_sqrt<T: Scalar>(m: &ComplexMatrix<T>) -> ComplexMatrix<T> {
    let n = m.rows();
    assert_eq!(n, m.cols(), "hermitian_sqrt needs a square matrix");
    let dm = DMatrix::from_fn(n, n, |i, j| {
        let z = m[(i, j)];
        Complex::new(z.re.as_f64(), z.im.as_f64())
    });
    let eig = SymmetricEigen::new(dm);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut out = ComplexMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = Complex::new(0.0, 0.0);
            for k in 0..n {
                acc += v[(i, k)] * v[(j, k)].conj() * roots[k];
            }
            out[(i, j)] = Complex::new(T::lit(acc.re), T::lit(acc.im));
        }
    }
    out
}

/// Reusable channel generator; correlated models cache their square-root factors.
#[derive(Clone, Debug)]
pub struct ChannelSampler<T> {
    nt: usize,
    nr: usize,
    factors: Option<(ComplexMatrix<T>, ComplexMatrix<T>)>,
}

impl<T: Scalar> ChannelSampler<T> {
    pub fn new(nt: usize, nr: usize, model: ChannelModel) -> Result<Self> {
        check_dims(nt, nr)?;
        let factors = match model {
            ChannelModel::Rayleigh => None,
            ChannelModel::ExpCorrelated { r } => {
                if !(r.abs() < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "correlated channel needs |r| < 1, got {r}"
                    )));
                }
                if r == 0.0 {
                    None
                } else {
                    let r = Complex::new(r, 0.0);
                    let rx = hermitian_sqrt(&gen_exp_correlation::<T>(nr, r)?);
                    let tx = hermitian_sqrt(&gen_exp_correlation::<T>(nt, r)?);
                    Some((rx, tx))
                }
            }
        };
        Ok(ChannelSampler { nt, nr, factors })
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn nr(&self) -> usize {
        self.nr
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ComplexMatrix<T> {
        let u = rayleigh_with_rng(self.nt, self.nr, rng);
        match &self.factors {
            None => u,
            Some((rx, tx)) => rx.matmul(&u).matmul(tx),
        }
    }
}

/// Kronecker-correlated channel `R_r^{1/2} U R_t^{1/2}`, with `U` drawn exactly as
/// [`gen_rayleigh`] draws it for the same seed.
pub fn gen_correlated_channel<T: Scalar>(nt: usize, nr: usize, r: f64, seed: u64) -> Result<ComplexMatrix<T>> {
    let sampler = ChannelSampler::new(nt, nr, ChannelModel::ExpCorrelated { r })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample(&mut rng))
}

/// Mean |diagonal| over mean |off-diagonal| of `HᴴH`; `+∞` when there is no
/// off-diagonal mass.
pub fn hardening_ratio<T: Scalar>(h: &ComplexMatrix<T>) -> f64 {
    let g = h.adjoint().matmul(h);
    let n = g.rows();
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            let z = g[(i, j)];
            let mag = z.re.as_f64().hypot(z.im.as_f64());
            if i == j {
                diag += mag;
            } else {
                off += mag;
            }
        }
    }
    if n < 2 || off == 0.0 {
        return f64::INFINITY;
    }
    (diag / n as f64) / (off / (n * (n - 1)) as f64)
}
