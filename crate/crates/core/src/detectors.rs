//! Classical baseline detectors on the real-embedded model: ZF, LMMSE,
//! conjugate gradient and exhaustive ML, plus their operation counts.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::mimo::{embed_vec, SymbolAlphabet};
use crate::scalar::Scalar;

/// Normal equations `A s = b` with `A = HᵀH + σ²I`, `b = Hᵀy`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem<T> {
    pub a: Matrix<T>,
    pub b: Vec<T>,
    pub sigma2: T,
}

impl<T: Scalar> LinearSystem<T> {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Same `A`, right-hand side scaled by `c`.
    pub fn with_scaled_rhs(&self, c: T) -> Self {
        LinearSystem {
            a: self.a.clone(),
            b: self.b.iter().map(|&x| x * c).collect(),
            sigma2: self.sigma2,
        }
    }
}

pub fn build_system<T: Scalar>(h_r: &Matrix<T>, y_r: &[T], sigma2: T) -> Result<LinearSystem<T>> {
    if y_r.len() != h_r.rows() {
        return Err(Error::dims("build_system (y length)", h_r.rows(), y_r.len()));
    }
    if !(sigma2 >= T::zero()) {
        return Err(Error::InvalidArgument(format!("noise variance {sigma2} < 0")));
    }
    let mut a = h_r.gram();
    a.add_diagonal(sigma2);
    a.symmetrize();
    Ok(LinearSystem {
        a,
        b: h_r.tr_mul_vec(y_r),
        sigma2,
    })
}

/// Condition estimate above which ZF refuses to invert `HᵀH`.
pub const ZF_CONDITION_LIMIT: f64 = 1e12;

/// Zero-forcing estimate `(HᵀH)⁻¹Hᵀy`.
pub fn zf_detect<T: Scalar>(h_r: &Matrix<T>, y_r: &[T]) -> Result<Vec<T>> {
    let system = build_system(h_r, y_r, T::zero())?;
    let chol = match Cholesky::new(&system.a) {
        Ok(c) => c,
        Err(Error::NotPositiveDefinite { .. }) => {
            return Err(Error::IllConditioned {
                estimate: f64::INFINITY,
                limit: ZF_CONDITION_LIMIT,
            })
        }
        Err(e) => return Err(e),
    };
    let estimate = chol.condition_estimate();
    if estimate > ZF_CONDITION_LIMIT {
        return Err(Error::IllConditioned {
            estimate,
            limit: ZF_CONDITION_LIMIT,
        });
    }
    Ok(chol.solve(&system.b))
}

/// LMMSE estimate `(HᵀH + σ²I)⁻¹Hᵀy` via Cholesky.
pub fn lmmse_detect<T: Scalar>(h_r: &Matrix<T>, y_r: &[T], sigma2: T) -> Result<Vec<T>> {
    let system = build_system(h_r, y_r, sigma2)?;
    solve_direct(&system)
}

pub fn solve_direct<T: Scalar>(system: &LinearSystem<T>) -> Result<Vec<T>> {
    Ok(Cholesky::new(&system.a)?.solve(&system.b))
}

/// Iterate of the conjugate-gradient recursion.
#[derive(Clone, Debug, PartialEq)]
pub struct CgState<T> {
    pub s_hat: Vec<T>,
    pub residual: Vec<T>,
    pub direction: Vec<T>,
    pub iter: usize,
}

/// Step sizes and residual norm produced by one CG iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgIteration<T> {
    pub alpha: T,
    pub beta: T,
    pub residual_norm: T,
}

impl<T: Scalar> CgState<T> {
    /// `ŝ = 0`, `r = d = b`.
    pub fn new(system: &LinearSystem<T>) -> Self {
        CgState {
            s_hat: vec![T::zero(); system.dim()],
            residual: system.b.clone(),
            direction: system.b.clone(),
            iter: 0,
        }
    }

    /// One iteration with exact step sizes.
    ///
    /// Every quantity is evaluated as its update rule is written: `A·d` once for
    /// the curvature `rᵀAd` and again for the residual update, and both inner
    /// products of the `β` ratio. That is `8Nt² + 14Nt` multiplications and two
    /// divisions for `K = 2Nt` unknowns, the per-iteration cost in [`count_ops`].
    pub fn step(&mut self, system: &LinearSystem<T>) -> Result<CgIteration<T>> {
        let a = &system.a;
        let rr = dot(&self.residual, &self.residual);
        let ad = a.mul_vec(&self.direction);
        let curvature = dot(&self.residual, &ad);
        if !(curvature > T::zero()) {
            return Err(Error::Breakdown {
                iteration: self.iter,
                curvature: curvature.as_f64(),
            });
        }
        let alpha = rr / curvature;

        for (s, &d) in self.s_hat.iter_mut().zip(&self.direction) {
            *s += alpha * d;
        }

        let ad = a.mul_vec(&self.direction);
        let next: Vec<T> = self.residual.iter().zip(&ad).map(|(&r, &q)| r - alpha * q).collect();

        let rr_next = dot(&next, &next);
        let beta = rr_next / dot(&self.residual, &self.residual);
        for (d, &r) in self.direction.iter_mut().zip(&next) {
            *d = r + beta * *d;
        }
        self.residual = next;
        self.iter += 1;

        #[cfg(debug_assertions)]
        self.check_residual(system);

        Ok(CgIteration {
            alpha,
            beta,
            residual_norm: rr_next.sqrt(),
        })
    }

    /// Recursive residual must track `b − A ŝ`; evaluated in f64 so that
    /// instrumented scalars see no extra work.
    #[cfg(debug_assertions)]
    fn check_residual(&self, system: &LinearSystem<T>) {
        let n = system.dim();
        let b_norm = system.b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let mut worst = 0.0f64;
        let mut drift = 0.0f64;
        for i in 0..n {
            let row = system.a.row(i);
            let as_i: f64 = row.iter().zip(&self.s_hat).map(|(a, s)| a.as_f64() * s.as_f64()).sum();
            let true_r = system.b[i].as_f64() - as_i;
            drift += (true_r - self.residual[i].as_f64()).powi(2);
            worst = worst.max(as_i.abs());
        }
        let tol = 1e-8f64.max(1e4 * T::epsilon().as_f64());
        debug_assert!(
            drift.sqrt() <= tol * b_norm.max(worst) || !drift.is_finite(),
            "CG residual drifted from b - A s by {:e}",
            drift.sqrt()
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgOutput<T> {
    pub estimate: Vec<T>,
    pub trace: Vec<CgIteration<T>>,
    pub converged: bool,
}

/// Default relative residual tolerance for [`cg_detect`].
pub const CG_DEFAULT_TOL: f64 = 1e-10;

/// Conjugate gradient from `ŝ = 0`; stops after `max_iters` iterations or once
/// `‖r‖ ≤ tol·‖b‖`.
pub fn cg_detect<T: Scalar>(system: &LinearSystem<T>, max_iters: usize, tol: f64) -> Result<CgOutput<T>> {
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    // Stopping bookkeeping runs in f64 so it never shows up in operation counts.
    let b_norm = system.b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let stop = tol * b_norm;
    let mut state = CgState::new(system);
    let mut trace = Vec::new();
    let mut converged = b_norm <= stop;
    while !converged && trace.len() < max_iters {
        let it = state.step(system)?;
        converged = it.residual_norm.as_f64() <= stop;
        trace.push(it);
    }
    Ok(CgOutput {
        estimate: state.s_hat,
        trace,
        converged,
    })
}

/// Largest ML search space accepted by [`ml_detect`].
pub const ML_SEARCH_LIMIT: u128 = 1 << 20;

/// Exhaustive maximum-likelihood search over all `|A|^nt` symbol vectors.
/// Ties go to the lexicographically first candidate (first antenna most significant).
pub fn ml_detect<T: Scalar>(h_r: &Matrix<T>, y_r: &[T], alphabet: &SymbolAlphabet<T>, nt: usize) -> Result<Vec<T>> {
    if h_r.cols() != 2 * nt {
        return Err(Error::dims("ml_detect (channel columns)", 2 * nt, h_r.cols()));
    }
    if y_r.len() != h_r.rows() {
        return Err(Error::dims("ml_detect (y length)", h_r.rows(), y_r.len()));
    }
    let m = alphabet.points().len();
    let candidates = (m as u128).checked_pow(nt as u32).unwrap_or(u128::MAX);
    if candidates > ML_SEARCH_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            candidates,
            limit: ML_SEARCH_LIMIT,
        });
    }
    let mut digits = vec![0usize; nt];
    let mut best: Option<(T, Vec<usize>)> = None;
    let mut s: Vec<Complex<T>> = vec![alphabet.points()[0]; nt];
    for _ in 0..candidates {
        for (sym, &k) in s.iter_mut().zip(&digits) {
            *sym = alphabet.points()[k];
        }
        let hs = h_r.mul_vec(&embed_vec(&s));
        let dist = y_r
            .iter()
            .zip(&hs)
            .fold(T::zero(), |acc, (&y, &p)| acc + (y - p) * (y - p));
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, digits.clone()));
        }
        // odometer increment, last antenna fastest
        for slot in digits.iter_mut().rev() {
            *slot += 1;
            if *slot < m {
                break;
            }
            *slot = 0;
        }
    }
    let (_, winner) = best.expect("at least one candidate");
    let s: Vec<Complex<T>> = winner.iter().map(|&k| alphabet.points()[k]).collect();
    Ok(embed_vec(&s))
}

/// Detector families with a closed-form per-detection cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostedDetector {
    Lmmse,
    Cg,
    LcgNet,
}

impl std::str::FromStr for CostedDetector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lmmse" | "mmse" => Ok(CostedDetector::Lmmse),
            "cg" => Ok(CostedDetector::Cg),
            "lcgnet" | "lcgnets" | "lcgnetv" => Ok(CostedDetector::LcgNet),
            other => Err(Error::UnknownDetector(other.to_string())),
        }
    }
}

/// Real multiplications and real divisions of one detection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub real_mults: u64,
    pub real_divs: u64,
}

/// Closed-form detection cost with `A` and `b` precomputed.
///
/// LMMSE: `8Nt³ + 4Nt²`. CG: `L(8Nt² + 14Nt + 8)` multiplications and `2L`
/// divisions (a division is charged four multiplications plus one division).
/// LcgNet: `L(4Nt² + 6Nt)`, no divisions.
pub fn count_ops(detector: CostedDetector, nt: usize, layers_or_iters: usize) -> OpCount {
    let nt = nt as u64;
    let l = layers_or_iters as u64;
    match detector {
        CostedDetector::Lmmse => OpCount {
            real_mults: 8 * nt.pow(3) + 4 * nt.pow(2),
            real_divs: 0,
        },
        CostedDetector::Cg => OpCount {
            real_mults: l * (8 * nt * nt + 14 * nt + 8),
            real_divs: 2 * l,
        },
        CostedDetector::LcgNet => OpCount {
            real_mults: l * (4 * nt * nt + 6 * nt),
            real_divs: 0,
        },
    }
}
