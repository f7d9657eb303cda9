//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All math is written against [`Scalar`], implemented for `f32`, `f64` and
//! the instrumented [`Counted`] type used to tally real multiplications.

use std::cell::Cell;
use std::fmt::{self, Debug, Display};
use std::iter::{Product, Sum};
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumAssign, NumCast, One, ToPrimitive, Zero};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Real floating-point scalar: f32, f64 or [`Counted`].
pub trait Scalar: Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// Converts an `f64` literal. Panics only if the value is unrepresentable.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Draws one standard normal variate.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

thread_local! {
    static MULS: Cell<u64> = const { Cell::new(0) };
    static DIVS: Cell<u64> = const { Cell::new(0) };
}

/// Multiplication/division tally recorded by [`Counted`] on the current thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpTally {
    pub muls: u64,
    pub divs: u64,
}

impl OpTally {
    /// Reads the current thread's tally.
    pub fn snapshot() -> Self {
        OpTally {
            muls: MULS.with(Cell::get),
            divs: DIVS.with(Cell::get),
        }
    }

    pub fn reset() {
        MULS.with(|c| c.set(0));
        DIVS.with(|c| c.set(0));
    }

    /// Runs `f` and returns the operations it performed on [`Counted`] values.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpTally) {
        let before = Self::snapshot();
        let out = f();
        let after = Self::snapshot();
        (
            out,
            OpTally {
                muls: after.muls - before.muls,
                divs: after.divs - before.divs,
            },
        )
    }

    /// Real multiplications under the complex-arithmetic accounting, where a
    /// division costs four multiplications plus one real division.
    pub fn accounted_muls(&self) -> u64 {
        self.muls + 4 * self.divs
    }
}

#[inline]
fn bump_mul() {
    MULS.with(|c| c.set(c.get() + 1));
}

#[inline]
fn bump_div() {
    DIVS.with(|c| c.set(c.get() + 1));
}

/// `f64` wrapper that counts every `*` and `/` it takes part in.
///
/// Running a generic routine with `T = Counted` yields the exact number of
/// real multiplications and divisions the routine performs.
#[derive(Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl Debug for Counted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Debug::fmt(&self.0, f)
    }
}

impl Display for Counted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Display::fmt(&self.0, f)
    }
}

impl Add for Counted {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Counted(self.0 + rhs.0)
    }
}

impl Sub for Counted {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Counted(self.0 - rhs.0)
    }
}

impl Mul for Counted {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        bump_mul();
        Counted(self.0 * rhs.0)
    }
}

impl Div for Counted {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        bump_div();
        Counted(self.0 / rhs.0)
    }
}

impl Rem for Counted {
    type Output = Self;
    fn rem(self, rhs: Self) -> Self {
        Counted(self.0 % rhs.0)
    }
}

impl Neg for Counted {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Counted(-self.0)
    }
}

impl AddAssign for Counted {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl SubAssign for Counted {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl MulAssign for Counted {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl DivAssign for Counted {
    fn div_assign(&mut self, rhs: Self) {
        *self = *self / rhs;
    }
}

impl RemAssign for Counted {
    fn rem_assign(&mut self, rhs: Self) {
        *self = *self % rhs;
    }
}

impl Sum for Counted {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Counted(0.0), |a, b| a + b)
    }
}

impl Product for Counted {
    fn product<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Counted(1.0), |a, b| a * b)
    }
}

impl Zero for Counted {
    fn zero() -> Self {
        Counted(0.0)
    }
    fn is_zero(&self) -> bool {
        self.0 == 0.0
    }
}

impl One for Counted {
    fn one() -> Self {
        Counted(1.0)
    }
}

impl Num for Counted {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Counted)
    }
}

impl ToPrimitive for Counted {
    fn to_i64(&self) -> Option<i64> {
        self.0.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.0)
    }
}

impl NumCast for Counted {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Counted)
    }
}

impl FromPrimitive for Counted {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Counted(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Counted(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Counted(n))
    }
}

macro_rules! unary {
    ($($name:ident),*) => {
        $(
            #[inline]
            fn $name(self) -> Self {
                Counted(self.0.$name())
            }
        )*
    };
}

macro_rules! constant {
    ($($name:ident),*) => {
        $(
            #[inline]
            fn $name() -> Self {
                Counted(<f64 as Float>::$name())
            }
        )*
    };
}

macro_rules! predicate {
    ($($name:ident),*) => {
        $(
            #[inline]
            fn $name(self) -> bool {
                self.0.$name()
            }
        )*
    };
}

impl Float for Counted {
    constant!(
        nan,
        infinity,
        neg_infinity,
        neg_zero,
        min_value,
        min_positive_value,
        max_value,
        epsilon
    );
    predicate!(
        is_nan,
        is_infinite,
        is_finite,
        is_normal,
        is_sign_positive,
        is_sign_negative
    );
    unary!(
        floor, ceil, round, trunc, fract, abs, signum, sqrt, exp, exp2, ln, log2, log10, cbrt, sin, cos, tan, asin,
        acos, atan, exp_m1, ln_1p, sinh, cosh, tanh, asinh, acosh, atanh
    );

    fn classify(self) -> FpCategory {
        self.0.classify()
    }

    fn mul_add(self, a: Self, b: Self) -> Self {
        bump_mul();
        Counted(self.0.mul_add(a.0, b.0))
    }

    fn recip(self) -> Self {
        bump_div();
        Counted(self.0.recip())
    }

    fn powi(self, n: i32) -> Self {
        Counted(self.0.powi(n))
    }

    fn powf(self, n: Self) -> Self {
        Counted(self.0.powf(n.0))
    }

    fn log(self, base: Self) -> Self {
        Counted(self.0.log(base.0))
    }

    fn max(self, other: Self) -> Self {
        Counted(self.0.max(other.0))
    }

    fn min(self, other: Self) -> Self {
        Counted(self.0.min(other.0))
    }

    #[allow(deprecated)]
    fn abs_sub(self, other: Self) -> Self {
        Counted((self.0 - other.0).max(0.0))
    }

    fn hypot(self, other: Self) -> Self {
        Counted(self.0.hypot(other.0))
    }

    fn atan2(self, other: Self) -> Self {
        Counted(self.0.atan2(other.0))
    }

    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = self.0.sin_cos();
        (Counted(s), Counted(c))
    }

    fn integer_decode(self) -> (u64, i16, i8) {
        Float::integer_decode(self.0)
    }
}

impl Scalar for Counted {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Counted(StandardNormal.sample(rng))
    }
}
