use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::unembed_vec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Bpsk,
    Qpsk,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
        }
    }
}

impl std::fmt::Display for Modulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modulation::Bpsk => "bpsk",
            Modulation::Qpsk => "qpsk",
        })
    }
}

impl std::str::FromStr for Modulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bpsk" => Ok(Modulation::Bpsk),
            "qpsk" => Ok(Modulation::Qpsk),
            other => Err(Error::InvalidArgument(format!("unknown modulation `{other}`"))),
        }
    }
}

/// Unit-energy constellation. Point `k` carries the bit pattern `k`
/// (most significant bit first), which is also the tie-break order.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolAlphabet<T> {
    modulation: Modulation,
    points: Vec<Complex<T>>,
}

impl<T: Scalar> SymbolAlphabet<T> {
    pub fn new(modulation: Modulation) -> Self {
        let points = match modulation {
            Modulation::Bpsk => vec![Complex::new(T::one(), T::zero()), Complex::new(-T::one(), T::zero())],
            Modulation::Qpsk => {
                // Gray map: first bit selects the real sign, second the imaginary sign.
                let a = T::lit(std::f64::consts::FRAC_1_SQRT_2);
                vec![
                    Complex::new(a, a),
                    Complex::new(a, -a),
                    Complex::new(-a, a),
                    Complex::new(-a, -a),
                ]
            }
        };
        SymbolAlphabet { modulation, points }
    }

    /// Degenerate alphabet with caller-chosen points (used for search edge cases).
    pub fn custom(modulation: Modulation, points: Vec<Complex<T>>) -> Self {
        SymbolAlphabet { modulation, points }
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    pub fn points(&self) -> &[Complex<T>] {
        &self.points
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.modulation.bits_per_symbol()
    }

    /// Mean squared magnitude of the points.
    pub fn symbol_energy(&self) -> T {
        let n = T::from_usize(self.points.len()).unwrap();
        self.points.iter().map(|p| p.norm_sqr()).sum::<T>() / n
    }

    fn index_bits(&self, k: usize, out: &mut Vec<u8>) {
        let m = self.bits_per_symbol();
        for b in (0..m).rev() {
            out.push(((k >> b) & 1) as u8);
        }
    }

    pub fn nearest(&self, z: Complex<T>) -> usize {
        let mut best = 0;
        let mut best_d = (z - self.points[0]).norm_sqr();
        for (k, &p) in self.points.iter().enumerate().skip(1) {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }
}

/// Maps bits onto constellation points.
pub fn modulate<T: Scalar>(bits: &[u8], alphabet: &SymbolAlphabet<T>) -> Result<Vec<Complex<T>>> {
    let m = alphabet.bits_per_symbol();
    if bits.len() % m != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} bits is not a multiple of {m} bits per symbol",
            bits.len()
        )));
    }
    bits.chunks(m)
        .map(|chunk| {
            let k = chunk.iter().try_fold(0usize, |acc, &b| match b {
                0 | 1 => Ok((acc << 1) | b as usize),
                _ => Err(Error::InvalidArgument(format!("bit value {b}"))),
            })?;
            Ok(alphabet.points[k])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demapped<T> {
    pub symbols: Vec<Complex<T>>,
    pub indices: Vec<usize>,
    pub bits: Vec<u8>,
}

/// Minimum-distance hard decisions on a real-embedded estimate.
pub fn demap_min_distance<T: Scalar>(s_hat: &[T], alphabet: &SymbolAlphabet<T>) -> Demapped<T> {
    let estimates = unembed_vec(s_hat);
    let mut out = Demapped {
        symbols: Vec::with_capacity(estimates.len()),
        indices: Vec::with_capacity(estimates.len()),
        bits: Vec::with_capacity(estimates.len() * alphabet.bits_per_symbol()),
    };
    for z in estimates {
        let k = alphabet.nearest(z);
        out.indices.push(k);
        out.symbols.push(alphabet.points[k]);
        alphabet.index_bits(k, &mut out.bits);
    }
    out
}
