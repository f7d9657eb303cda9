use num_complex::Complex;
use rand::Rng;

use crate::scalar::Scalar;

/// Signal-to-noise ratio `E‖s‖² / E‖n‖²`.
///
/// With `nt` unit-energy streams and `nr` receive antennas the per-antenna
/// complex noise variance is `σ² = nt·Es / (nr·SNR)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrSpec {
    pub snr_db: f64,
}

impl SnrSpec {
    pub fn new(snr_db: f64) -> Self {
        SnrSpec { snr_db }
    }

    pub fn linear(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }

    /// Complex per-entry noise variance; zero at infinite SNR.
    pub fn noise_variance(&self, nt: usize, nr: usize, symbol_energy: f64) -> f64 {
        if self.snr_db == f64::INFINITY {
            return 0.0;
        }
        nt as f64 * symbol_energy / (nr as f64 * self.linear())
    }
}

/// Adds circularly-symmetric Gaussian noise of complex variance `sigma2`
/// (`sigma2/2` per real component).
pub fn add_noise<T: Scalar, R: Rng + ?Sized>(y: &[Complex<T>], sigma2: f64, rng: &mut R) -> Vec<Complex<T>> {
    if sigma2 == 0.0 {
        return y.to_vec();
    }
    let std = T::lit((sigma2 / 2.0).sqrt());
    y.iter()
        .map(|&v| {
            let re = T::standard_normal(rng) * std;
            let im = T::standard_normal(rng) * std;
            v + Complex::new(re, im)
        })
        .collect()
}
