use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    add_noise, embed_vec, modulate, real_embed_matrix, ChannelModel, ChannelSampler, Modulation, SnrSpec,
    SymbolAlphabet,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// One labelled observation in real-embedded form.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub y_r: Vec<T>,
    pub h_r: Matrix<T>,
    pub s_r: Vec<T>,
    pub snr_db: f64,
    pub seed: u64,
}

impl<T: Scalar> Sample<T> {
    pub fn nt(&self) -> usize {
        self.s_r.len() / 2
    }

    pub fn nr(&self) -> usize {
        self.y_r.len() / 2
    }

    /// Complex noise variance implied by the recorded SNR (unit-energy symbols).
    pub fn noise_variance(&self) -> f64 {
        SnrSpec::new(self.snr_db).noise_variance(self.nt(), self.nr(), 1.0)
    }
}

/// Dataset header; also the JSON sidecar of the on-disk format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u64,
    pub count: usize,
    pub nt: usize,
    pub nr: usize,
    pub modulation: Modulation,
    pub channel: ChannelModel,
    pub snr_db: Vec<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
    pub meta: DatasetMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub nt: usize,
    pub nr: usize,
    pub modulation: Modulation,
    pub channel: ChannelModel,
    /// Sample `i` uses `snr_db[i % snr_db.len()]`.
    pub snr_db: Vec<f64>,
    pub seed: u64,
}

/// Per-sample seed: SplitMix64 finalizer applied to `master + (index+1)·φ`.
///
/// Depends only on `(master, index)`, so samples can be generated in any order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws independent `(H, s, n)` realizations.
#[derive(Clone, Debug)]
pub struct TrialGenerator<T> {
    alphabet: SymbolAlphabet<T>,
    sampler: ChannelSampler<T>,
}

impl<T: Scalar> TrialGenerator<T> {
    pub fn new(nt: usize, nr: usize, modulation: Modulation, channel: ChannelModel) -> Result<Self> {
        Ok(TrialGenerator {
            alphabet: SymbolAlphabet::new(modulation),
            sampler: ChannelSampler::new(nt, nr, channel)?,
        })
    }

    pub fn alphabet(&self) -> &SymbolAlphabet<T> {
        &self.alphabet
    }

    pub fn nt(&self) -> usize {
        self.sampler.nt()
    }

    pub fn nr(&self) -> usize {
        self.sampler.nr()
    }

    /// One realization plus the transmitted bits.
    pub fn draw(&self, snr_db: f64, seed: u64) -> (Sample<T>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nt, nr) = (self.nt(), self.nr());
        let h = self.sampler.sample(&mut rng);
        let bits: Vec<u8> = (0..nt * self.alphabet.bits_per_symbol())
            .map(|_| rng.random_range(0..2u8))
            .collect();
        let s = modulate(&bits, &self.alphabet).expect("bit count matches alphabet");
        let es = self.alphabet.symbol_energy().as_f64();
        let sigma2 = SnrSpec::new(snr_db).noise_variance(nt, nr, es);
        let y = add_noise(&h.mul_vec(&s), sigma2, &mut rng);
        let sample = Sample {
            y_r: embed_vec(&y),
            h_r: real_embed_matrix(&h),
            s_r: embed_vec(&s),
            snr_db,
            seed,
        };
        (sample, bits)
    }
}

pub const DATASET_VERSION: u64 = 1;

/// Generates `config.count` i.i.d. samples, reproducibly from `config.seed`.
pub fn gen_dataset<T: Scalar>(config: &DatasetConfig) -> Result<Dataset<T>> {
    if config.snr_db.is_empty() {
        return Err(Error::InvalidArgument("empty SNR list".into()));
    }
    let generator = TrialGenerator::new(config.nt, config.nr, config.modulation, config.channel)?;
    let samples = (0..config.count)
        .map(|i| {
            let snr = config.snr_db[i % config.snr_db.len()];
            generator.draw(snr, derive_seed(config.seed, i as u64)).0
        })
        .collect();
    Ok(Dataset {
        samples,
        meta: DatasetMeta {
            version: DATASET_VERSION,
            count: config.count,
            nt: config.nt,
            nr: config.nr,
            modulation: config.modulation,
            channel: config.channel,
            snr_db: config.snr_db.clone(),
            seed: config.seed,
        },
    })
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
