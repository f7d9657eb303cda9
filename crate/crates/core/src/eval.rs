//! Monte-Carlo BER/NMSE evaluation.
//!
//! Every detector sees the same channel, symbols and noise on a given trial.
//! Detectors stop independently once they reach the symbol-error target or
//! the symbol budget, so a detector's trials are always a prefix of the shared
//! trial sequence.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::{
    build_system, cg_detect, count_ops, lmmse_detect, ml_detect, solve_direct, zf_detect, CgState, CostedDetector,
    LinearSystem, OpCount, CG_DEFAULT_TOL,
};
use crate::error::{Error, Result};
use crate::mimo::{demap_min_distance, derive_seed, ChannelModel, Modulation, Sample, SymbolAlphabet, TrialGenerator};
use crate::network::{advance, forward, LayerState, NetworkParams};
use crate::scalar::Scalar;
use crate::training::{sample_nmse, to_db};

/// One shared realization handed to every detector.
pub struct Trial<'a, T> {
    pub sample: &'a Sample<T>,
    pub system: &'a LinearSystem<T>,
    pub alphabet: &'a SymbolAlphabet<T>,
    pub seed: u64,
}

/// A detector producing a real-embedded estimate `ŝ` (length `2Nt`).
pub trait Detector<T: Scalar>: Send + Sync {
    fn name(&self) -> String;
    fn estimate(&self, trial: &Trial<'_, T>) -> Result<Vec<T>>;
    /// Closed-form cost per detection, when one exists.
    fn op_count(&self) -> Option<OpCount> {
        None
    }
}

pub struct ZfDetector;
pub struct LmmseDetector {
    pub nt: usize,
}
pub struct CgDetector {
    pub nt: usize,
    pub iters: usize,
}
pub struct MlDetector;
pub struct GenieDetector;
pub struct CoinFlipDetector;
pub struct LearnedDetector<T> {
    pub label: String,
    pub params: NetworkParams<T>,
}

impl<T: Scalar> Detector<T> for ZfDetector {
    fn name(&self) -> String {
        "zf".into()
    }
    fn estimate(&self, t: &Trial<'_, T>) -> Result<Vec<T>> {
        zf_detect(&t.sample.h_r, &t.sample.y_r)
    }
}

impl<T: Scalar> Detector<T> for LmmseDetector {
    fn name(&self) -> String {
        "lmmse".into()
    }
    fn estimate(&self, t: &Trial<'_, T>) -> Result<Vec<T>> {
        solve_direct(t.system)
    }
    fn op_count(&self) -> Option<OpCount> {
        Some(count_ops(CostedDetector::Lmmse, self.nt, 0))
    }
}

impl<T: Scalar> Detector<T> for CgDetector {
    fn name(&self) -> String {
        format!("cg{}", self.iters)
    }
    fn estimate(&self, t: &Trial<'_, T>) -> Result<Vec<T>> {
        Ok(cg_detect(t.system, self.iters, CG_DEFAULT_TOL)?.estimate)
    }
    fn op_count(&self) -> Option<OpCount> {
        Some(count_ops(CostedDetector::Cg, self.nt, self.iters))
    }
}

impl<T: Scalar> Detector<T> for MlDetector {
    fn name(&self) -> String {
        "ml".into()
    }
    fn estimate(&self, t: &Trial<'_, T>) -> Result<Vec<T>> {
        ml_detect(&t.sample.h_r, &t.sample.y_r, t.alphabet, t.sample.nt())
    }
}

impl<T: Scalar> Detector<T> for GenieDetector {
    fn name(&self) -> String {
        "genie".into()
    }
    fn estimate(&self, t: &Trial<'_, T>) -> Result<Vec<T>> {
        Ok(t.sample.s_r.clone())
    }
}

impl<T: Scalar> Detector<T> for CoinFlipDetector {
    fn name(&self) -> String {
        "coinflip".into()
    }
    /// Uniformly random constellation points, independent of the observation.
    fn estimate(&self, t: &Trial<'_, T>) -> Result<Vec<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 0xC014));
        let pts = t.alphabet.points();
        let s: Vec<_> = (0..t.sample.nt())
            .map(|_| pts[rng.random_range(0..pts.len())])
            .collect();
        Ok(crate::mimo::embed_vec(&s))
    }
}

impl<T: Scalar> Detector<T> for LearnedDetector<T> {
    fn name(&self) -> String {
        self.label.clone()
    }
    fn estimate(&self, t: &Trial<'_, T>) -> Result<Vec<T>> {
        forward(&self.params, t.system)
    }
    fn op_count(&self) -> Option<OpCount> {
        Some(count_ops(
            CostedDetector::LcgNet,
            self.params.nt,
            self.params.num_layers(),
        ))
    }
}

/// Textual detector selector: `zf`, `lmmse`, `cg:<iters>`, `ml`, `genie`,
/// `coinflip` or `model:<path>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DetectorSpec {
    Zf,
    Lmmse,
    Cg(usize),
    Ml,
    Genie,
    CoinFlip,
    Model(PathBuf),
}

impl std::str::FromStr for DetectorSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h.to_ascii_lowercase(), Some(a)),
            None => (s.to_ascii_lowercase(), None),
        };
        match (head.as_str(), arg) {
            ("zf", None) => Ok(DetectorSpec::Zf),
            ("lmmse" | "mmse", None) => Ok(DetectorSpec::Lmmse),
            ("cg", Some(n)) => n
                .parse()
                .ok()
                .filter(|&n: &usize| n > 0)
                .map(DetectorSpec::Cg)
                .ok_or_else(|| Error::InvalidArgument(format!("bad CG iteration count `{n}`"))),
            ("ml", None) => Ok(DetectorSpec::Ml),
            ("genie", None) => Ok(DetectorSpec::Genie),
            ("coinflip", None) => Ok(DetectorSpec::CoinFlip),
            ("model", Some(p)) if !p.is_empty() => Ok(DetectorSpec::Model(PathBuf::from(p))),
            _ => Err(Error::UnknownDetector(s.to_string())),
        }
    }
}

/// Instantiates a detector; model files are loaded here.
pub fn build_detector<T: Scalar>(spec: &DetectorSpec, nt: usize, nr: usize) -> Result<Box<dyn Detector<T>>> {
    Ok(match spec {
        DetectorSpec::Zf => Box::new(ZfDetector),
        DetectorSpec::Lmmse => Box::new(LmmseDetector { nt }),
        DetectorSpec::Cg(iters) => Box::new(CgDetector { nt, iters: *iters }),
        DetectorSpec::Ml => Box::new(MlDetector),
        DetectorSpec::Genie => Box::new(GenieDetector),
        DetectorSpec::CoinFlip => Box::new(CoinFlipDetector),
        DetectorSpec::Model(path) => {
            let params: NetworkParams<T> = crate::io::load_model(path)
                .map_err(|e| Error::InvalidArgument(format!("cannot load model {}: {e}", path.display())))?;
            if params.nt != nt || params.nr != nr {
                return Err(Error::InvalidArgument(format!(
                    "model {} is {}x{}, experiment is {nt}x{nr}",
                    path.display(),
                    params.nt,
                    params.nr
                )));
            }
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Box::new(LearnedDetector {
                label: format!("{}:{stem}", params.mode),
                params,
            })
        }
    })
}

/// Per-cell stopping rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopRule {
    pub min_symbol_errors: u64,
    pub max_symbols: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            min_symbol_errors: 200,
            max_symbols: 1_000_000,
        }
    }
}

/// Points with fewer symbol errors are flagged.
pub const LOW_CONFIDENCE_ERRORS: u64 = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub nt: usize,
    pub nr: usize,
    pub channel: ChannelModel,
    pub modulation: Modulation,
    pub snr_db: Vec<f64>,
    pub stop: StopRule,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_empty() {
            return Err(Error::InvalidArgument("empty SNR grid".into()));
        }
        if self.snr_db.iter().any(|x| x.is_nan()) {
            return Err(Error::InvalidArgument("NaN in SNR grid".into()));
        }
        if self.stop.min_symbol_errors == 0 || self.stop.max_symbols == 0 {
            return Err(Error::InvalidArgument("stop rule must be positive".into()));
        }
        if self.nt == 0 || self.nr == 0 {
            return Err(Error::InvalidArgument("antenna counts must be positive".into()));
        }
        Ok(())
    }
}

/// One `(detector, SNR)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub detector: String,
    pub snr_db: f64,
    pub trials: u64,
    pub symbols: u64,
    pub bits: u64,
    pub bit_errors: u64,
    pub symbol_errors: u64,
    pub ber: f64,
    pub ser: f64,
    pub nmse_db: f64,
    pub real_mults: Option<u64>,
    pub real_divs: Option<u64>,
    pub low_confidence: bool,
    /// Not part of the CSV output, which must be reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionReport {
    pub points: Vec<BerPoint>,
}

/// Column order of the BER CSV.
pub const BER_CSV_HEADER: [&str; 13] = [
    "detector",
    "snr_db",
    "trials",
    "symbols",
    "bits",
    "bit_errors",
    "symbol_errors",
    "ber",
    "ser",
    "nmse_db",
    "real_mults",
    "real_divs",
    "low_confidence",
];

impl DetectionReport {
    pub fn point(&self, detector: &str, snr_db: f64) -> Option<&BerPoint> {
        self.points
            .iter()
            .find(|p| p.detector == detector && (p.snr_db - snr_db).abs() < 1e-9)
    }

    /// CSV rows in [`BER_CSV_HEADER`] order.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        self.points
            .iter()
            .map(|p| {
                vec![
                    p.detector.clone(),
                    p.snr_db.to_string(),
                    p.trials.to_string(),
                    p.symbols.to_string(),
                    p.bits.to_string(),
                    p.bit_errors.to_string(),
                    p.symbol_errors.to_string(),
                    format!("{:e}", p.ber),
                    format!("{:e}", p.ser),
                    format!("{:.4}", p.nmse_db),
                    opt(p.real_mults),
                    opt(p.real_divs),
                    p.low_confidence.to_string(),
                ]
            })
            .collect()
    }
}

#[derive(Default)]
struct Cell {
    trials: u64,
    bit_errors: u64,
    symbol_errors: u64,
    nmse_sum: f64,
    secs: f64,
    done: bool,
}

/// BER/SER sweep over `config.snr_db` for every detector.
pub fn ber_curve<T: Scalar>(config: &ExperimentConfig, detectors: &[Box<dyn Detector<T>>]) -> Result<DetectionReport> {
    config.validate()?;
    if detectors.is_empty() {
        return Err(Error::InvalidArgument("no detectors".into()));
    }
    let gen = TrialGenerator::<T>::new(config.nt, config.nr, config.modulation, config.channel)?;
    let bps = gen.alphabet().bits_per_symbol();
    let max_trials = config.stop.max_symbols.div_ceil(config.nt as u64).max(1);
    let mut report = DetectionReport::default();

    for (si, &snr) in config.snr_db.iter().enumerate() {
        let snr_seed = derive_seed(config.seed, si as u64);
        let mut cells: Vec<Cell> = detectors.iter().map(|_| Cell::default()).collect();
        let mut trial = 0u64;
        while cells.iter().any(|c| !c.done) {
            let seed = derive_seed(snr_seed, trial);
            let (sample, bits) = gen.draw(snr, seed);
            let system = build_system(&sample.h_r, &sample.y_r, T::lit(sample.noise_variance()))?;
            let t = Trial {
                sample: &sample,
                system: &system,
                alphabet: gen.alphabet(),
                seed,
            };
            for (det, cell) in detectors.iter().zip(cells.iter_mut()).filter(|(_, c)| !c.done) {
                let start = Instant::now();
                let est = det
                    .estimate(&t)
                    .map_err(|e| Error::InvalidArgument(format!("detector {} at {snr} dB: {e}", det.name())))?;
                cell.secs += start.elapsed().as_secs_f64();
                let hard = demap_min_distance(&est, gen.alphabet());
                let (be, se) = count_errors(&hard.bits, &bits, bps);
                cell.trials += 1;
                cell.bit_errors += be;
                cell.symbol_errors += se;
                cell.nmse_sum += sample_nmse(&est, &sample.s_r, trial as usize)?;
                cell.done = cell.symbol_errors >= config.stop.min_symbol_errors || cell.trials >= max_trials;
            }
            trial += 1;
        }
        for (det, cell) in detectors.iter().zip(cells) {
            let symbols = cell.trials * config.nt as u64;
            let nbits = symbols * bps as u64;
            let ops = det.op_count();
            report.points.push(BerPoint {
                detector: det.name(),
                snr_db: snr,
                trials: cell.trials,
                symbols,
                bits: nbits,
                bit_errors: cell.bit_errors,
                symbol_errors: cell.symbol_errors,
                ber: cell.bit_errors as f64 / nbits as f64,
                ser: cell.symbol_errors as f64 / symbols as f64,
                nmse_db: to_db(cell.nmse_sum / cell.trials as f64),
                real_mults: ops.map(|o| o.real_mults),
                real_divs: ops.map(|o| o.real_divs),
                low_confidence: cell.symbol_errors < LOW_CONFIDENCE_ERRORS,
                wall_time_s: cell.secs,
            });
        }
    }
    Ok(report)
}

fn count_errors(got: &[u8], want: &[u8], bps: usize) -> (u64, u64) {
    let bit_errors = got.iter().zip(want).filter(|(a, b)| a != b).count() as u64;
    let symbol_errors = got.chunks(bps).zip(want.chunks(bps)).filter(|(a, b)| a != b).count() as u64;
    (bit_errors, symbol_errors)
}

/// What an NMSE sweep evaluates.
#[derive(Clone, Debug, PartialEq)]
pub enum NmseSource<T> {
    Lmmse,
    Cg,
    Network(NetworkParams<T>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmseRow {
    pub detector: String,
    pub snr_db: f64,
    /// Layers or iterations; 0 for LMMSE.
    pub layers: usize,
    pub trials: usize,
    pub nmse_db: f64,
}

pub const NMSE_CSV_HEADER: [&str; 5] = ["detector", "snr_db", "layers", "trials", "nmse_db"];

impl NmseRow {
    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.detector.clone(),
            self.snr_db.to_string(),
            self.layers.to_string(),
            self.trials.to_string(),
            format!("{:.4}", self.nmse_db),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmseConfig {
    pub nt: usize,
    pub nr: usize,
    pub channel: ChannelModel,
    pub modulation: Modulation,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub max_layers: usize,
    pub seed: u64,
}

/// NMSE (dB) per layer/iteration count `1..=max_layers` at every SNR.
pub fn nmse_curve<T: Scalar>(config: &NmseConfig, source: &NmseSource<T>) -> Result<Vec<NmseRow>> {
    if config.snr_db.is_empty() {
        return Err(Error::InvalidArgument("empty SNR list".into()));
    }
    if config.trials == 0 {
        return Err(Error::EmptyBatch);
    }
    let gen = TrialGenerator::<T>::new(config.nt, config.nr, config.modulation, config.channel)?;
    let depth = match source {
        NmseSource::Lmmse => 1,
        NmseSource::Cg => config.max_layers,
        NmseSource::Network(p) => {
            if p.nt != config.nt {
                return Err(Error::dims("nmse_curve (model nt)", config.nt, p.nt));
            }
            config.max_layers.min(p.num_layers())
        }
    };
    if depth == 0 {
        return Err(Error::InvalidArgument("layer sweep is empty".into()));
    }
    let name = match source {
        NmseSource::Lmmse => "lmmse".to_string(),
        NmseSource::Cg => "cg".to_string(),
        NmseSource::Network(p) => format!("lcgnet-{}", p.mode),
    };
    let mut rows = Vec::new();
    for (si, &snr) in config.snr_db.iter().enumerate() {
        let snr_seed = derive_seed(config.seed, si as u64);
        let mut sums = vec![0.0; depth];
        for i in 0..config.trials {
            let (sample, _) = gen.draw(snr, derive_seed(snr_seed, i as u64));
            let system = build_system(&sample.h_r, &sample.y_r, T::lit(sample.noise_variance()))?;
            match source {
                NmseSource::Lmmse => {
                    let est = lmmse_detect(&sample.h_r, &sample.y_r, system.sigma2)?;
                    sums[0] += sample_nmse(&est, &sample.s_r, i)?;
                }
                NmseSource::Cg => {
                    let mut st = CgState::new(&system);
                    let mut done = false;
                    for slot in sums.iter_mut() {
                        if !done {
                            let it = st.step(&system)?;
                            done = it.residual_norm == T::zero();
                        }
                        *slot += sample_nmse(&st.s_hat, &sample.s_r, i)?;
                    }
                }
                NmseSource::Network(p) => {
                    let mut st = LayerState::initial(&system);
                    for (k, slot) in sums.iter_mut().enumerate() {
                        advance(p, &system, &mut st, k..k + 1)?;
                        *slot += sample_nmse(&st.s, &sample.s_r, i)?;
                    }
                }
            }
        }
        for (k, total) in sums.into_iter().enumerate() {
            rows.push(NmseRow {
                detector: name.clone(),
                snr_db: snr,
                layers: if matches!(source, NmseSource::Lmmse) { 0 } else { k + 1 },
                trials: config.trials,
                nmse_db: to_db(total / config.trials as f64),
            });
        }
    }
    Ok(rows)
}

/// Linear interpolation in `(SNR, log10 BER)` of the SNR where a curve first
/// reaches `target`. `None` if it never does within the grid.
pub fn snr_at_ber(points: &[(f64, f64)], target: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lt = target.log10();
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if y0 >= target && y1 <= target {
            if y1 <= 0.0 || y0 <= 0.0 {
                return Some(x1);
            }
            let (l0, l1) = (y0.log10(), y1.log10());
            if (l0 - l1).abs() < f64::EPSILON {
                return Some(x0);
            }
            return Some(x0 + (x1 - x0) * (l0 - lt) / (l0 - l1));
        }
    }
    pts.first().filter(|p| p.1 <= target).map(|p| p.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn config(nt: usize, nr: usize, modulation: Modulation, snr: Vec<f64>) -> ExperimentConfig {
        ExperimentConfig {
            nt,
            nr,
            channel: ChannelModel::Rayleigh,
            modulation,
            snr_db: snr,
            stop: StopRule {
                min_symbol_errors: 200,
                max_symbols: 20_000,
            },
            seed: 7,
        }
    }

    #[test]
    fn genie_has_zero_errors() {
        let cfg = config(4, 8, Modulation::Qpsk, vec![0.0, 10.0]);
        let dets: Vec<Box<dyn Detector<f64>>> = vec![Box::new(GenieDetector)];
        let rep = ber_curve(&cfg, &dets).unwrap();
        for p in &rep.points {
            assert_eq!(p.bit_errors, 0);
            assert_eq!(p.symbols, 20_000);
            assert!(p.low_confidence);
        }
    }

    #[test]
    fn coin_flip_is_chance_level() {
        let cfg = ExperimentConfig {
            stop: StopRule {
                min_symbol_errors: u64::MAX,
                max_symbols: 20_000,
            },
            ..config(4, 8, Modulation::Bpsk, vec![10.0])
        };
        let dets: Vec<Box<dyn Detector<f64>>> = vec![Box::new(CoinFlipDetector)];
        let p = &ber_curve(&cfg, &dets).unwrap().points[0];
        let sd = (0.25 / p.bits as f64).sqrt();
        assert!((p.ber - 0.5).abs() <= 3.0 * sd, "ber {}", p.ber);
    }

    #[test]
    fn lmmse_ber_decreases_with_snr() {
        let cfg = config(16, 32, Modulation::Qpsk, vec![0.0, 4.0, 8.0, 12.0]);
        let dets: Vec<Box<dyn Detector<f64>>> = vec![Box::new(LmmseDetector { nt: 16 })];
        let rep = ber_curve(&cfg, &dets).unwrap();
        let bers: Vec<f64> = rep.points.iter().map(|p| p.ber).collect();
        assert!(bers.windows(2).all(|w| w[1] < w[0]), "{bers:?}");
        assert_eq!(rep.points[0].real_mults, Some(8 * 16 * 16 * 16 + 4 * 16 * 16));
    }

    #[test]
    fn csv_is_reproducible_and_excludes_time() {
        let cfg = config(2, 4, Modulation::Qpsk, vec![5.0]);
        let run = || {
            let dets: Vec<Box<dyn Detector<f64>>> = vec![
                Box::new(LmmseDetector { nt: 2 }),
                Box::new(CgDetector { nt: 2, iters: 2 }),
            ];
            ber_curve(&cfg, &dets).unwrap().csv_rows()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a[0].len(), BER_CSV_HEADER.len());
        assert_eq!(a[1][10], (2 * (8 * 4 + 28 + 8)).to_string());
    }

    #[test]
    fn detectors_share_trials() {
        // The genie's first k trials are the same realizations the LMMSE saw.
        let cfg = config(2, 2, Modulation::Qpsk, vec![0.0]);
        let dets: Vec<Box<dyn Detector<f64>>> = vec![Box::new(LmmseDetector { nt: 2 }), Box::new(ZfDetector)];
        let rep = ber_curve(&cfg, &dets).unwrap();
        let (l, z) = (&rep.points[0], &rep.points[1]);
        assert!(l.symbol_errors >= 200 && z.symbol_errors >= 200);
        assert!(l.trials >= z.trials);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let cfg = config(2, 4, Modulation::Qpsk, vec![]);
        let dets: Vec<Box<dyn Detector<f64>>> = vec![Box::new(GenieDetector)];
        assert!(matches!(ber_curve(&cfg, &dets), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn detector_specs_parse() {
        assert_eq!("cg:7".parse::<DetectorSpec>().unwrap(), DetectorSpec::Cg(7));
        assert_eq!("LMMSE".parse::<DetectorSpec>().unwrap(), DetectorSpec::Lmmse);
        assert_eq!(
            "model:a/b.json".parse::<DetectorSpec>().unwrap(),
            DetectorSpec::Model("a/b.json".into())
        );
        assert!("cg:0".parse::<DetectorSpec>().is_err());
        assert!(matches!("sic".parse::<DetectorSpec>(), Err(Error::UnknownDetector(_))));
        assert!(build_detector::<f64>(&DetectorSpec::Model("/nonexistent.json".into()), 2, 4).is_err());
    }

    #[test]
    fn cg_on_identity_converges_in_one_step() {
        let cfg = NmseConfig {
            nt: 2,
            nr: 2,
            channel: ChannelModel::Rayleigh,
            modulation: Modulation::Qpsk,
            snr_db: vec![10.0],
            trials: 10,
            max_layers: 3,
            seed: 1,
        };
        // Identity systems directly: A = I, b = s.
        let h = Matrix::<f64>::identity(4);
        let s = vec![0.7, -0.7, 0.7, 0.7];
        let sys = build_system(&h, &s, 0.0).unwrap();
        let mut st = CgState::new(&sys);
        st.step(&sys).unwrap();
        assert!(to_db(sample_nmse(&st.s_hat, &s, 0).unwrap()) <= -80.0);

        let rows = nmse_curve(&cfg, &NmseSource::<f64>::Cg).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.windows(2).all(|w| w[1].nmse_db <= w[0].nmse_db + 1e-9));
    }

    #[test]
    fn network_rows_match_cg_parity() {
        let cfg = NmseConfig {
            nt: 4,
            nr: 8,
            channel: ChannelModel::Rayleigh,
            modulation: Modulation::Qpsk,
            snr_db: vec![10.0],
            trials: 20,
            max_layers: 4,
            seed: 3,
        };
        let zero = NetworkParams::<f64>::zeros(crate::network::StepMode::Scalar, 4, 8, 4);
        let rows = nmse_curve(&cfg, &NmseSource::Network(zero)).unwrap();
        assert!(rows.iter().all(|r| r.nmse_db.abs() < 1e-12));
    }

    #[test]
    fn snr_interpolation() {
        let pts = [(0.0, 1e-1), (5.0, 1e-2), (10.0, 1e-4)];
        assert!((snr_at_ber(&pts, 1e-2).unwrap() - 5.0).abs() < 1e-12);
        assert!((snr_at_ber(&pts, 1e-3).unwrap() - 7.5).abs() < 1e-12);
        assert_eq!(snr_at_ber(&pts, 1e-6), None);
    }
}
