//! Step-size quantizers: the uniform hard staircase, the smooth TanhSum
//! staircase and the learnable soft quantizer trained by annealing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::QuantizerArtifact;
use crate::mimo::{derive_seed, Sample};
use crate::network::{trace_from, LayerState, NetworkParams, StepMode};
use crate::scalar::Scalar;
use crate::training::{
    backward_into, evaluate_nmse, prepare_all, sample_nmse, to_db, AdamHyper, AdamState, GradientSet, Prepared,
};

/// Uniform staircase with `2l+1` levels `{0, ±G, …, ±lG}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardQuantizerSpec<T> {
    pub l: usize,
    pub step: T,
}

impl<T: Scalar> HardQuantizerSpec<T> {
    pub fn new(l: usize, step: T) -> Result<Self> {
        if l == 0 || !(step > T::zero()) || !step.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "hard quantizer needs l >= 1 and G > 0 (l={l}, G={step})"
            )));
        }
        Ok(HardQuantizerSpec { l, step })
    }

    /// Step chosen so that `Gb = l·G − G/2`.
    pub fn from_bound(l: usize, gb: T) -> Result<Self> {
        if l == 0 {
            return Err(Error::InvalidArgument("l must be >= 1".into()));
        }
        Self::new(l, gb / (T::from_usize(l).expect("l fits") - T::lit(0.5)))
    }

    /// Largest `l` with `2l+1 <= 2^bits`.
    pub fn from_bits(bits: u32, gb: T) -> Result<Self> {
        Self::from_bound(levels_for_bits(bits)?, gb)
    }

    pub fn bound(&self) -> T {
        T::from_usize(self.l).expect("l fits") * self.step - self.step * T::lit(0.5)
    }

    /// `-G_l, …, 0, …, G_l`.
    pub fn levels(&self) -> Vec<T> {
        let l = self.l as i64;
        (-l..=l).map(|t| T::from_i64(t).expect("fits") * self.step).collect()
    }

    /// `T_1 … T_l` (finite); `T_{l+1} = +∞` is implicit.
    pub fn thresholds(&self) -> Vec<T> {
        (1..=self.l)
            .map(|t| (T::from_usize(t).expect("fits") - T::lit(0.5)) * self.step)
            .collect()
    }

    /// The same map as a general [`Staircase`].
    pub fn staircase(&self) -> Staircase<T> {
        let pos = self.thresholds();
        let mut thresholds: Vec<T> = pos.iter().rev().map(|&t| -t).collect();
        thresholds.extend(pos);
        Staircase {
            thresholds,
            levels: self.levels(),
        }
    }
}

/// `l` for a `bits`-bit quantizer.
pub fn levels_for_bits(bits: u32) -> Result<usize> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidArgument(format!("unsupported bit width {bits}")));
    }
    Ok((1usize << (bits - 1)) - 1)
}

/// `sgn(x)·G_t` for `T_t < |x| <= T_{t+1}`, zero for `|x| <= T_1`.
pub fn hard_quantize<T: Scalar>(x: T, spec: &HardQuantizerSpec<T>) -> T {
    let a = x.abs();
    let half = T::lit(0.5);
    if a <= spec.step * half {
        return T::zero();
    }
    // Smallest t with a <= (t + 1/2)G, capped at l.
    let mut t = ((a / spec.step) - half).ceil();
    let mut tu = t.to_usize().unwrap_or(spec.l);
    if tu > spec.l {
        tu = spec.l;
        t = T::from_usize(tu).expect("fits");
    }
    let level = t * spec.step;
    if x < T::zero() {
        -level
    } else {
        level
    }
}

/// Piecewise-constant map: `levels[k]` for `thresholds[k-1] < x <= thresholds[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Staircase<T> {
    pub thresholds: Vec<T>,
    pub levels: Vec<T>,
}

impl<T: Scalar> Staircase<T> {
    pub fn eval(&self, x: T) -> T {
        self.levels[self.thresholds.partition_point(|&t| t < x)]
    }
}

fn half_step<T: Scalar>(l: usize, gb: T) -> T {
    gb / (T::from_usize(l).expect("fits") - T::lit(0.5))
}

/// `(Gb/2l)·Σ_{t=1}^{2l} tanh(σ(x + Gb − (t−1)G))`.
pub fn tanh_sum<T: Scalar>(x: T, sigma: T, l: usize, gb: T) -> T {
    let g = half_step(l, gb);
    let amp = gb / T::from_usize(2 * l).expect("fits");
    (0..2 * l)
        .map(|t| (sigma * (x + gb - T::from_usize(t).expect("fits") * g)).tanh())
        .sum::<T>()
        * amp
}

/// The `σ → ∞` limit of [`tanh_sum`], with `sgn(0) = 0`.
pub fn tanh_sum_limit<T: Scalar>(x: T, l: usize, gb: T) -> T {
    let g = half_step(l, gb);
    let amp = gb / T::from_usize(2 * l).expect("fits");
    (0..2 * l)
        .map(|t| sign(x + gb - T::from_usize(t).expect("fits") * g))
        .sum::<T>()
        * amp
}

/// Inflection points of [`tanh_sum`]: `(t−1)G − Gb`.
pub fn tanh_sum_centers<T: Scalar>(l: usize, gb: T) -> Vec<T> {
    let g = half_step(l, gb);
    (0..2 * l).map(|t| T::from_usize(t).expect("fits") * g - gb).collect()
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Learnable parameters of one tanh term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment<T> {
    pub w1: T,
    pub w2: T,
    pub b1: T,
    pub b2: T,
}

impl<T: Scalar> Segment<T> {
    pub fn to_f64(&self) -> Segment<f64> {
        Segment {
            w1: self.w1.as_f64(),
            w2: self.w2.as_f64(),
            b1: self.b1.as_f64(),
            b2: self.b2.as_f64(),
        }
    }

    pub fn from_f64(s: &Segment<f64>) -> Self {
        Segment {
            w1: T::lit(s.w1),
            w2: T::lit(s.w2),
            b1: T::lit(s.b1),
            b2: T::lit(s.b2),
        }
    }
}

/// How the soft quantizer's `Φ` starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiInit {
    /// `w1 = Gb/2l, w2 = 1, b1 = b2 = 0`: exactly the TanhSum curve.
    #[default]
    TanhSum,
    /// `w1 = w2 = 1, b1 = b2 = 0`.
    Unit,
}

/// `Q_s(x) = Σ_t w1_t·tanh(σ(w2_t·x + Gb − (t−1)G + b1_t)) + b2_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftQuantizerParams<T> {
    pub l: usize,
    pub gb: T,
    pub sigma: T,
    pub segments: Vec<Segment<T>>,
}

impl<T: Scalar> SoftQuantizerParams<T> {
    pub fn new(l: usize, gb: T, sigma: T, segments: Vec<Segment<T>>) -> Result<Self> {
        if l == 0 || !(gb > T::zero()) || !(sigma > T::zero()) || !gb.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "soft quantizer needs l >= 1, Gb > 0, sigma > 0 (l={l}, Gb={gb}, sigma={sigma})"
            )));
        }
        if segments.len() != 2 * l {
            return Err(Error::dims("SoftQuantizerParams (segments)", 2 * l, segments.len()));
        }
        if segments
            .iter()
            .any(|s| !(s.w1.is_finite() && s.w2.is_finite() && s.b1.is_finite() && s.b2.is_finite()))
        {
            return Err(Error::NonFinite("soft quantizer segment".into()));
        }
        Ok(SoftQuantizerParams { l, gb, sigma, segments })
    }

    pub fn init(l: usize, gb: T, sigma: T, how: PhiInit) -> Result<Self> {
        let w1 = match how {
            PhiInit::TanhSum => gb / T::from_usize(2 * l.max(1)).expect("fits"),
            PhiInit::Unit => T::one(),
        };
        let seg = Segment {
            w1,
            w2: T::one(),
            b1: T::zero(),
            b2: T::zero(),
        };
        Self::new(l, gb, sigma, vec![seg; 2 * l])
    }

    /// Spacing `G = Gb/(l − 1/2)` of the fixed offsets.
    pub fn step(&self) -> T {
        half_step(self.l, self.gb)
    }

    /// Fixed offset `Gb − (t−1)G` of term `t` (zero-based).
    pub fn offset(&self, t: usize) -> T {
        self.gb - T::from_usize(t).expect("fits") * self.step()
    }

    pub fn flatten(&self) -> Vec<T> {
        self.segments.iter().flat_map(|s| [s.w1, s.w2, s.b1, s.b2]).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != 4 * self.segments.len() {
            return Err(Error::dims(
                "SoftQuantizerParams::set_flat",
                4 * self.segments.len(),
                flat.len(),
            ));
        }
        for (s, c) in self.segments.iter_mut().zip(flat.chunks(4)) {
            *s = Segment {
                w1: c[0],
                w2: c[1],
                b1: c[2],
                b2: c[3],
            };
        }
        Ok(())
    }
}

pub fn soft_quantize<T: Scalar>(x: T, phi: &SoftQuantizerParams<T>) -> T {
    phi.segments
        .iter()
        .enumerate()
        .map(|(t, s)| s.w1 * (phi.sigma * (s.w2 * x + phi.offset(t) + s.b1)).tanh() + s.b2)
        .sum()
}

/// Elementwise [`soft_quantize`] with one shared `Φ`.
pub fn soft_quantize_vec<T: Scalar>(xs: &[T], phi: &SoftQuantizerParams<T>) -> Vec<T> {
    xs.iter().map(|&x| soft_quantize(x, phi)).collect()
}

/// Adds `weight · ∂Q_s(x)/∂Φ` into `acc` (flattened `[w1, w2, b1, b2]` per term).
pub fn soft_quantize_grad_into<T: Scalar>(x: T, phi: &SoftQuantizerParams<T>, weight: T, acc: &mut [T]) {
    for (t, s) in phi.segments.iter().enumerate() {
        let th = (phi.sigma * (s.w2 * x + phi.offset(t) + s.b1)).tanh();
        let slope = s.w1 * (T::one() - th * th) * phi.sigma;
        let g = &mut acc[4 * t..4 * t + 4];
        g[0] += weight * th;
        g[1] += weight * slope * x;
        g[2] += weight * slope;
        g[3] += weight;
    }
}

/// `∂Q_s/∂x`.
pub fn soft_quantize_slope<T: Scalar>(x: T, phi: &SoftQuantizerParams<T>) -> T {
    phi.segments
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let th = (phi.sigma * (s.w2 * x + phi.offset(t) + s.b1)).tanh();
            s.w1 * (T::one() - th * th) * phi.sigma * s.w2
        })
        .sum()
}

/// The `σ → ∞` staircase of `Q_s`: thresholds are the sorted term breakpoints
/// `−(Gb − (t−1)G + b1_t)/w2_t`, levels are the limit evaluated between them.
pub fn snap<T: Scalar>(phi: &SoftQuantizerParams<T>) -> Staircase<T> {
    let mut thresholds: Vec<T> = phi
        .segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.w2 != T::zero())
        .map(|(t, s)| -(phi.offset(t) + s.b1) / s.w2)
        .filter(|x| x.is_finite())
        .collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    thresholds.dedup();
    let limit = |x: T| -> T {
        phi.segments
            .iter()
            .enumerate()
            .map(|(t, s)| s.w1 * sign(s.w2 * x + phi.offset(t) + s.b1) + s.b2)
            .sum()
    };
    let mut probes = Vec::with_capacity(thresholds.len() + 1);
    match (thresholds.first(), thresholds.last()) {
        (Some(&lo), Some(&hi)) => {
            let pad = (hi - lo).max(T::one());
            probes.push(lo - pad);
            probes.extend(thresholds.windows(2).map(|w| (w[0] + w[1]) * T::lit(0.5)));
            probes.push(hi + pad);
        }
        _ => probes.push(T::zero()),
    }
    Staircase {
        levels: probes.into_iter().map(limit).collect(),
        thresholds,
    }
}

/// Passes every step size through `q`.
pub fn quantize_network<T: Scalar>(params: &NetworkParams<T>, q: impl Fn(T) -> T) -> NetworkParams<T> {
    params.map_steps(q)
}

/// Number of distinct step-size values.
pub fn distinct_values<T: Scalar>(params: &NetworkParams<T>) -> usize {
    let mut v: Vec<f64> = params.flatten().iter().map(|x| x.as_f64()).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v.len()
}

/// Memory model of a detector's working set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryModel {
    Cg,
    LcgNetS,
    LcgNetV,
}

impl std::str::FromStr for MemoryModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cg" => Ok(MemoryModel::Cg),
            "lcgnets" | "scalar" => Ok(MemoryModel::LcgNetS),
            "lcgnetv" | "vector" => Ok(MemoryModel::LcgNetV),
            other => Err(Error::UnknownDetector(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryCost {
    pub total_bits: u64,
    /// Storage of the learned step sizes alone.
    pub parameter_bits: u64,
}

/// Working-set memory in bits with `bits` per real number.
pub fn memory_cost(model: MemoryModel, nt: usize, layers: usize, bits: u32) -> MemoryCost {
    let (nt, l, b) = (nt as u64, layers as u64, bits as u64);
    let shared = 6 * nt + 4 * nt * nt;
    let params = match model {
        MemoryModel::Cg => 0,
        MemoryModel::LcgNetS => 4 * l,
        MemoryModel::LcgNetV => 4 * l * nt,
    };
    MemoryCost {
        total_bits: (shared + params) * b,
        parameter_bits: params * b,
    }
}

pub fn memory_cost_of<T: Scalar>(params: &NetworkParams<T>, bits: u32) -> MemoryCost {
    let model = match params.mode {
        StepMode::Scalar => MemoryModel::LcgNetS,
        StepMode::Vector => MemoryModel::LcgNetV,
    };
    memory_cost(model, params.nt, params.num_layers(), bits)
}

/// Annealed training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerTrainConfig {
    pub bits: u32,
    /// Defaults to the largest trained step-size magnitude.
    pub gb: Option<f64>,
    pub sigmas: Vec<f64>,
    pub lrs: Vec<f64>,
    pub init: PhiInit,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub stopping_patience: usize,
    pub min_delta_db: f64,
    pub max_epochs_per_step: usize,
    pub seed: u64,
}

impl Default for QuantizerTrainConfig {
    fn default() -> Self {
        QuantizerTrainConfig {
            bits: 3,
            gb: None,
            sigmas: vec![10.0, 50.0, 100.0],
            lrs: vec![1e-4, 5e-5, 1e-5],
            init: PhiInit::TanhSum,
            batch_size: 100,
            validation_fraction: 0.1,
            stopping_patience: 3,
            min_delta_db: 0.0,
            max_epochs_per_step: 30,
            seed: 0,
        }
    }
}

/// Smoothing coefficients for [`QuantizerTrainConfig::dense_anneal`]. Same endpoints as the
/// three-step default with intermediate stops; the 10 → 50 jump strands 4-bit staircases on a
/// single tanh ramp.
pub const DENSE_ANNEAL_SIGMAS: [f64; 8] = [10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 70.0, 100.0];

impl QuantizerTrainConfig {
    /// Replaces the annealing schedule with [`DENSE_ANNEAL_SIGMAS`]; each step keeps the learning
    /// rate of the default step whose σ bracket it falls in.
    pub fn dense_anneal(mut self) -> Self {
        self.sigmas = DENSE_ANNEAL_SIGMAS.to_vec();
        self.lrs = DENSE_ANNEAL_SIGMAS
            .iter()
            .map(|&s| {
                if s < 50.0 {
                    1e-4
                } else if s < 100.0 {
                    5e-5
                } else {
                    1e-5
                }
            })
            .collect();
        self
    }
}

/// One line of the quantizer training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerLogRecord {
    pub sigma: f64,
    pub lr: f64,
    pub epoch: usize,
    pub train_nmse_db: f64,
    pub val_nmse_db: f64,
    /// Validation NMSE of the network through the `σ → ∞` snap of the current `Φ`.
    pub snapped_val_nmse_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerOutcome<T> {
    pub artifact: QuantizerArtifact<T>,
    /// Network passed through the snapped staircase.
    pub quantized: NetworkParams<T>,
    pub log: Vec<QuantizerLogRecord>,
    /// All step sizes collapsed onto one level.
    pub degenerate: bool,
}

/// Learns `Φ` with the step sizes held fixed, annealing `σ`, then snaps.
pub fn train_quantizer<T: Scalar>(
    params: &NetworkParams<T>,
    samples: &[Sample<T>],
    config: &QuantizerTrainConfig,
    mut observer: impl FnMut(&QuantizerLogRecord),
) -> Result<QuantizerOutcome<T>> {
    if params.mode != StepMode::Vector {
        return Err(Error::InvalidArgument("only vector-mode networks are quantized".into()));
    }
    if config.sigmas.is_empty() || config.sigmas.len() != config.lrs.len() {
        return Err(Error::InvalidArgument(
            "annealing needs matching, non-empty sigma and lr lists".into(),
        ));
    }
    if config.sigmas.iter().chain(&config.lrs).any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidArgument("sigmas and learning rates must be > 0".into()));
    }
    if config.batch_size == 0 || config.stopping_patience == 0 || config.max_epochs_per_step == 0 {
        return Err(Error::InvalidArgument(
            "batch size, patience and epoch cap must be > 0".into(),
        ));
    }
    let l = levels_for_bits(config.bits)?;
    let gb = match config.gb {
        Some(g) => T::lit(g),
        None => params.max_abs_step(),
    };
    let mut phi = SoftQuantizerParams::init(l, gb, T::lit(config.sigmas[0]), config.init)?;

    let mut set = prepare_all(samples)?;
    let n_val = ((set.len() as f64 * config.validation_fraction).round() as usize).max(1);
    if n_val >= set.len() {
        return Err(Error::InvalidArgument("too few samples for a validation split".into()));
    }
    set.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0)));
    let train = set.split_off(n_val);
    let val = set;
    let layers = params.num_layers();
    let theta = params.flatten();

    let val_db = |phi: &SoftQuantizerParams<T>| -> Result<f64> {
        let q = quantize_network(params, |x| soft_quantize(x, phi));
        Ok(evaluate_nmse(&q, &val, layers)?.db)
    };
    let snapped_db = |phi: &SoftQuantizerParams<T>| -> Result<f64> {
        let stair = snap(phi);
        let q = quantize_network(params, |x| stair.eval(x));
        Ok(evaluate_nmse(&q, &val, layers)?.db)
    };
    // The deliverable is the snapped network, so the returned Φ is the best snap seen at any σ.
    let mut best_snapped = snapped_db(&phi)?;
    let mut best_snapped_phi = phi.clone();

    let mut log = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for (&sigma, &lr) in config.sigmas.iter().zip(&config.lrs) {
        phi.sigma = T::lit(sigma);
        let mut best = val_db(&phi)?;
        let mut best_phi = phi.clone();
        let mut stale = 0;
        let mut adam = AdamState::<T>::new(
            4 * phi.segments.len(),
            AdamHyper {
                lr,
                ..AdamHyper::default()
            },
        );
        for epoch in 1..=config.max_epochs_per_step {
            order.shuffle(&mut rng);
            let mut train_total = 0.0;
            for batch in order.chunks(config.batch_size) {
                let q = quantize_network(params, |x| soft_quantize(x, &phi));
                let mut grads = GradientSet::zeros_like(&q);
                for &idx in batch {
                    let p: &Prepared<T> = &train[idx];
                    let trace = trace_from(&q, &p.system, LayerState::initial(&p.system), 0..layers)?;
                    train_total += sample_nmse(trace.output(), &p.label, idx)?;
                    backward_into(&q, &p.system, &p.label, &trace, &mut grads)?;
                }
                let scale = T::one() / T::from_usize(batch.len()).expect("fits");
                let mut phi_grad = vec![T::zero(); 4 * phi.segments.len()];
                for (&x, &g) in theta.iter().zip(&grads.flatten()) {
                    soft_quantize_grad_into(x, &phi, g * scale, &mut phi_grad);
                }
                if phi_grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "quantizer gradient at sigma {sigma}, epoch {epoch}"
                    )));
                }
                let mut flat = phi.flatten();
                adam.step(&mut flat, &phi_grad)?;
                phi.set_flat(&flat)?;
            }
            let v = val_db(&phi)?;
            if !v.is_finite() {
                return Err(Error::Divergence(format!(
                    "quantizer validation NMSE {v} at sigma {sigma}"
                )));
            }
            let sv = snapped_db(&phi)?;
            if sv < best_snapped {
                best_snapped = sv;
                best_snapped_phi = phi.clone();
            }
            let rec = QuantizerLogRecord {
                sigma,
                lr,
                epoch,
                train_nmse_db: to_db(train_total / train.len() as f64),
                val_nmse_db: v,
                snapped_val_nmse_db: sv,
            };
            observer(&rec);
            log.push(rec);
            if v < best - config.min_delta_db {
                best = v;
                best_phi = phi.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.stopping_patience {
                    break;
                }
            }
        }
        phi = best_phi;
    }
    let phi = best_snapped_phi;

    let stair = snap(&phi);
    let quantized = quantize_network(params, |x| stair.eval(x));
    let degenerate = distinct_values(&quantized) <= 1;
    if degenerate {
        log::warn!("quantized network collapsed onto a single level");
    }
    Ok(QuantizerOutcome {
        artifact: QuantizerArtifact {
            params: phi,
            snapped_levels: stair.levels,
            snapped_thresholds: stair.thresholds,
        },
        quantized,
        log,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::build_system;
    use crate::network::forward;
    use proptest::prelude::*;

    fn spec(l: usize, g: f64) -> HardQuantizerSpec<f64> {
        HardQuantizerSpec::new(l, g).unwrap()
    }

    #[test]
    fn hard_examples() {
        let s = spec(3, 1.0);
        assert_eq!(s.thresholds(), vec![0.5, 1.5, 2.5]);
        assert_eq!(hard_quantize(1.6, &s), 2.0);
        assert_eq!(hard_quantize(-1.6, &s), -2.0);
        assert_eq!(hard_quantize(0.5, &s), 0.0);
        assert_eq!(hard_quantize(-0.3, &s), 0.0);
        assert_eq!(hard_quantize(1.5, &s), 1.0);
        assert_eq!(hard_quantize(99.0, &s), 3.0);
        assert_eq!(s.levels().len(), 7);
        assert_eq!(s.bound(), 2.5);
        assert_eq!(HardQuantizerSpec::from_bound(3, 2.5).unwrap(), s);
        assert_eq!(levels_for_bits(3).unwrap(), 3);
        assert_eq!(levels_for_bits(4).unwrap(), 7);
        assert!(HardQuantizerSpec::new(0, 1.0).is_err());
        assert!(HardQuantizerSpec::new(2, -1.0).is_err());
    }

    #[test]
    fn hard_staircase_agrees_with_hard_quantize() {
        let s = spec(4, 0.3);
        let st = s.staircase();
        for i in -400..=400 {
            let x = i as f64 * 0.00731;
            assert_eq!(st.eval(x).abs(), hard_quantize(x, &s).abs(), "x={x}");
        }
    }

    #[test]
    fn tanh_sum_saturates_at_bound() {
        let (l, gb) = (3, 0.8f64);
        assert!((tanh_sum(1e3, 10.0, l, gb) - gb).abs() < 1e-12);
        assert!((tanh_sum(-1e3, 10.0, l, gb) + gb).abs() < 1e-12);
        assert_eq!(tanh_sum_centers(l, gb).len(), 6);
        assert!((tanh_sum_centers(l, gb)[5] - gb).abs() < 1e-12);
    }

    #[test]
    fn tanh_sum_strictly_increasing_on_grid() {
        let (l, gb) = (3, 1.0);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..10_000 {
            let x = -1.5 + 3.0 * i as f64 / 9_999.0;
            let y = tanh_sum(x, 5.0, l, gb);
            assert!(y > prev, "x={x}");
            prev = y;
        }
    }

    #[test]
    fn soft_reduces_to_tanh_sum() {
        let (l, gb, sigma) = (3, 0.9, 50.0);
        let phi = SoftQuantizerParams::init(l, gb, sigma, PhiInit::TanhSum).unwrap();
        for i in 0..10_000 {
            let x = -1.2 + 2.4 * i as f64 / 9_999.0;
            let a = soft_quantize(x, &phi);
            let b = tanh_sum(x, sigma, l, gb);
            assert!((a - b).abs() <= 8.0 * l as f64 * f64::EPSILON * gb, "x={x}: {a} vs {b}");
        }
        let unit = SoftQuantizerParams::init(l, gb, sigma, PhiInit::Unit).unwrap();
        let ratio = soft_quantize(0.31, &unit) / tanh_sum(0.31, sigma, l, gb);
        assert!((ratio - 2.0 * l as f64 / gb).abs() < 1e-9);
    }

    #[test]
    fn soft_has_nonzero_slope_everywhere() {
        let phi = SoftQuantizerParams::init(3, 1.0, 10.0, PhiInit::TanhSum).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x: f64 = rand::Rng::random_range(&mut rng, -2.0..2.0);
            let h = 1e-6;
            let fd = (soft_quantize(x + h, &phi) - soft_quantize(x - h, &phi)) / (2.0 * h);
            assert!(fd > 0.0, "x={x}");
            assert!((fd - soft_quantize_slope(x, &phi)).abs() < 1e-4 * fd.max(1.0));
        }
    }

    #[test]
    fn soft_gradient_matches_finite_differences() {
        let mut phi = SoftQuantizerParams::init(2, 0.7, 3.0, PhiInit::TanhSum).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flat: Vec<f64> = phi
            .flatten()
            .iter()
            .map(|v| v + rand::Rng::random_range(&mut rng, -0.2..0.2))
            .collect();
        phi.set_flat(&flat).unwrap();
        let x = 0.23;
        let mut g = vec![0.0; flat.len()];
        soft_quantize_grad_into(x, &phi, 1.0, &mut g);
        for i in 0..flat.len() {
            let mut p = phi.clone();
            let mut f = flat.clone();
            f[i] += 1e-6;
            p.set_flat(&f).unwrap();
            let up = soft_quantize(x, &p);
            f[i] -= 2e-6;
            p.set_flat(&f).unwrap();
            let fd = (up - soft_quantize(x, &p)) / 2e-6;
            assert!(
                (fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0),
                "coord {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn snap_of_tanh_sum_is_its_limit() {
        let phi = SoftQuantizerParams::init(3, 0.9, 100.0, PhiInit::TanhSum).unwrap();
        let st = snap(&phi);
        assert_eq!(st.thresholds.len(), 6);
        assert_eq!(st.levels.len(), 7);
        for i in 0..2000 {
            let x = -1.5 + 3.0 * i as f64 / 1999.0;
            if st.thresholds.iter().all(|t| (x - t).abs() > 1e-9) {
                assert!((st.eval(x) - tanh_sum_limit(x, 3, 0.9)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantize_network_examples() {
        let mut p = NetworkParams::<f64>::zeros(StepMode::Vector, 2, 4, 2);
        let flat: Vec<f64> = (0..p.num_parameters()).map(|i| (i as f64 * 0.37).sin()).collect();
        p.set_flat(&flat).unwrap();
        assert_eq!(quantize_network(&p, |x| x), p);

        let s = spec(3, 0.3);
        let q = quantize_network(&p, |x| hard_quantize(x, &s));
        assert_eq!(q.num_layers(), 2);
        assert!(distinct_values(&q) <= 7);
        let h = crate::linalg::Matrix::from_rows(&[
            vec![1.0, 0.2, 0.0, -0.1],
            vec![0.3, 0.9, 0.1, 0.0],
            vec![0.0, -0.1, 1.0, 0.2],
            vec![0.1, 0.0, 0.3, 0.9],
        ]);
        let sys = build_system(&h, &[1.0, -1.0, 0.5, 0.2], 0.1).unwrap();
        let pre = p.map_steps(|x| hard_quantize(x, &s));
        assert_eq!(forward(&q, &sys).unwrap(), forward(&pre, &sys).unwrap());
    }

    #[test]
    fn memory_examples() {
        assert_eq!(memory_cost(MemoryModel::LcgNetV, 32, 15, 32).parameter_bits, 61440);
        assert_eq!(memory_cost(MemoryModel::LcgNetV, 32, 15, 3).parameter_bits, 5760);
        assert_eq!(memory_cost(MemoryModel::LcgNetV, 32, 15, 32).total_bits, 198656);
        assert_eq!(memory_cost(MemoryModel::LcgNetV, 32, 0, 32).parameter_bits, 0);
        assert_eq!(memory_cost(MemoryModel::Cg, 32, 15, 32).total_bits, (192 + 4096) * 32);
        assert_eq!(
            memory_cost(MemoryModel::LcgNetS, 32, 15, 32).total_bits,
            (192 + 4096 + 60) * 32
        );
        let p = NetworkParams::<f64>::zeros(StepMode::Vector, 32, 64, 15);
        assert_eq!(memory_cost_of(&p, 3).parameter_bits, 5760);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn hard_is_idempotent_odd_and_monotone(
            l in 1usize..9,
            g in 0.01..2.0f64,
            x in -20.0..20.0f64,
            dx in 0.0..3.0f64,
        ) {
            let s = spec(l, g);
            let q = hard_quantize(x, &s);
            prop_assert_eq!(hard_quantize(q, &s), q);
            prop_assert_eq!(hard_quantize(-x, &s), -q);
            prop_assert!(hard_quantize(x + dx, &s) >= q);
            prop_assert!(s.levels().iter().any(|&v| (v - q).abs() <= 1e-12 * g.max(1.0)));
        }

        #[test]
        fn tanh_sum_converges_to_staircase(
            l in 1usize..8,
            gb in 0.1..3.0f64,
            u in -1.5..1.5f64,
        ) {
            let g = gb / (l as f64 - 0.5);
            let x = u * (gb + g);
            prop_assume!(tanh_sum_centers(l, gb).iter().all(|c| (x - c).abs() >= 0.05 * g));
            prop_assert!((tanh_sum(x, 1e4, l, gb) - tanh_sum_limit(x, l, gb)).abs() < 1e-3);
        }

        #[test]
        fn snapped_staircase_has_few_levels(
            b1 in prop::collection::vec(-0.3..0.3f64, 6),
            w1 in prop::collection::vec(0.05..0.5f64, 6),
            xs in prop::collection::vec(-2.0..2.0f64, 50),
        ) {
            let segs: Vec<Segment<f64>> = (0..6).map(|t| Segment { w1: w1[t], w2: 1.0, b1: b1[t], b2: 0.01 }).collect();
            let phi = SoftQuantizerParams::new(3, 0.8, 100.0, segs).unwrap();
            let st = snap(&phi);
            let mut vals: Vec<f64> = xs.iter().map(|&x| st.eval(x)).collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            vals.dedup();
            prop_assert!(vals.len() <= 7);
        }
    }
}
