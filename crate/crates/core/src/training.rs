//! Loss, hand-derived gradients, Adam and the layer-by-layer SNR curriculum.
//!
//! The backward pass is the adjoint of the layer recurrence. With cotangents
//! `s̄, r̄, d̄` of the state leaving layer `i`:
//!
//! ```text
//! r̄  += d̄                      (d' = r' + β∘d)
//! β̄_i = d̄ ∘ d_i,   d̄_i  = β_i ∘ d̄
//! ᾱ_i = s̄ ∘ d_i − r̄ ∘ A d_i
//! d̄_i += α_i ∘ s̄ − Aᵀ(α_i ∘ r̄)
//! ```
//!
//! `s̄` and `r̄` pass through unchanged. Scalar mode sums the elementwise terms.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::{build_system, LinearSystem};
use crate::error::{Error, Result};
use crate::mimo::{derive_seed, Sample, TrialGenerator};
use crate::network::{advance, trace_from, ForwardTrace, LayerState, NetworkParams, StepMode};
use crate::scalar::Scalar;

/// dB value reported for an NMSE of exactly zero.
pub const NMSE_DB_FLOOR: f64 = -400.0;

/// A sample with its normal equations assembled once.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared<T> {
    pub system: LinearSystem<T>,
    pub label: Vec<T>,
}

impl<T: Scalar> Prepared<T> {
    pub fn from_sample(sample: &Sample<T>) -> Result<Self> {
        let system = build_system(&sample.h_r, &sample.y_r, T::lit(sample.noise_variance()))?;
        Ok(Prepared {
            system,
            label: sample.s_r.clone(),
        })
    }
}

pub fn prepare_all<T: Scalar>(samples: &[Sample<T>]) -> Result<Vec<Prepared<T>>> {
    samples.iter().map(Prepared::from_sample).collect()
}

/// `(1/M) Σ ‖s_m − ŝ_m‖²` over the batch.
pub fn mse_loss<T: Scalar>(params: &NetworkParams<T>, batch: &[Sample<T>]) -> Result<T> {
    mse_loss_prepared(params, &prepare_all(batch)?)
}

pub fn mse_loss_prepared<T: Scalar>(params: &NetworkParams<T>, batch: &[Prepared<T>]) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = T::zero();
    for p in batch {
        if p.label.len() != p.system.dim() {
            return Err(Error::dims("mse_loss (label)", p.system.dim(), p.label.len()));
        }
        let out = crate::network::forward(params, &p.system)?;
        total += squared_error(&out, &p.label);
    }
    Ok(total / T::from_usize(batch.len()).expect("batch size fits"))
}

fn squared_error<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// NMSE in linear and dB form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub linear: f64,
    pub db: f64,
}

impl Nmse {
    pub fn from_linear(linear: f64) -> Self {
        Nmse {
            linear,
            db: to_db(linear),
        }
    }
}

/// `10·log10(x)`, with [`NMSE_DB_FLOOR`] for zero.
pub fn to_db(linear: f64) -> f64 {
    if linear == 0.0 {
        NMSE_DB_FLOOR
    } else {
        10.0 * linear.log10()
    }
}

/// `‖ŝ − s‖² / ‖s‖²` for one sample.
pub fn sample_nmse<T: Scalar>(estimate: &[T], label: &[T], index: usize) -> Result<f64> {
    if estimate.len() != label.len() {
        return Err(Error::dims("nmse", label.len(), estimate.len()));
    }
    let den: f64 = label.iter().map(|x| x.as_f64() * x.as_f64()).sum();
    if den == 0.0 {
        return Err(Error::ZeroNormLabel { index });
    }
    let num: f64 = estimate
        .iter()
        .zip(label)
        .map(|(e, l)| {
            let d = e.as_f64() - l.as_f64();
            d * d
        })
        .sum();
    Ok(num / den)
}

/// Per-sample NMSE averaged over the set.
pub fn nmse<T: Scalar>(estimates: &[Vec<T>], labels: &[Vec<T>]) -> Result<Nmse> {
    if estimates.len() != labels.len() {
        return Err(Error::dims("nmse (count)", labels.len(), estimates.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, (e, l)) in estimates.iter().zip(labels).enumerate() {
        total += sample_nmse(e, l, i)?;
    }
    Ok(Nmse::from_linear(total / labels.len() as f64))
}

/// NMSE of the first `layers` layers over prepared samples.
pub fn evaluate_nmse<T: Scalar>(params: &NetworkParams<T>, set: &[Prepared<T>], layers: usize) -> Result<Nmse> {
    if set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, p) in set.iter().enumerate() {
        let out = crate::network::forward_layers(params, &p.system, layers)?;
        total += sample_nmse(&out, &p.label, i)?;
    }
    Ok(Nmse::from_linear(total / set.len() as f64))
}

/// Gradients shaped like [`NetworkParams::alphas`] and `betas`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub d_alphas: Vec<Vec<T>>,
    pub d_betas: Vec<Vec<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(params: &NetworkParams<T>) -> Self {
        let w = params.step_width();
        let l = params.num_layers();
        GradientSet {
            d_alphas: vec![vec![T::zero(); w]; l],
            d_betas: vec![vec![T::zero(); w]; l],
        }
    }

    /// Same ordering as [`NetworkParams::flatten`].
    pub fn flatten(&self) -> Vec<T> {
        self.d_alphas.iter().chain(&self.d_betas).flatten().copied().collect()
    }

    pub fn add_assign(&mut self, other: &GradientSet<T>) {
        for (a, b) in self
            .d_alphas
            .iter_mut()
            .chain(self.d_betas.iter_mut())
            .zip(other.d_alphas.iter().chain(&other.d_betas))
        {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for v in self.d_alphas.iter_mut().chain(self.d_betas.iter_mut()) {
            for x in v {
                *x *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_alphas
            .iter()
            .chain(&self.d_betas)
            .flatten()
            .all(|x| x.is_finite())
    }
}

/// Gradient of `‖ŝ_L − label‖²` with respect to every step size.
///
/// Layers outside the traced range get zero gradient.
pub fn backward<T: Scalar>(
    params: &NetworkParams<T>,
    system: &LinearSystem<T>,
    label: &[T],
    trace: &ForwardTrace<T>,
) -> Result<GradientSet<T>> {
    let mut grads = GradientSet::zeros_like(params);
    backward_into(params, system, label, trace, &mut grads)?;
    Ok(grads)
}

/// Accumulates the per-sample gradient into `grads`.
pub fn backward_into<T: Scalar>(
    params: &NetworkParams<T>,
    system: &LinearSystem<T>,
    label: &[T],
    trace: &ForwardTrace<T>,
    grads: &mut GradientSet<T>,
) -> Result<()> {
    let n = system.dim();
    let layers = trace.num_layers();
    let first = trace.first_layer;
    if trace.s.len() != layers + 1
        || trace.r.len() != layers + 1
        || trace.d.len() != layers + 1
        || trace.ad.len() != layers + 1
    {
        return Err(Error::TraceMismatch("ragged trace".into()));
    }
    if first + layers > params.num_layers() {
        return Err(Error::TraceMismatch(format!(
            "trace covers layers {}..{} but the network has {}",
            first,
            first + layers,
            params.num_layers()
        )));
    }
    if label.len() != n || trace.output().len() != n {
        return Err(Error::dims("backward (label)", n, label.len()));
    }
    if grads.d_alphas.len() != params.num_layers() {
        return Err(Error::dims(
            "backward (gradient layers)",
            params.num_layers(),
            grads.d_alphas.len(),
        ));
    }
    let scalar = params.mode == StepMode::Scalar;
    let two = T::lit(2.0);

    let s_bar: Vec<T> = trace.output().iter().zip(label).map(|(&s, &l)| two * (s - l)).collect();
    let mut r_bar = vec![T::zero(); n];
    let mut d_bar = vec![T::zero(); n];
    let mut q_bar = vec![T::zero(); n];

    for j in (0..layers).rev() {
        let i = first + j;
        let alpha = &params.alphas[i];
        let beta = &params.betas[i];
        let d = &trace.d[j];
        let q = &trace.ad[j];
        if d.len() != n || q.len() != n {
            return Err(Error::TraceMismatch(format!("layer {i} vector length")));
        }
        let ga = &mut grads.d_alphas[i];
        let gb = &mut grads.d_betas[i];
        for k in 0..n {
            r_bar[k] += d_bar[k];
            let a_k = if scalar { alpha[0] } else { alpha[k] };
            let b_k = if scalar { beta[0] } else { beta[k] };
            let g_beta = d_bar[k] * d[k];
            let g_alpha = s_bar[k] * d[k] - r_bar[k] * q[k];
            if scalar {
                ga[0] += g_alpha;
                gb[0] += g_beta;
            } else {
                ga[k] += g_alpha;
                gb[k] += g_beta;
            }
            q_bar[k] = -(a_k * r_bar[k]);
            d_bar[k] = b_k * d_bar[k] + a_k * s_bar[k];
        }
        let back = system.a.tr_mul_vec(&q_bar);
        for k in 0..n {
            d_bar[k] += back[k];
        }
    }
    Ok(())
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        AdamState {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step_count: 0,
            hyper,
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::dims("AdamState::step", self.first_moment.len(), grads.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step_count += 1;
        let h = self.hyper;
        let t = self.step_count as i32;
        let c1 = T::lit(1.0 - h.beta1.powi(t));
        let c2 = T::lit(1.0 - h.beta2.powi(t));
        let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
        let (lr, eps) = (T::lit(h.lr), T::lit(h.epsilon));
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// SNR schedule and per-phase optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Curriculum {
    pub snr_schedule_db: Vec<f64>,
    pub new_layer_lr: f64,
    pub finetune_lr_initial: f64,
    /// Multiplier applied to the finetuning rate after every epoch.
    pub finetune_decay_per_epoch: f64,
    pub stopping_patience: usize,
    pub min_delta_db: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub max_epochs_per_phase: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Curriculum {
            snr_schedule_db: vec![30.0, 25.0, 20.0, 15.0, 10.0, 5.0, 0.0],
            new_layer_lr: 1e-3,
            finetune_lr_initial: 5e-4,
            finetune_decay_per_epoch: 0.5,
            stopping_patience: 3,
            min_delta_db: 0.01,
            batch_size: 500,
            validation_fraction: 0.1,
            max_epochs_per_phase: 50,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Curriculum {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("curriculum: {m}")));
        if self.snr_schedule_db.is_empty() {
            return bad("empty SNR schedule");
        }
        if self.snr_schedule_db.iter().any(|x| x.is_nan()) {
            return bad("NaN in SNR schedule");
        }
        if !(self.new_layer_lr > 0.0 && self.finetune_lr_initial > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(self.finetune_decay_per_epoch > 0.0 && self.finetune_decay_per_epoch <= 1.0) {
            return bad("finetune decay must lie in (0, 1]");
        }
        if self.stopping_patience == 0 || self.batch_size == 0 || self.max_epochs_per_phase == 0 {
            return bad("patience, batch size and epoch cap must be > 0");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)");
        }
        if !(self.min_delta_db >= 0.0) {
            return bad("min delta must be >= 0");
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: StepMode,
    pub nt: usize,
    pub nr: usize,
    pub layers: usize,
    pub seed: u64,
    #[serde(default)]
    pub curriculum: Curriculum,
    /// Model file rewritten after every accepted layer.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

/// Training samples grouped by stage SNR.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingData<T> {
    pub stages: Vec<(f64, Vec<Sample<T>>)>,
}

impl<T: Scalar> TrainingData<T> {
    /// `per_stage` fresh samples for every SNR in `schedule`.
    pub fn generate(generator: &TrialGenerator<T>, schedule: &[f64], per_stage: usize, seed: u64) -> Self {
        let stages = schedule
            .iter()
            .enumerate()
            .map(|(j, &snr)| {
                let stage_seed = derive_seed(seed, j as u64);
                let samples = (0..per_stage)
                    .map(|i| generator.draw(snr, derive_seed(stage_seed, i as u64)).0)
                    .collect();
                (snr, samples)
            })
            .collect();
        TrainingData { stages }
    }

    /// Samples recorded at `snr_db`, if any.
    pub fn stage(&self, snr_db: f64) -> Option<&[Sample<T>]> {
        self.stages
            .iter()
            .find(|(s, _)| (s - snr_db).abs() < 1e-9)
            .map(|(_, v)| v.as_slice())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    PhaseStart {
        stage_snr_db: f64,
        layer: usize,
        phase: u8,
        lr: f64,
        adam_reset: bool,
        val_nmse_db: f64,
    },
    Epoch {
        stage_snr_db: f64,
        layer: usize,
        phase: u8,
        epoch: usize,
        lr: f64,
        train_nmse_db: f64,
        val_nmse_db: f64,
        improved: bool,
    },
    PhaseEnd {
        stage_snr_db: f64,
        layer: usize,
        phase: u8,
        epochs: usize,
        initial_val_nmse_db: f64,
        best_val_nmse_db: f64,
    },
    LayerAccepted {
        stage_snr_db: f64,
        layer: usize,
        val_nmse_db: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub params: NetworkParams<T>,
    pub log: Vec<LogRecord>,
    pub final_val_nmse_db: f64,
}

/// Layer-wise training from zero-initialized step sizes.
pub fn train_layerwise<T: Scalar>(
    config: &TrainConfig,
    data: &TrainingData<T>,
    observer: impl FnMut(&LogRecord),
) -> Result<TrainOutcome<T>> {
    let init = NetworkParams::zeros(config.mode, config.nt, config.nr, config.layers);
    train_layerwise_from(config, data, init, observer)
}

/// Layer-wise training starting from `init` (finetuning).
pub fn train_layerwise_from<T: Scalar>(
    config: &TrainConfig,
    data: &TrainingData<T>,
    init: NetworkParams<T>,
    mut observer: impl FnMut(&LogRecord),
) -> Result<TrainOutcome<T>> {
    let cur = &config.curriculum;
    cur.validate()?;
    if config.layers == 0 {
        return Err(Error::InvalidArgument("layers must be >= 1".into()));
    }
    if init.mode != config.mode || init.nt != config.nt || init.num_layers() != config.layers {
        return Err(Error::InvalidArgument(
            "initial network does not match the training config".into(),
        ));
    }
    init.validate()?;
    for &snr in &cur.snr_schedule_db {
        if data.stage(snr).is_none_or(|s| s.is_empty()) {
            return Err(Error::InvalidArgument(format!("no training data at {snr} dB")));
        }
    }

    let mut params = init;
    params.meta.snr_schedule_db = cur.snr_schedule_db.clone();
    params.meta.seed = Some(config.seed);
    params.meta.loss_history.clear();
    params.meta.notes = vec!["adam moments reset at every phase".into()];
    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| {
        observer(&rec);
        log.push(rec);
    };
    let mut final_val = f64::NAN;

    for (stage_idx, &snr) in cur.snr_schedule_db.iter().enumerate() {
        let samples = data.stage(snr).expect("checked above");
        for s in samples {
            if s.nt() != config.nt || s.nr() != config.nr {
                return Err(Error::dims("training sample (nt)", config.nt, s.nt()));
            }
        }
        let prepared = prepare_all(samples)?;
        let (train, val) = split(
            prepared,
            cur.validation_fraction,
            derive_seed(config.seed, 1 << 32 | stage_idx as u64),
        )?;

        for l in 1..=config.layers {
            let ctx = PhaseCtx {
                snr,
                layer: l,
                cur,
                seed: derive_seed(config.seed, ((stage_idx as u64) << 20) | ((l as u64) << 4)),
            };
            // Phase 1: layers before `l` are frozen, so start from their output.
            let starts_train = states_after(&params, &train, l - 1)?;
            let starts_val = states_after(&params, &val, l - 1)?;
            run_phase(
                &ctx,
                1,
                &mut params,
                &train,
                &val,
                Some((&starts_train, &starts_val)),
                &mut |r| emit(r, &mut log),
            )?;
            drop((starts_train, starts_val));
            let best = run_phase(&ctx, 2, &mut params, &train, &val, None, &mut |r| emit(r, &mut log))?;
            final_val = best;
            params.meta.loss_history.push(best);
            emit(
                LogRecord::LayerAccepted {
                    stage_snr_db: snr,
                    layer: l,
                    val_nmse_db: best,
                },
                &mut log,
            );
            if let Some(path) = &config.checkpoint {
                crate::io::save_model(&params, path)?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        final_val_nmse_db: final_val,
    })
}

fn split<T: Scalar>(
    mut set: Vec<Prepared<T>>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Prepared<T>>, Vec<Prepared<T>>)> {
    let n = set.len();
    let n_val = ((n as f64 * fraction).round() as usize).max(1);
    if n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "{n} samples cannot be split into training and validation sets"
        )));
    }
    set.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = set.split_off(n_val);
    Ok((train, set))
}

fn states_after<T: Scalar>(
    params: &NetworkParams<T>,
    set: &[Prepared<T>],
    layers: usize,
) -> Result<Vec<LayerState<T>>> {
    set.iter()
        .map(|p| {
            let mut st = LayerState::initial(&p.system);
            advance(params, &p.system, &mut st, 0..layers)?;
            Ok(st)
        })
        .collect()
}

struct PhaseCtx<'a> {
    snr: f64,
    layer: usize,
    cur: &'a Curriculum,
    seed: u64,
}

/// Validation NMSE (dB) of layers `first..layer` run from the given states.
fn val_nmse<T: Scalar>(
    params: &NetworkParams<T>,
    val: &[Prepared<T>],
    starts: Option<&[LayerState<T>]>,
    first: usize,
    layer: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, p) in val.iter().enumerate() {
        let mut st = match starts {
            Some(s) => s[i].clone(),
            None => LayerState::initial(&p.system),
        };
        advance(params, &p.system, &mut st, first..layer)?;
        total += sample_nmse(&st.s, &p.label, i)?;
    }
    Ok(to_db(total / val.len() as f64))
}

/// One optimization phase; leaves the best-validation parameters in `params`
/// and returns their validation NMSE (dB).
fn run_phase<T: Scalar>(
    ctx: &PhaseCtx<'_>,
    phase: u8,
    params: &mut NetworkParams<T>,
    train: &[Prepared<T>],
    val: &[Prepared<T>],
    starts: Option<(&[LayerState<T>], &[LayerState<T>])>,
    emit: &mut dyn FnMut(LogRecord),
) -> Result<f64> {
    let cur = ctx.cur;
    let l = ctx.layer;
    let first = if starts.is_some() { l - 1 } else { 0 };
    let trainable: Vec<usize> = (first..l)
        .flat_map(|i| params.layer_ranges(i).into_iter().flatten())
        .collect();
    let lr_at = |epoch: usize| match phase {
        1 => cur.new_layer_lr,
        _ => cur.finetune_lr_initial * cur.finetune_decay_per_epoch.powi(epoch as i32 - 1),
    };

    let initial = val_nmse(params, val, starts.map(|s| s.1), first, l)?;
    if !initial.is_finite() {
        return Err(Error::Divergence(format!(
            "validation NMSE {initial} at {} dB, layer {l}, phase {phase} start",
            ctx.snr
        )));
    }
    emit(LogRecord::PhaseStart {
        stage_snr_db: ctx.snr,
        layer: l,
        phase,
        lr: lr_at(1),
        adam_reset: true,
        val_nmse_db: initial,
    });

    let mut best = initial;
    let mut best_params = params.clone();
    let mut stale = 0;
    let mut adam = AdamState::<T>::new(trainable.len(), cur.adam(lr_at(1)));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, phase as u64));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = 0;

    for epoch in 1..=cur.max_epochs_per_phase {
        epochs = epoch;
        adam.hyper.lr = lr_at(epoch);
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for batch in order.chunks(cur.batch_size) {
            let mut grads = GradientSet::zeros_like(params);
            for &idx in batch {
                let p = &train[idx];
                let start = match starts {
                    Some((s, _)) => s[idx].clone(),
                    None => LayerState::initial(&p.system),
                };
                let trace = trace_from(params, &p.system, start, first..l)?;
                train_total += sample_nmse(trace.output(), &p.label, idx)?;
                backward_into(params, &p.system, &p.label, &trace, &mut grads)?;
            }
            grads.scale(T::one() / T::from_usize(batch.len()).expect("batch size fits"));
            if !grads.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at {} dB, layer {l}, phase {phase}, epoch {epoch}",
                    ctx.snr
                )));
            }
            let flat_grads = grads.flatten();
            let mut flat = params.flatten();
            let mut sub: Vec<T> = trainable.iter().map(|&i| flat[i]).collect();
            let sub_grads: Vec<T> = trainable.iter().map(|&i| flat_grads[i]).collect();
            adam.step(&mut sub, &sub_grads)?;
            for (&i, &v) in trainable.iter().zip(&sub) {
                flat[i] = v;
            }
            params.set_flat(&flat)?;
        }
        let train_db = to_db(train_total / train.len() as f64);
        let v = val_nmse(params, val, starts.map(|s| s.1), first, l)?;
        if !v.is_finite() || !train_db.is_finite() {
            return Err(Error::Divergence(format!(
                "NMSE became {v} dB (train {train_db} dB) at {} dB, layer {l}, phase {phase}, epoch {epoch}",
                ctx.snr
            )));
        }
        let improved = v < best - cur.min_delta_db;
        emit(LogRecord::Epoch {
            stage_snr_db: ctx.snr,
            layer: l,
            phase,
            epoch,
            lr: adam.hyper.lr,
            train_nmse_db: train_db,
            val_nmse_db: v,
            improved,
        });
        if improved {
            best = v;
            best_params = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cur.stopping_patience {
                break;
            }
        }
    }
    *params = best_params;
    emit(LogRecord::PhaseEnd {
        stage_snr_db: ctx.snr,
        layer: l,
        phase,
        epochs,
        initial_val_nmse_db: initial,
        best_val_nmse_db: best,
    });
    Ok(best)
}
