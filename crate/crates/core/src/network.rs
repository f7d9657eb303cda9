//! The unfolded conjugate-gradient network.
//!
//! Layer `i` maps `(ŝ, r, d)` to
//!
//! ```text
//! ŝ' = ŝ + α_i ∘ d
//! r' = r − α_i ∘ (A d)
//! d' = r' + β_i ∘ d
//! ```
//!
//! starting from `ŝ = 0`, `r = d = b`. In scalar mode `α_i`, `β_i` are numbers
//! (one shared step per layer); in vector mode they are length-`2Nt` vectors
//! applied elementwise.

use serde::{Deserialize, Serialize};

use crate::detectors::{CgIteration, LinearSystem};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mimo::{demap_min_distance, SymbolAlphabet};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Scalar,
    Vector,
}

impl std::str::FromStr for StepMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "scalar" | "s" => Ok(StepMode::Scalar),
            "vector" | "v" => Ok(StepMode::Vector),
            other => Err(Error::InvalidArgument(format!("unknown step mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for StepMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepMode::Scalar => "scalar",
            StepMode::Vector => "vector",
        })
    }
}

/// Where a parameter set came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    #[serde(default)]
    pub snr_schedule_db: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub channel: Option<String>,
    /// Best validation NMSE (dB) after each accepted layer.
    #[serde(default)]
    pub loss_history: Vec<f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Per-layer step sizes. Each entry of `alphas`/`betas` has length 1 in scalar
/// mode and `2·nt` in vector mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub mode: StepMode,
    pub nt: usize,
    pub nr: usize,
    pub alphas: Vec<Vec<T>>,
    pub betas: Vec<Vec<T>>,
    pub meta: TrainingMeta,
}

impl<T: Scalar> NetworkParams<T> {
    /// All-zero network (the training initialization).
    pub fn zeros(mode: StepMode, nt: usize, nr: usize, layers: usize) -> Self {
        let w = step_width(mode, nt);
        NetworkParams {
            mode,
            nt,
            nr,
            alphas: vec![vec![T::zero(); w]; layers],
            betas: vec![vec![T::zero(); w]; layers],
            meta: TrainingMeta::default(),
        }
    }

    pub fn new(mode: StepMode, nt: usize, nr: usize, alphas: Vec<Vec<T>>, betas: Vec<Vec<T>>) -> Result<Self> {
        let p = NetworkParams {
            mode,
            nt,
            nr,
            alphas,
            betas,
            meta: TrainingMeta::default(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Scalar network reproducing a CG run step for step.
    pub fn from_cg_trace(nt: usize, nr: usize, trace: &[CgIteration<T>]) -> Self {
        NetworkParams {
            mode: StepMode::Scalar,
            nt,
            nr,
            alphas: trace.iter().map(|it| vec![it.alpha]).collect(),
            betas: trace.iter().map(|it| vec![it.beta]).collect(),
            meta: TrainingMeta::default(),
        }
    }

    /// Vector network whose every entry equals the scalar network's step.
    pub fn broadcast(&self) -> Self {
        let w = 2 * self.nt;
        let widen = |v: &Vec<T>| if v.len() == 1 { vec![v[0]; w] } else { v.clone() };
        NetworkParams {
            mode: StepMode::Vector,
            nt: self.nt,
            nr: self.nr,
            alphas: self.alphas.iter().map(widen).collect(),
            betas: self.betas.iter().map(widen).collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.len() != self.betas.len() {
            return Err(Error::dims(
                "NetworkParams (beta layers)",
                self.alphas.len(),
                self.betas.len(),
            ));
        }
        let w = self.step_width();
        for v in self.alphas.iter().chain(&self.betas) {
            if v.len() != w {
                return Err(Error::dims("NetworkParams (step width)", w, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("network step size".into()));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.alphas.len()
    }

    /// Entries per step-size vector: 1 (scalar) or `2·nt` (vector).
    pub fn step_width(&self) -> usize {
        step_width(self.mode, self.nt)
    }

    /// Total number of trainable reals, `2·L·width`.
    pub fn num_parameters(&self) -> usize {
        2 * self.num_layers() * self.step_width()
    }

    /// All alphas (layer-major) followed by all betas.
    pub fn flatten(&self) -> Vec<T> {
        self.alphas.iter().chain(&self.betas).flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::dims(
                "NetworkParams::set_flat",
                self.num_parameters(),
                flat.len(),
            ));
        }
        let w = self.step_width();
        for (dst, src) in self.alphas.iter_mut().chain(self.betas.iter_mut()).zip(flat.chunks(w)) {
            dst.copy_from_slice(src);
        }
        Ok(())
    }

    /// Flat index range of layer `i`'s alphas and betas.
    pub fn layer_ranges(&self, i: usize) -> [std::ops::Range<usize>; 2] {
        let w = self.step_width();
        let off = self.num_layers() * w;
        [i * w..(i + 1) * w, off + i * w..off + (i + 1) * w]
    }

    /// First `layers` layers.
    pub fn truncated(&self, layers: usize) -> Self {
        let l = layers.min(self.num_layers());
        NetworkParams {
            alphas: self.alphas[..l].to_vec(),
            betas: self.betas[..l].to_vec(),
            ..self.clone()
        }
    }

    /// Applies `f` to every step size.
    pub fn map_steps(&self, f: impl Fn(T) -> T) -> Self {
        let m = |v: &Vec<T>| v.iter().map(|&x| f(x)).collect();
        NetworkParams {
            alphas: self.alphas.iter().map(m).collect(),
            betas: self.betas.iter().map(m).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs_step(&self) -> T {
        self.alphas
            .iter()
            .chain(&self.betas)
            .flatten()
            .fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

fn step_width(mode: StepMode, nt: usize) -> usize {
    match mode {
        StepMode::Scalar => 1,
        StepMode::Vector => 2 * nt,
    }
}

/// Intermediates of a forward pass: `s[i], r[i], d[i], ad[i] = A d[i]` for
/// `i = 0..=L`, where index 0 is the state entering layer `first_layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub first_layer: usize,
    pub s: Vec<Vec<T>>,
    pub r: Vec<Vec<T>>,
    pub d: Vec<Vec<T>>,
    pub ad: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn num_layers(&self) -> usize {
        self.s.len().saturating_sub(1)
    }

    pub fn output(&self) -> &[T] {
        self.s.last().expect("trace holds the initial state")
    }

    /// Stored vectors (`4·(L+1)`).
    pub fn num_vectors(&self) -> usize {
        self.s.len() + self.r.len() + self.d.len() + self.ad.len()
    }
}

fn check_dims<T: Scalar>(params: &NetworkParams<T>, system: &LinearSystem<T>, layers: usize) -> Result<()> {
    let k = 2 * params.nt;
    if system.dim() != k {
        return Err(Error::dims("network forward (system size)", k, system.dim()));
    }
    if system.a.rows() != k || system.a.cols() != k {
        return Err(Error::dims("network forward (A size)", k, system.a.rows()));
    }
    if layers > params.num_layers() {
        return Err(Error::dims("network forward (layers)", params.num_layers(), layers));
    }
    let w = params.step_width();
    if let Some(bad) = params.alphas.iter().chain(&params.betas).find(|v| v.len() != w) {
        return Err(Error::dims("network forward (step width)", w, bad.len()));
    }
    Ok(())
}

#[inline]
fn entry<T: Scalar>(steps: &[T], k: usize) -> T {
    if steps.len() == 1 {
        steps[0]
    } else {
        steps[k]
    }
}

/// One layer in place; `ad` receives `A·d` for the incoming `d`.
#[inline]
fn layer<T: Scalar>(a: &Matrix<T>, alpha: &[T], beta: &[T], s: &mut [T], r: &mut [T], d: &mut [T], ad: &mut Vec<T>) {
    *ad = a.mul_vec(d);
    for k in 0..s.len() {
        let ak = entry(alpha, k);
        s[k] += ak * d[k];
        r[k] -= ak * ad[k];
        d[k] = r[k] + entry(beta, k) * d[k];
    }
}

/// Output of the first `layers` layers.
pub fn forward_layers<T: Scalar>(params: &NetworkParams<T>, system: &LinearSystem<T>, layers: usize) -> Result<Vec<T>> {
    let mut state = LayerState::initial(system);
    advance(params, system, &mut state, 0..layers)?;
    Ok(state.s)
}

pub fn forward<T: Scalar>(params: &NetworkParams<T>, system: &LinearSystem<T>) -> Result<Vec<T>> {
    forward_layers(params, system, params.num_layers())
}

fn expect_mode<T: Scalar>(params: &NetworkParams<T>, mode: StepMode) -> Result<()> {
    if params.mode != mode {
        return Err(Error::InvalidArgument(format!(
            "expected {mode} step sizes, got {}",
            params.mode
        )));
    }
    Ok(())
}

/// Forward pass with shared scalar steps per layer.
pub fn forward_scalar<T: Scalar>(params: &NetworkParams<T>, system: &LinearSystem<T>) -> Result<Vec<T>> {
    expect_mode(params, StepMode::Scalar)?;
    forward(params, system)
}

/// Forward pass with elementwise (Hadamard) steps.
pub fn forward_vector<T: Scalar>(params: &NetworkParams<T>, system: &LinearSystem<T>) -> Result<Vec<T>> {
    expect_mode(params, StepMode::Vector)?;
    forward(params, system)
}

/// Recurrence state `(ŝ, r, d)` between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub s: Vec<T>,
    pub r: Vec<T>,
    pub d: Vec<T>,
}

impl<T: Scalar> LayerState<T> {
    /// `ŝ = 0`, `r = d = b`.
    pub fn initial(system: &LinearSystem<T>) -> Self {
        LayerState {
            s: vec![T::zero(); system.dim()],
            r: system.b.clone(),
            d: system.b.clone(),
        }
    }
}

/// Runs `layers` on `state` in place.
pub fn advance<T: Scalar>(
    params: &NetworkParams<T>,
    system: &LinearSystem<T>,
    state: &mut LayerState<T>,
    layers: std::ops::Range<usize>,
) -> Result<()> {
    check_dims(params, system, layers.end)?;
    if state.s.len() != system.dim() || state.r.len() != system.dim() || state.d.len() != system.dim() {
        return Err(Error::dims("network state", system.dim(), state.s.len()));
    }
    let mut ad = Vec::new();
    for i in layers {
        layer(
            &system.a,
            &params.alphas[i],
            &params.betas[i],
            &mut state.s,
            &mut state.r,
            &mut state.d,
            &mut ad,
        );
    }
    Ok(())
}

/// Runs `layers` from `state`, keeping every intermediate.
pub fn trace_from<T: Scalar>(
    params: &NetworkParams<T>,
    system: &LinearSystem<T>,
    state: LayerState<T>,
    layers: std::ops::Range<usize>,
) -> Result<ForwardTrace<T>> {
    check_dims(params, system, layers.end)?;
    if state.s.len() != system.dim() || state.r.len() != system.dim() || state.d.len() != system.dim() {
        return Err(Error::dims("network state", system.dim(), state.s.len()));
    }
    let n = layers.len();
    let mut trace = ForwardTrace {
        first_layer: layers.start,
        s: Vec::with_capacity(n + 1),
        r: Vec::with_capacity(n + 1),
        d: Vec::with_capacity(n + 1),
        ad: Vec::with_capacity(n + 1),
    };
    let LayerState { mut s, mut r, mut d } = state;
    let mut ad = Vec::new();
    for i in layers {
        trace.s.push(s.clone());
        trace.r.push(r.clone());
        trace.d.push(d.clone());
        layer(
            &system.a,
            &params.alphas[i],
            &params.betas[i],
            &mut s,
            &mut r,
            &mut d,
            &mut ad,
        );
        trace.ad.push(ad.clone());
    }
    trace.ad.push(system.a.mul_vec(&d));
    trace.s.push(s);
    trace.r.push(r);
    trace.d.push(d);
    Ok(trace)
}

/// Forward pass over the first `layers` layers, keeping every intermediate.
pub fn forward_with_trace_layers<T: Scalar>(
    params: &NetworkParams<T>,
    system: &LinearSystem<T>,
    layers: usize,
) -> Result<(Vec<T>, ForwardTrace<T>)> {
    let trace = trace_from(params, system, LayerState::initial(system), 0..layers)?;
    Ok((trace.output().to_vec(), trace))
}

pub fn forward_with_trace<T: Scalar>(
    params: &NetworkParams<T>,
    system: &LinearSystem<T>,
) -> Result<(Vec<T>, ForwardTrace<T>)> {
    forward_with_trace_layers(params, system, params.num_layers())
}

/// Hard decisions and raw estimate of an end-to-end detection.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection<T> {
    pub bits: Vec<u8>,
    pub estimate: Vec<T>,
}

/// `build_system → forward → demap_min_distance`.
pub fn detect<T: Scalar>(
    params: &NetworkParams<T>,
    h_r: &Matrix<T>,
    y_r: &[T],
    sigma2: T,
    alphabet: &SymbolAlphabet<T>,
) -> Result<Detection<T>> {
    let system = crate::detectors::build_system(h_r, y_r, sigma2)?;
    let estimate = forward(params, &system)?;
    let bits = demap_min_distance(&estimate, alphabet).bits;
    Ok(Detection { bits, estimate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{build_system, cg_detect, count_ops, CostedDetector};
    use crate::mimo::{gen_rayleigh, real_embed_matrix, ChannelModel, Modulation, TrialGenerator};
    use crate::scalar::{Counted, OpTally};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rayleigh_system(nt: usize, nr: usize, seed: u64) -> LinearSystem<f64> {
        let h = real_embed_matrix(&gen_rayleigh::<f64>(nt, nr, seed).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let y: Vec<f64> = (0..2 * nr).map(|_| rng.random_range(-1.0..1.0)).collect();
        build_system(&h, &y, 0.1).unwrap()
    }

    fn random_params(mode: StepMode, nt: usize, layers: usize, rng: &mut ChaCha8Rng) -> NetworkParams<f64> {
        let mut p = NetworkParams::zeros(mode, nt, 2 * nt, layers);
        let flat: Vec<f64> = (0..p.num_parameters()).map(|_| rng.random_range(-0.6..0.6)).collect();
        p.set_flat(&flat).unwrap();
        p
    }

    #[test]
    fn zero_alphas_give_zero_output() {
        let sys = rayleigh_system(4, 8, 1);
        let mut p = NetworkParams::zeros(StepMode::Scalar, 4, 8, 5);
        p.betas = vec![vec![0.7]; 5];
        assert_eq!(forward_scalar(&p, &sys).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn single_layer_closed_forms() {
        let sys = rayleigh_system(3, 6, 2);
        let p = NetworkParams::new(StepMode::Scalar, 3, 6, vec![vec![0.4]], vec![vec![0.2]]).unwrap();
        let want: Vec<f64> = sys.b.iter().map(|b| 0.4 * b).collect();
        assert_eq!(forward_scalar(&p, &sys).unwrap(), want);

        let alpha: Vec<f64> = (0..6).map(|k| 0.1 * k as f64 - 0.2).collect();
        let pv = NetworkParams::new(StepMode::Vector, 3, 6, vec![alpha.clone()], vec![vec![0.0; 6]]).unwrap();
        let want: Vec<f64> = sys.b.iter().zip(&alpha).map(|(b, a)| a * b).collect();
        assert_eq!(forward_vector(&pv, &sys).unwrap(), want);
    }

    #[test]
    fn harvested_cg_steps_reproduce_cg() {
        let sys = rayleigh_system(8, 16, 3);
        let cg = cg_detect(&sys, 10, 0.0).unwrap();
        let p = NetworkParams::from_cg_trace(8, 16, &cg.trace);
        let out = forward_scalar(&p, &sys).unwrap();
        for (a, b) in out.iter().zip(&cg.estimate) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn vector_step_solves_single_instance() {
        let sys = rayleigh_system(4, 8, 4);
        let target: Vec<f64> = (0..8).map(|k| if k < 4 { 1.0 } else { -1.0 }).collect();
        let alpha: Vec<f64> = target.iter().zip(&sys.b).map(|(s, b)| s / b).collect();
        let p = NetworkParams::new(StepMode::Vector, 4, 8, vec![alpha], vec![vec![0.0; 8]]).unwrap();
        let out = forward_vector(&p, &sys).unwrap();
        for (o, t) in out.iter().zip(&target) {
            assert!((o - t).abs() <= 1e-12);
        }
    }

    #[test]
    fn mode_and_dimension_errors() {
        let sys = rayleigh_system(2, 4, 5);
        let p = NetworkParams::<f64>::zeros(StepMode::Vector, 2, 4, 2);
        assert!(forward_scalar(&p, &sys).is_err());
        let wrong = NetworkParams::<f64>::zeros(StepMode::Vector, 3, 6, 2);
        assert!(matches!(forward(&wrong, &sys), Err(Error::DimensionMismatch { .. })));
        assert!(NetworkParams::new(StepMode::Vector, 2, 4, vec![vec![0.0; 3]], vec![vec![0.0; 4]]).is_err());
        assert!(NetworkParams::new(StepMode::Scalar, 2, 4, vec![vec![f64::NAN]], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn trace_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sys = rayleigh_system(4, 8, 6);
        for mode in [StepMode::Scalar, StepMode::Vector] {
            let p = random_params(mode, 4, 5, &mut rng);
            let (out, trace) = forward_with_trace(&p, &sys).unwrap();
            assert_eq!(out, forward(&p, &sys).unwrap());
            assert_eq!(trace.output(), out.as_slice());
            assert_eq!(trace.num_layers(), 5);
            for i in 0..5 {
                for k in 0..8 {
                    let a = entry(&p.alphas[i], k);
                    let want = trace.r[i][k] - a * trace.ad[i][k];
                    assert!((trace.r[i + 1][k] - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn trace_memory_bookkeeping() {
        let sys = rayleigh_system(32, 64, 7);
        let p = NetworkParams::<f64>::zeros(StepMode::Vector, 32, 64, 15);
        let (_, trace) = forward_with_trace(&p, &sys).unwrap();
        assert_eq!(trace.num_vectors(), 4 * 16);
        assert!(trace.s.iter().all(|v| v.len() == 64));
    }

    #[test]
    fn forward_tally_matches_formula() {
        for nt in [2usize, 4, 8] {
            let sys = rayleigh_system(nt, 2 * nt, 8);
            let sys = LinearSystem {
                a: sys.a.map(Counted),
                b: sys.b.iter().map(|&x| Counted(x)).collect(),
                sigma2: Counted(sys.sigma2),
            };
            for mode in [StepMode::Scalar, StepMode::Vector] {
                let p = NetworkParams::<Counted>::zeros(mode, nt, 2 * nt, 4);
                let (_, tally) = OpTally::measure(|| forward(&p, &sys).unwrap());
                let want = count_ops(CostedDetector::LcgNet, nt, 4);
                assert_eq!(tally.muls, want.real_mults, "{mode} nt={nt}");
                assert_eq!(tally.divs, 0);
            }
        }
    }

    #[test]
    fn detect_pipeline() {
        let gen = TrialGenerator::<f64>::new(4, 8, Modulation::Bpsk, ChannelModel::Rayleigh).unwrap();
        let (sample, bits) = gen.draw(f64::INFINITY, 9);
        let sys = build_system(&sample.h_r, &sample.y_r, 0.0).unwrap();
        let cg = cg_detect(&sys, 8, 0.0).unwrap();
        let p = NetworkParams::from_cg_trace(4, 8, &cg.trace);
        let det = detect(&p, &sample.h_r, &sample.y_r, 0.0, gen.alphabet()).unwrap();
        assert_eq!(det.bits, bits);

        let zero = NetworkParams::zeros(StepMode::Vector, 4, 8, 3);
        let det = detect(&zero, &sample.h_r, &sample.y_r, 0.0, gen.alphabet()).unwrap();
        assert_eq!(det.bits, vec![0; 4]);
    }

    fn params_strategy(mode: StepMode, nt: usize, layers: usize) -> impl Strategy<Value = NetworkParams<f64>> {
        let w = step_width(mode, nt);
        prop::collection::vec(-0.8..0.8f64, 2 * layers * w).prop_map(move |flat| {
            let mut p = NetworkParams::zeros(mode, nt, 2 * nt, layers);
            p.set_flat(&flat).unwrap();
            p
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn forward_is_homogeneous_in_b(
            p in params_strategy(StepMode::Vector, 3, 4),
            seed in 0u64..1000,
            c in -5.0..5.0f64,
        ) {
            let sys = rayleigh_system(3, 6, seed);
            let base = forward(&p, &sys).unwrap();
            let scaled = forward(&p, &sys.with_scaled_rhs(c)).unwrap();
            let scale = base.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            for (s, b) in scaled.iter().zip(&base) {
                prop_assert!((s - c * b).abs() <= 1e-10 * scale * c.abs().max(1.0));
            }
        }

        #[test]
        fn constant_vectors_match_scalar_steps(
            p in params_strategy(StepMode::Scalar, 3, 5),
            seed in 0u64..1000,
        ) {
            let sys = rayleigh_system(3, 6, seed);
            let s = forward_scalar(&p, &sys).unwrap();
            let v = forward_vector(&p.broadcast(), &sys).unwrap();
            for (a, b) in s.iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
