use lcgnet::detectors::{build_system, cg_detect};
use lcgnet::eval::{ber_curve, Detector, ExperimentConfig, LearnedDetector, LmmseDetector, StopRule};
use lcgnet::mimo::{derive_seed, ChannelModel, Modulation, Sample, TrialGenerator};
use lcgnet::network::{NetworkParams, StepMode};
use lcgnet::training::{
    evaluate_nmse, nmse, prepare_all, train_layerwise, Curriculum, LogRecord, TrainConfig, TrainingData,
};
use nalgebra::{DMatrix, DVector};

const SCHEDULE_TO_5DB: [f64; 6] = [30.0, 25.0, 20.0, 15.0, 10.0, 5.0];

fn config(
    mode: StepMode,
    nt: usize,
    nr: usize,
    layers: usize,
    schedule: &[f64],
    batch: usize,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        mode,
        nt,
        nr,
        layers,
        seed,
        curriculum: Curriculum {
            snr_schedule_db: schedule.to_vec(),
            batch_size: batch,
            ..Curriculum::default()
        },
        checkpoint: None,
    }
}

fn samples(gen: &TrialGenerator<f64>, snr: f64, n: usize, seed: u64) -> Vec<Sample<f64>> {
    (0..n).map(|i| gen.draw(snr, derive_seed(seed, i as u64)).0).collect()
}

fn cg_nmse_db(set: &[Sample<f64>], iters: usize) -> f64 {
    let est: Vec<Vec<f64>> = set
        .iter()
        .map(|s| {
            let sys = build_system(&s.h_r, &s.y_r, s.noise_variance()).unwrap();
            cg_detect(&sys, iters, 0.0).unwrap().estimate
        })
        .collect();
    let labels: Vec<Vec<f64>> = set.iter().map(|s| s.s_r.clone()).collect();
    nmse(&est, &labels).unwrap().db
}

fn lmmse_nmse_db(set: &[Sample<f64>]) -> f64 {
    let est: Vec<Vec<f64>> = set
        .iter()
        .map(|s| lcgnet::detectors::lmmse_detect(&s.h_r, &s.y_r, s.noise_variance()).unwrap())
        .collect();
    let labels: Vec<Vec<f64>> = set.iter().map(|s| s.s_r.clone()).collect();
    nmse(&est, &labels).unwrap().db
}

fn net_nmse_db(params: &NetworkParams<f64>, set: &[Sample<f64>]) -> f64 {
    evaluate_nmse(params, &prepare_all(set).unwrap(), params.num_layers())
        .unwrap()
        .db
}

/// Best fixed `p(A)·b` with `deg p < layers`, fitted by least squares on `fit`
/// and scored on `score`. Any scalar-step network of that depth computes such a polynomial.
fn best_polynomial_nmse_db(fit: &[Sample<f64>], score: &[Sample<f64>], layers: usize) -> f64 {
    let krylov = |s: &Sample<f64>| -> Vec<Vec<f64>> {
        let sys = build_system(&s.h_r, &s.y_r, s.noise_variance()).unwrap();
        let mut basis = vec![sys.b.clone()];
        while basis.len() < layers {
            let next = sys.a.mul_vec(basis.last().unwrap());
            basis.push(next);
        }
        basis
    };
    let mut gram = DMatrix::<f64>::zeros(layers, layers);
    let mut rhs = DVector::<f64>::zeros(layers);
    for s in fit {
        let f = krylov(s);
        for j in 0..layers {
            rhs[j] += f[j].iter().zip(&s.s_r).map(|(a, b)| a * b).sum::<f64>();
            for k in 0..layers {
                gram[(j, k)] += f[j].iter().zip(&f[k]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    let c = gram.lu().solve(&rhs).expect("nonsingular Krylov Gram matrix");
    let est: Vec<Vec<f64>> = score
        .iter()
        .map(|s| {
            let f = krylov(s);
            (0..s.s_r.len())
                .map(|i| (0..layers).map(|k| c[k] * f[k][i]).sum())
                .collect()
        })
        .collect();
    let labels: Vec<Vec<f64>> = score.iter().map(|s| s.s_r.clone()).collect();
    nmse(&est, &labels).unwrap().db
}

// At 2×4 the Gram matrix does not harden, so no fixed polynomial comes near
// per-instance CG; the reachable target is the least-squares polynomial.
#[test]
fn toy_scalar_network_reaches_best_fixed_polynomial() {
    let gen = TrialGenerator::<f64>::new(2, 4, Modulation::Qpsk, ChannelModel::Rayleigh).unwrap();
    let schedule = [20.0, 15.0, 10.0];
    let data = TrainingData::generate(&gen, &schedule, 10000, 5);
    let out = train_layerwise(&config(StepMode::Scalar, 2, 4, 3, &schedule, 16, 5), &data, |_| {}).unwrap();
    let held_out = samples(&gen, 10.0, 4000, 6);
    let net = net_nmse_db(&out.params, &held_out);
    let poly = best_polynomial_nmse_db(data.stage(10.0).unwrap(), &held_out, 3);
    let cg = cg_nmse_db(&held_out, 3);
    assert!(
        net <= poly + 0.3,
        "network {net:.2} dB vs best fixed polynomial {poly:.2} dB (CG-3 {cg:.2} dB)"
    );
    assert!(
        cg <= poly,
        "per-instance CG-3 {cg:.2} dB cannot lose to a fixed polynomial {poly:.2} dB"
    );
}

#[test]
fn vector_network_beats_lmmse_at_10db() {
    let gen = TrialGenerator::<f64>::new(8, 16, Modulation::Bpsk, ChannelModel::Rayleigh).unwrap();
    let data = TrainingData::generate(&gen, &SCHEDULE_TO_5DB, 5000, 7);
    let out = train_layerwise(
        &config(StepMode::Vector, 8, 16, 5, &SCHEDULE_TO_5DB, 16, 7),
        &data,
        |_| {},
    )
    .unwrap();
    let held_out = samples(&gen, 10.0, 4000, 8);
    let net = net_nmse_db(&out.params, &held_out);
    let lmmse = lmmse_nmse_db(&held_out);
    assert!(net < lmmse, "network {net:.2} dB vs LMMSE {lmmse:.2} dB");
}

#[test]
fn adding_a_layer_never_meaningfully_hurts() {
    let gen = TrialGenerator::<f64>::new(4, 8, Modulation::Qpsk, ChannelModel::Rayleigh).unwrap();
    let schedule = [20.0, 10.0];
    let data = TrainingData::generate(&gen, &schedule, 600, 9);
    let out = train_layerwise(&config(StepMode::Vector, 4, 8, 4, &schedule, 20, 9), &data, |_| {}).unwrap();
    for &stage in &schedule {
        let accepted: Vec<(usize, f64)> = out
            .log
            .iter()
            .filter_map(|r| match r {
                LogRecord::LayerAccepted {
                    stage_snr_db,
                    layer,
                    val_nmse_db,
                } if *stage_snr_db == stage => Some((*layer, *val_nmse_db)),
                _ => None,
            })
            .collect();
        assert_eq!(accepted.len(), 4);
        for w in accepted.windows(2) {
            assert!(
                w[1].1 <= w[0].1 + 0.1,
                "stage {stage}: layer {} {:.3} after {:.3}",
                w[1].0,
                w[1].1,
                w[0].1
            );
        }
    }
}

#[test]
fn trained_vector_network_ber_not_above_lmmse() {
    let gen = TrialGenerator::<f64>::new(16, 32, Modulation::Bpsk, ChannelModel::Rayleigh).unwrap();
    let data = TrainingData::generate(&gen, &SCHEDULE_TO_5DB, 5000, 41);
    let params = train_layerwise(
        &config(StepMode::Vector, 16, 32, 6, &SCHEDULE_TO_5DB, 16, 41),
        &data,
        |_| {},
    )
    .unwrap()
    .params;
    let experiment = ExperimentConfig {
        nt: 16,
        nr: 32,
        channel: ChannelModel::Rayleigh,
        modulation: Modulation::Bpsk,
        snr_db: vec![10.0],
        stop: StopRule {
            min_symbol_errors: u64::MAX,
            max_symbols: 100_000,
        },
        seed: 42,
    };
    let dets: Vec<Box<dyn Detector<f64>>> = vec![
        Box::new(LmmseDetector { nt: 16 }),
        Box::new(LearnedDetector {
            label: "lcgnetv".into(),
            params,
        }),
    ];
    let report = ber_curve(&experiment, &dets).unwrap();
    let lmmse = report.point("lmmse", 10.0).unwrap().ber;
    let net = report.point("lcgnetv", 10.0).unwrap().ber;
    assert!(net <= lmmse, "lcgnetv {net:.3e} vs lmmse {lmmse:.3e}");
}
