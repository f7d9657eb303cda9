use lcgnet::io::{load_quantizer, save_quantizer};
use lcgnet::mimo::{derive_seed, ChannelModel, Modulation, TrialGenerator};
use lcgnet::network::{NetworkParams, StepMode};
use lcgnet::quantizer::{
    distinct_values, hard_quantize, levels_for_bits, quantize_network, train_quantizer, HardQuantizerSpec,
    QuantizerTrainConfig, Staircase,
};
use lcgnet::training::{train_layerwise, Curriculum, TrainConfig, TrainingData};

const SCHEDULE_TO_5DB: [f64; 6] = [30.0, 25.0, 20.0, 15.0, 10.0, 5.0];

fn trained(nt: usize, nr: usize, layers: usize, per_stage: usize, seed: u64) -> NetworkParams<f64> {
    let gen = TrialGenerator::<f64>::new(nt, nr, Modulation::Bpsk, ChannelModel::Rayleigh).unwrap();
    let data = TrainingData::generate(&gen, &SCHEDULE_TO_5DB, per_stage, seed);
    let config = TrainConfig {
        mode: StepMode::Vector,
        nt,
        nr,
        layers,
        seed,
        curriculum: Curriculum {
            snr_schedule_db: SCHEDULE_TO_5DB.to_vec(),
            batch_size: 16,
            ..Curriculum::default()
        },
        checkpoint: None,
    };
    train_layerwise(&config, &data, |_| {}).unwrap().params
}

#[test]
fn three_bit_hard_quantization_of_trained_model_is_not_identity() {
    let params = trained(16, 32, 4, 1000, 3);
    let spec = HardQuantizerSpec::from_bits(3, params.max_abs_step()).unwrap();
    let q = quantize_network(&params, |x| hard_quantize(x, &spec));
    let changed = params
        .flatten()
        .iter()
        .zip(q.flatten())
        .filter(|(a, b)| **a != *b)
        .count();
    assert!(changed >= 1);
    assert!(distinct_values(&q) <= 7);
}

#[test]
fn soft_quantizer_snaps_to_a_staircase_and_round_trips() {
    let params = trained(4, 8, 3, 500, 4);
    let gen = TrialGenerator::<f64>::new(4, 8, Modulation::Bpsk, ChannelModel::Rayleigh).unwrap();
    let samples: Vec<_> = (0..400).map(|i| gen.draw(10.0, derive_seed(5, i)).0).collect();
    let config = QuantizerTrainConfig {
        bits: 3,
        batch_size: 40,
        max_epochs_per_step: 5,
        seed: 5,
        ..QuantizerTrainConfig::default()
    };
    let mut records = 0;
    let out = train_quantizer(&params, &samples, &config, |_| records += 1).unwrap();
    assert_eq!(records, out.log.len());
    assert!(out
        .log
        .iter()
        .all(|r| r.val_nmse_db.is_finite() && r.snapped_val_nmse_db.is_finite()));

    let l = levels_for_bits(3).unwrap();
    assert!(distinct_values(&out.quantized) <= 2 * l + 1);
    let stair = Staircase {
        thresholds: out.artifact.snapped_thresholds.clone(),
        levels: out.artifact.snapped_levels.clone(),
    };
    assert_eq!(out.quantized, quantize_network(&params, |x| stair.eval(x)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.json");
    save_quantizer(&out.artifact, &path).unwrap();
    assert_eq!(load_quantizer::<f64>(&path).unwrap(), out.artifact);
}

#[test]
fn quantizer_rejects_scalar_networks_and_bad_schedules() {
    let gen = TrialGenerator::<f64>::new(2, 4, Modulation::Bpsk, ChannelModel::Rayleigh).unwrap();
    let samples: Vec<_> = (0..20).map(|i| gen.draw(10.0, derive_seed(6, i)).0).collect();
    let scalar = NetworkParams::<f64>::zeros(StepMode::Scalar, 2, 4, 2);
    assert!(train_quantizer(&scalar, &samples, &QuantizerTrainConfig::default(), |_| {}).is_err());
    let vector = NetworkParams::<f64>::zeros(StepMode::Vector, 2, 4, 2);
    let bad = QuantizerTrainConfig {
        lrs: vec![1e-4],
        ..QuantizerTrainConfig::default()
    };
    assert!(train_quantizer(&vector, &samples, &bad, |_| {}).is_err());
}

#[test]
fn dense_anneal_keeps_the_default_endpoints() {
    let dense = QuantizerTrainConfig::default().dense_anneal();
    let standard = QuantizerTrainConfig::default();
    assert_eq!(dense.sigmas.first(), standard.sigmas.first());
    assert_eq!(dense.sigmas.last(), standard.sigmas.last());
    assert_eq!(dense.lrs.last(), standard.lrs.last());
    assert_eq!(dense.sigmas.len(), dense.lrs.len());
    assert!(dense.sigmas.windows(2).all(|w| w[0] < w[1]));
}
