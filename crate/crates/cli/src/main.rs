//! `lcgnet` command-line workbench.
//!
//! Every subcommand writes CSV or line-delimited JSON. Tabular output goes to
//! `--out` when given and to stdout otherwise; file artifacts (datasets,
//! models, quantizers) go to `--out` or to a default name inside
//! `$LCGNET_OUT_DIR` (current directory when unset).

use std::error::Error as StdError;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lcgnet::detectors::{build_system, cg_detect, count_ops, CostedDetector, LinearSystem};
use lcgnet::eval::{
    ber_curve, build_detector, nmse_curve, DetectorSpec, ExperimentConfig, NmseConfig, NmseSource, StopRule,
    BER_CSV_HEADER, NMSE_CSV_HEADER,
};
use lcgnet::io::{load_dataset, load_model, save_dataset, save_model, save_quantizer, JsonLinesWriter};
use lcgnet::mimo::{
    derive_seed, gen_dataset, hardening_ratio, ChannelModel, ChannelSampler, DatasetConfig, Modulation, TrialGenerator,
};
use lcgnet::network::{forward, NetworkParams, StepMode};
use lcgnet::quantizer::{hard_quantize, quantize_network, train_quantizer, HardQuantizerSpec, QuantizerTrainConfig};
use lcgnet::training::{train_layerwise, Curriculum, TrainConfig, TrainingData};
use lcgnet::{Counted, OpTally};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OUT_DIR_ENV: &str = "LCGNET_OUT_DIR";

type CliResult<T = ()> = std::result::Result<T, Box<dyn StdError>>;

#[derive(Parser, Debug)]
#[command(
    name = "lcgnet",
    version,
    about = "Learned conjugate-gradient MIMO detection workbench"
)]
struct Cli {
    /// Master seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file (default: stdout for tables, $LCGNET_OUT_DIR for artifacts).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Key-value file supplying defaults for any long flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled dataset (binary payload plus JSON header).
    GenData(GenDataArgs),
    /// Train an unfolded network with the layer-wise curriculum.
    Train(TrainArgs),
    /// Monte-Carlo BER/SER curves.
    EvalBer(EvalBerArgs),
    /// NMSE versus layers or iterations.
    EvalNmse(EvalNmseArgs),
    /// Quantize the step sizes of a trained vector-mode network.
    Quantize(QuantizeArgs),
    /// Closed-form or instrumented operation counts per detection.
    BenchOps(BenchOpsArgs),
    /// Channel-hardening ratio versus receive antennas.
    Hardening(HardeningArgs),
}

#[derive(Args, Debug, Clone)]
struct SystemArgs {
    #[arg(long, default_value_t = 16)]
    nt: usize,
    #[arg(long, default_value_t = 32)]
    nr: usize,
    /// `rayleigh` or `exp:<r>`.
    #[arg(long, default_value = "rayleigh", value_parser = parse_channel)]
    channel: ChannelModel,
    #[arg(long, default_value = "qpsk", value_parser = parse_modulation)]
    modulation: Modulation,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    system: SystemArgs,
    /// Comma-separated SNRs in dB; samples cycle through them.
    #[arg(long, value_parser = parse_f64_list)]
    snr: F64List,
    #[arg(long, default_value_t = 1000)]
    count: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, value_parser = parse_mode, default_value = "vector")]
    mode: StepMode,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    /// Fresh samples generated per curriculum stage (ignored with --data).
    #[arg(long, default_value_t = 2000)]
    samples_per_stage: usize,
    /// Train on a saved dataset instead; its samples are grouped by SNR.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated stage SNRs in training order.
    #[arg(long, value_parser = parse_f64_list)]
    schedule: Option<F64List>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Model file rewritten after every accepted layer.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Line-JSON training log (default: stdout).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalBerArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, value_parser = parse_f64_list)]
    snr: F64List,
    /// Comma-separated: zf, lmmse, cg:<iters>, ml, genie, coinflip, model:<path>.
    #[arg(long, default_value = "lmmse", value_parser = parse_detectors)]
    detectors: DetectorList,
    #[arg(long, default_value_t = StopRule::default().min_symbol_errors)]
    min_symbol_errors: u64,
    #[arg(long, default_value_t = StopRule::default().max_symbols)]
    max_symbols: u64,
}

#[derive(Args, Debug)]
struct EvalNmseArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long, value_parser = parse_f64_list)]
    snr: F64List,
    /// `lmmse`, `cg` or `model:<path>`.
    #[arg(long, default_value = "cg")]
    detector: String,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 10)]
    max_layers: usize,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[command(flatten)]
    system: SystemArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 3)]
    bits: u32,
    /// `soft` (learned staircase) or `hard` (uniform).
    #[arg(long, default_value = "soft", value_parser = ["soft", "hard"])]
    method: String,
    /// Quantizer-training SNRs in dB.
    #[arg(long, value_parser = parse_f64_list, default_value = "10")]
    snr: F64List,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `standard` (σ = 10, 50, 100) or `dense` (eight steps from 10 to 100).
    #[arg(long, default_value = "standard", value_parser = ["standard", "dense"])]
    anneal: String,
    /// Where the learned quantizer is saved (soft only; default next to the model).
    #[arg(long)]
    artifact: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchOpsArgs {
    /// `lmmse`, `cg` or `lcgnet`.
    #[arg(long)]
    detector: String,
    #[arg(long)]
    nt: usize,
    /// Iterations (CG) or layers (LcgNet).
    #[arg(long, alias = "layers", default_value_t = 1)]
    iters: usize,
    /// Run an instrumented detection instead of the closed form.
    #[arg(long)]
    measured: bool,
}

#[derive(Args, Debug)]
struct HardeningArgs {
    #[arg(long)]
    nt: usize,
    #[arg(long, value_parser = parse_usize_list)]
    nr: UsizeList,
    #[arg(long, default_value = "rayleigh", value_parser = parse_channel)]
    channel: ChannelModel,
    #[arg(long, default_value_t = 100)]
    draws: usize,
}

#[derive(Clone, Debug)]
struct F64List(Vec<f64>);
#[derive(Clone, Debug)]
struct UsizeList(Vec<usize>);
#[derive(Clone, Debug)]
struct DetectorList(Vec<DetectorSpec>);

fn split_list(s: &str) -> std::result::Result<Vec<&str>, String> {
    let items: Vec<&str> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).collect();
    if items.is_empty() {
        return Err("list must not be empty".into());
    }
    Ok(items)
}

fn parse_f64_list(s: &str) -> std::result::Result<F64List, String> {
    split_list(s)?
        .into_iter()
        .map(|x| match x.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("`{x}` is not a finite number")),
        })
        .collect::<std::result::Result<_, _>>()
        .map(F64List)
}

fn parse_usize_list(s: &str) -> std::result::Result<UsizeList, String> {
    split_list(s)?
        .into_iter()
        .map(|x| match x.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("`{x}` is not a positive integer")),
        })
        .collect::<std::result::Result<_, _>>()
        .map(UsizeList)
}

fn parse_detectors(s: &str) -> std::result::Result<DetectorList, String> {
    split_list(s)?
        .into_iter()
        .map(|x| x.parse::<DetectorSpec>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()
        .map(DetectorList)
}

fn parse_channel(s: &str) -> std::result::Result<ChannelModel, String> {
    s.parse().map_err(|e: lcgnet::Error| e.to_string())
}

fn parse_modulation(s: &str) -> std::result::Result<Modulation, String> {
    s.parse().map_err(|e: lcgnet::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<StepMode, String> {
    s.parse().map_err(|e: lcgnet::Error| e.to_string())
}

/// Reads `key = value` lines; `#` starts a comment.
fn read_config(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected `key = value`", path.display(), n + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("{}:{}: invalid key `{}`", path.display(), n + 1, k.trim()).into());
        }
        pairs.push((key, v.trim().to_string()));
    }
    Ok(pairs)
}

fn config_path(argv: &[String]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Appends config entries as flags unless the command line already sets them.
fn merge_config(mut argv: Vec<String>, pairs: Vec<(String, String)>) -> Vec<String> {
    for (key, value) in pairs {
        let flag = format!("--{key}");
        let present = argv.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if present {
            continue;
        }
        match value.as_str() {
            "true" => argv.push(flag),
            "false" => {}
            _ => argv.push(format!("{flag}={value}")),
        }
    }
    argv
}

fn artifact_path(out: Option<&Path>, default_name: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(default_name),
    }
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    }
    Ok(())
}

fn table_sink(out: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            ensure_parent(p)?;
            Box::new(io::BufWriter::new(
                fs::File::create(p).map_err(|e| format!("cannot create {}: {e}", p.display()))?,
            ))
        }
        None => Box::new(io::BufWriter::new(io::stdout())),
    })
}

fn write_csv(out: Option<&Path>, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult {
    let mut w = csv::Writer::from_writer(table_sink(out)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn gen_data(cli: &Cli, args: &GenDataArgs) -> CliResult {
    let config = DatasetConfig {
        count: args.count,
        nt: args.system.nt,
        nr: args.system.nr,
        modulation: args.system.modulation,
        channel: args.system.channel,
        snr_db: args.snr.0.clone(),
        seed: cli.seed,
    };
    let dataset = gen_dataset::<f64>(&config)?;
    let path = artifact_path(cli.out.as_deref(), "dataset.bin");
    ensure_parent(&path)?;
    save_dataset(&dataset, &path)?;
    let mut w = JsonLinesWriter::new(io::stdout());
    w.write(&serde_json::json!({ "event": "dataset_written", "path": path, "meta": dataset.meta }))?;
    w.flush()?;
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> CliResult {
    let mut curriculum = Curriculum::default();
    if let Some(s) = &args.schedule {
        curriculum.snr_schedule_db = s.0.clone();
    }
    if let Some(b) = args.batch_size {
        curriculum.batch_size = b;
    }
    if let Some(m) = args.max_epochs {
        curriculum.max_epochs_per_phase = m;
    }
    if let Some(p) = args.patience {
        curriculum.stopping_patience = p;
    }
    curriculum.validate()?;
    let system = &args.system;
    let data = match &args.data {
        Some(path) => {
            let ds = load_dataset::<f64>(path)?;
            if ds.meta.nt != system.nt || ds.meta.nr != system.nr {
                return Err(format!(
                    "dataset {} is {}x{}, expected {}x{}",
                    path.display(),
                    ds.meta.nt,
                    ds.meta.nr,
                    system.nt,
                    system.nr
                )
                .into());
            }
            let mut data = TrainingData::default();
            for sample in ds.samples {
                match data.stages.iter_mut().find(|(s, _)| (s - sample.snr_db).abs() < 1e-9) {
                    Some((_, v)) => v.push(sample),
                    None => data.stages.push((sample.snr_db, vec![sample])),
                }
            }
            data
        }
        None => {
            let gen = TrialGenerator::<f64>::new(system.nt, system.nr, system.modulation, system.channel)?;
            TrainingData::generate(&gen, &curriculum.snr_schedule_db, args.samples_per_stage, cli.seed)
        }
    };
    let config = TrainConfig {
        mode: args.mode,
        nt: system.nt,
        nr: system.nr,
        layers: args.layers,
        seed: cli.seed,
        curriculum,
        checkpoint: args.checkpoint.clone(),
    };
    if let Some(c) = &config.checkpoint {
        ensure_parent(c)?;
    }
    let sink: Box<dyn Write> = match &args.log {
        Some(p) => table_sink(Some(p))?,
        None => Box::new(io::stdout()),
    };
    let mut log = JsonLinesWriter::new(sink);
    let mut log_err = None;
    let outcome = train_layerwise(&config, &data, |rec| {
        if log_err.is_none() {
            log_err = log.write(rec).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let mut params = outcome.params;
    params.meta.channel = Some(system.channel.to_string());
    let path = artifact_path(cli.out.as_deref(), "model.json");
    ensure_parent(&path)?;
    save_model(&params, &path)?;
    log.write(&serde_json::json!({
        "event": "model_written",
        "path": path,
        "final_val_nmse_db": outcome.final_val_nmse_db,
    }))?;
    log.flush()?;
    Ok(())
}

fn eval_ber(cli: &Cli, args: &EvalBerArgs) -> CliResult {
    let s = &args.system;
    let config = ExperimentConfig {
        nt: s.nt,
        nr: s.nr,
        channel: s.channel,
        modulation: s.modulation,
        snr_db: args.snr.0.clone(),
        stop: StopRule {
            min_symbol_errors: args.min_symbol_errors,
            max_symbols: args.max_symbols,
        },
        seed: cli.seed,
    };
    config.validate()?;
    let detectors = args
        .detectors
        .0
        .iter()
        .map(|spec| build_detector::<f64>(spec, s.nt, s.nr))
        .collect::<lcgnet::Result<Vec<_>>>()?;
    let report = ber_curve(&config, &detectors)?;
    write_csv(cli.out.as_deref(), &BER_CSV_HEADER, report.csv_rows())
}

fn eval_nmse(cli: &Cli, args: &EvalNmseArgs) -> CliResult {
    let s = &args.system;
    let source = match args.detector.trim() {
        "lmmse" => NmseSource::Lmmse,
        "cg" => NmseSource::Cg,
        other => match other.strip_prefix("model:") {
            Some(p) if !p.is_empty() => NmseSource::Network(load_model::<f64>(Path::new(p))?),
            _ => return Err(format!("unknown NMSE source `{other}` (expected lmmse, cg or model:<path>)").into()),
        },
    };
    let config = NmseConfig {
        nt: s.nt,
        nr: s.nr,
        channel: s.channel,
        modulation: s.modulation,
        snr_db: args.snr.0.clone(),
        trials: args.trials,
        max_layers: args.max_layers,
        seed: cli.seed,
    };
    let rows = nmse_curve(&config, &source)?;
    write_csv(cli.out.as_deref(), &NMSE_CSV_HEADER, rows.iter().map(|r| r.csv_row()))
}

fn quantize(cli: &Cli, args: &QuantizeArgs) -> CliResult {
    let params = load_model::<f64>(&args.model)?;
    let out = artifact_path(cli.out.as_deref(), "model.quantized.json");
    let mut log = JsonLinesWriter::new(io::stdout());
    if args.method == "hard" {
        let spec = HardQuantizerSpec::from_bits(args.bits, params.max_abs_step())?;
        let q = quantize_network(&params, |x| hard_quantize(x, &spec));
        ensure_parent(&out)?;
        save_model(&q, &out)?;
        log.write(&serde_json::json!({
            "event": "model_written",
            "path": out,
            "method": "hard",
            "bits": args.bits,
            "step": spec.step,
        }))?;
        log.flush()?;
        return Ok(());
    }
    let s = &args.system;
    if params.nt != s.nt || params.nr != s.nr {
        return Err(format!("model is {}x{}, expected {}x{}", params.nt, params.nr, s.nt, s.nr).into());
    }
    let gen = TrialGenerator::<f64>::new(s.nt, s.nr, s.modulation, s.channel)?;
    let snrs = &args.snr.0;
    let samples: Vec<_> = (0..args.samples)
        .map(|i| gen.draw(snrs[i % snrs.len()], derive_seed(cli.seed, i as u64)).0)
        .collect();
    let mut config = QuantizerTrainConfig {
        bits: args.bits,
        seed: cli.seed,
        ..QuantizerTrainConfig::default()
    };
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if args.anneal == "dense" {
        config = config.dense_anneal();
    }
    let mut log_err = None;
    let outcome = train_quantizer(&params, &samples, &config, |rec| {
        if log_err.is_none() {
            log_err = log.write(rec).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    ensure_parent(&out)?;
    save_model(&outcome.quantized, &out)?;
    let artifact = args
        .artifact
        .clone()
        .unwrap_or_else(|| out.with_extension("quantizer.json"));
    ensure_parent(&artifact)?;
    save_quantizer(&outcome.artifact, &artifact)?;
    log.write(&serde_json::json!({
        "event": "model_written",
        "path": out,
        "quantizer": artifact,
        "method": "soft",
        "bits": args.bits,
        "degenerate": outcome.degenerate,
    }))?;
    log.flush()?;
    Ok(())
}

fn bench_ops(cli: &Cli, args: &BenchOpsArgs) -> CliResult {
    let detector: CostedDetector = args.detector.parse()?;
    if args.nt == 0 {
        return Err("--nt must be positive".into());
    }
    let (mults, divs) = if args.measured {
        measure_ops(detector, args.nt, args.iters, cli.seed)?
    } else {
        let c = count_ops(detector, args.nt, args.iters);
        (c.real_mults, c.real_divs)
    };
    let mut w = table_sink(cli.out.as_deref())?;
    writeln!(w, "{mults},{divs}")?;
    w.flush()?;
    Ok(())
}

/// Runs one detection on `Counted` scalars; setup of `A` and `b` is excluded.
fn measure_ops(detector: CostedDetector, nt: usize, iters: usize, seed: u64) -> CliResult<(u64, u64)> {
    let gen = TrialGenerator::<f64>::new(nt, 2 * nt, Modulation::Qpsk, ChannelModel::Rayleigh)?;
    let (sample, _) = gen.draw(10.0, seed);
    let sys = build_system(&sample.h_r, &sample.y_r, sample.noise_variance())?;
    let sys = LinearSystem {
        a: sys.a.map(Counted),
        b: sys.b.iter().map(|&x| Counted(x)).collect(),
        sigma2: Counted(sys.sigma2),
    };
    match detector {
        CostedDetector::Cg => {
            let (out, tally) = OpTally::measure(|| cg_detect(&sys, iters, 0.0));
            out?;
            Ok((tally.accounted_muls(), tally.divs))
        }
        CostedDetector::LcgNet => {
            let params = NetworkParams::<Counted>::zeros(StepMode::Vector, nt, 2 * nt, iters);
            let (out, tally) = OpTally::measure(|| forward(&params, &sys));
            out?;
            Ok((tally.accounted_muls(), tally.divs))
        }
        CostedDetector::Lmmse => Err("instrumented count is available for cg and lcgnet only".into()),
    }
}

fn hardening(cli: &Cli, args: &HardeningArgs) -> CliResult {
    let mut rows = Vec::new();
    for &nr in &args.nr.0 {
        let sampler = ChannelSampler::<f64>::new(args.nt, nr, args.channel)?;
        let mut sum = 0.0;
        for d in 0..args.draws {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cli.seed, d as u64));
            sum += hardening_ratio(&sampler.sample(&mut rng));
        }
        let mean = sum / args.draws.max(1) as f64;
        rows.push(vec![
            args.nt.to_string(),
            nr.to_string(),
            args.channel.to_string(),
            args.draws.to_string(),
            format!("{mean:.6}"),
        ]);
    }
    write_csv(
        cli.out.as_deref(),
        &["nt", "nr", "channel", "draws", "mean_ratio"],
        rows,
    )
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::EvalBer(a) => eval_ber(cli, a),
        Command::EvalNmse(a) => eval_nmse(cli, a),
        Command::Quantize(a) => quantize(cli, a),
        Command::BenchOps(a) => bench_ops(cli, a),
        Command::Hardening(a) => hardening(cli, a),
    }
}

fn main() -> ExitCode {
    let mut argv: Vec<String> = std::env::args().collect();
    if let Some(path) = config_path(&argv) {
        match read_config(&path) {
            Ok(pairs) => argv = merge_config(argv, pairs),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
