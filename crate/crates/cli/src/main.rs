use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use intquant::calibrate::{calibrate_network, select_calibration_indices, PolicyKind, StepPolicy};
use intquant::error::{Error, ErrorClass, Result};
use intquant::eval::{count_correct, float_predictions, quantized_predictions};
use intquant::modelio::{self, load_mnist_dir, ModelMeta, QuantMeta, Split};
use intquant::presets::Preset;
use intquant::report::{accuracy_tables, append_result, read_results, write_histograms, ResultRow};
use intquant::trainer::{self, Mlp, TrainConfig};
use intquant::{ExecMode, Network};

#[derive(Parser)]
#[command(name = "intquant", version, about = "Train, quantize and evaluate small networks with integer arithmetic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense preset on MNIST and write a model file.
    Train(TrainArgs),
    /// Calibrate step sizes and write a quantized model.
    Quantize(QuantizeArgs),
    /// Measure accuracy and cost, and record a results row.
    Eval(EvalArgs),
    /// Print accuracy-vs-K tables and write weight histograms.
    Report(ReportArgs),
}

#[derive(Parser)]
struct TrainArgs {
    #[arg(long, default_value = "mnistnet1")]
    preset: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 1)]
    reg_p: u32,
    #[arg(long, default_value_t = 0.0)]
    reg_lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Use only the first N training images.
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics as JSON lines (default: <out>.metrics.jsonl).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Maxabs,
    Minmse1,
    Minmse2,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Maxabs => PolicyKind::MaxAbs,
            PolicyArg::Minmse1 => PolicyKind::MinMse1,
            PolicyArg::Minmse2 => PolicyKind::MinMse2,
        }
    }
}

#[derive(Parser)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 8)]
    word_length: u32,
    #[arg(long, value_enum, default_value = "minmse1")]
    policy: PolicyArg,
    #[arg(long, default_value_t = intquant::calibrate::DEFAULT_CALIBRATION_SAMPLES)]
    calib_samples: usize,
    /// Seed for choosing calibration images.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Calibration report (default: <out>.calib.toml).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mixed,
    Integer,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Parser)]
struct EvalArgs {
    /// Float model file or quantized model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Execution mode for quantized models.
    #[arg(long, value_enum, default_value = "mixed")]
    mode: ModeArg,
    #[arg(long, default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Evaluate only the first N images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "runs/results.tsv")]
    results: PathBuf,
    /// Override the network name recorded in the results table.
    #[arg(long)]
    net: Option<String>,
}

#[derive(Parser)]
struct ReportArgs {
    #[arg(long, default_value = "runs/results.tsv")]
    results: PathBuf,
    #[arg(long, default_value = "runs/report")]
    out_dir: PathBuf,
    /// Float model files whose weight histograms to write.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = 101)]
    bins: usize,
}

fn default_sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

fn model_name(meta: &ModelMeta, path: &Path) -> String {
    meta.preset.clone().unwrap_or_else(|| path.file_stem().unwrap_or_default().to_string_lossy().into_owned())
}

fn train(args: TrainArgs) -> Result<()> {
    let preset: Preset = args.preset.parse()?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        dropout: args.dropout,
        reg_lambda: args.reg_lambda,
        reg_p: args.reg_p,
        seed: args.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let net = preset.build(args.seed);
    Mlp::<f32>::from_network(&net)?;

    let mut train_set = load_mnist_dir(&args.data_dir, Split::Train)?;
    let test_set = load_mnist_dir(&args.data_dir, Split::Test)?;
    if let Some(n) = args.train_limit {
        train_set = train_set.take(n);
    }
    let start = Instant::now();
    let mut lines = String::new();
    let outcome = trainer::train_dense_with(&net, train_set.samples(), Some(test_set.samples()), &cfg, |m| {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.2}%  test {:.2}%",
            m.epoch,
            m.loss,
            100.0 * m.train_accuracy,
            100.0 * m.test_accuracy.unwrap_or(0.0)
        );
        lines.push_str(&serde_json::to_string(m).expect("plain data"));
        lines.push('\n');
    })?;
    let elapsed = start.elapsed().as_secs_f64();

    let meta = ModelMeta {
        reg_lambda: cfg.reg_lambda,
        reg_p: cfg.reg_p,
        epochs: cfg.epochs,
        seed: cfg.seed,
        preset: Some(preset.name().to_string()),
        producer: Some(format!("intquant {}", env!("CARGO_PKG_VERSION"))),
        notes: None,
    };
    modelio::save_model(&outcome.network, &meta, &args.out)?;
    fs::write(args.metrics.unwrap_or_else(|| default_sidecar(&args.out, ".metrics.jsonl")), lines)?;
    let correct = count_correct(&float_predictions(&outcome.network, &test_set)?, &test_set.labels);
    println!("test accuracy: {:.2}%", 100.0 * correct as f64 / test_set.len() as f64);
    println!("wall time: {elapsed:.1} s");
    println!("model written to {}", args.out.display());
    Ok(())
}

fn quantize(args: QuantizeArgs) -> Result<()> {
    let model = modelio::load_model(&args.model)?;
    let policy = StepPolicy::from_kind(args.policy.into());
    let train_set = load_mnist_dir(&args.data_dir, Split::Train)?;
    let samples: Vec<_> = select_calibration_indices(train_set.len(), args.calib_samples, args.seed)
        .into_iter()
        .map(|i| train_set.image(i).reshape(model.network.input_shape().to_vec()))
        .collect::<Result<_>>()?;
    let (qnet, report) = calibrate_network(&model.network, &samples, args.word_length, &policy)?;
    let meta = QuantMeta {
        net: model_name(&model.meta, &args.model),
        policy: policy.kind.to_string(),
        word_length: args.word_length,
        reg_lambda: model.meta.reg_lambda,
        reg_p: model.meta.reg_p,
        calib_samples: samples.len(),
        seed: args.seed,
    };
    modelio::save_quantized(&qnet, &meta, &args.out)?;
    let report_path = args.report.unwrap_or_else(|| default_sidecar(&args.out, ".calib.toml"));
    fs::write(&report_path, report.to_toml())?;
    for l in &report.layers {
        println!(
            "layer {:>2} {:<6}  dx {:.6e}  dw {:.6e}  db {:.6e}  mse {:.6e}",
            l.layer, l.kind, l.input_step, l.weight_step, l.bias_step, l.mse
        );
        for w in &l.warnings {
            eprintln!("warning: layer {}: {w}", l.layer);
        }
    }
    println!("execution mode: {}", qnet.mode());
    println!("quantized model written to {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let mode = match args.mode {
        ModeArg::Mixed => ExecMode::Mixed,
        ModeArg::Integer => ExecMode::IntegerOnly,
    };
    let bytes = fs::read(&args.model)?;
    enum Loaded {
        Float(Network, ModelMeta),
        Quant(modelio::QuantizedModelFile),
    }
    let loaded = if bytes.starts_with(modelio::MODEL_MAGIC) {
        if matches!(args.mode, ModeArg::Integer) {
            return Err(Error::Config("integer mode needs a quantized model".into()));
        }
        let m = modelio::decode_model(&bytes)?;
        Loaded::Float(m.network, m.meta)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Malformed("model is neither a model file nor JSON".into()))?;
        let q = modelio::decode_quantized(&text)?;
        if mode == ExecMode::IntegerOnly && q.network.mode() != ExecMode::IntegerOnly {
            return Err(Error::Config("integer mode requested for a model calibrated for mixed mode".into()));
        }
        Loaded::Quant(q)
    };
    let mut set = load_mnist_dir(&args.data_dir, split)?;
    if let Some(n) = args.limit {
        set = set.take(n);
    }
    let start = Instant::now();
    let (row, predictions) = match &loaded {
        Loaded::Float(net, meta) => {
            let c = net.complexity(32)?;
            let p = float_predictions(net, &set)?;
            let row = ResultRow {
                net: args.net.clone().unwrap_or_else(|| model_name(meta, &args.model)),
                word_length: None,
                policy: "float".into(),
                reg_p: meta.reg_p,
                reg_lambda: meta.reg_lambda,
                mode: "float".into(),
                correct: 0,
                total: 0,
                mem_bits: c.mem_bits,
                macs: c.macs,
            };
            (row, p)
        }
        Loaded::Quant(q) => {
            let c = q.network.complexity();
            let p = quantized_predictions(&q.network, &set, mode)?;
            let row = ResultRow {
                net: args.net.clone().unwrap_or_else(|| q.meta.net.clone()),
                word_length: Some(q.meta.word_length),
                policy: q.meta.policy.clone(),
                reg_p: q.meta.reg_p,
                reg_lambda: q.meta.reg_lambda,
                mode: mode.to_string(),
                correct: 0,
                total: 0,
                mem_bits: c.mem_bits,
                macs: c.macs,
            };
            (row, p)
        }
    };
    let elapsed = start.elapsed().as_secs_f64();
    let row = ResultRow { correct: count_correct(&predictions, &set.labels), total: set.len(), ..row };
    println!("accuracy: {:.2}% ({}/{})", row.accuracy(), row.correct, row.total);
    println!("C_mem: {} bits  C_mac: {}", row.mem_bits, row.macs);
    println!("wall time ({}): {elapsed:.2} s", row.mode);
    if append_result(&args.results, &row)? {
        println!("recorded in {}", args.results.display());
    } else {
        println!("identical row already in {}", args.results.display());
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let rows = read_results(&args.results)?;
    let tables = accuracy_tables(&rows);
    print!("{tables}");
    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("accuracy.txt"), &tables)?;
    for path in &args.models {
        let model = modelio::load_model(path)?;
        let hist = trainer::weight_histogram(&model.network, args.bins)?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        for f in write_histograms(&args.out_dir, &stem, &hist)? {
            println!("wrote {}", f.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
