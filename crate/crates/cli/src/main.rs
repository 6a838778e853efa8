use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use qssm::harness::{
    ablation_points, analyze_distributions, estimate_efficiency, prepare, run_ptq_pipeline, sweep, vim_b_like,
    write_distribution_report, ExperimentConfig, Prepared, SweepPoint, SweepRow, TrainReport,
};
use qssm::ptq::calibrate_model;
use qssm::rng::derive_seed;
use qssm::ssm::{ModelQuant, SsmClassifier};
use qssm::{Error, Result};

#[derive(Parser)]
#[command(name = "qssm", version, about = "Post-training quantization of selective state space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config, TOML or JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArg {
    /// Directory written by `train-toy`; the toy model is trained when absent.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the floating-point toy classifier and save it.
    TrainToy {
        #[command(flatten)]
        common: Common,
    },
    /// Collect activation statistics on the calibration set.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Route and initialize every quantizer, without reconstruction.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// The full pipeline: calibrate, route, init, reconstruct, eval.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Validation accuracy in floating point or under a saved quantizer set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        /// `quant.json` written by `quantize` or `reconstruct`.
        #[arg(long)]
        quant: Option<PathBuf>,
    },
    /// Export decay and hidden-state distributions.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Run several pipeline variants against one trained model.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        /// JSON or TOML list of sweep points; the component ablation by default.
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Storage and bit-operation counts under the configured bit policy.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Count a Vim-B-sized network instead of the configured model.
        #[arg(long)]
        vim_b: bool,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?).map_err(io_err(&path))?;
    Ok(path)
}

fn model_or_train(cfg: &ExperimentConfig, model: &ModelArg) -> Result<Prepared> {
    let Some(dir) = &model.model else {
        return prepare(cfg);
    };
    let model = SsmClassifier::load(dir)?;
    if model.spec != cfg.model {
        return Err(Error::Config(format!("saved model spec {:?} differs from config {:?}", model.spec, cfg.model)));
    }
    let (train, val) = cfg.dataset.task.splits(&model.spec, cfg.seed)?;
    let val_accuracy = model.accuracy(&val.x, &val.labels, None)?;
    Ok(Prepared {
        model,
        train,
        val,
        report: TrainReport {
            epochs: 0,
            val_accuracy,
            train_loss: Vec::new(),
        },
    })
}

fn read_points(path: &Path) -> Result<Vec<SweepPoint>> {
    #[derive(serde::Deserialize)]
    struct Points {
        points: Vec<SweepPoint>,
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Ok(serde_json::from_str(&text)?),
        _ => Ok(toml::from_str::<Points>(&text)?.points),
    }
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut text = String::from("label,seed,fp_accuracy,init_accuracy,accuracy,ltsq_blocks\n");
    for r in rows {
        let p = &r.report;
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.point.label,
            p.seed,
            p.fp_accuracy,
            p.init_accuracy,
            p.accuracy,
            p.ltsq_blocks()
        ));
    }
    text
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::TrainToy { common } => {
            let cfg = load_config(&common)?;
            let p = prepare(&cfg)?;
            let dir = common.out.join("model");
            p.model.save(&dir)?;
            let report = write_json(&common.out, "train.json", &p.report)?;
            Ok(json!({ "model": dir, "report": report, "val_accuracy": p.report.val_accuracy }))
        }
        Command::Calibrate { common, model } => {
            let cfg = load_config(&common)?;
            let p = model_or_train(&cfg, &model)?;
            let set = p.train.head(cfg.dataset.calib_samples)?;
            let calib = calibrate_model(&p.model, &set.x, derive_seed(cfg.seed, 10))?;
            let blocks = calib
                .blocks
                .iter()
                .map(|b| {
                    b.slots
                        .iter()
                        .map(|(slot, s)| Ok((slot.name().to_string(), serde_json::to_value(s.summary()?)?)))
                        .collect::<Result<serde_json::Map<_, _>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let summary = json!({
                "samples": calib.samples,
                "seq_len": calib.seq_len,
                "embed_act": calib.embed_act.summary()?,
                "head_act": calib.head_act.summary()?,
                "blocks": blocks,
            });
            let path = write_json(&common.out, "calibration.json", &summary)?;
            Ok(json!({ "calibration": path, "samples": calib.samples }))
        }
        Command::Quantize { common, model } => pipeline(&common, &model, false),
        Command::Reconstruct { common, model } => pipeline(&common, &model, true),
        Command::Eval { common, model, quant } => {
            let cfg = load_config(&common)?;
            let p = model_or_train(&cfg, &model)?;
            let q: Option<ModelQuant> = match &quant {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(io_err(path))?;
                    Some(serde_json::from_str(&text)?)
                }
                None => None,
            };
            let fp_accuracy = p.model.accuracy(&p.val.x, &p.val.labels, None)?;
            let accuracy = p.model.accuracy(&p.val.x, &p.val.labels, q.as_ref())?;
            let result = json!({ "fp_accuracy": fp_accuracy, "accuracy": accuracy, "quantized": q.is_some() });
            write_json(&common.out, "eval.json", &result)?;
            Ok(result)
        }
        Command::Analyze { common, model } => {
            let cfg = load_config(&common)?;
            let p = model_or_train(&cfg, &model)?;
            let batch = p.val.head(cfg.dataset.analyze_batch.min(p.val.len()))?;
            let report = analyze_distributions(&p.model, &batch.x, cfg.alpha, derive_seed(cfg.seed, 12))?;
            let files = write_distribution_report(&report, &common.out)?;
            let routes: Vec<Value> = report
                .blocks
                .iter()
                .map(|b| json!({ "block": b.block, "abar_median": b.abar.median, "route": b.abar.route }))
                .collect();
            Ok(json!({ "files": files, "routes": routes }))
        }
        Command::Sweep { common, model, points } => {
            let cfg = load_config(&common)?;
            let p = model_or_train(&cfg, &model)?;
            let points = match &points {
                Some(path) => read_points(path)?,
                None => ablation_points(),
            };
            let rows = sweep(&cfg, &p, &points)?;
            let json_path = write_json(&common.out, "sweep.json", &rows)?;
            let csv_path = common.out.join("sweep.csv");
            fs::write(&csv_path, sweep_csv(&rows)).map_err(io_err(&csv_path))?;
            let summary: Vec<Value> =
                rows.iter().map(|r| json!({ "label": r.point.label, "accuracy": r.report.accuracy })).collect();
            Ok(json!({ "report": json_path, "csv": csv_path, "points": summary }))
        }
        Command::Estimate { common, vim_b } => {
            let cfg = load_config(&common)?;
            let spec = if vim_b { vim_b_like() } else { cfg.model };
            let report = estimate_efficiency(&spec, &cfg.policy())?;
            write_json(&common.out, "estimate.json", &report)?;
            Ok(json!({
                "params": report.params,
                "storage_reduction": report.storage_reduction,
                "bops_reduction": report.bops_reduction,
                "flops_reduction": report.flops_reduction,
            }))
        }
    }
}

fn pipeline(common: &Common, model: &ModelArg, reconstruct: bool) -> Result<Value> {
    let mut cfg = load_config(common)?;
    cfg.reconstruct = reconstruct && cfg.reconstruct;
    let p = model_or_train(&cfg, model)?;
    let report = run_ptq_pipeline(&cfg, &p)?;
    let quant = write_json(&common.out, "quant.json", &report.quant)?;
    let path = write_json(&common.out, "report.json", &report)?;
    Ok(json!({
        "report": path,
        "quant": quant,
        "fp_accuracy": report.fp_accuracy,
        "init_accuracy": report.init_accuracy,
        "accuracy": report.accuracy,
        "stages": report.stages.iter().map(|s| json!({ "stage": s.stage, "hash": s.hash })).collect::<Vec<_>>(),
    }))
}

fn fail(code: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "code": code, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim()),
    };
    match run(cli) {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.code(), &e.to_string()),
    }
}
