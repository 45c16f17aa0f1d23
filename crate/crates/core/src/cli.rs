//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{preset, preset_names, AblationMode, TrainConfig};
use crate::dataio::{load_csv, two_sinusoids, write_csv, MultivariateSeries, SplitKind};
use crate::error::{Error, Result};
use crate::gradcheck::gradient_check;
use crate::metrics::QUANTILE_LEVELS;
use crate::probhead::{build_interleaved_set, AppendedBoundary, SupportFlavor, SupportSet};
use crate::training::{evaluate, forecast, loss_curve_csv, prepare_data, train_with, TrainOutcome};

#[derive(Debug, Parser)]
#[command(name = "interpdn", version, about = "Probabilistic long-horizon forecaster with interleaved dual branches")]
pub struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint, loss curve and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and test one ablation variant.
    Ablate(AblateArgs),
    /// Print or write a support set.
    SupportSet(SupportArgs),
    /// Split and standardize a dataset and write the segments.
    Prepare(PrepareArgs),
    /// Forecast the horizon after the last lookback window of a file.
    Forecast(ForecastArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// List the built-in presets.
    Presets,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run config; keys override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset such as `etth1_96` or `tiny`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides `training.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `training.max_epochs`.
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset CSV. Optional for the `synthetic` dataset, which is generated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `test`, `val` or `train`.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory for metrics.json, metrics.csv and predictions.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// When given, the checkpoint must have been trained with this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// full, sbsp, sbpdp, ibbpdp, bspdp or fourbsp.
    #[arg(long)]
    pub mode: String,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct SupportArgs {
    /// Number of points.
    #[arg(long = "s", default_value_t = 25)]
    pub count: usize,
    /// Truncation boundary.
    #[arg(long = "b", default_value_t = 4.0)]
    pub boundary: f64,
    /// equal_probability, uniform or interleaved.
    #[arg(long, default_value = "equal_probability")]
    pub flavor: String,
    /// Side of the extra interleaved point: upper or lower.
    #[arg(long, default_value = "upper")]
    pub side: String,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Forecast after this many rows instead of after the whole file.
    #[arg(long)]
    pub end: Option<usize>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 2)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub windows: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => {
            let cfg = resolve_config(&a.cfg)?;
            train_command(cfg, a.data.as_deref(), &a.out).map(|_| ())
        }
        Command::Eval(a) => eval_command(a),
        Command::Ablate(a) => {
            let mode: AblationMode = a.mode.parse()?;
            let mut cfg = resolve_config(&a.train.cfg)?;
            cfg.model.mode = mode;
            cfg.validate()?;
            let (ck, series) = train_command(cfg, a.train.data.as_deref(), &a.train.out)?;
            let data = prepare_data(&series, ck.config())?;
            let spec = ck.spec()?;
            let ev = evaluate(&ck.params, &spec, ck.config(), &data, SplitKind::Test)?;
            write_text(&a.train.out.join("metrics.json"), &ev.report.to_json()?)?;
            write_text(&a.train.out.join("metrics.csv"), &ev.report.to_csv())?;
            println!("{}", ev.report.to_json()?);
            Ok(())
        }
        Command::SupportSet(a) => support_command(a),
        Command::Prepare(a) => prepare_command(a),
        Command::Forecast(a) => forecast_command(a),
        Command::Gradcheck(a) => {
            let mut cfg = match (&a.cfg.config, &a.cfg.preset) {
                (None, None) => crate::config::tiny(),
                _ => resolve_config(&a.cfg)?,
            };
            if let Some(s) = a.cfg.seed {
                cfg.training.seed = s;
            }
            let report = gradient_check(&cfg, a.channels, a.windows, cfg.training.seed, a.step)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?);
            if report.passes(a.tolerance) {
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "max relative error {:.3e} at {} exceeds {:.1e}",
                    report.max_rel_error, report.worst, a.tolerance
                )))
            }
        }
        Command::Presets => {
            for n in preset_names() {
                println!("{n}");
            }
            Ok(())
        }
    }
}

/// Preset first, then the config file on top, then command-line overrides.
pub fn resolve_config(a: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut doc: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
            if let Some(p) = &a.preset {
                doc.entry("preset").or_insert_with(|| toml::Value::String(p.clone()));
            }
            let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
            TrainConfig::from_toml_str(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })?
        }
        None => preset(a.preset.as_deref().unwrap_or("tiny"))?,
    };
    if let Some(s) = a.seed {
        cfg.training.seed = s;
    }
    if let Some(e) = a.max_epochs {
        cfg.training.max_epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The CSV at `path`, or the generated series when the dataset is `synthetic`.
pub fn load_series(cfg: &TrainConfig, path: Option<&Path>) -> Result<MultivariateSeries> {
    match path {
        Some(p) => load_csv(p),
        None if cfg.dataset.id == "synthetic" => Ok(two_sinusoids(cfg.dataset.split_spec().total())),
        None => Err(Error::Data(format!("--data is required for dataset {}", cfg.dataset.id))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Train and write `checkpoint.ipdn`, `loss_curve.csv`, `config.toml` and `summary.json` into `out`.
pub fn train_command(cfg: TrainConfig, data: Option<&Path>, out: &Path) -> Result<(Checkpoint, MultivariateSeries)> {
    let series = load_series(&cfg, data)?;
    let prepared = prepare_data(&series, &cfg)?;
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    log::info!(
        "{} windows: train {}, val {}, test {}",
        cfg.dataset.id,
        prepared.train.windows(),
        prepared.val.windows(),
        prepared.test.windows()
    );
    let curve_path = out.join("loss_curve.csv");
    let mut history = Vec::new();
    let outcome: TrainOutcome = train_with(&cfg, &prepared, &mut |r| {
        history.push(r.clone());
        let _ = fs::write(&curve_path, loss_curve_csv(&history));
    })?;
    write_text(&curve_path, &loss_curve_csv(&outcome.history))?;
    let ck = Checkpoint::new(
        cfg,
        prepared.channel_names.clone(),
        prepared.scaler.clone(),
        outcome.params,
        outcome.best_epoch,
        outcome.best_val_loss,
        outcome.history.len(),
    );
    ck.save(out.join("checkpoint.ipdn"))?;
    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "epochs_run": outcome.history.len(),
        "stopped_early": outcome.stopped_early,
        "mode": ck.config().model.mode.name(),
    });
    write_text(&out.join("summary.json"), &format!("{summary:#}\n"))?;
    log::info!("best epoch {} with validation loss {:.6}", outcome.best_epoch, outcome.best_val_loss);
    Ok((ck, series))
}

fn eval_command(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if a.config.is_some() || a.preset.is_some() {
        let want = resolve_config(&ConfigArgs {
            config: a.config.clone(),
            preset: a.preset.clone(),
            seed: None,
            max_epochs: None,
        })?;
        ck.ensure_config(&want)?;
    }
    let kind: SplitKind = a.split.parse()?;
    let series = load_series(ck.config(), a.data.as_deref())?;
    if series.channels() != ck.manifest.channels {
        return Err(Error::Config(format!(
            "checkpoint has {} channels, data has {}",
            ck.manifest.channels,
            series.channels()
        )));
    }
    let data = prepare_data(&series, ck.config())?;
    if data.scaler != ck.manifest.scaler {
        log::warn!("training-split statistics differ from the checkpoint; is this the training data file?");
    }
    let spec = ck.spec()?;
    let ev = evaluate(&ck.params, &spec, ck.config(), &data, kind)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("metrics.json"), &ev.report.to_json()?)?;
        write_text(&out.join("metrics.csv"), &ev.report.to_csv())?;
        let path = out.join("predictions.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        ev.predictions
            .write_csv(std::io::BufWriter::new(file), &data.channel_names)?;
    }
    let summary = json!({
        "split": a.split,
        "windows": ev.report.windows,
        "loss": ev.loss,
        "total": ev.total,
        "mse": ev.report.mse,
        "mae": ev.report.mae,
        "crps": ev.report.crps,
        "mase": ev.report.mase,
    });
    println!("{summary:#}");
    Ok(())
}

fn support_command(a: SupportArgs) -> Result<()> {
    let set = if a.flavor == "interleaved" {
        let side = match a.side.as_str() {
            "upper" => AppendedBoundary::Upper,
            "lower" => AppendedBoundary::Lower,
            other => return Err(Error::InvalidArgument(format!("--side {other}: expected upper or lower"))),
        };
        build_interleaved_set(&SupportSet::build(SupportFlavor::EqualProbability, a.count, a.boundary)?, side)?
    } else {
        let flavor: SupportFlavor = a.flavor.parse()?;
        SupportSet::build(flavor, a.count, a.boundary)?
    };
    let mut text = String::from("index,point,cell_mass\n");
    for (i, (p, m)) in set.points().iter().zip(set.cell_masses()).enumerate() {
        text += &format!("{i},{p},{m}\n");
    }
    match a.out {
        Some(path) => write_text(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn prepare_command(a: PrepareArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let series = load_series(&cfg, a.data.as_deref())?;
    let data = prepare_data(&series, &cfg)?;
    create_dir(&a.out)?;
    let mut splits = serde_json::Map::new();
    for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
        let split = data.split(kind);
        let rows = split.values.nrows();
        let seg = MultivariateSeries {
            timestamps: if series.timestamps.is_empty() {
                Vec::new()
            } else {
                series.timestamps[split.first_row..split.first_row + rows].to_vec()
            },
            values: split.values.clone(),
            channel_names: data.channel_names.clone(),
        };
        let name = format!("{}.csv", kind_name(kind));
        let path = a.out.join(&name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_csv(&seg, std::io::BufWriter::new(file))?;
        splits.insert(
            kind_name(kind).into(),
            json!({ "first_row": split.first_row, "rows": rows, "windows": split.windows() }),
        );
    }
    let scaler = serde_json::to_string_pretty(&data.scaler).map_err(|e| Error::Data(e.to_string()))?;
    write_text(&a.out.join("scaler.json"), &scaler)?;
    if a.data.is_none() {
        let path = a.out.join("series.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_csv(&series, std::io::BufWriter::new(file))?;
    }
    let summary = json!({
        "dataset": cfg.dataset.id,
        "rows": series.len(),
        "channels": series.channels(),
        "splits": splits,
    });
    println!("{summary:#}");
    Ok(())
}

fn kind_name(kind: SplitKind) -> &'static str {
    match kind {
        SplitKind::Train => "train",
        SplitKind::Val => "val",
        SplitKind::Test => "test",
    }
}

fn forecast_command(a: ForecastArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let spec = ck.spec()?;
    let series = load_csv(&a.data)?;
    if series.channels() != spec.channels {
        return Err(Error::Config(format!(
            "checkpoint has {} channels, data has {}",
            spec.channels,
            series.channels()
        )));
    }
    let end = a.end.unwrap_or(series.len());
    let l = spec.lookback();
    if end > series.len() || end < l {
        return Err(Error::Data(format!(
            "need {l} rows before --end {end}, file has {}",
            series.len()
        )));
    }
    let window = series.slice_rows(end - l, end).values;
    let f = forecast(&ck.params, &spec, &ck.manifest.scaler, &window)?;
    let mut header = vec!["step".to_string(), "channel".into(), "prediction".into()];
    if f.quantiles.is_some() {
        header.extend(QUANTILE_LEVELS.iter().map(|q| format!("q{q}")));
    }
    let mut text = header.join(",") + "\n";
    for j in 0..spec.horizon() {
        for ch in 0..spec.channels {
            let mut line = format!("{},{},{}", j + 1, series.channel_names[ch], f.prediction[[j, ch]]);
            for q in f.quantiles.iter().flatten() {
                line += &format!(",{}", q[[j, ch]]);
            }
            text += &line;
            text.push('\n');
        }
    }
    match a.out {
        Some(path) => write_text(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
