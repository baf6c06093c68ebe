use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::s;
use serde_json::json;

use sthyper::checkpoint::Checkpoint;
use sthyper::dataset::{generate_synthetic, load_dataset, write_binary, write_csv, CsvSchema, SyntheticSpec, TimeSeriesDataset};
use sthyper::export::export_structures;
use sthyper::graph::Tape;
use sthyper::metrics::mean_std;
use sthyper::train::{evaluate, predict, prepare, train_model};
use sthyper::{Error, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "sthyper", version, about = "Multi-scale hypergraph forecasting for multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the DTW affinity cache and the split ranges.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed; single-seed runs write `<out>/best`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; overrides the config seed.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
    },
    /// Print metrics of a checkpoint on one split as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Forecast from the window ending at `--end` (default: the end of the data).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        end: Option<usize>,
        /// CSV output; JSON on stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the hypergraph node features of the window to this CSV.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Write learned graphs, assignments, incidence and fusion weights.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with planted variable groups.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        groups: usize,
        #[arg(long, default_value_t = 4)]
        vars_per_group: usize,
        #[arg(long, default_value_t = 512)]
        length: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

fn load(path: &Path) -> Result<TimeSeriesDataset> {
    load_dataset(path, &CsvSchema::default())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn matrix_csv(m: &ndarray::Array2<f64>) -> String {
    m.rows().into_iter().map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n").collect()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare { config, data, out } => {
            let cfg = ModelConfig::load(&config)?;
            let ds = load(&data)?;
            create_dir(&out)?;
            let prepared = prepare(&ds, &cfg, Some(&out))?;
            write_json(&out.join("splits.json"), &serde_json::to_value(&prepared.splits)?)?;
            write_json(&out.join("norm_stats.json"), &serde_json::to_value(&prepared.norm)?)?;
            let summary = json!({
                "train_windows": prepared.train.len(),
                "val_windows": prepared.val.len(),
                "test_windows": prepared.test.len(),
                "dtw_sigma": prepared.dtw.sigma,
            });
            println!("{summary}");
        }
        Command::Train { config, data, out, seed } => {
            let base = ModelConfig::load(&config)?;
            let ds = load(&data)?;
            let seeds = if seed.is_empty() { vec![base.seed] } else { seed };
            let mut runs = Vec::new();
            for &s in &seeds {
                let cfg = ModelConfig { seed: s, ..base.clone() };
                let cache = out.join("cache");
                let outcome = train_model(&cfg, &ds, Some(&cache))?;
                let dir = if seeds.len() == 1 { out.join("best") } else { out.join(format!("seed-{s}")).join("best") };
                let ck = Checkpoint::new(
                    &outcome.model,
                    outcome.store.clone(),
                    outcome.adam.clone(),
                    outcome.data.norm.clone(),
                    ds.variable_names.clone(),
                    outcome.report.best_epoch,
                    outcome.report.best_val_loss,
                );
                ck.save(&dir)?;
                write_json(&dir.join("train_report.json"), &serde_json::to_value(&outcome.report)?)?;
                let metrics = evaluate(&outcome.model, &outcome.store, &outcome.data.test, &outcome.data.norm)?;
                runs.push(json!({
                    "seed": s,
                    "checkpoint": dir,
                    "best_epoch": outcome.report.best_epoch,
                    "best_val_loss": outcome.report.best_val_loss,
                    "test": metrics,
                }));
            }
            let pick = |key: &str| -> Vec<f64> { runs.iter().map(|r| r["test"]["overall"][key].as_f64().unwrap_or(f64::NAN)).collect() };
            let mut summary = serde_json::Map::new();
            for key in ["mae", "mse", "rmse", "mape"] {
                let (mean, std) = mean_std(&pick(key));
                summary.insert(key.into(), json!({ "mean": mean, "std": std }));
            }
            println!("{}", json!({ "runs": runs, "summary": summary }));
        }
        Command::Evaluate { checkpoint, data, split } => {
            let (model, ck) = Checkpoint::load(&checkpoint)?;
            let ds = load(&data)?;
            let prepared = prepare(&ds, &ck.meta.config, None)?;
            let windows = match split {
                Split::Train => &prepared.train,
                Split::Val => &prepared.val,
                Split::Test => &prepared.test,
            };
            let report = evaluate(&model, &ck.params, windows, &ck.meta.norm_stats)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Predict { checkpoint, data, end, out, dump_features } => {
            let (model, ck) = Checkpoint::load(&checkpoint)?;
            let ds = load(&data)?;
            let t = ck.meta.config.input_len;
            let end = end.unwrap_or(ds.len());
            if end < t || end > ds.len() {
                return Err(Error::Config(format!("window end {end} must lie in [{t}, {}]", ds.len())));
            }
            let raw = ds.values.slice(s![.., end - t..end]).to_owned();
            let forecast = predict(&model, &ck.params, &ck.meta.norm_stats, &raw)?;
            if let Some(path) = dump_features {
                let mut tape = Tape::new();
                let bound = ck.params.bind_frozen(&mut tape);
                let fwd = model.forward(&mut tape, &bound, &ck.meta.norm_stats.normalize(&raw), None)?;
                fs::write(&path, matrix_csv(tape.value(fwd.x_hyper))).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            }
            match out {
                Some(path) => {
                    let mut text = String::from("variable");
                    for h in 1..=forecast.ncols() {
                        text.push_str(&format!(",t+{h}"));
                    }
                    text.push('\n');
                    for (name, row) in ck.meta.variable_names.iter().zip(forecast.rows()) {
                        text.push_str(name);
                        for v in row {
                            text.push_str(&format!(",{v}"));
                        }
                        text.push('\n');
                    }
                    fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                }
                None => {
                    let rows: Vec<Vec<f64>> = forecast.rows().into_iter().map(|r| r.to_vec()).collect();
                    println!("{}", json!({ "variables": ck.meta.variable_names, "forecast": rows }));
                }
            }
        }
        Command::Export { checkpoint, out } => {
            let (model, ck) = Checkpoint::load(&checkpoint)?;
            let files = export_structures(&model, &ck.params, &out)?;
            println!("{}", json!({ "files": files }));
        }
        Command::Synth { out, seed, groups, vars_per_group, length, noise } => {
            let spec = SyntheticSpec { n_groups: groups, vars_per_group, length, seed, noise };
            let ds = generate_synthetic(&spec)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            match out.extension().and_then(|e| e.to_str()) {
                Some("bin") => write_binary(&ds, &out)?,
                _ => write_csv(&ds, &out)?,
            }
            let labels_path = out.with_extension("labels.json");
            write_json(&labels_path, &json!({ "spec": spec, "group_labels": ds.group_labels }))?;
            println!("{}", json!({ "data": out, "labels": labels_path, "n_vars": ds.n_vars(), "length": ds.len() }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            eprintln!("{}", json!({ "error": kind, "message": e.to_string() }));
            if kind == "config" {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
