//! The `ndmag` command line: dataset synthesis, training, prediction,
//! model fitting, field imaging, and the downstream analyses.
//!
//! Every command takes `--seed`, `--config`, `--out-dir`, and `--threads`;
//! flags override values from the optional TOML config file (one section per
//! command, keys named like the long flags with underscores). Each run
//! writes its fully resolved configuration to `config_echo.txt` next to its
//! outputs, and all outputs are written atomically, so a command exits with
//! status 0 exactly when every requested file is in place.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{self, DatasetError};
use crate::gpr::{self, GprError, KernelHyperparams};
use crate::modelfit::{self, FitError, FreeParams};
use crate::physics::{self, FieldVector, NdeModelParams, OdmrSpectrum, PhysicsError};
use crate::pipeline::{self, PipelineError, WireModel};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Gpr(#[from] GprError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Parser, Debug)]
#[command(name = "ndmag", version, about = "Nanodiamond-ensemble ODMR magnetometry toolkit")]
pub struct Cli {
    /// Seed for every randomized step (default 42).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Optional TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for batch work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset of spectra over a field grid.
    Synth(SynthArgs),
    /// Train a regressor on a dataset, optionally cross-validating hyperparameters.
    Train(TrainArgs),
    /// Predict fields for a dataset or a single spectrum with a trained model.
    Predict(PredictArgs),
    /// Fit the physical model to every spectrum in a dataset.
    FitModel(FitModelArgs),
    /// Synthesize a wire-current scene, predict the field map, and fit the wire.
    Image(ImageArgs),
    /// Accuracy/sensitivity analysis: fit sigma(t) per field bin.
    Analyze(AnalyzeArgs),
    /// Scan frequency corrections for a test set against a trained model.
    ShiftScan(ShiftScanArgs),
}

/// Physical-model flags shared by the synthesizing commands.
#[derive(Args, Debug, Clone, Default)]
struct PhysicsFlags {
    /// Zero-field splitting D, MHz.
    #[arg(long)]
    d_mhz: Option<f64>,
    /// Lattice strain E_s, MHz.
    #[arg(long)]
    e_s_mhz: Option<f64>,
    /// Gyromagnetic ratio, kHz/µT.
    #[arg(long)]
    gamma_khz_ut: Option<f64>,
    /// Shared linewidth of both branches, MHz.
    #[arg(long)]
    linewidth_mhz: Option<f64>,
    /// Shared contrast of both branches.
    #[arg(long)]
    contrast: Option<f64>,
    /// Objective numerical aperture.
    #[arg(long)]
    na: Option<f64>,
    /// Gauss-Legendre nodes for the orientation integral.
    #[arg(long)]
    quad_nodes: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Number of spectra.
    #[arg(long)]
    n: Option<usize>,
    /// Lowest field, µT.
    #[arg(long)]
    b_min: Option<f64>,
    /// Highest field, µT.
    #[arg(long)]
    b_max: Option<f64>,
    /// Photons per frequency point (0 = noiseless).
    #[arg(long)]
    photons: Option<f64>,
    /// Integration time recorded in the metadata, s.
    #[arg(long)]
    integration_time: Option<f64>,
    #[arg(long)]
    freq_min: Option<f64>,
    #[arg(long)]
    freq_max: Option<f64>,
    #[arg(long)]
    freq_points: Option<usize>,
    #[command(flatten)]
    physics: PhysicsFlags,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Fix theta instead of cross-validating (requires --beta-inv).
    #[arg(long)]
    theta: Option<f64>,
    /// Fix beta-inv instead of cross-validating (requires --theta).
    #[arg(long)]
    beta_inv: Option<f64>,
    /// Comma-separated theta grid for cross-validation.
    #[arg(long)]
    theta_grid: Option<String>,
    /// Comma-separated beta-inv grid for cross-validation.
    #[arg(long)]
    beta_inv_grid: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory with a manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Single spectrum file (alternative to --dataset).
    #[arg(long)]
    spectrum: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitModelArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated field initializations, µT.
    #[arg(long)]
    b0_grid: Option<String>,
    #[command(flatten)]
    physics: PhysicsFlags,
}

#[derive(Args, Debug)]
struct ImageArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Wire current, A.
    #[arg(long)]
    current_a: Option<f64>,
    /// Bias field along z, µT.
    #[arg(long, allow_negative_numbers = true)]
    bias_ut: Option<f64>,
    /// Wire lateral position, µm.
    #[arg(long, allow_negative_numbers = true)]
    x0_um: Option<f64>,
    /// Wire depth below the sensing plane, µm.
    #[arg(long)]
    z0_um: Option<f64>,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    pixel_area_um2: Option<f64>,
    /// Photons per point for the synthesized pixel spectra (0 = noiseless).
    #[arg(long)]
    photons: Option<f64>,
    /// Sweep start of the grid the model was trained on, MHz.
    #[arg(long)]
    freq_min: Option<f64>,
    /// Sweep end of the grid the model was trained on, MHz.
    #[arg(long)]
    freq_max: Option<f64>,
    /// Also fit the wire position to the y-averaged profile.
    #[arg(long)]
    fit_wire: bool,
    #[command(flatten)]
    physics: PhysicsFlags,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Fit an existing (t, sigma) table instead of running the full protocol.
    #[arg(long)]
    sigma_file: Option<PathBuf>,
    /// Comma-separated integration times, s.
    #[arg(long)]
    times: Option<String>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Photons per point at t = 1 s; scaled proportionally with t.
    #[arg(long)]
    photons_at_1s: Option<f64>,
    #[arg(long)]
    b_min: Option<f64>,
    #[arg(long)]
    b_max: Option<f64>,
    /// Field bin width for the per-bin reports, µT.
    #[arg(long)]
    bin_width_ut: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    beta_inv: Option<f64>,
    /// Also fit the physical model per test spectrum and emit error histograms.
    #[arg(long)]
    with_model_baseline: bool,
    #[command(flatten)]
    physics: PhysicsFlags,
}

#[derive(Args, Debug)]
struct ShiftScanArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    shift_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    shift_max: Option<f64>,
    #[arg(long)]
    shift_step: Option<f64>,
}

/// Resolves each setting from flag, then config section, then default, and
/// records the result for the config echo.
struct Resolver {
    section: Option<toml::Table>,
    echo: Vec<(String, String)>,
}

impl Resolver {
    fn new(config: Option<&Path>, section: &str) -> Result<Self, CliError> {
        let section = match config {
            None => None,
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                match table.get(section) {
                    None => None,
                    Some(toml::Value::Table(t)) => Some(t.clone()),
                    Some(_) => {
                        return Err(CliError::Config(format!(
                            "config section [{section}] is not a table"
                        )))
                    }
                }
            }
        };
        Ok(Resolver {
            section,
            echo: Vec::new(),
        })
    }

    fn record(&mut self, key: &str, value: impl std::fmt::Display) {
        self.echo.push((key.to_string(), value.to_string()));
    }

    fn config_value(&self, key: &str) -> Option<&toml::Value> {
        self.section.as_ref().and_then(|t| t.get(key))
    }

    fn f64(&mut self, key: &str, flag: Option<f64>, default: f64) -> Result<f64, CliError> {
        let v = match flag {
            Some(v) => v,
            None => match self.config_value(key) {
                Some(toml::Value::Float(f)) => *f,
                Some(toml::Value::Integer(i)) => *i as f64,
                Some(other) => {
                    return Err(CliError::Config(format!("{key} must be a number, got {other}")))
                }
                None => default,
            },
        };
        self.record(key, v);
        Ok(v)
    }

    fn usize(&mut self, key: &str, flag: Option<usize>, default: usize) -> Result<usize, CliError> {
        let v = match flag {
            Some(v) => v,
            None => match self.config_value(key) {
                Some(toml::Value::Integer(i)) if *i >= 0 => *i as usize,
                Some(other) => {
                    return Err(CliError::Config(format!(
                        "{key} must be a non-negative integer, got {other}"
                    )))
                }
                None => default,
            },
        };
        self.record(key, v);
        Ok(v)
    }

    fn string(&mut self, key: &str, flag: Option<String>, default: &str) -> Result<String, CliError> {
        let v = match flag {
            Some(v) => v,
            None => match self.config_value(key) {
                Some(toml::Value::String(s)) => s.clone(),
                Some(other) => {
                    return Err(CliError::Config(format!("{key} must be a string, got {other}")))
                }
                None => default.to_string(),
            },
        };
        self.record(key, v.clone());
        Ok(v)
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let v = match flag {
            Some(v) => v,
            None => match self.config_value(key) {
                Some(toml::Value::String(s)) => PathBuf::from(s),
                _ => return Err(CliError::Config(format!("missing required setting --{key}"))),
            },
        };
        self.record(key, v.display());
        Ok(v)
    }

    fn optional_f64(&mut self, key: &str, flag: Option<f64>) -> Result<Option<f64>, CliError> {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.config_value(key) {
                Some(toml::Value::Float(f)) => Some(*f),
                Some(toml::Value::Integer(i)) => Some(*i as f64),
                Some(other) => {
                    return Err(CliError::Config(format!("{key} must be a number, got {other}")))
                }
                None => None,
            },
        };
        if let Some(v) = v {
            self.record(key, v);
        }
        Ok(v)
    }

    fn physics(&mut self, flags: &PhysicsFlags) -> Result<NdeModelParams, CliError> {
        let defaults = NdeModelParams::default();
        let na = self.f64("na", flags.na, 0.7)?;
        if !(0.0..=1.0).contains(&na) {
            return Err(CliError::Config(format!("na must be in [0, 1], got {na}")));
        }
        let linewidth = self.f64("linewidth_mhz", flags.linewidth_mhz, defaults.delta_nu_minus_mhz)?;
        let contrast = self.f64("contrast", flags.contrast, defaults.c_minus)?;
        let params = NdeModelParams::new(
            self.f64("d_mhz", flags.d_mhz, defaults.d_mhz)?,
            self.f64("e_s_mhz", flags.e_s_mhz, defaults.e_s_mhz)?,
            self.f64("gamma_khz_ut", flags.gamma_khz_ut, defaults.gamma_khz_per_ut)?,
            linewidth,
            linewidth,
            contrast,
            contrast,
            na.asin(),
            defaults.e_x,
            defaults.e_y,
        )?;
        Ok(params)
    }

    fn quad_nodes(&mut self, flags: &PhysicsFlags) -> Result<usize, CliError> {
        self.usize("quad_nodes", flags.quad_nodes, physics::DEFAULT_QUAD_NODES)
    }

    fn write_echo(&self, out_dir: &Path, command: &str) -> Result<(), CliError> {
        let mut content = format!("command={command}\n");
        for (k, v) in &self.echo {
            let _ = writeln!(content, "{k}={v}");
        }
        dataset::write_atomic(&out_dir.join("config_echo.txt"), &content)?;
        Ok(())
    }
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    let values: Result<Vec<f64>, _> = s.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let values = values.map_err(|_| CliError::Config(format!("invalid {what} list: {s:?}")))?;
    if values.is_empty() {
        return Err(CliError::Config(format!("empty {what} list")));
    }
    Ok(values)
}

fn field_grid(b_min: f64, b_max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![b_min];
    }
    let step = (b_max - b_min) / (n - 1) as f64;
    (0..n).map(|i| b_min + i as f64 * step).collect()
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        // A pool may already exist when called twice in-process; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let seed = cli.seed.unwrap_or(42);
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth(args) => cmd_synth(args, config, seed),
        Command::Train(args) => cmd_train(args, config, seed),
        Command::Predict(args) => cmd_predict(args, config),
        Command::FitModel(args) => cmd_fit_model(args, config),
        Command::Image(args) => cmd_image(args, config, seed),
        Command::Analyze(args) => cmd_analyze(args, config, seed),
        Command::ShiftScan(args) => cmd_shift_scan(args, config),
    }
}

fn cmd_synth(args: SynthArgs, config: Option<&Path>, seed: u64) -> Result<(), CliError> {
    let mut r = Resolver::new(config, "synth")?;
    let out_dir = r.path("out_dir", args.out_dir)?;
    r.record("seed", seed);
    let n = r.usize("n", args.n, 751)?;
    let b_min = r.f64("b_min", args.b_min, 6.0)?;
    let b_max = r.f64("b_max", args.b_max, 2286.0)?;
    let photons = r.f64("photons", args.photons, 0.0)?;
    let integration_time = r.f64("integration_time", args.integration_time, 1.0)?;
    let freq_min = r.f64("freq_min", args.freq_min, physics::DEFAULT_FREQ_MIN_MHZ)?;
    let freq_max = r.f64("freq_max", args.freq_max, physics::DEFAULT_FREQ_MAX_MHZ)?;
    let freq_points = r.usize("freq_points", args.freq_points, physics::DEFAULT_FREQ_POINTS)?;
    let params = r.physics(&args.physics)?;
    let nodes = r.quad_nodes(&args.physics)?;

    if n == 0 {
        return Err(CliError::Config("n must be at least 1".to_string()));
    }
    if !(photons >= 0.0) {
        return Err(CliError::Config(format!("photon budget must be >= 0, got {photons}")));
    }
    if !(integration_time > 0.0) {
        return Err(CliError::Config(format!(
            "integration time must be > 0, got {integration_time}"
        )));
    }
    if freq_points < 3 || !(freq_max > freq_min) {
        return Err(CliError::Config(format!(
            "frequency grid needs at least 3 increasing points, got {freq_points} in [{freq_min}, {freq_max}]"
        )));
    }
    if n > 1 && !(b_max > b_min) {
        return Err(CliError::Config(format!(
            "field grid needs b_max > b_min for n > 1, got [{b_min}, {b_max}]"
        )));
    }
    ensure_out_dir(&out_dir)?;
    let grid = physics::uniform_frequency_grid(freq_min, freq_max, freq_points);
    let fields = field_grid(b_min, b_max, n);
    let mut entries = Vec::with_capacity(n);
    for (i, &b) in fields.iter().enumerate() {
        let mut s = physics::synthesize_spectrum_with_nodes(&FieldVector::axial(b), &params, &grid, nodes)?;
        s.integration_time_s = integration_time;
        if photons > 0.0 {
            s = physics::add_shot_noise(&s, photons, seed.wrapping_add(i as u64))?;
        }
        entries.push((s, b));
    }
    dataset::write_dataset(&out_dir, &entries)?;
    r.write_echo(&out_dir, "synth")?;
    println!("wrote {} spectra to {}", entries.len(), out_dir.display());
    Ok(())
}

fn cmd_train(args: TrainArgs, config: Option<&Path>, seed: u64) -> Result<(), CliError> {
    let mut r = Resolver::new(config, "train")?;
    let dataset_dir = r.path("dataset", args.dataset)?;
    let out_dir = r.path("out_dir", args.out_dir)?;
    ensure_out_dir(&out_dir)?;
    r.record("seed", seed);
    let folds = r.usize("folds", args.folds, 5)?;
    let fixed_theta = r.optional_f64("theta", args.theta)?;
    let fixed_beta = r.optional_f64("beta_inv", args.beta_inv)?;

    let entries = dataset::read_dataset(&dataset_dir)?;
    let mut features = Vec::with_capacity(entries.len());
    let mut targets = Vec::with_capacity(entries.len());
    for (s, b) in &entries {
        features.push(gpr::preprocess(s)?);
        targets.push(*b);
    }

    let (hp, cv) = match (fixed_theta, fixed_beta) {
        (Some(theta), Some(beta_inv)) => (KernelHyperparams::new(theta, beta_inv)?, None),
        (None, None) => {
            let (default_theta, default_beta) = gpr::default_grids();
            let theta_grid = parse_f64_list(
                &r.string(
                    "theta_grid",
                    args.theta_grid,
                    &default_theta.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
                )?,
                "theta grid",
            )?;
            let beta_grid = parse_f64_list(
                &r.string(
                    "beta_inv_grid",
                    args.beta_inv_grid,
                    &default_beta.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
                )?,
                "beta_inv grid",
            )?;
            let (hp, loss) =
                gpr::optimize_hyperparams(&features, &targets, &theta_grid, &beta_grid, folds, seed)?;
            (hp, Some(loss))
        }
        _ => {
            return Err(CliError::Config(
                "fixing hyperparameters requires both --theta and --beta-inv".to_string(),
            ))
        }
    };

    let model = gpr::train(features, targets, hp)?;
    dataset::save_model(&out_dir.join("model.gpr.txt"), &model)?;
    let mut summary = vec![
        ("theta", hp.theta.to_string()),
        ("beta_inv", hp.beta_inv.to_string()),
        ("n_train", model.n_train().to_string()),
    ];
    match cv {
        Some(loss) => {
            summary.push(("cv_loss", loss.to_string()));
            summary.push(("folds", folds.to_string()));
            println!("selected theta={} beta_inv={} (cv loss {loss})", hp.theta, hp.beta_inv);
        }
        None => println!("fixed theta={} beta_inv={}", hp.theta, hp.beta_inv),
    }
    dataset::write_record(&out_dir.join("train_summary.txt"), "ndmag-train-v1", &summary)?;
    r.write_echo(&out_dir, "train")?;
    Ok(())
}

fn cmd_predict(args: PredictArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut r = Resolver::new(config, "predict")?;
    let model_path = r.path("model", args.model)?;
    let out_dir = r.path("out_dir", args.out_dir)?;
    ensure_out_dir(&out_dir)?;
    let model = dataset::load_model(&model_path)?;

    let mut rows: Vec<(String, Option<f64>, f64, f64)> = Vec::new();
    match (&args.dataset, &args.spectrum) {
        (Some(dir), None) => {
            r.record("dataset", dir.display());
            for (name, truth) in dataset::read_manifest(dir)? {
                let (s, _) = dataset::read_spectrum(&dir.join(&name))?;
                let p = model.predict(&gpr::preprocess(&s)?)?;
                rows.push((name, Some(truth), p.mean_ut, p.stddev_ut));
            }
        }
        (None, Some(file)) => {
            r.record("spectrum", file.display());
            let (s, b) = dataset::read_spectrum(file)?;
            let p = model.predict(&gpr::preprocess(&s)?)?;
            rows.push((
                file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                b,
                p.mean_ut,
                p.stddev_ut,
            ));
        }
        _ => {
            return Err(CliError::Config(
                "predict needs exactly one of --dataset or --spectrum".to_string(),
            ))
        }
    }

    let mut content = String::from("file,true_field_uT,predicted_uT,stddev_uT\n");
    for (name, truth, mean, sd) in &rows {
        let truth = truth.unwrap_or(f64::NAN);
        let _ = writeln!(content, "{name},{truth},{mean},{sd}");
    }
    dataset::write_atomic(&out_dir.join("predictions.csv"), &content)?;
    r.write_echo(&out_dir, "predict")?;
    println!("predicted {} spectra", rows.len());
    Ok(())
}

fn cmd_fit_model(args: FitModelArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut r = Resolver::new(config, "fit_model")?;
    let dataset_dir = r.path("dataset", args.dataset)?;
    let out_dir = r.path("out_dir", args.out_dir)?;
    let b0_grid = parse_f64_list(
        &r.string("b0_grid", args.b0_grid.clone(), "100,400,800,1200,1600,2000")?,
        "b0 grid",
    )?;
    let params = r.physics(&args.physics)?;
    ensure_out_dir(&out_dir)?;

    let manifest = dataset::read_manifest(&dataset_dir)?;
    let entries: Vec<(String, crate::physics::OdmrSpectrum, f64)> = manifest
        .into_iter()
        .map(|(name, truth)| {
            let (s, _) = dataset::read_spectrum(&dataset_dir.join(&name))?;
            Ok::<_, DatasetError>((name, s, truth))
        })
        .collect::<Result<_, _>>()?;
    let free = FreeParams::default();
    let fits: Vec<Result<modelfit::FitResult, FitError>> = entries
        .par_iter()
        .map(|(_, s, _)| modelfit::scan_initializations(s, &params, &b0_grid, &free))
        .collect();

    let mut content =
        String::from("file,true_field_uT,b_hat_uT,b_stderr_uT,residual_norm,iterations,converged\n");
    for (i, ((name, _, truth), fit)) in entries.iter().zip(&fits).enumerate() {
        match fit {
            Ok(f) => {
                let _ = writeln!(
                    content,
                    "{name},{truth},{},{},{},{},{}",
                    f.b_hat_ut, f.b_stderr_ut, f.residual_norm, f.iterations, f.converged
                );
                dataset::write_record(
                    &out_dir.join(format!("fit_{i:05}.txt")),
                    "ndmag-fit-v1",
                    &fit_record_fields(f),
                )?;
            }
            Err(e) => {
                return Err(CliError::Config(format!("fit of {name} failed: {e}")));
            }
        }
    }
    dataset::write_atomic(&out_dir.join("fits.csv"), &content)?;
    r.write_echo(&out_dir, "fit-model")?;
    println!("fitted {} spectra", entries.len());
    Ok(())
}

fn fit_record_fields(f: &modelfit::FitResult) -> Vec<(&'static str, String)> {
    vec![
        ("converged", f.converged.to_string()),
        ("b_hat_uT", f.b_hat_ut.to_string()),
        ("b_stderr_uT", f.b_stderr_ut.to_string()),
        ("e_s_MHz", f.params.e_s_mhz.to_string()),
        ("delta_nu_MHz", f.params.delta_nu_minus_mhz.to_string()),
        ("contrast", f.params.c_minus.to_string()),
        ("d_MHz", f.params.d_mhz.to_string()),
        ("residual_norm", f.residual_norm.to_string()),
        ("iterations", f.iterations.to_string()),
    ]
}

fn cmd_image(args: ImageArgs, config: Option<&Path>, seed: u64) -> Result<(), CliError> {
    let mut r = Resolver::new(config, "image")?;
    let model_path = r.path("model", args.model)?;
    let out_dir = r.path("out_dir", args.out_dir)?;
    r.record("seed", seed);
    let current = r.f64("current_a", args.current_a, 0.8)?;
    let bias = r.f64("bias_ut", args.bias_ut, 912.8)?;
    let x0 = r.f64("x0_um", args.x0_um, 0.0)?;
    let z0 = r.f64("z0_um", args.z0_um, 130.0)?;
    let nx = r.usize("nx", args.nx, 22)?;
    let ny = r.usize("ny", args.ny, 17)?;
    let pixel_area = r.f64("pixel_area_um2", args.pixel_area_um2, 18.0)?;
    let photons = r.f64("photons", args.photons, 0.0)?;
    let freq_min = r.f64("freq_min", args.freq_min, physics::DEFAULT_FREQ_MIN_MHZ)?;
    let freq_max = r.f64("freq_max", args.freq_max, physics::DEFAULT_FREQ_MAX_MHZ)?;
    r.record("fit_wire", args.fit_wire);
    let params = r.physics(&args.physics)?;
    let nodes = r.quad_nodes(&args.physics)?;

    if !(freq_max > freq_min) {
        return Err(CliError::Config(format!(
            "frequency sweep must be increasing, got [{freq_min}, {freq_max}]"
        )));
    }
    if !(photons >= 0.0) {
        return Err(CliError::Config(format!("photon budget must be >= 0, got {photons}")));
    }
    ensure_out_dir(&out_dir)?;
    let model = dataset::load_model(&model_path)?;
    let wire = WireModel {
        current_a: current,
        x0_um: x0,
        z0_um: z0,
        bias_bz_ut: bias,
    };
    wire.validate()?;

    // The pixel spectra must live on the grid the model was trained on:
    // same sweep range and a point count matching the feature length
    // (features drop the two endpoints).
    let freq_points = model.feature_len() + 2;
    let grid = physics::uniform_frequency_grid(freq_min, freq_max, freq_points);

    let pitch = pixel_area.sqrt();
    let pixels: Vec<usize> = (0..nx * ny).collect();
    let spectra: Vec<Result<OdmrSpectrum, PhysicsError>> = pixels
        .par_iter()
        .map(|&idx| {
            let ix = idx % nx;
            let x = (ix as f64 - (nx as f64 - 1.0) / 2.0) * pitch;
            let b = pipeline::wire_field_magnitude(x, &wire);
            let s = physics::synthesize_spectrum_with_nodes(
                &FieldVector::axial(b),
                &params,
                &grid,
                nodes,
            )?;
            if photons > 0.0 {
                physics::add_shot_noise(&s, photons, seed.wrapping_add(idx as u64))
            } else {
                Ok(s)
            }
        })
        .collect();
    let spectra: Result<Vec<OdmrSpectrum>, PhysicsError> = spectra.into_iter().collect();
    let spectra = spectra?;

    let map = pipeline::predict_map(&model, &spectra, nx, ny, pixel_area)?;
    dataset::write_field_map(&out_dir, "map", &map)?;

    let profile = pipeline::average_along_y(&map);
    dataset::write_table(
        &out_dir.join("profile.csv"),
        "x_um,mean_B_uT,stderr_uT",
        &profile.iter().map(|&(x, m, s)| vec![x, m, s]).collect::<Vec<_>>(),
    )?;

    if args.fit_wire {
        let weighted: Vec<(f64, f64, f64)> = profile
            .iter()
            .map(|&(x, m, s)| (x, m, if s > 0.0 { s } else { 1.0 }))
            .collect();
        let fit = pipeline::fit_wire(&weighted, current, bias)?;
        dataset::write_record(
            &out_dir.join("wire_fit.txt"),
            "ndmag-wire-v1",
            &[
                ("current_A", fit.model.current_a.to_string()),
                ("x0_um", fit.model.x0_um.to_string()),
                ("x0_stderr_um", fit.x0_stderr_um.to_string()),
                ("z0_um", fit.model.z0_um.to_string()),
                ("z0_stderr_um", fit.z0_stderr_um.to_string()),
                ("bias_Bz_uT", fit.model.bias_bz_ut.to_string()),
                ("residual_norm", fit.residual_norm.to_string()),
            ],
        )?;
        println!("wire fit: x0 = {} um, z0 = {} um", fit.model.x0_um, fit.model.z0_um);
    }
    r.write_echo(&out_dir, "image")?;
    println!("wrote {}x{} field map", nx, ny);
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs, config: Option<&Path>, seed: u64) -> Result<(), CliError> {
    let mut r = Resolver::new(config, "analyze")?;
    let out_dir = r.path("out_dir", args.out_dir)?;
    ensure_out_dir(&out_dir)?;
    r.record("seed", seed);

    // Mode A: fit an existing sigma(t) table.
    if let Some(sigma_file) = &args.sigma_file {
        r.record("sigma_file", sigma_file.display());
        let text = std::fs::read_to_string(sigma_file)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", sigma_file.display())))?;
        let mut samples = Vec::new();
        for (ln, row) in text.lines().enumerate() {
            if ln == 0 || row.trim().is_empty() {
                continue; // header
            }
            let (t, s) = row.split_once(',').ok_or_else(|| {
                CliError::Config(format!("{} line {}: expected t,sigma", sigma_file.display(), ln + 1))
            })?;
            let parse = |v: &str| {
                v.trim().parse::<f64>().map_err(|_| {
                    CliError::Config(format!("{} line {}: bad number {v:?}", sigma_file.display(), ln + 1))
                })
            };
            samples.push((parse(t)?, parse(s)?));
        }
        let (eta, zeta) = pipeline::fit_accuracy_sensitivity(&samples)?;
        dataset::write_record(
            &out_dir.join("accuracy.txt"),
            "ndmag-accuracy-v1",
            &[
                ("bin_low_uT", "0".to_string()),
                ("bin_high_uT", "inf".to_string()),
                ("eta_uT_sqrtHz", eta.to_string()),
                ("zeta_uT", zeta.to_string()),
                ("n_samples", samples.len().to_string()),
            ],
        )?;
        r.write_echo(&out_dir, "analyze")?;
        println!("eta = {eta} uT/sqrt(Hz), zeta = {zeta} uT");
        return Ok(());
    }

    // Mode B: full synthetic protocol, photons scaled with integration time
    // for training and test alike.
    let times = parse_f64_list(&r.string("times", args.times, "0.25,0.5,1,2,4")?, "times")?;
    let n_train = r.usize("n_train", args.n_train, 120)?;
    let n_test = r.usize("n_test", args.n_test, 60)?;
    let photons_at_1s = r.f64("photons_at_1s", args.photons_at_1s, 1e5)?;
    let b_min = r.f64("b_min", args.b_min, 100.0)?;
    let b_max = r.f64("b_max", args.b_max, 2286.0)?;
    let bin_width = r.f64("bin_width_ut", args.bin_width_ut, 500.0)?;
    let theta = r.optional_f64("theta", args.theta)?;
    let beta_inv = r.optional_f64("beta_inv", args.beta_inv)?;
    r.record("with_model_baseline", args.with_model_baseline);
    let params = r.physics(&args.physics)?;
    let nodes = r.quad_nodes(&args.physics)?;

    if times.len() < 3 {
        return Err(CliError::Config("need at least 3 integration times".to_string()));
    }
    let grid = physics::uniform_frequency_grid(
        physics::DEFAULT_FREQ_MIN_MHZ,
        physics::DEFAULT_FREQ_MAX_MHZ,
        physics::DEFAULT_FREQ_POINTS,
    );
    let train_fields = field_grid(b_min, b_max, n_train);
    let test_fields: Vec<f64> = (0..n_test)
        .map(|i| b_min + (i as f64 + 0.5) * (b_max - b_min) / n_test as f64)
        .collect();

    let noiseless_train: Vec<OdmrSpectrum> = train_fields
        .iter()
        .map(|&b| physics::synthesize_spectrum_with_nodes(&FieldVector::axial(b), &params, &grid, nodes))
        .collect::<Result<_, _>>()?;
    let noiseless_test: Vec<OdmrSpectrum> = test_fields
        .iter()
        .map(|&b| physics::synthesize_spectrum_with_nodes(&FieldVector::axial(b), &params, &grid, nodes))
        .collect::<Result<_, _>>()?;

    // One hyperparameter point for all times: fixed if given, otherwise
    // cross-validated on the noisiest (shortest-time) training set.
    let hp = match (theta, beta_inv) {
        (Some(t), Some(b)) => KernelHyperparams::new(t, b)?,
        _ => {
            let t0 = times.iter().cloned().fold(f64::INFINITY, f64::min);
            let photons = photons_at_1s * t0;
            let features: Vec<gpr::FeatureVector> = noiseless_train
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let noisy = physics::add_shot_noise(s, photons, seed.wrapping_add(i as u64))?;
                    Ok::<_, CliError>(gpr::preprocess(&noisy)?)
                })
                .collect::<Result<_, _>>()?;
            let theta_grid: Vec<f64> = (-2..=3).map(|e| 10f64.powi(e)).collect();
            let beta_grid = vec![1e-2, 1.0, 1e2];
            let (hp, loss) = gpr::optimize_hyperparams(
                &features,
                &train_fields,
                &theta_grid,
                &beta_grid,
                5,
                seed,
            )?;
            println!("cv selected theta={} beta_inv={} (loss {loss})", hp.theta, hp.beta_inv);
            hp
        }
    };

    let n_bins = ((b_max / bin_width).ceil() as usize).max(1);
    let mut per_bin_samples: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_bins];
    // Histograms are built at the longest integration time (best SNR).
    let longest = times
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let mut longest_time_errors: Vec<(f64, f64)> = Vec::new();

    for (ti, &t) in times.iter().enumerate() {
        let photons = photons_at_1s * t;
        let salt = seed.wrapping_add(1_000_000u64.wrapping_mul(ti as u64 + 1));
        let mut features = Vec::with_capacity(n_train);
        for (i, s) in noiseless_train.iter().enumerate() {
            let mut noisy = physics::add_shot_noise(s, photons, salt.wrapping_add(i as u64))?;
            noisy.integration_time_s = t;
            features.push(gpr::preprocess(&noisy)?);
        }
        let model = gpr::train(features, train_fields.clone(), hp)?;

        let mut bin_errors: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
        for (i, (s, &truth)) in noiseless_test.iter().zip(&test_fields).enumerate() {
            let noisy =
                physics::add_shot_noise(s, photons, salt.wrapping_add(500_000 + i as u64))?;
            let pred = model.predict(&gpr::preprocess(&noisy)?)?;
            let err = pred.mean_ut - truth;
            let bin = ((truth / bin_width).floor() as usize).min(n_bins - 1);
            bin_errors[bin].push(err);
            if ti == longest {
                longest_time_errors.push((truth, err.abs()));
            }
        }
        for (bin, errs) in bin_errors.iter().enumerate() {
            if errs.len() < 2 {
                continue;
            }
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
                / (errs.len() as f64 - 1.0);
            per_bin_samples[bin].push((t, var.sqrt()));
        }
    }

    let mut sample_rows = Vec::new();
    for (bin, samples) in per_bin_samples.iter().enumerate() {
        let lo = bin as f64 * bin_width;
        let hi = lo + bin_width;
        for &(t, s) in samples {
            sample_rows.push(vec![lo, hi, t, s]);
        }
        if samples.len() < 3 {
            continue;
        }
        let report = pipeline::AccuracyReport::from_samples((lo, hi), samples.clone())?;
        dataset::write_record(
            &out_dir.join(format!("accuracy_{:04}_{:04}.txt", lo as i64, hi as i64)),
            "ndmag-accuracy-v1",
            &[
                ("bin_low_uT", lo.to_string()),
                ("bin_high_uT", hi.to_string()),
                ("eta_uT_sqrtHz", report.eta.to_string()),
                ("zeta_uT", report.zeta.to_string()),
                ("n_samples", report.sigma_samples.len().to_string()),
            ],
        )?;
        println!("bin [{lo}, {hi}) uT: eta = {}, zeta = {}", report.eta, report.zeta);
    }
    dataset::write_table(
        &out_dir.join("sigma_samples.csv"),
        "bin_low_uT,bin_high_uT,t_s,sigma_uT",
        &sample_rows,
    )?;

    let hists = pipeline::error_histograms(&longest_time_errors, bin_width, 1.0)?;
    write_histograms(&out_dir.join("hist_gpr.csv"), &hists)?;

    if args.with_model_baseline {
        let t = times[longest];
        let photons = photons_at_1s * t;
        // Same noise draws the GPR histogram saw at this time.
        let salt = seed.wrapping_add(1_000_000u64.wrapping_mul(longest as u64 + 1));
        // Truth-blind initialization grid spanning the field range.
        let b0_grid: Vec<f64> = (0..6)
            .map(|i| b_min.max(1.0) + (b_max - b_min.max(1.0)) * i as f64 / 5.0)
            .collect();
        let errors: Vec<Result<(f64, f64), CliError>> = noiseless_test
            .par_iter()
            .zip(&test_fields)
            .enumerate()
            .map(|(i, (s, &truth))| {
                let noisy =
                    physics::add_shot_noise(s, photons, salt.wrapping_add(500_000 + i as u64))?;
                let fit = modelfit::scan_initializations(
                    &noisy,
                    &params,
                    &b0_grid,
                    &FreeParams::default(),
                )?;
                Ok((truth, (fit.b_hat_ut - truth).abs()))
            })
            .collect();
        let errors: Result<Vec<(f64, f64)>, CliError> = errors.into_iter().collect();
        let hists = pipeline::error_histograms(&errors?, bin_width, 1.0)?;
        write_histograms(&out_dir.join("hist_model.csv"), &hists)?;
    }

    r.write_echo(&out_dir, "analyze")?;
    Ok(())
}

fn write_histograms(path: &Path, hists: &[pipeline::ErrorHistogram]) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for h in hists {
        for (i, &count) in h.counts.iter().enumerate() {
            rows.push(vec![
                h.field_bin_ut.0,
                h.field_bin_ut.1,
                h.edges_ut[i],
                h.edges_ut[i + 1],
                count as f64,
            ]);
        }
    }
    dataset::write_table(
        path,
        "field_bin_low_uT,field_bin_high_uT,err_low_uT,err_high_uT,count",
        &rows,
    )?;
    Ok(())
}

fn cmd_shift_scan(args: ShiftScanArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut r = Resolver::new(config, "shift_scan")?;
    let model_path = r.path("model", args.model)?;
    let dataset_dir = r.path("dataset", args.dataset)?;
    let out_dir = r.path("out_dir", args.out_dir)?;
    let shift_min = r.f64("shift_min", args.shift_min, -10.0)?;
    let shift_max = r.f64("shift_max", args.shift_max, 10.0)?;
    let shift_step = r.f64("shift_step", args.shift_step, 1.0)?;
    if !(shift_step > 0.0) || shift_max < shift_min {
        return Err(CliError::Config("invalid shift range".to_string()));
    }

    ensure_out_dir(&out_dir)?;
    let model = dataset::load_model(&model_path)?;
    let test = dataset::read_dataset(&dataset_dir)?;
    let mut shifts = Vec::new();
    let mut s = shift_min;
    while s <= shift_max + 1e-12 {
        shifts.push(s);
        s += shift_step;
    }
    let scan = pipeline::shift_scan(&model, &test, &shifts)?;

    dataset::write_table(
        &out_dir.join("shift_scan.csv"),
        "shift_MHz,mean_abs_error_uT",
        &scan.curve.iter().map(|&(s, e)| vec![s, e]).collect::<Vec<_>>(),
    )?;
    dataset::write_record(
        &out_dir.join("shift_scan.txt"),
        "ndmag-shiftscan-v1",
        &[("best_shift_MHz", scan.best_shift_mhz.to_string())],
    )?;
    r.write_echo(&out_dir, "shift-scan")?;
    println!("best shift: {} MHz", scan.best_shift_mhz);
    Ok(())
}
