use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::DMatrix;

use footstep_prc::dataset::{load_dataset, load_model, save_dataset, save_model, LabeledDataset, WaveformFormat};
use footstep_prc::detect::{detect, DetectionMode};
use footstep_prc::eval::{scatter_svg, Axis, Prediction};
use footstep_prc::experiment::{
    eta_csv, featurize_dataset, fisher_csv, fisher_for_datasets, load_datasets, predict_features, predictions_csv,
    read_predictions_csv, run_selected, score_predictions, select_datasets, sweep_csv, sweep_sensor_count,
    sweep_training_size, write_run_dir, Dimension, EvalConfig, ExperimentConfig, PipelineConfig, Selector, Split,
};
use footstep_prc::features::{StateMatrix, StateMeta};
use footstep_prc::readout::RidgeStrength;
use footstep_prc::subspace::fit_pca;
use footstep_prc::synth::{simulate_campaign, CampaignConfig};
use footstep_prc::{Error, Result};

/// Footstep localization from floor vibrations with a physical-reservoir
/// pipeline.
#[derive(Parser)]
#[command(name = "footstep-prc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic campaign.
    Simulate(SimulateArgs),
    /// Detect foot strikes in one dataset.
    Detect(DetectArgs),
    /// Extract reservoir states of matched steps.
    Featurize(FeaturizeArgs),
    /// Fit PCA and readout on the training selection.
    Train(TrainArgs),
    /// Predict step positions with a stored model.
    Predict(PredictArgs),
    /// Score a predictions file.
    Report(ReportArgs),
    /// Sensor-count or training-size sweep.
    Sweep(SweepArgs),
    /// Run everything and write a run directory.
    Pipeline(PipelineArgs),
    /// Retained-variance curve of a states file.
    PcaReport(PcaReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Bin,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Campaign configuration JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Subject names to keep, e.g. S1,S2.
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
    #[arg(long)]
    traversals: Option<usize>,
    /// Noise std as a fraction of the campaign-median peak.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_enum, default_value = "bin")]
    format: FormatArg,
}

#[derive(Args)]
struct DetectFlags {
    /// Threshold as a fraction of the reference maximum.
    #[arg(long)]
    alpha: Option<f64>,
    /// Moving-average length in samples (odd).
    #[arg(long)]
    smooth: Option<usize>,
    /// Minimum event separation, seconds.
    #[arg(long)]
    separation: Option<f64>,
    /// Use a trailing running maximum instead of the global one.
    #[arg(long)]
    streaming: bool,
}

#[derive(Args)]
struct PipelineFlags {
    /// Experiment configuration JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifests or directories (replaces the config list).
    #[arg(long = "dataset", num_args = 1..)]
    datasets: Vec<PathBuf>,
    /// Training selectors, e.g. S1:Tr1-3.
    #[arg(long, num_args = 1..)]
    train: Vec<Selector>,
    /// Test selectors, e.g. S1:Tr6.
    #[arg(long, num_args = 1..)]
    test: Vec<Selector>,
    /// Feature sensor ids.
    #[arg(long, value_delimiter = ',')]
    sensors: Option<Vec<String>>,
    /// Window length, seconds.
    #[arg(long)]
    window: Option<f64>,
    /// Fixed PCA dimension.
    #[arg(long, conflicts_with = "eta")]
    dim: Option<usize>,
    /// Retained-variance target for the PCA dimension.
    #[arg(long)]
    eta: Option<f64>,
    /// Absolute ridge strength.
    #[arg(long, conflicts_with = "ridge_rel")]
    ridge: Option<f64>,
    /// Ridge strength relative to trace(ZᵀZ)/(D+1).
    #[arg(long)]
    ridge_rel: Option<f64>,
    #[arg(long)]
    no_rms: bool,
    #[arg(long)]
    center: bool,
    #[arg(long)]
    free_bias: bool,
    #[arg(long)]
    no_kalman: bool,
    #[arg(long)]
    kf_q: Option<f64>,
    #[arg(long)]
    kf_r: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    detect: DetectFlags,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: DetectFlags,
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "dataset", num_args = 1.., required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Split label written to the output.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model whose pipeline settings featurize `--dataset` for Fisher ratios.
    #[arg(long, requires = "datasets")]
    model: Option<PathBuf>,
    #[arg(long = "dataset", num_args = 1..)]
    datasets: Vec<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    x_pitch: f64,
    #[arg(long, default_value_t = 0.15)]
    y_pitch: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Sensors,
    Training,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepKind,
    /// Sensor counts or training-traversal counts.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct PcaReportArgs {
    #[arg(long)]
    states: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    center: bool,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

impl DetectFlags {
    fn apply(&self, cfg: &mut footstep_prc::detect::DetectionConfig) {
        if let Some(a) = self.alpha {
            cfg.threshold_fraction = a;
        }
        if let Some(s) = self.smooth {
            cfg.smooth_window_samples = s;
        }
        if let Some(s) = self.separation {
            cfg.min_separation_s = s;
        }
        if self.streaming {
            cfg.mode = DetectionMode::Streaming;
        }
    }
}

impl PipelineFlags {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig {
                datasets: Vec::new(),
                train: Vec::new(),
                test: Vec::new(),
                pipeline: PipelineConfig::default(),
                eval: EvalConfig::default(),
                seed: 42,
            },
        };
        if !self.datasets.is_empty() {
            cfg.datasets = self.datasets.clone();
        }
        if !self.train.is_empty() {
            cfg.train = self.train.clone();
        }
        if !self.test.is_empty() {
            cfg.test = self.test.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let p = &mut cfg.pipeline;
        if let Some(s) = &self.sensors {
            p.sensors = Some(s.clone());
        }
        if let Some(w) = self.window {
            p.window_s = w;
        }
        if let Some(d) = self.dim {
            p.dimension = Dimension::Fixed(d);
        }
        if let Some(e) = self.eta {
            p.dimension = Dimension::Eta(e);
        }
        if let Some(r) = self.ridge {
            p.ridge = RidgeStrength::Absolute(r);
        }
        if let Some(r) = self.ridge_rel {
            p.ridge = RidgeStrength::Relative(r);
        }
        if self.no_rms {
            p.rms_normalize = false;
        }
        if self.center {
            p.center = true;
        }
        if self.free_bias {
            p.free_bias = true;
        }
        if self.no_kalman {
            p.kalman = None;
        } else if self.kf_q.is_some() || self.kf_r.is_some() {
            let mut kf = p.kalman.unwrap_or_default();
            kf.q = self.kf_q.unwrap_or(kf.q);
            kf.r = self.kf_r.unwrap_or(kf.r);
            p.kalman = Some(kf);
        }
        self.detect.apply(&mut p.detection);
        if cfg.datasets.is_empty() {
            return Err(Error::Config("no datasets given (use --dataset or a config file)".into()));
        }
        p.validate()?;
        Ok(cfg)
    }
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => CampaignConfig::default(),
    };
    if let Some(names) = &args.subjects {
        for n in names {
            if !cfg.subjects.iter().any(|s| &s.name == n) {
                return Err(Error::Config(format!("unknown subject {n:?}")));
            }
        }
        cfg.subjects.retain(|s| names.contains(&s.name));
    }
    if let Some(t) = args.traversals {
        cfg.traversals = t;
    }
    if let Some(n) = args.noise {
        cfg.noise_fraction = n;
    }
    let format = match args.format {
        FormatArg::Csv => WaveformFormat::Csv,
        FormatArg::Bin => WaveformFormat::Bin,
    };
    let campaign = simulate_campaign(&cfg, args.seed)?;
    for ds in &campaign {
        let (subject, traversal) = ds.session().expect("simulated traversals are labeled");
        let dir = args.out.join(format!("{subject}_{traversal}"));
        save_dataset(ds, &dir, format)?;
        info!("wrote {}", dir.display());
    }
    let snapshot = serde_json::json!({ "seed": args.seed, "campaign": cfg });
    write(&args.out.join("campaign.json"), serde_json::to_string_pretty(&snapshot).expect("serializable"))?;
    println!("wrote {} traversals to {}", campaign.len(), args.out.display());
    Ok(())
}

fn detect_cmd(args: &DetectArgs) -> Result<()> {
    let manifest = if args.dataset.is_dir() { args.dataset.join("manifest.json") } else { args.dataset.clone() };
    let ds = load_dataset(&manifest)?;
    let mut cfg = footstep_prc::detect::DetectionConfig::default();
    args.flags.apply(&mut cfg);
    let events = detect(ds.record(), &cfg)?;
    let mut out = String::from("s_k,t_s,peak\n");
    for (s, v) in events.timestamps.iter().zip(&events.peak_values) {
        out.push_str(&format!("{s},{},{v}\n", ds.record().time_of(*s)));
    }
    write(&args.out, out)?;
    println!("{} events", events.len());
    Ok(())
}

fn featurize_cmd(args: &FeaturizeArgs) -> Result<()> {
    let cfg = args.pipeline.experiment()?;
    let datasets = load_datasets(&cfg.datasets)?;
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    for ds in &datasets {
        let f = featurize_dataset(ds, &cfg.pipeline)?;
        for i in 0..f.steps.len() {
            rows.push(f.states.row(i).into_owned());
            meta.push(StateMeta {
                step: f.steps[i].clone(),
                t_s: ds.record().time_of(f.samples[i]),
                x: f.truth[i][0],
                y: f.truth[i][1],
                sample: f.samples[i] as u64,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty("featurized steps"));
    }
    let states = StateMatrix::new(DMatrix::from_rows(&rows), meta, cfg.pipeline.rms_normalize)?;
    states.save(&args.out)?;
    println!("{} states of dimension {}", states.len(), states.dim());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.pipeline.experiment()?;
    let datasets = load_datasets(&cfg.datasets)?;
    let train_only = ExperimentConfig {
        test: Vec::new(),
        ..cfg
    };
    let report = run_selected(&train_only, &datasets)?;
    save_model(&report.model, &args.out)?;
    let m = &report.metrics.train.raw;
    println!(
        "D = {}, train RMSE total {:.4} x {:.4} y {:.4}",
        report.metrics.dimension, m.total, m.x, m.y
    );
    Ok(())
}

fn predict_cmd(args: &PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let datasets = load_datasets(&args.datasets)?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let mut preds = Vec::new();
    for ds in &datasets {
        let f = featurize_dataset(ds, &model.config)?;
        preds.extend(predict_features(&model, &f)?.into_iter().map(|p| (split, p)));
    }
    write(&args.out, predictions_csv(&preds))?;
    println!("{} predictions", preds.len());
    Ok(())
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let preds = read_predictions_csv(&args.predictions)?;
    let eval = EvalConfig {
        x_bin_pitch: args.x_pitch,
        y_bin_pitch: args.y_pitch,
        ..EvalConfig::default()
    };
    let scores = score_predictions(&preds, &eval)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let metrics = serde_json::json!({
        "train": scores.train,
        "test": scores.test,
        "confusion_x_diagonal": scores.confusion_x.diagonal_mass(),
        "confusion_y_diagonal": scores.confusion_y.diagonal_mass(),
    });
    write(&args.out.join("metrics.json"), serde_json::to_string_pretty(&metrics).expect("serializable") + "\n")?;
    write(&args.out.join("confusion_x.csv"), scores.confusion_x.to_csv())?;
    write(&args.out.join("confusion_y.csv"), scores.confusion_y.to_csv())?;
    let flat: Vec<Prediction> = preds.iter().map(|(_, p)| p.clone()).collect();
    write(&args.out.join("scatter.svg"), scatter_svg(&flat, Axis::X))?;
    if let Some(model_path) = &args.model {
        let model = load_model(model_path)?;
        let datasets = load_datasets(&args.datasets)?;
        let refs: Vec<&LabeledDataset> = datasets.iter().collect();
        match fisher_for_datasets(&refs, &model.config, &eval)? {
            Some(rows) => write(&args.out.join("fisher.csv"), fisher_csv(&rows))?,
            None => log::warn!("positions span fewer than two bins; fisher.csv skipped"),
        }
    }
    println!("{}", serde_json::to_string(&metrics).expect("serializable"));
    Ok(())
}

fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    let cfg = args.pipeline.experiment()?;
    let datasets = load_datasets(&cfg.datasets)?;
    let (train, test) = select_datasets(&datasets, &cfg.train, &cfg.test)?;
    let rows = match args.kind {
        SweepKind::Sensors => {
            let ids = match &cfg.pipeline.sensors {
                Some(ids) => ids.clone(),
                None => datasets[0].record().layout().ids(),
            };
            let base = PipelineConfig {
                sensors: None,
                ..cfg.pipeline.clone()
            };
            let rows = sweep_sensor_count(&base, &train, &test, &ids, &args.values, args.repeats, cfg.seed)?;
            write(&args.out, sweep_csv("sensors", &rows))?;
            rows
        }
        SweepKind::Training => {
            let rows = sweep_training_size(&cfg.pipeline, &train, &test, &args.values, args.repeats, cfg.seed)?;
            write(&args.out, sweep_csv("traversals", &rows))?;
            rows
        }
    };
    for r in rows {
        println!(
            "{:>3}: RMSE {:.4} ± {:.4} (x {:.4}, y {:.4})",
            r.value, r.mean.total, r.std.total, r.mean.x, r.mean.y
        );
    }
    Ok(())
}

fn pipeline_cmd(args: &PipelineArgs) -> Result<()> {
    let cfg = args.pipeline.experiment()?;
    let datasets = load_datasets(&cfg.datasets)?;
    let report = run_selected(&cfg, &datasets)?;
    write_run_dir(&report, &cfg, &args.out)?;
    let m = &report.metrics;
    println!(
        "D = {}, train RMSE {:.4} (x {:.4}, y {:.4})",
        m.dimension, m.train.raw.total, m.train.raw.x, m.train.raw.y
    );
    if let Some(t) = &m.test {
        println!("test RMSE {:.4} (x {:.4}, y {:.4})", t.raw.total, t.raw.x, t.raw.y);
        if let Some(f) = &t.filtered {
            println!("test RMSE with Kalman {:.4} (x {:.4}, y {:.4})", f.total, f.x, f.y);
        }
    }
    Ok(())
}

fn pca_report_cmd(args: &PcaReportArgs) -> Result<()> {
    let states = StateMatrix::load(&args.states)?;
    let pca = fit_pca(&states.states, args.center)?;
    let eta = pca.eta_curve()?;
    write(&args.out, eta_csv(&eta))?;
    for d in [10, 20, 40, 60] {
        if let Some(v) = eta.get(d - 1) {
            println!("eta({d}) = {v:.4}");
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Featurize(a) => featurize_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
        Command::PcaReport(a) => pca_report_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
