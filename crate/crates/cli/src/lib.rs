//! The `reid` command line: data generation, training, evaluation, threshold
//! calibration, two-view fusion and the review server.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reid_core::datagen::{gen_population, split_pairs, DatasetSplit, Observation, Side};
use reid_core::ensemble::{direction_accuracy, evaluate_ensemble, train_direction, EnsembleReport, FusionMode};
use reid_core::features::{featurize, Backbone, FeatureVector};
use reid_core::io::{load_gallery, load_observations, read_jsonl, save_observations, train_log_csv, Checkpoint};
use reid_core::metricnet::{train_staged, TrainConfig};
use reid_core::novelty::{calibrate_threshold, evaluate_open_set, OpenSetReport, ThresholdCalibration};
use reid_core::pipeline::{calibration_split, open_set_split, rank_open_set, side_seed, OpenSetSplit};
use reid_core::retrieval::{accuracy_curve, build_gallery, curve_csv, evaluate_queries, summarize, RetrievalMetrics};
use reid_service::{AppState, ServiceConfig, ServiceState};
use serde::{Deserialize, Serialize};

pub use config::{Preset, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "reid", version, about = "Metric-learning re-identification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    #[value(alias = "l")]
    Left,
    #[value(alias = "r")]
    Right,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Left => Side::Left,
            SideArg::Right => Side::Right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Metrics,
    Curve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Distance,
    Rank,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic population as observations.jsonl.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        individuals: Option<usize>,
        #[arg(long)]
        mean_obs: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long, default_value = "observations.jsonl")]
        out: PathBuf,
    },
    /// Train the embedding head (and direction classifier) for one side.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "left")]
        side: SideArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        stage1_epochs: Option<usize>,
        #[arg(long)]
        stage2_epochs: Option<usize>,
        /// Hold out this fraction of query individuals from training and the gallery.
        #[arg(long)]
        holdout_new: Option<f64>,
    },
    /// Rank the query split against a gallery built from the support split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "left")]
        side: SideArg,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        holdout_new: Option<f64>,
        /// What to print on stdout; all files are written regardless.
        #[arg(long, value_enum, default_value = "metrics")]
        report: ReportKind,
    },
    /// Pick the novelty threshold that maximizes F1 on a grid.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// JSONL of {"min_distance", "truly_new"} records; replaces --data/--model.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "left")]
        side: SideArg,
        #[arg(long)]
        holdout_new: Option<f64>,
        #[arg(long, default_value = "calibration.json")]
        out: PathBuf,
    },
    /// Evaluate each side and their fusion on paired queries.
    FuseEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        left_model: PathBuf,
        #[arg(long)]
        right_model: PathBuf,
        #[arg(long, value_enum, default_value = "distance")]
        mode: ModeArg,
        #[arg(long, default_value = "fusion.json")]
        out: PathBuf,
    },
    /// Run the review server.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Observations whose images back the gallery thumbnails.
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Journal directory; without it state lives in memory only.
        #[arg(long)]
        state_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = reid_service::api::DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long, default_value_t = reid_service::api::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Accepted image height and width; defaults to the model input size.
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long, default_value_t = 50)]
        snapshot_every: u64,
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

/// Parses `args` (program name first), runs the command and maps failures to exit codes.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    RunConfig::resolve(common.config.as_deref(), common.preset, common.seed)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    write_file(path, &text)?;
    Ok(text)
}

fn load_data(path: &Path) -> Result<Vec<Observation>, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("dataset {} does not exist", path.display())));
    }
    Ok(load_observations(path)?)
}

fn load_model(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read model {}: {e}", path.display())))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

/// Support/query split of one side; with a holdout, the held-out individuals
/// leave the support set and every query is labelled new or known.
struct SideData {
    split: DatasetSplit,
    open: Option<OpenSetSplit>,
}

impl SideData {
    /// Observations the model trains on and the gallery is built from.
    fn support(&self) -> &[Observation] {
        self.open.as_ref().map_or(&self.split.support, |o| &o.support)
    }

    /// Queries whose individual is in the gallery.
    fn known_queries(&self) -> Vec<Observation> {
        match &self.open {
            None => self.split.query.clone(),
            Some(o) => o.queries.iter().filter(|q| !q.1).map(|q| q.0.clone()).collect(),
        }
    }

    fn training_split(&self) -> DatasetSplit {
        DatasetSplit { support: self.support().to_vec(), query: self.known_queries(), split_fraction: self.split.split_fraction }
    }
}

fn side_data(obs: &[Observation], cfg: &RunConfig, side: Side) -> Result<SideData, CliError> {
    let (l, r) = split_pairs(obs, cfg.experiment.split_fraction, cfg.experiment.split_seed)?;
    let split = if side == Side::Left { l } else { r };
    // paired splits share their query individuals, so both sides hold out the same ones
    let open = if cfg.novelty.holdout_new > 0.0 { Some(open_set_split(&split, cfg.novelty.holdout_new, cfg.seed)?) } else { None };
    Ok(SideData { split, open })
}

#[derive(Serialize)]
struct GenReport<'a> {
    run_config: &'a RunConfig,
    n_observations: usize,
    n_individuals: usize,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    run_config: &'a RunConfig,
    side: Side,
    train_seed: u64,
    n_support: usize,
    n_support_individuals: usize,
    held_out_individuals: Vec<u32>,
    first_epoch_loss: Option<f64>,
    final_epoch_loss: Option<f64>,
    direction_validation_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_config: RunConfig,
    pub side: Side,
    pub n_gallery: usize,
    pub n_query: usize,
    pub metrics: RetrievalMetrics,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub run_config: RunConfig,
    pub n_calibration: usize,
    pub n_validation: usize,
    pub calibration: ThresholdCalibration,
    /// Open-set accuracy on the held-back queries at the chosen threshold.
    pub validation: Option<OpenSetReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FusionReport {
    pub run_config: RunConfig,
    pub mode: FusionMode,
    pub report: EnsembleReport,
}

/// One line of a `--scores` file.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub min_distance: f64,
    pub truly_new: bool,
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { common, individuals, mean_obs, image_size, out } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = individuals {
                cfg.population.n_individuals = n;
            }
            if let Some(m) = mean_obs {
                cfg.population.mean_obs_per_individual = m;
            }
            if let Some(s) = image_size {
                cfg.population.image_height = s;
                cfg.population.image_width = s;
            }
            cfg.paths.out = Some(out.clone());
            cfg.population.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let obs = gen_population(&cfg.population)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
            }
            save_observations(&out, &obs)?;
            let ids: std::collections::BTreeSet<u32> = obs.iter().map(|o| o.individual_id).collect();
            let report = GenReport { run_config: &cfg, n_observations: obs.len(), n_individuals: ids.len() };
            write_report(&out.with_extension("run.json"), &report)?;
            println!("wrote {} observations of {} individuals to {}", obs.len(), ids.len(), out.display());
            Ok(())
        }
        Command::Train { common, data, side, out_dir, stage1_epochs, stage2_epochs, holdout_new } => {
            let mut cfg = resolve(&common)?;
            if let Some(e) = stage1_epochs {
                cfg.experiment.train.stage1_epochs = e;
            }
            if let Some(e) = stage2_epochs {
                cfg.experiment.train.stage2_epochs = e;
            }
            if let Some(h) = holdout_new {
                cfg.novelty.holdout_new = h;
            }
            cfg.paths.dataset = Some(data.clone());
            cfg.paths.out = Some(out_dir.clone());
            cfg.validate()?;
            let obs = load_data(&data)?;
            let side: Side = side.into();
            let sd = side_data(&obs, &cfg, side)?;
            let train = TrainConfig { seed: side_seed(cfg.experiment.train.seed, side), ..cfg.experiment.train.clone() };
            let backbone = Backbone::new(cfg.experiment.backbone)?;
            let outcome = train_staged(&sd.training_split(), backbone, &train, &cfg.experiment.augment)?;

            let (both_l, both_r) = split_pairs(&obs, cfg.experiment.split_fraction, cfg.experiment.split_seed)?;
            let feats = |set: &[&[Observation]]| -> Result<(Vec<FeatureVector>, Vec<Side>), CliError> {
                let mut f = Vec::new();
                let mut l = Vec::new();
                for o in set.iter().flat_map(|s| s.iter()) {
                    f.push(featurize(&outcome.backbone, &o.image)?);
                    l.push(o.side);
                }
                Ok((f, l))
            };
            let (tf, tl) = feats(&[&both_l.support, &both_r.support])?;
            let (vf, vl) = feats(&[&both_l.query, &both_r.query])?;
            let direction = train_direction(&tf, &tl, cfg.seed)?;
            let dir_acc = direction_accuracy(&direction, &vf, &vl);

            let ckpt = Checkpoint { head: outcome.head, backbone: outcome.backbone, direction: Some(direction) };
            write_file(&out_dir.join("model.ckpt"), ckpt.to_bytes())?;
            write_file(&out_dir.join("train_log.csv"), train_log_csv(&outcome.log))?;
            let support_ids: std::collections::BTreeSet<u32> = sd.support().iter().map(|o| o.individual_id).collect();
            let report = TrainReport {
                run_config: &cfg,
                side,
                train_seed: train.seed,
                n_support: sd.support().len(),
                n_support_individuals: support_ids.len(),
                held_out_individuals: sd.open.as_ref().map_or_else(Vec::new, |o| o.held_out.iter().copied().collect()),
                first_epoch_loss: outcome.log.first().map(|r| r.mean_loss),
                final_epoch_loss: outcome.log.last().map(|r| r.mean_loss),
                direction_validation_accuracy: dir_acc,
            };
            write_report(&out_dir.join("train_report.json"), &report)?;
            println!(
                "trained {side:?} model on {} observations; loss {} -> {}; direction accuracy {dir_acc:.4}",
                report.n_support,
                report.first_epoch_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
                report.final_epoch_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
            );
            Ok(())
        }
        Command::Eval { common, data, model, side, out_dir, holdout_new, report } => {
            let mut cfg = resolve(&common)?;
            if let Some(h) = holdout_new {
                cfg.novelty.holdout_new = h;
            }
            cfg.paths.dataset = Some(data.clone());
            cfg.paths.model = Some(model.clone());
            cfg.paths.out = Some(out_dir.clone());
            cfg.validate()?;
            let obs = load_data(&data)?;
            let ckpt = load_model(&model)?;
            let side: Side = side.into();
            let sd = side_data(&obs, &cfg, side)?;
            let gallery = build_gallery(&ckpt.head, &ckpt.backbone, sd.support())?;
            let queries = sd.known_queries();
            let results = evaluate_queries(&ckpt.head, &ckpt.backbone, &queries, &gallery)?;
            let metrics = summarize(&results)?;
            let curve = accuracy_curve(&results)?;
            write_file(&out_dir.join("gallery.bin"), gallery.to_bytes())?;
            let csv = curve_csv(&curve);
            write_file(&out_dir.join("curve.csv"), &csv)?;
            let rep = EvalReport { run_config: cfg, side, n_gallery: gallery.len(), n_query: queries.len(), metrics };
            let text = write_report(&out_dir.join("metrics.json"), &rep)?;
            let mut out = std::io::stdout().lock();
            let _ = match report {
                ReportKind::Metrics => out.write_all(text.as_bytes()),
                ReportKind::Curve => out.write_all(csv.as_bytes()),
            };
            Ok(())
        }
        Command::Calibrate { common, scores, data, model, side, holdout_new, out } => {
            let mut cfg = resolve(&common)?;
            if let Some(h) = holdout_new {
                cfg.novelty.holdout_new = h;
            }
            cfg.paths.out = Some(out.clone());
            let report = if let Some(path) = scores {
                cfg.paths.scores = Some(path.clone());
                cfg.validate()?;
                let file = std::fs::File::open(&path).map_err(|e| CliError::Usage(format!("cannot read scores {}: {e}", path.display())))?;
                let scored: Vec<ScoredQuery> = read_jsonl(std::io::BufReader::new(file))?;
                let pairs: Vec<(f64, bool)> = scored.iter().map(|s| (s.min_distance, s.truly_new)).collect();
                if pairs.iter().any(|p| !p.0.is_finite() || p.0 < 0.0) {
                    return Err(CliError::Data("min_distance must be finite and >= 0".into()));
                }
                let calibration = calibrate_threshold(&pairs, cfg.novelty.grid)?;
                CalibrationReport { run_config: cfg, n_calibration: pairs.len(), n_validation: 0, calibration, validation: None }
            } else {
                let (Some(data), Some(model)) = (data, model) else {
                    return Err(CliError::Usage("calibrate needs --scores, or --data with --model".into()));
                };
                cfg.paths.dataset = Some(data.clone());
                cfg.paths.model = Some(model.clone());
                cfg.validate()?;
                if cfg.novelty.holdout_new <= 0.0 {
                    return Err(CliError::Usage("calibration needs new individuals: set --holdout-new > 0".into()));
                }
                let obs = load_data(&data)?;
                let ckpt = load_model(&model)?;
                let sd = side_data(&obs, &cfg, side.into())?;
                let open = sd.open.as_ref().expect("holdout > 0");
                let gallery = build_gallery(&ckpt.head, &ckpt.backbone, &open.support)?;
                let (calib, valid) = calibration_split(&open.queries, cfg.novelty.calib_fraction, cfg.seed)?;
                let calib_q = rank_open_set(&ckpt.head, &ckpt.backbone, &calib, &gallery)?;
                let valid_q = rank_open_set(&ckpt.head, &ckpt.backbone, &valid, &gallery)?;
                let scored: Vec<(f64, bool)> = calib_q.iter().map(|q| q.scored()).collect();
                let calibration = calibrate_threshold(&scored, cfg.novelty.grid)?;
                let validation = if valid_q.is_empty() { None } else { Some(evaluate_open_set(&valid_q, calibration.threshold)?) };
                CalibrationReport { run_config: cfg, n_calibration: calib_q.len(), n_validation: valid_q.len(), calibration, validation }
            };
            write_report(&out, &report)?;
            println!("threshold {} (F1 {:.4})", report.calibration.threshold, report.calibration.f1);
            Ok(())
        }
        Command::FuseEval { common, data, left_model, right_model, mode, out } => {
            let mut cfg = resolve(&common)?;
            cfg.experiment.fusion = match mode {
                ModeArg::Distance => FusionMode::Distance,
                ModeArg::Rank => FusionMode::Rank,
            };
            cfg.paths.dataset = Some(data.clone());
            cfg.paths.model = Some(left_model.clone());
            cfg.paths.right_model = Some(right_model.clone());
            cfg.paths.out = Some(out.clone());
            cfg.validate()?;
            let obs = load_data(&data)?;
            let (ls, rs) = split_pairs(&obs, cfg.experiment.split_fraction, cfg.experiment.split_seed)?;
            let run = |split: &DatasetSplit, path: &Path| -> Result<_, CliError> {
                let ckpt = load_model(path)?;
                let gallery = build_gallery(&ckpt.head, &ckpt.backbone, &split.support)?;
                Ok(evaluate_queries(&ckpt.head, &ckpt.backbone, &split.query, &gallery)?)
            };
            let left = run(&ls, &left_model)?;
            let right = run(&rs, &right_model)?;
            let report = evaluate_ensemble(&left, &right, cfg.experiment.fusion)?;
            let fusion = cfg.experiment.fusion;
            let text = write_report(&out, &FusionReport { run_config: cfg, mode: fusion, report })?;
            print!("{text}");
            Ok(())
        }
        Command::Serve { common, model, gallery, observations, state_dir, host, port, top_k, threshold, image_size, snapshot_every, cors_origin } => {
            let mut cfg = resolve(&common)?;
            cfg.paths.model = Some(model.clone());
            cfg.paths.gallery = Some(gallery.clone());
            cfg.paths.dataset = observations.clone();
            let ckpt = load_model(&model)?;
            if !gallery.is_file() {
                return Err(CliError::Usage(format!("gallery {} does not exist", gallery.display())));
            }
            let base = load_gallery(&gallery)?;
            let images: BTreeMap<u32, _> = match &observations {
                Some(p) => load_data(p)?.into_iter().filter(|o| base.contains_obs(o.obs_id)).map(|o| (o.obs_id, o.image)).collect(),
                None => BTreeMap::new(),
            };
            if top_k == 0 || !(threshold >= 0.0) {
                return Err(CliError::Usage("top-k must be >= 1 and threshold >= 0".into()));
            }
            let size = image_size.unwrap_or(ckpt.backbone.input_size());
            let svc = ServiceConfig { top_k, threshold, image_size: (size, size), snapshot_every, cors_origin };
            let app = match &state_dir {
                Some(dir) => AppState::open(dir, ckpt, svc, base, images)?,
                None => AppState::in_memory(ckpt, svc, ServiceState::new(base, images)),
            };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
            runtime.block_on(async move {
                let listener =
                    tokio::net::TcpListener::bind((host.as_str(), port)).await.map_err(|e| CliError::Usage(format!("cannot bind {host}:{port}: {e}")))?;
                let addr = listener.local_addr().map_err(|e| CliError::Usage(e.to_string()))?;
                println!("listening on http://{addr}");
                let _ = std::io::stdout().flush();
                reid_service::serve(listener, app).await.map_err(CliError::from)
            })
        }
    }
}
