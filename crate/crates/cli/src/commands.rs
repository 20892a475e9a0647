use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use crowdda::checkpoint::{counter_from_archive, network_archive, refiner_from_archive, Archive};
use crowdda::data::{
    decode_image, filter_samples, load_dataset, prepare_all, toy_sample, write_dataset, DatasetIndex, DensityMap,
    Domain, LabeledSample,
};
use crowdda::metrics::{self, evaluate, evaluation_map, DensityPredictor, EvalReport};
use crowdda::networks::{Counter, Refiner};
use crowdda::training::{coarse_map, refiner_pipeline, write_log_csv, LogRow, Mode, Trainer};
use crowdda::{Error, Result, Tensor};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::plot::{self, Cell};

/// Environment variable that makes experiment artifacts independent of the
/// wall clock.
pub const DETERMINISTIC_ENV: &str = "CROWDDA_DETERMINISTIC";

const GRID_ROWS: usize = 4;
const GRID_ZOOM: u32 = 3;

#[derive(Parser, Debug)]
#[command(name = "crowdda", version, about = "Unsupervised domain adaptation for crowd density counting")]
pub struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Replace existing output instead of refusing to run.
    #[arg(long, global = true)]
    pub force: bool,

    /// Dataset root for gen-toy, experiment root for the other commands.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the procedural source and target datasets.
    GenToy {
        /// Training images per domain.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Supervised training on the source set (the NoAdpt baseline).
    Train,
    /// Adversarial adaptation from the source set to the target images.
    Adapt,
    /// Train the map refiner on the counter's source test predictions.
    RefineTrain(NetArgs),
    /// Refine the counter's predictions on a dataset.
    Refine(NetArgs),
    /// Score a counter, optionally with a refiner, on a labelled dataset.
    Evaluate {
        #[command(flatten)]
        nets: NetArgs,
        /// Also write per-sample scores as CSV.
        #[arg(long)]
        per_sample: bool,
    },
}

#[derive(Args, Debug, Default)]
pub struct NetArgs {
    /// Counter checkpoint; overrides checkpoints.counter.
    #[arg(long)]
    pub counter: Option<PathBuf>,
    /// Refiner checkpoint; overrides checkpoints.refiner.
    #[arg(long)]
    pub refiner: Option<PathBuf>,
    /// Dataset to process instead of data.target_test.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenToy { .. } => "gen-toy",
            Command::Train => "train",
            Command::Adapt => "adapt",
            Command::RefineTrain(_) => "refine-train",
            Command::Refine(_) => "refine",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

/// Load the config file (or defaults) and apply command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        match cli.command {
            Command::GenToy { .. } => cfg.toy.out = out.clone(),
            _ => cfg.out = out.clone(),
        }
    }
    if let Command::GenToy { n: Some(n) } = cli.command {
        cfg.toy.n = n;
    }
    cfg.resolve()
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenToy { .. } => cmd_gen_toy(&cfg, cli.force),
        Command::Train => cmd_fit(&cfg, cli.force, Mode::Supervised),
        Command::Adapt => cmd_fit(&cfg, cli.force, Mode::Adapt),
        Command::RefineTrain(nets) => cmd_refine_train(&cfg, cli.force, nets),
        Command::Refine(nets) => cmd_refine(&cfg, cli.force, nets),
        Command::Evaluate { nets, per_sample } => cmd_evaluate(&cfg, cli.force, nets, *per_sample),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn is_non_empty_dir(path: &Path) -> Result<bool> {
    Ok(path.is_dir() && fs::read_dir(path)?.next().is_some())
}

const TOY_SPLITS: [(&str, Domain, bool); 4] = [
    ("source", Domain::Source, false),
    ("target", Domain::Target, false),
    ("source_test", Domain::Source, true),
    ("target_test", Domain::Target, true),
];

/// Write `source`, `target`, `source_test` and `target_test` datasets. Test
/// images continue the training image indices, so the splits are disjoint.
pub fn cmd_gen_toy(cfg: &ExperimentConfig, force: bool) -> Result<PathBuf> {
    let toy = &cfg.toy;
    let root = &toy.out;
    if is_non_empty_dir(root)? {
        if !force {
            return Err(usage(format!("{} is not empty; pass --force to overwrite", root.display())));
        }
        for (name, _, _) in TOY_SPLITS {
            if root.join(name).exists() {
                fs::remove_dir_all(root.join(name))?;
            }
        }
    }
    for (name, domain, test) in TOY_SPLITS {
        let range = if test { toy.n..toy.n + toy.n_test } else { 0..toy.n };
        let samples: Vec<_> =
            range.map(|i| toy_sample(cfg.seed, domain, i, (toy.height, toy.width), &toy.layout, &toy.gap)).collect();
        write_dataset(root.join(name), &samples)?;
    }
    log::info!("wrote {} + {} images per domain to {}", toy.n, toy.n_test, root.display());
    Ok(root.clone())
}

/// Create `<out>/<timestamp>-<hash>-<command>` and echo the config into it.
/// The hash covers the config and `args`.
fn experiment_dir(cfg: &ExperimentConfig, command: &str, args: &str, force: bool) -> Result<PathBuf> {
    let hash = cfg.hash_with(args);
    let name = if deterministic() {
        format!("{hash}-{command}")
    } else {
        format!("{}-{hash}-{command}", chrono::Utc::now().format("%Y%m%dT%H%M%S"))
    };
    let dir = cfg.out.join(name);
    if dir.exists() {
        if !force {
            return Err(usage(format!("{} exists; pass --force to replace it", dir.display())));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json serialises"))?;
    Ok(())
}

fn load_labeled(cfg: &ExperimentConfig, path: &Path, filter: bool) -> Result<Vec<LabeledSample>> {
    let mut samples = load_dataset(path)?;
    if filter {
        if let Some(rule) = cfg.data.filter_rule()? {
            samples = filter_samples(samples, &rule);
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset { path: path.to_path_buf(), message: "no usable samples".into() });
    }
    prepare_all(&samples, cfg.data.sigma, cfg.models.counter.output_scale())
}

/// Images only; annotations are not read.
fn load_images(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let index = DatasetIndex::open(path)?;
    if index.is_empty() {
        return Err(Error::Dataset { path: path.to_path_buf(), message: "no images".into() });
    }
    index
        .names()
        .iter()
        .map(|n| Ok((n.clone(), decode_image(&path.join("images").join(format!("{n}.png")))?)))
        .collect()
}

fn has_annotations(path: &Path) -> bool {
    path.join("ann").is_dir()
}

fn checkpoint_path(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let path = flag
        .clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| usage(format!("no {what} checkpoint: pass --{what} or set checkpoints.{what}")))?;
    if !path.is_file() {
        return Err(usage(format!("{what} checkpoint {} does not exist", path.display())));
    }
    Ok(path)
}

fn load_counter(cfg: &ExperimentConfig, nets: &NetArgs) -> Result<Counter> {
    counter_from_archive(&Archive::load(&checkpoint_path(&nets.counter, &cfg.checkpoints.counter, "counter")?)?)
}

fn load_refiner(cfg: &ExperimentConfig, nets: &NetArgs) -> Result<Refiner> {
    refiner_from_archive(&Archive::load(&checkpoint_path(&nets.refiner, &cfg.checkpoints.refiner, "refiner")?)?)
}

fn optional_refiner(cfg: &ExperimentConfig, nets: &NetArgs) -> Result<Option<Refiner>> {
    if nets.refiner.is_some() || cfg.checkpoints.refiner.is_some() {
        load_refiner(cfg, nets).map(Some)
    } else {
        Ok(None)
    }
}

fn series(log: &[LogRow], f: impl Fn(&LogRow) -> Option<f64>) -> Vec<(f64, f64)> {
    log.iter().filter_map(|r| f(r).map(|v| (r.step as f64, v))).collect()
}

fn training_curves(path: &Path, log: &[LogRow]) -> Result<()> {
    let panels: Vec<Vec<Vec<(f64, f64)>>> = vec![
        vec![series(log, |r| Some(r.loss_total))],
        vec![series(log, |r| Some(r.loss_cnt)), series(log, |r| r.val_loss)],
        vec![series(log, |r| r.loss_adv_feature), series(log, |r| r.loss_adv_map)],
        vec![series(log, |r| r.loss_d_feature), series(log, |r| r.loss_d_map)],
        vec![series(log, |r| r.loss_spr)],
        vec![series(log, |r| r.val_mae), series(log, |r| r.val_mse)],
    ];
    let panels: Vec<_> = panels.into_iter().filter(|p| p.iter().any(|s| !s.is_empty())).collect();
    plot::loss_curves(path, &panels)
}

/// Image, ground truth, prediction and, with a refiner, refined prediction
/// for the first few samples.
fn sample_grid(path: &Path, counter: &Counter, refiner: Option<&Refiner>, samples: &[LabeledSample]) -> Result<()> {
    let mut maps = Vec::new();
    for s in samples.iter().take(GRID_ROWS) {
        let pred = counter.predict(&s.image)?;
        let coarse = evaluation_map(&pred, &s.gt_full, None)?;
        let refined = refiner.map(|r| evaluation_map(&pred, &s.gt_full, Some(r))).transpose()?;
        maps.push((s, coarse, refined));
    }
    let rows: Vec<Vec<Cell<'_>>> = maps
        .iter()
        .map(|(s, coarse, refined)| {
            let max = s.gt_full.max().max(metrics::MIN_DYNAMIC_RANGE);
            let mut row = vec![Cell::Image(&s.image), Cell::Map(&s.gt_full, max), Cell::Map(coarse, max)];
            if let Some(r) = refined {
                row.push(Cell::Map(r, max));
            }
            row
        })
        .collect();
    plot::map_grid(path, &rows, GRID_ZOOM)
}

fn write_report(dir: &Path, report: &EvalReport, per_sample: bool) -> Result<()> {
    fs::write(dir.join("report.json"), report.to_json())?;
    if per_sample {
        report.write_csv(fs::File::create(dir.join("samples.csv"))?)?;
    }
    Ok(())
}

fn report_summary(report: &EvalReport) -> serde_json::Value {
    json!({
        "mae": report.mae,
        "mse": report.mse,
        "psnr_db": if report.psnr_db.is_finite() { Some(report.psnr_db) } else { None },
        "ssim": report.ssim,
        "n_samples": report.n_samples,
    })
}

/// `train` and `adapt`: run the trainer, then write the metrics log,
/// checkpoints, the target test report and plots.
pub fn cmd_fit(cfg: &ExperimentConfig, force: bool, mode: Mode) -> Result<PathBuf> {
    let source = load_labeled(cfg, &cfg.data.source, true)?;
    let target: Vec<Tensor> = if mode == Mode::Adapt {
        load_images(&cfg.data.target)?.into_iter().map(|(_, t)| t).collect()
    } else {
        Vec::new()
    };
    let test = if has_annotations(&cfg.data.target_test) {
        Some(load_labeled(cfg, &cfg.data.target_test, false)?)
    } else {
        None
    };
    let command = if mode == Mode::Adapt { "adapt" } else { "train" };
    let trainer = Trainer::new(mode, &cfg.models, &cfg.train, &source, &target)?;
    let dir = experiment_dir(cfg, command, "", force)?;

    let mut log = Vec::new();
    let outcome = trainer.run_logged(&mut log);
    write_log_csv(&log, fs::File::create(dir.join("metrics.csv"))?)?;
    let state = outcome?;
    state.to_archive(&cfg.models, &cfg.train).save(&dir.join("last.ckpt"))?;
    let best = state.best_counter();
    network_archive("counter", &best).save(&dir.join("best.ckpt"))?;
    training_curves(&dir.join("loss_curves.png"), &log)?;

    let last_val = log.iter().rev().find(|r| r.val_mae.is_some());
    let mut summary = json!({
        "command": command,
        "steps": state.step,
        "stopped_early": state.stopped,
        "best_step": state.best_step,
        "best_val_loss": if state.best_val.is_finite() { Some(state.best_val) } else { None },
        "final_val_mae": last_val.and_then(|r| r.val_mae),
        "final_val_mse": last_val.and_then(|r| r.val_mse),
    });
    if let Some(test) = &test {
        let report = evaluate(&best, test, None)?;
        write_report(&dir, &report, false)?;
        summary["target_test"] = report_summary(&report);
        sample_grid(&dir.join("maps.png"), &best, None, test)?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!("{command} finished after {} steps in {}", state.step, dir.display());
    Ok(dir)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(serde::Serialize)]
struct CountRow<'a> {
    name: &'a str,
    coarse_count: f64,
    refined_count: f64,
}

fn mean_psnr(pairs: impl Iterator<Item = (DensityMap, DensityMap)>) -> Result<Option<f64>> {
    let (mut total, mut n) = (0.0, 0usize);
    for (pred, gt) in pairs {
        total += metrics::psnr(&pred, &gt)?;
        n += 1;
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// Train a refiner on the source test set and report PSNR before and after
/// refinement on its held-out part and on the target set.
pub fn cmd_refine_train(cfg: &ExperimentConfig, force: bool, nets: &NetArgs) -> Result<PathBuf> {
    let counter = load_counter(cfg, nets)?;
    let source_test = load_labeled(cfg, &cfg.data.source_test, true)?;
    let target_path = nets.dataset.clone().unwrap_or_else(|| cfg.data.target_test.clone());
    let target = load_images(&target_path)?;
    let target_coarse = target.iter().map(|(_, img)| coarse_map(&counter, img)).collect::<Result<Vec<_>>>()?;
    let dir = experiment_dir(cfg, "refine-train", &format!("{nets:?}"), force)?;
    let outcome = refiner_pipeline(&source_test, &counter, &target_coarse, &cfg.models.refiner, &cfg.train)?;
    let refiner = &outcome.training.refiner;
    network_archive("refiner", refiner).save(&dir.join("refiner.ckpt"))?;
    write_csv(&dir.join("refiner_metrics.csv"), &outcome.training.log)?;
    let log = &outcome.training.log;
    let train_loss: Vec<_> = log.iter().map(|r| (r.step as f64, r.loss)).collect();
    let val_loss: Vec<_> = log.iter().filter_map(|r| r.val_loss.map(|v| (r.step as f64, v))).collect();
    plot::loss_curves(&dir.join("loss_curves.png"), &[vec![train_loss, val_loss]])?;

    let mut summary = json!({
        "command": "refine-train",
        "best_step": outcome.training.best_step,
        "best_val_loss": outcome.training.best_val,
        "split": outcome.split,
        "source_test_psnr_coarse": outcome.test_psnr_coarse,
        "source_test_psnr_refined": outcome.test_psnr_refined,
    });
    if has_annotations(&target_path) {
        let labeled = load_labeled(cfg, &target_path, false)?;
        let gts = || labeled.iter().map(|s| s.gt_full.clone());
        summary["target_psnr_coarse"] = json!(mean_psnr(target_coarse.iter().map(DensityMap::clamped).zip(gts()))?);
        summary["target_psnr_refined"] = json!(mean_psnr(outcome.refined.iter().cloned().zip(gts()))?);
        sample_grid(&dir.join("maps.png"), &counter, Some(refiner), &labeled)?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!("refiner trained in {}", dir.display());
    Ok(dir)
}

/// Refine every map of a dataset and store the refined maps.
pub fn cmd_refine(cfg: &ExperimentConfig, force: bool, nets: &NetArgs) -> Result<PathBuf> {
    let counter = load_counter(cfg, nets)?;
    let refiner = load_refiner(cfg, nets)?;
    let path = nets.dataset.clone().unwrap_or_else(|| cfg.data.target_test.clone());
    let images = load_images(&path)?;
    let dir = experiment_dir(cfg, "refine", &format!("{nets:?}"), force)?;

    let mut maps = Archive::new(json!({ "format": "crowdda-maps", "version": 1 }));
    let mut counts = Vec::new();
    for (name, img) in &images {
        let coarse = coarse_map(&counter, img)?;
        let refined = refiner.refiner_forward(&coarse)?.clamped();
        counts.push(CountRow { name, coarse_count: coarse.clamped().sum(), refined_count: refined.sum() });
        maps.tensors.insert(name.clone(), refined.to_nchw());
    }
    write_csv(&dir.join("counts.csv"), counts)?;
    maps.save(&dir.join("refined_maps.ckpt"))?;

    let mut summary = json!({ "command": "refine", "n_images": images.len() });
    if has_annotations(&path) {
        let labeled = load_labeled(cfg, &path, false)?;
        let report = evaluate(&counter, &labeled, Some(&refiner))?;
        write_report(&dir, &report, false)?;
        summary["refined"] = report_summary(&report);
        summary["coarse"] = report_summary(&evaluate(&counter, &labeled, None)?);
        sample_grid(&dir.join("maps.png"), &counter, Some(&refiner), &labeled)?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!("refined {} maps into {}", images.len(), dir.display());
    Ok(dir)
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, force: bool, nets: &NetArgs, per_sample: bool) -> Result<PathBuf> {
    let counter = load_counter(cfg, nets)?;
    let refiner = optional_refiner(cfg, nets)?;
    let path = nets.dataset.clone().unwrap_or_else(|| cfg.data.target_test.clone());
    let labeled = load_labeled(cfg, &path, false)?;
    let dir = experiment_dir(cfg, "evaluate", &format!("{nets:?}"), force)?;
    let report = evaluate(&counter, &labeled, refiner.as_ref())?;
    write_report(&dir, &report, per_sample)?;
    sample_grid(&dir.join("maps.png"), &counter, refiner.as_ref(), &labeled)?;
    write_json(
        &dir.join("summary.json"),
        &json!({ "command": "evaluate", "dataset": path, "refined": refiner.is_some(), "report": report_summary(&report) }),
    )?;
    log::info!("MAE {:.3}, MSE {:.3} on {} samples", report.mae, report.mse, report.n_samples);
    Ok(dir)
}

/// Process exit code for an error: 2 usage, 3 data, 4 numerical abort.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::NumericalAbort { .. } => 4,
        Error::Shape(_) | Error::Checkpoint(_) => 3,
        e if e.is_data_error() => 3,
        _ => 1,
    }
}

impl Cli {
    pub fn command_name(&self) -> &'static str {
        self.command.name()
    }
}
