//! The `did` command line.
//!
//! Settings resolve in three layers: built-in defaults, then an optional
//! `--config` file of `key = value` lines, then explicit flags. Every key a
//! config file accepts is listed in [`RunConfig::set`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::dataset::{generate_synthetic, LabeledImage};
use crate::error::{DidError, Result};
use crate::io;
use crate::metrics::{compute_metrics, MetricMode, MetricsReport};
use crate::pipeline::PipelineConfig;
use crate::rollout::spatial_prior;
use crate::semantic::HeadKernel;
use crate::training::{initial_head, precompute_views, predict_dataset, train_head_cached, TrainConfig};
use crate::vit::{forward, init_weights, BackboneWeights};

/// Decision threshold for the `all` metric mode.
pub const SCORE_THRESHOLD: f64 = 0.5;

/// Everything a subcommand may need, after defaults, file and flags are merged.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub mode: MetricMode,
    pub count: usize,
    /// Synthetic image side; falls back to the backbone's image size.
    pub size: Option<usize>,
    pub weights: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            mode: MetricMode::All,
            count: 100,
            size: None,
            weights: None,
            head: None,
            dataset: None,
            image: None,
            out: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DidError::Config(format!("invalid value '{value}' for '{key}'")))
}

fn path(value: &str) -> Result<Option<PathBuf>> {
    if value.is_empty() {
        return Err(DidError::Config("paths must be non-empty".into()));
    }
    Ok(Some(PathBuf::from(value)))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let vit = &mut self.pipeline.vit;
        match key {
            "lambda" => self.pipeline.lambda = parse(key, value)?,
            "topn" | "top_n" => self.pipeline.top_n = parse(key, value)?,
            "strategy" => self.pipeline.strategy = value.parse()?,
            "order" => self.pipeline.order = value.parse()?,
            "selection_seed" => self.pipeline.selection_seed = parse(key, value)?,
            "image_size" => vit.image_size = parse(key, value)?,
            "patch_size" => vit.patch_size = parse(key, value)?,
            "dim" => vit.dim = parse(key, value)?,
            "layers" => vit.layers = parse(key, value)?,
            "heads" => vit.heads = parse(key, value)?,
            "mlp_dim" => vit.mlp_dim = parse(key, value)?,
            "num_classes" => vit.num_classes = parse(key, value)?,
            "base_lr" | "lr" => self.train.base_lr = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "steps" | "total_steps" => self.train.total_steps = parse(key, value)?,
            "warmup_fraction" => self.train.warmup_fraction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "count" => self.count = parse(key, value)?,
            "size" => self.size = Some(parse(key, value)?),
            "weights" => self.weights = path(value)?,
            "head" => self.head = path(value)?,
            "dataset" => self.dataset = path(value)?,
            "image" => self.image = path(value)?,
            "out" => self.out = path(value)?,
            other => return Err(DidError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in io::parse_key_values(&fs::read_to_string(path)?)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    fn require<'a>(&self, field: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| DidError::Config(format!("--{flag} is required")))
    }

    /// Loads `--weights`, or builds the seeded backbone when none is given.
    fn backbone(&self) -> Result<BackboneWeights> {
        match &self.weights {
            Some(p) => io::load_weights(p),
            None => init_weights(&self.pipeline.vit, self.seed),
        }
    }

    /// Loads `--head`, or the seeded untrained head when none is given.
    fn category_head(&self, weights: &BackboneWeights) -> Result<HeadKernel> {
        match &self.head {
            Some(p) => io::load_head(p),
            None => Ok(initial_head(weights, self.seed)),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "did", version, about = "Instance-aware multi-label recognition on a small vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct PipeArgs {
    /// Mask threshold as a fraction of the map maximum, in (0, 1).
    #[arg(long)]
    lambda: Option<String>,
    /// Number of classes that receive a local view (0 disables them).
    #[arg(long)]
    topn: Option<String>,
    /// hadamard, sum or identity.
    #[arg(long)]
    strategy: Option<String>,
    /// descending, ascending or random.
    #[arg(long)]
    order: Option<String>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    warmup_fraction: Option<String>,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// `key = value` file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write seeded backbone weights.
    InitWeights {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate a synthetic labelled dataset directory.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        count: Option<String>,
        #[arg(long)]
        size: Option<String>,
    },
    /// Train the category head over the frozen backbone.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        pipe: PipeArgs,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        weights: Option<String>,
    },
    /// Predict one image and write scores and proposals as JSON.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        pipe: PipeArgs,
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        head: Option<String>,
    },
    /// Report single-view and fused metrics over a dataset.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        pipe: PipeArgs,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        head: Option<String>,
        /// all or top3.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Sweep one pipeline setting and write a CSV of metrics per value.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        pipe: PipeArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_parser = ["lambda", "topn", "strategy", "order"])]
        axis: String,
        /// `start:stop:step` (inclusive) or a comma-separated list.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Write the attention-rollout spatial prior of an image as a PGM.
    RolloutDump {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        image: Option<String>,
        #[arg(long)]
        weights: Option<String>,
    },
}

type Pairs<'a> = Vec<(&'static str, &'a Option<String>)>;

impl PipeArgs {
    fn pairs(&self) -> Pairs<'_> {
        vec![
            ("lambda", &self.lambda),
            ("topn", &self.topn),
            ("strategy", &self.strategy),
            ("order", &self.order),
        ]
    }
}

impl TrainArgs {
    fn pairs(&self) -> Pairs<'_> {
        vec![
            ("steps", &self.steps),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("warmup_fraction", &self.warmup_fraction),
        ]
    }
}

fn resolve(common: &CommonArgs, pairs: Pairs<'_>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let own = [("seed", &common.seed), ("out", &common.out)];
    for (key, value) in own.into_iter().chain(pairs) {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

/// Runs the command line. `argv[0]` is the program name, as in
/// `std::env::args`. Returns the process exit code: 0 on success, 2 for
/// usage errors and 1 for failures while running.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}\n\n{}", Cli::command().render_usage());
            1
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::InitWeights { common } => {
            let cfg = resolve(&common, vec![])?;
            let out = cfg.require(&cfg.out, "out")?;
            io::save_weights(&init_weights(&cfg.pipeline.vit, cfg.seed)?, out)
        }
        Command::GenData { common, count, size } => {
            let cfg = resolve(&common, vec![("count", &count), ("size", &size)])?;
            let out = cfg.require(&cfg.out, "out")?;
            let size = cfg.size.unwrap_or(cfg.pipeline.vit.image_size);
            io::save_dataset(&generate_synthetic(cfg.seed, cfg.count, size)?, out)
        }
        Command::Train {
            common,
            train,
            pipe,
            dataset,
            weights,
        } => {
            let mut pairs = train.pairs();
            pairs.extend(pipe.pairs());
            pairs.extend([("dataset", &dataset), ("weights", &weights)]);
            let cfg = resolve(&common, pairs)?;
            let out = cfg.require(&cfg.out, "out")?;
            let (data, backbone) = load_inputs(&cfg)?;
            let views = precompute_views(&data, &backbone)?;
            let outcome = train_head_cached(&data, &views, &backbone, &cfg.train, &cfg.pipeline, cfg.seed)?;
            if let Some(last) = outcome.batch_losses.last() {
                println!("steps={} final_batch_loss={last:.6}", outcome.batch_losses.len());
            }
            io::save_head(&outcome.head, out)
        }
        Command::Predict {
            common,
            pipe,
            image,
            weights,
            head,
        } => {
            let mut pairs = pipe.pairs();
            pairs.extend([("image", &image), ("weights", &weights), ("head", &head)]);
            let cfg = resolve(&common, pairs)?;
            let img = io::read_ppm(cfg.require(&cfg.image, "image")?)?;
            let backbone = cfg.backbone()?;
            let head = cfg.category_head(&backbone)?;
            let result = crate::pipeline::predict(&img, &backbone, &head, &cfg.pipeline)?;
            match &cfg.out {
                Some(p) => io::write_proposals_json(&result, p),
                None => {
                    print!("{}", io::proposals_json(&result));
                    Ok(())
                }
            }
        }
        Command::Eval {
            common,
            pipe,
            dataset,
            weights,
            head,
            mode,
        } => {
            let mut pairs = pipe.pairs();
            pairs.extend([
                ("dataset", &dataset),
                ("weights", &weights),
                ("head", &head),
                ("mode", &mode),
            ]);
            let cfg = resolve(&common, pairs)?;
            let (data, backbone) = load_inputs(&cfg)?;
            let head = cfg.category_head(&backbone)?;
            let (single, fused) = evaluate(&data, None, &backbone, &head, &cfg)?;
            let report = format!("single {single}\nfused {fused}\n");
            emit(&cfg, &report)
        }
        Command::Ablate {
            common,
            pipe,
            train,
            axis,
            grid,
            dataset,
            weights,
            head,
            mode,
        } => {
            let mut pairs = pipe.pairs();
            pairs.extend(train.pairs());
            pairs.extend([
                ("dataset", &dataset),
                ("weights", &weights),
                ("head", &head),
                ("mode", &mode),
            ]);
            let cfg = resolve(&common, pairs)?;
            let points = parse_grid(&axis, grid.as_deref().unwrap_or(default_grid(&axis)))?;
            let csv = ablate(&cfg, &axis, &points)?;
            emit(&cfg, &csv)
        }
        Command::RolloutDump { common, image, weights } => {
            let cfg = resolve(&common, vec![("image", &image), ("weights", &weights)])?;
            let out = cfg.require(&cfg.out, "out")?;
            let img = io::read_ppm(cfg.require(&cfg.image, "image")?)?;
            let backbone = cfg.backbone()?;
            let prior = spatial_prior(&forward(&img, &backbone)?.attention)?;
            io::write_pgm(&prior, out)
        }
    }
}

fn emit(cfg: &RunConfig, text: &str) -> Result<()> {
    match &cfg.out {
        Some(p) => fs::write(p, text).map_err(DidError::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_inputs(cfg: &RunConfig) -> Result<(Vec<LabeledImage>, BackboneWeights)> {
    let data = io::load_dataset(cfg.require(&cfg.dataset, "dataset")?)?;
    if data.is_empty() {
        return Err(DidError::Config("the dataset is empty".into()));
    }
    Ok((data, cfg.backbone()?))
}

/// Single-view (global) and fused metrics of one pipeline configuration.
fn evaluate(
    data: &[LabeledImage],
    views: Option<&[crate::pipeline::ViewFeatures]>,
    backbone: &BackboneWeights,
    head: &HeadKernel,
    cfg: &RunConfig,
) -> Result<(MetricsReport, MetricsReport)> {
    let results = predict_dataset(data, views, backbone, head, &cfg.pipeline)?;
    let labels: Vec<Vec<bool>> = data.iter().map(|d| d.labels.clone()).collect();
    let global: Vec<Vec<f64>> = results.iter().map(|r| r.global_scores.clone()).collect();
    let fused: Vec<Vec<f64>> = results.into_iter().map(|r| r.fused_scores).collect();
    Ok((
        compute_metrics(&global, &labels, cfg.mode, SCORE_THRESHOLD)?,
        compute_metrics(&fused, &labels, cfg.mode, SCORE_THRESHOLD)?,
    ))
}

pub fn default_grid(axis: &str) -> &'static str {
    match axis {
        "lambda" => "0.2:0.8:0.1",
        "topn" => "0:4:1",
        "strategy" => "baseline,hadamard,sum,identity",
        _ => "descending,ascending,random",
    }
}

/// Expands a grid into its points. `start:stop:step` is inclusive of `stop`
/// up to rounding; anything else is read as a comma-separated list.
pub fn parse_grid(axis: &str, grid: &str) -> Result<Vec<String>> {
    let fields: Vec<&str> = grid.split(':').collect();
    if fields.len() == 3 && matches!(axis, "lambda" | "topn") {
        let [start, stop, step] = [fields[0], fields[1], fields[2]].map(|f| parse::<f64>("grid", f.trim()));
        let (start, stop, step) = (start?, stop?, step?);
        if step.is_nan() || step <= 0.0 || stop < start {
            return Err(DidError::Config(format!("grid '{grid}' needs step > 0 and stop >= start")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        return Ok((0..count)
            .map(|i| {
                let v = ((start + i as f64 * step) * 1e9).round() / 1e9;
                format!("{v}")
            })
            .collect());
    }
    let points: Vec<String> = grid
        .split(',')
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect();
    if points.is_empty() {
        return Err(DidError::Config("the grid is empty".into()));
    }
    Ok(points)
}

/// Applies one grid point to a copy of the configuration. On the strategy
/// axis `baseline` means no local views at all.
fn point_config(base: &RunConfig, axis: &str, point: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match (axis, point) {
        ("strategy", "baseline") => cfg.pipeline.top_n = 0,
        _ => cfg.set(axis, point)?,
    }
    cfg.pipeline.validate()?;
    Ok(cfg)
}

/// Evaluates every grid point with one head: `--head` when given, otherwise
/// a head trained once on the dataset with the configured settings.
fn ablate(cfg: &RunConfig, axis: &str, points: &[String]) -> Result<String> {
    let configs = points
        .iter()
        .map(|p| point_config(cfg, axis, p))
        .collect::<Result<Vec<_>>>()?;
    let (data, backbone) = load_inputs(cfg)?;
    let views = precompute_views(&data, &backbone)?;
    let head = match &cfg.head {
        Some(p) => io::load_head(p)?,
        None => train_head_cached(&data, &views, &backbone, &cfg.train, &cfg.pipeline, cfg.seed)?.head,
    };
    let mut csv = String::from("axis_value,mAP,OF1,CF1\n");
    for (point, pc) in points.iter().zip(&configs) {
        let (_, fused) = evaluate(&data, Some(&views), &backbone, &head, pc)?;
        let _ = writeln!(csv, "{point},{:.6},{:.6},{:.6}", fused.map, fused.of1, fused.cf1);
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion() {
        let g = parse_grid("lambda", "0.2:0.8:0.1").unwrap();
        assert_eq!(g, ["0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8"]);
        assert_eq!(parse_grid("topn", "0:4:2").unwrap(), ["0", "2", "4"]);
        assert_eq!(parse_grid("lambda", "0.5, 0.7").unwrap(), ["0.5", "0.7"]);
        assert_eq!(parse_grid("strategy", default_grid("strategy")).unwrap().len(), 4);
        assert!(parse_grid("lambda", "0.8:0.2:0.1").is_err());
        assert!(parse_grid("lambda", "0.2:0.8:0").is_err());
    }

    #[test]
    fn config_layers() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "lambda = 0.4\ntopn = 1\nstrategy = sum\nseed = 9\n").unwrap();
        let common = CommonArgs {
            config: Some(file),
            seed: Some("3".into()),
            out: None,
        };
        let topn = Some("2".to_string());
        let cfg = resolve(&common, vec![("topn", &topn)]).unwrap();
        assert_eq!(cfg.pipeline.lambda, 0.4);
        assert_eq!(cfg.pipeline.top_n, 2);
        assert_eq!(cfg.pipeline.strategy, crate::reconstraint::Strategy::Sum);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("lambda", "abc").is_err());
        assert!(cfg.set("strategy", "max").is_err());
        assert!(cfg.set("colour", "red").is_err());
        assert!(cfg.set("out", "").is_err());
        assert!(point_config(&cfg, "lambda", "1.5").is_err());
    }

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_nonzero() {
        assert_eq!(run_cli(["did", "predict", "--bogus", "1"]), 2);
        assert_eq!(run_cli(["did", "frobnicate"]), 2);
        assert_eq!(run_cli(["did", "ablate", "--axis", "colour"]), 2);
        assert_eq!(run_cli(["did", "predict", "--image", "/nonexistent/x.ppm"]), 1);
        assert_eq!(run_cli(["did", "init-weights"]), 1);
    }
}
