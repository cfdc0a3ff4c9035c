//! `tas`: generate a synthetic corpus, train per fold, infer and evaluate.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use tas_core::config::RunConfig;
use tas_core::data::labels::count_runs;
use tas_core::data::store::write_features;
use tas_core::data::synthetic::video_id;
use tas_core::data::{generate_synthetic, make_folds, ClassMap, Dataset, VideoRecord};
use tas_core::metrics::{evaluate_corpus, format_table, EvalReport, Scores};
use tas_core::pipeline::{EpochRecord, FoldModel, FoldTrainer};
use tas_core::TasError;
use tas_tensor::Checkpoint;

#[derive(Parser, Debug)]
#[command(name = "tas", version, about = "Temporal action segmentation toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restricts train/infer/evaluate to one fold (1-based).
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// Worker threads for per-video inference and evaluation.
    #[arg(long, global = true)]
    device_threads: Option<usize>,
    /// Output directory (dataset root for `generate`, run root otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic corpus, class mapping and fold splits.
    Generate {
        /// Overrides the number of classes.
        #[arg(long)]
        classes: Option<usize>,
        /// Overrides the number of videos.
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Trains one model per fold and writes checkpoints and a JSON-lines log.
    Train {
        /// Continues from this checkpoint (requires --fold).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Writes raw and calibrated predictions for a fold's test videos.
    Infer {
        /// Comma-separated video ids; an empty value infers nothing.
        #[arg(long)]
        ids: Option<String>,
    },
    /// Scores predictions against ground truth.
    Evaluate {
        /// Directory of `<id>.txt` prediction files to score instead of the
        /// fold predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<TasError>() {
            return match e {
                TasError::Tensor(_) | TasError::Contract { .. } => "contract",
                TasError::Parse { .. } => "parse",
                TasError::Io { .. } => "io",
                TasError::Config(_) => "config",
                TasError::NonFinite(_) => "nonfinite",
            };
        }
        if cause.downcast_ref::<tas_tensor::TensorError>().is_some() {
            return "contract";
        }
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.category();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

#[derive(Debug)]
enum CliError {
    UnknownIds(Vec<String>),
    Evaluation(usize),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::UnknownIds(_) => "unknown-id",
            CliError::Evaluation(_) => "evaluation",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::UnknownIds(ids) => write!(f, "unknown video ids: {}", ids.join(",")),
            CliError::Evaluation(n) => write!(f, "{n} video(s) could not be scored; see the report"),
        }
    }
}

impl std::error::Error for CliError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", category(&e));
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    config: RunConfig,
    hash: String,
    fold: Option<usize>,
}

impl Ctx {
    fn dataset(&self) -> Result<Dataset> {
        Ok(Dataset::open(&self.config.paths.dataset)?)
    }

    fn folds(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let available = ds.fold_count();
        if available == 0 {
            bail!(TasError::Config(format!("{} has no fold splits", ds.root.display())));
        }
        match self.fold {
            Some(k) if k == 0 || k > available => {
                bail!(TasError::Config(format!("fold {k} outside 1..={available}")))
            }
            Some(k) => Ok(vec![k]),
            None => Ok((1..=available).collect()),
        }
    }

    fn fold_dir(&self, k: usize) -> PathBuf {
        self.config.paths.output.join(format!("fold{k}"))
    }

    fn checkpoint_dir(&self, k: usize) -> PathBuf {
        self.config.paths.checkpoints.join(format!("fold{k}"))
    }

    fn stamp(&self) -> Stamp {
        Stamp {
            seed: self.config.seed,
            config_hash: self.hash.clone(),
        }
    }
}

#[derive(Serialize)]
struct Stamp {
    seed: u64,
    config_hash: String,
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut config = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
        config.generator.seed = seed;
    }
    if let Command::Generate { classes, videos } = &cli.command {
        if let Some(c) = classes {
            config.generator.classes = *c;
        }
        if let Some(v) = videos {
            config.generator.videos = *v;
        }
        if let Some(out) = &g.out {
            config.paths.dataset = out.clone();
        }
    } else if let Some(out) = &g.out {
        config.paths.checkpoints = out.join("checkpoints");
        config.paths.output = out.clone();
    }
    config.validate()?;
    if let Some(n) = g.device_threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    let ctx = Ctx {
        hash: config.hash(),
        config,
        fold: g.fold,
    };
    match cli.command {
        Command::Generate { .. } => cmd_generate(&ctx),
        Command::Train { resume } => cmd_train(&ctx, resume.as_deref()),
        Command::Infer { ids } => cmd_infer(&ctx, ids.as_deref()),
        Command::Evaluate { predictions } => cmd_evaluate(&ctx, predictions.as_deref()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(ctx: &Ctx) -> Result<()> {
    let gen = &ctx.config.generator;
    let corpus = generate_synthetic(gen)?;
    let root = &ctx.config.paths.dataset;
    if root.join("groundTruth").exists() {
        fs::remove_dir_all(root.join("groundTruth")).context("clearing old ground truth")?;
        fs::remove_dir_all(root.join("features")).ok();
        fs::remove_dir_all(root.join("splits")).ok();
    }
    let ds = Dataset::create(root, ClassMap::workflow(gen.classes))?;
    for v in &corpus.videos {
        ds.save_video(v)?;
    }
    let ids: Vec<String> = (0..gen.videos).map(video_id).collect();
    ds.write_folds(&make_folds(&ids, ctx.config.folds, ctx.config.seed)?)?;
    #[derive(Serialize)]
    struct Meta<'a> {
        #[serde(flatten)]
        stamp: Stamp,
        videos: usize,
        classes: usize,
        frames: usize,
        segments: usize,
        generator: &'a tas_core::data::GeneratorConfig,
    }
    write_json(
        &root.join("meta.json"),
        &Meta {
            stamp: ctx.stamp(),
            videos: corpus.videos.len(),
            classes: gen.classes,
            frames: corpus.videos.iter().map(VideoRecord::len).sum(),
            segments: corpus.videos.iter().map(|v| count_runs(&v.labels)).sum(),
            generator: gen,
        },
    )?;
    println!("wrote {} videos to {}", corpus.videos.len(), root.display());
    Ok(())
}

fn load_videos(ds: &Dataset, ids: &[String], fps: f64) -> Result<Vec<VideoRecord>> {
    ids.par_iter()
        .map(|id| ds.load_video(id, fps).map_err(anyhow::Error::from))
        .collect()
}

fn cmd_train(ctx: &Ctx, resume: Option<&Path>) -> Result<()> {
    let ds = ctx.dataset()?;
    let folds = ctx.folds(&ds)?;
    if resume.is_some() && ctx.fold.is_none() {
        bail!(TasError::Config("--resume needs --fold".into()));
    }
    let resume = resume.map(Checkpoint::load).transpose()?;
    for k in folds {
        let split = ds.read_fold(k)?;
        let train = load_videos(&ds, &split.train, ctx.config.generator.fps)?;
        let dir = ctx.fold_dir(k);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let log_path = dir.join("train_log.jsonl");
        let mut lines = String::new();
        let mut keep = |r: &EpochRecord| {
            let line = serde_json::to_string(r).expect("record serialises");
            println!("{line}");
            lines.push_str(&line);
            lines.push('\n');
        };
        let trainer = FoldTrainer {
            config: &ctx.config,
            classes: &ds.classes,
            fold: k,
            checkpoint_dir: Some(ctx.checkpoint_dir(k)),
        };
        trainer.run(&train, resume.as_ref(), &mut keep)?;
        if resume.is_some() {
            let mut old = fs::read_to_string(&log_path).unwrap_or_default();
            old.push_str(&lines);
            lines = old;
        }
        fs::write(&log_path, lines).with_context(|| format!("writing {}", log_path.display()))?;
    }
    Ok(())
}

fn load_model(ctx: &Ctx, classes: &ClassMap, k: usize) -> Result<FoldModel> {
    let path = ctx.checkpoint_dir(k).join("final.ckpt");
    let ck = Checkpoint::load(&path).map_err(|e| TasError::Io {
        path: path.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    if ck.meta("config_hash") != Some(ctx.hash.as_str()) {
        log::warn!("{} was trained with a different configuration", path.display());
    }
    Ok(FoldModel::from_checkpoint(&ctx.config, classes, &ck)?)
}

fn cmd_infer(ctx: &Ctx, ids: Option<&str>) -> Result<()> {
    let ds = ctx.dataset()?;
    let known = ds.video_ids()?;
    let requested: Option<Vec<String>> =
        ids.map(|s| s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect());
    if let Some(req) = &requested {
        let unknown: Vec<String> = req.iter().filter(|id| !known.contains(id)).cloned().collect();
        if !unknown.is_empty() {
            bail!(CliError::UnknownIds(unknown));
        }
        if req.is_empty() {
            return Ok(());
        }
    }
    for k in ctx.folds(&ds)? {
        let ids = match &requested {
            Some(r) => r.clone(),
            None => ds.read_fold(k)?.test,
        };
        let model = load_model(ctx, &ds.classes, k)?;
        let videos = load_videos(&ds, &ids, ctx.config.generator.fps)?;
        let outputs: Vec<_> = videos
            .par_iter()
            .map(|v| {
                let f = model.features(v)?;
                let p = model.predict(&f)?;
                Ok::<_, TasError>((f, p))
            })
            .collect::<std::result::Result<_, _>>()?;
        if model.vfe.is_some() {
            // encoder features in the dataset format, for reuse as raw inputs
            let dir = ctx.fold_dir(k).join("features");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (v, (f, _)) in videos.iter().zip(&outputs) {
                write_features(&dir.join(format!("{}.bin", v.id)), f)?;
            }
        }
        let preds: Vec<_> = outputs.into_iter().map(|(_, p)| p).collect();
        let base = ctx.fold_dir(k).join("predictions");
        for kind in ["raw", "calibrated"] {
            fs::create_dir_all(base.join(kind)).with_context(|| format!("creating {}", base.display()))?;
            write_json(&base.join(kind).join("meta.json"), &ctx.stamp())?;
        }
        for (v, p) in videos.iter().zip(&preds) {
            fs::write(base.join("raw").join(format!("{}.txt", v.id)), ds.classes.labels_to_text(&p.raw))?;
            fs::write(
                base.join("calibrated").join(format!("{}.txt", v.id)),
                ds.classes.labels_to_text(&p.calibrated),
            )?;
        }
        println!("fold {k}: wrote predictions for {} videos to {}", videos.len(), base.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct VideoError {
    id: String,
    error: String,
}

#[derive(Serialize)]
struct ReportFile {
    #[serde(flatten)]
    stamp: Stamp,
    name: String,
    #[serde(flatten)]
    report: Option<EvalReport>,
    errors: Vec<VideoError>,
}

/// Scores every `<id>.txt` of `dir` that has ground truth.
fn score_dir(ds: &Dataset, dir: &Path, ids: &[String]) -> Result<(Option<EvalReport>, Vec<VideoError>)> {
    let results: Vec<_> = ids
        .par_iter()
        .map(|id| -> Result<(String, Vec<usize>, Vec<usize>)> {
            let path = dir.join(format!("{id}.txt"));
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let pred = ds.classes.parse_labels(&text, &path)?;
            let gt = ds.read_labels(id)?;
            if pred.len() != gt.len() {
                bail!("{} predicted frames but {} ground-truth frames", pred.len(), gt.len());
            }
            Ok((id.clone(), pred, gt))
        })
        .collect();
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for (id, r) in ids.iter().zip(results) {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => errors.push(VideoError {
                id: id.clone(),
                error: format!("{e:#}"),
            }),
        }
    }
    let pairs: Vec<(&str, &[usize], &[usize])> = ok.iter().map(|(i, p, g)| (i.as_str(), &p[..], &g[..])).collect();
    let report = if pairs.is_empty() { None } else { Some(evaluate_corpus(&pairs)?) };
    Ok((report, errors))
}

fn cmd_evaluate(ctx: &Ctx, predictions: Option<&Path>) -> Result<()> {
    let ds = ctx.dataset()?;
    let eval_dir = ctx.config.paths.output.join("eval");
    let mut rows: Vec<(String, Scores)> = Vec::new();
    let mut failures = 0;
    let mut emit = |name: String, dir: &Path, ids: &[String], rows: &mut Vec<(String, Scores)>| -> Result<()> {
        let (report, errors) = score_dir(&ds, dir, ids)?;
        failures += errors.len();
        if let Some(r) = &report {
            rows.push((name.clone(), r.corpus));
        }
        write_json(
            &eval_dir.join(format!("{name}.json")),
            &ReportFile {
                stamp: ctx.stamp(),
                name,
                report,
                errors,
            },
        )
    };

    if let Some(dir) = predictions {
        let mut ids: Vec<String> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok()?.file_name().into_string().ok()?.strip_suffix(".txt").map(String::from))
            .collect();
        ids.sort();
        emit("custom".into(), dir, &ids, &mut rows)?;
    } else {
        let folds = ctx.folds(&ds)?;
        let mut all: Vec<String> = Vec::new();
        for &k in &folds {
            let test = ds.read_fold(k)?.test;
            for kind in ["raw", "calibrated"] {
                let dir = ctx.fold_dir(k).join("predictions").join(kind);
                emit(format!("fold{k}_{kind}"), &dir, &test, &mut rows)?;
            }
            all.extend(test);
        }
        if folds.len() > 1 {
            for kind in ["raw", "calibrated"] {
                // Every video is tested in exactly one fold, so the pooled
                // corpus is the union of the fold test sets.
                let staged = eval_dir.join(format!(".pooled_{kind}"));
                fs::create_dir_all(&staged)?;
                for &k in &folds {
                    let dir = ctx.fold_dir(k).join("predictions").join(kind);
                    for id in ds.read_fold(k)?.test {
                        let src = dir.join(format!("{id}.txt"));
                        if src.exists() {
                            fs::copy(&src, staged.join(format!("{id}.txt")))?;
                        }
                    }
                }
                emit(format!("all_{kind}"), &staged, &all, &mut rows)?;
                fs::remove_dir_all(&staged)?;
            }
        }
    }
    let table = format_table(&rows);
    fs::create_dir_all(&eval_dir)?;
    fs::write(eval_dir.join("report.txt"), &table)?;
    print!("{table}");
    if failures > 0 {
        return Err(anyhow!(CliError::Evaluation(failures)));
    }
    Ok(())
}
