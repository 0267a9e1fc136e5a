use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ghvit::data::{load_idx_pair, BatchPlan, DatasetSplit};
use ghvit::gradcheck::run_suite;
use ghvit::model::{build_variant, DatasetDims, ModelConfig};
use ghvit::tensor::fault;
use ghvit::train::{accuracy, initial_checkpoint, predict, resume, Checkpoint, Dataset, TrainError, TrainSettings, MAGIC};

use crate::config::{RunConfig, Split, DATA_DIR_ENV};
use crate::metrics::{format_metrics, parse_metrics, to_csv};

pub const CHECKPOINT_FILE: &str = "checkpoint.ghvt";
pub const METRICS_FILE: &str = "metrics.txt";

/// Command-line flags for `train`, applied over the config file in this
/// order: named flags, then `--set` assignments.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub config: Option<PathBuf>,
    pub variant: Option<String>,
    pub dataset: Option<String>,
    pub epochs: Option<String>,
    pub seed: Option<String>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

/// Reads the config file (if any) and applies every override.
pub fn effective_config(opts: &TrainOptions, env_data_dir: Option<&str>) -> Result<RunConfig> {
    let mut run = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            RunConfig::parse(&text, &path.display().to_string())?
        }
        None => RunConfig::default(),
    };
    let flags = [
        ("variant", opts.variant.clone()),
        ("dataset", opts.dataset.clone()),
        ("epochs", opts.epochs.clone()),
        ("seed", opts.seed.clone()),
        ("out", opts.out.as_ref().map(|p| p.display().to_string())),
    ];
    for (key, value) in flags {
        if let Some(value) = value {
            run.set(key, &value, &format!("--{key}"))?;
        }
    }
    for assignment in &opts.set {
        run.apply_override(assignment)?;
    }
    run.resolve_paths(env_data_dir);
    Ok(run)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(
        path.is_file(),
        "{what} file not found: {} (set data_dir, the {DATA_DIR_ENV} environment variable, or the explicit path key)",
        path.display()
    );
    Ok(())
}

fn load_split(images: &Path, labels: &Path, limit: Option<usize>) -> Result<DatasetSplit> {
    let split = load_idx_pair(images, labels)?;
    Ok(match limit {
        Some(n) => split.head(n),
        None => split,
    })
}

/// Writes through a sibling temporary file so a crash never leaves a
/// half-written artifact behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn save_run(dir: &Path, checkpoint: &Checkpoint) -> std::io::Result<()> {
    write_atomic(&dir.join(CHECKPOINT_FILE), &checkpoint.to_bytes())?;
    write_atomic(&dir.join(METRICS_FILE), format_metrics(&checkpoint.history).as_bytes())
}

pub fn percent(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

pub fn train(opts: &TrainOptions, env_data_dir: Option<&str>, stdout: &mut dyn Write) -> Result<()> {
    let run = effective_config(opts, env_data_dir)?;
    let mut paths = Vec::new();
    for split in [Split::Train, Split::Test] {
        let (images, labels) = run.split_paths(split).expect("paths are resolved");
        require_file(images, &format!("{} images", split.name()))?;
        require_file(labels, &format!("{} labels", split.name()))?;
        paths.push((images, labels, run.limit(split)));
    }
    let out_dir = run.out.clone().expect("out is resolved");
    fs::create_dir_all(&out_dir).with_context(|| format!("cannot create output directory {}", out_dir.display()))?;

    let data = Dataset {
        train: load_split(paths[0].0, paths[0].1, paths[0].2)?,
        test: load_split(paths[1].0, paths[1].1, paths[1].2)?,
    };
    let (h, w, channels) = data.train.image_dims();
    let dims = DatasetDims {
        height: h,
        width: w,
        channels,
        classes: run.num_classes,
    };
    let config = build_variant(run.variant.name(), dims)?.with_size(run.embed_dim, run.layers, run.heads)?;
    let settings = TrainSettings {
        epochs: run.epochs,
        plan: BatchPlan::new(run.batch_size, run.seed, run.drop_last)?,
        adam: run.adam(),
        seed: run.seed,
    };
    // The output location is not part of the run's identity.
    let echo: Vec<(String, String)> = run
        .entries()
        .into_iter()
        .filter(|(k, _)| *k != "out")
        .map(|(k, v)| (k.to_string(), v))
        .collect();

    writeln!(
        stdout,
        "{} on {}: {} train / {} test images, {} parameters, {} epochs",
        config.variant,
        run.dataset,
        data.train.len(),
        data.test.len(),
        config.param_count(),
        run.epochs
    )?;
    let start = initial_checkpoint(&config, &settings, &echo)?;
    save_run(&out_dir, &start).with_context(|| format!("cannot write to {}", out_dir.display()))?;

    let outcome = resume(start, &data, settings.epochs, &settings.plan, |c| {
        let m = c.history.last().expect("an epoch just finished");
        let io = |source| ghvit::Error::Io {
            path: out_dir.clone(),
            source,
        };
        save_run(&out_dir, c).map_err(io)?;
        writeln!(
            stdout,
            "epoch {}: train_loss {:.6} test_accuracy {}",
            m.epoch,
            m.train_loss,
            percent(m.test_accuracy)
        )
        .map_err(io)
    });
    match outcome {
        Ok(_) => {
            writeln!(stdout, "wrote {}", out_dir.join(CHECKPOINT_FILE).display())?;
            Ok(())
        }
        Err(TrainError::NonFinite {
            epoch,
            batch,
            last_good,
        }) => {
            save_run(&out_dir, &last_good)?;
            bail!(
                "non-finite loss at epoch {epoch}, batch {batch}; kept the checkpoint from epoch {} in {}",
                last_good.epoch,
                out_dir.display()
            )
        }
        Err(TrainError::Core(e)) => Err(e.into()),
    }
}

/// Data files and example limit for evaluating `checkpoint` on a split.
fn eval_source(checkpoint: &Checkpoint, opts: &EvalOptions, env_data_dir: Option<&str>) -> Result<(PathBuf, PathBuf, Option<usize>)> {
    let echoed = |key: &str| checkpoint.config.get(key).filter(|v| !v.is_empty()).cloned();
    let split = opts.split.name();
    let limit = match echoed(&format!("{split}_limit")) {
        Some(v) => Some(v.parse().with_context(|| format!("checkpoint has a bad {split}_limit `{v}`"))?),
        None => None,
    };
    if let (Some(i), Some(l)) = (&opts.images, &opts.labels) {
        return Ok((i.clone(), l.clone(), limit));
    }
    ensure!(
        opts.images.is_none() && opts.labels.is_none(),
        "--images and --labels must be given together"
    );
    if opts.dataset.is_none() && opts.data_dir.is_none() {
        if let (Some(i), Some(l)) = (echoed(&format!("{split}_images")), echoed(&format!("{split}_labels"))) {
            return Ok((i.into(), l.into(), limit));
        }
    }
    let mut run = RunConfig::default();
    if let Some(dataset) = opts.dataset.clone().or_else(|| echoed("dataset")) {
        run.set("dataset", &dataset, "--dataset")?;
    }
    run.data_dir = opts.data_dir.clone().or_else(|| echoed("data_dir").map(PathBuf::from));
    run.resolve_paths(env_data_dir);
    let (i, l) = run.split_paths(opts.split).expect("paths are resolved");
    Ok((i.to_path_buf(), l.to_path_buf(), limit))
}

/// Accuracy of a saved checkpoint; returns the fraction it printed.
pub fn eval(opts: &EvalOptions, env_data_dir: Option<&str>, stdout: &mut dyn Write) -> Result<f64> {
    let checkpoint = Checkpoint::load(&opts.checkpoint)?;
    let config: ModelConfig = checkpoint.model_config()?;
    let (images, labels, limit) = eval_source(&checkpoint, opts, env_data_dir)?;
    require_file(&images, "images")?;
    require_file(&labels, "labels")?;
    let split = load_split(&images, &labels, limit)?;
    ensure!(!split.is_empty(), "{} holds no examples", images.display());
    let predictions = predict(&config, &checkpoint.params, &split)?;
    let acc = accuracy(&predictions, split.labels());
    let hits = predictions.iter().zip(split.labels()).filter(|(p, l)| p == l).count();
    writeln!(
        stdout,
        "{} accuracy: {} ({hits}/{})",
        opts.split.name(),
        percent(acc),
        split.len()
    )?;
    Ok(acc)
}

/// Runs the finite-difference suite, optionally with a corrupted backward
/// pass for `fault_op`.
pub fn gradcheck(fault_op: Option<&str>, stdout: &mut dyn Write) -> Result<()> {
    if let Some(op) = fault_op {
        fault::inject(op);
    }
    let results = run_suite();
    fault::clear();
    let results = results?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        writeln!(
            stdout,
            "{:<22} worst relative error {:.3e} (tolerance {:.0e}) {verdict}",
            r.name, r.worst_rel_error, r.tolerance
        )?;
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    ensure!(failed.is_empty(), "gradient check failed for: {}", failed.join(", "));
    writeln!(stdout, "all {} gradient checks passed", results.len())?;
    Ok(())
}

/// Converts a metrics file, or the history inside a checkpoint, to CSV.
pub fn metrics_export(input: &Path, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let bytes = fs::read(input).with_context(|| format!("cannot read {}", input.display()))?;
    let history = if bytes.starts_with(MAGIC) {
        Checkpoint::from_bytes(&bytes)?.history
    } else {
        let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", input.display()))?;
        parse_metrics(&text).with_context(|| format!("malformed metrics file {}", input.display()))?
    };
    fs::write(out, to_csv(&history)).with_context(|| format!("cannot write {}", out.display()))?;
    writeln!(stdout, "wrote {} rows to {}", history.len(), out.display())?;
    Ok(())
}
