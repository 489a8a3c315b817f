//! Experiment runner: configuration parsing and the per-(variant, seed) run loop.
//!
//! Configuration is a flat `key = value` file (`#` starts a comment) and/or
//! `--key value` flags; flags override file values. Keys are the flag names
//! without the leading dashes, `_` and `-` being interchangeable.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::continual::{Experiment, MemoryLogits, RunLog, TrainConfig, Variant};
use crate::ekfac::FisherMode;
use crate::error::{Error, Result};
use crate::metrics::{emit_results, percent, MetricsSummary, ResultPaths};
use crate::tasks::{
    load_mnist_idx, make_permuted, make_rotated, make_synthetic, rotation_schedule, SplitConfig, SyntheticDims,
    TaskSequence,
};

pub const OUT_ENV: &str = "ONGLAB_OUT";
pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const RUN_LOG_FILE: &str = "run_log.txt";
pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    Permuted,
    Rotated,
    Synthetic,
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "permuted" => Ok(Benchmark::Permuted),
            "rotated" => Ok(Benchmark::Rotated),
            "synthetic" => Ok(Benchmark::Synthetic),
            other => Err(format!("unknown benchmark `{other}` (permuted|rotated|synthetic)")),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Benchmark::Permuted => "permuted",
            Benchmark::Rotated => "rotated",
            Benchmark::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub tasks: usize,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Training settings shared by every run; `variant` and `seed` are
    /// overwritten per run.
    pub train: TrainConfig,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub out: PathBuf,
    pub rotation_step_degrees: f64,
    pub train_subset: Option<usize>,
    pub identity_first: bool,
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            benchmark: Benchmark::Permuted,
            tasks: 5,
            variants: vec![Variant::Ogd],
            seeds: vec![0],
            train: TrainConfig::default(),
            mnist_images: None,
            mnist_labels: None,
            out: std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("results")),
            rotation_step_degrees: 10.0,
            train_subset: None,
            identity_first: false,
            parallel: false,
        }
    }
}

const KEYS: &[&str] = &[
    "benchmark",
    "tasks",
    "variant",
    "seed",
    "epochs",
    "lr",
    "batch-size",
    "memory-per-task",
    "replay-size",
    "memory-logits",
    "hidden",
    "ekfac-damping",
    "ekfac-decay",
    "ekfac-refresh",
    "fisher-mode",
    "mnist-images",
    "mnist-labels",
    "out",
    "rotation-step-degrees",
    "train-subset",
    "identity-first",
    "parallel",
];

fn normalize_key(raw: &str) -> String {
    raw.trim().trim_start_matches("--").replace('_', "-").to_ascii_lowercase()
}

fn parse_value<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("expected {expected}, got `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s, expected))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::config(key, "needs at least one value"));
    }
    Ok(items)
}

fn parse_enum<T: FromStr<Err = String>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: String| Error::config(key, e))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::config(key, format!("expected a boolean, got `{other}`"))),
    }
}

fn positive(key: &str, value: &str) -> Result<usize> {
    let n: usize = parse_value(key, value, "a positive integer")?;
    if n == 0 {
        return Err(Error::config(key, "must be positive"));
    }
    Ok(n)
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, raw_key: &str, value: &str) -> Result<()> {
        let key = normalize_key(raw_key);
        let k = key.as_str();
        let v = value.trim();
        match k {
            "benchmark" => self.benchmark = parse_enum(k, v)?,
            "tasks" => self.tasks = positive(k, v)?,
            "variant" => self.variants = parse_list::<String>(k, v, "variant names")?
                .iter()
                .map(|s| parse_enum(k, s))
                .collect::<Result<_>>()?,
            "seed" => self.seeds = parse_list(k, v, "comma-separated integers")?,
            "epochs" => self.train.epochs_per_task = positive(k, v)?,
            "lr" => {
                let lr: f64 = parse_value(k, v, "a number")?;
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::config(k, "must be positive and finite"));
                }
                self.train.learning_rate = lr;
            }
            "batch-size" => self.train.batch_size = positive(k, v)?,
            "memory-per-task" => self.train.memory_per_task = parse_value(k, v, "a non-negative integer")?,
            "replay-size" => self.train.replay_sample_size = parse_value(k, v, "a non-negative integer")?,
            "memory-logits" => self.train.memory_logits = parse_enum::<MemoryLogits>(k, v)?,
            "hidden" => {
                self.train.hidden = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    parse_list::<usize>(k, v, "comma-separated widths")?
                };
                if self.train.hidden.contains(&0) {
                    return Err(Error::config(k, "widths must be positive"));
                }
            }
            "ekfac-damping" => self.train.ekfac.damping = parse_value(k, v, "a number")?,
            "ekfac-decay" => self.train.ekfac.decay = parse_value(k, v, "a number")?,
            "ekfac-refresh" => self.train.ekfac.refresh_period = positive(k, v)?,
            "fisher-mode" => self.train.ekfac.mode = parse_enum::<FisherMode>(k, v)?,
            "mnist-images" => self.mnist_images = Some(PathBuf::from(v)),
            "mnist-labels" => self.mnist_labels = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "rotation-step-degrees" => {
                let d: f64 = parse_value(k, v, "a number")?;
                if !d.is_finite() {
                    return Err(Error::config(k, "must be finite"));
                }
                self.rotation_step_degrees = d;
            }
            "train-subset" => self.train_subset = Some(positive(k, v)?),
            "identity-first" => self.identity_first = parse_bool(k, v)?,
            "parallel" => self.parallel = parse_bool(k, v)?,
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    /// Applies every setting of a `key = value` text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    line.split_whitespace().next().unwrap_or(line),
                    format!("line {}: expected `key = value`", n + 1),
                )
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Checks cross-field constraints and that input files exist.
    pub fn validate(&self) -> Result<()> {
        let mut probe = self.train.clone();
        probe.variant = self.variants[0];
        probe.validate()?;
        if self.benchmark != Benchmark::Synthetic {
            for (key, path) in [("mnist-images", &self.mnist_images), ("mnist-labels", &self.mnist_labels)] {
                match path {
                    None => {
                        return Err(Error::config(key, format!("required for the {} benchmark", self.benchmark)))
                    }
                    Some(p) if !p.is_file() => {
                        return Err(Error::config(key, format!("no such file: {}", p.display())))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    /// Fully resolved configuration in the same `key = value` syntax.
    pub fn to_config_text(&self) -> String {
        let t = &self.train;
        let join = |items: Vec<String>| items.join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("benchmark", self.benchmark.to_string());
        put("tasks", self.tasks.to_string());
        put("variant", join(self.variants.iter().map(|v| v.to_string()).collect()));
        put("seed", join(self.seeds.iter().map(|v| v.to_string()).collect()));
        put("epochs", t.epochs_per_task.to_string());
        put("lr", t.learning_rate.to_string());
        put("batch-size", t.batch_size.to_string());
        put("memory-per-task", t.memory_per_task.to_string());
        put("replay-size", t.replay_sample_size.to_string());
        put("memory-logits", t.memory_logits.to_string());
        put(
            "hidden",
            if t.hidden.is_empty() {
                "none".into()
            } else {
                join(t.hidden.iter().map(|v| v.to_string()).collect())
            },
        );
        put("ekfac-damping", t.ekfac.damping.to_string());
        put("ekfac-decay", t.ekfac.decay.to_string());
        put("ekfac-refresh", t.ekfac.refresh_period.to_string());
        put("fisher-mode", t.ekfac.mode.to_string());
        if let Some(p) = &self.mnist_images {
            put("mnist-images", p.display().to_string());
        }
        if let Some(p) = &self.mnist_labels {
            put("mnist-labels", p.display().to_string());
        }
        put("out", self.out.display().to_string());
        put("rotation-step-degrees", self.rotation_step_degrees.to_string());
        if let Some(n) = self.train_subset {
            put("train-subset", n.to_string());
        }
        put("identity-first", self.identity_first.to_string());
        put("parallel", self.parallel.to_string());
        s
    }

    /// Task sequence for one seed.
    pub fn build_tasks(&self, seed: u64) -> Result<TaskSequence> {
        let split = SplitConfig {
            seed,
            train_subset: self.train_subset,
        };
        match self.benchmark {
            Benchmark::Synthetic => make_synthetic(self.tasks, SyntheticDims::default(), seed),
            Benchmark::Permuted | Benchmark::Rotated => {
                let (images, labels) = match (&self.mnist_images, &self.mnist_labels) {
                    (Some(i), Some(l)) => (i, l),
                    _ => return Err(Error::config("mnist-images", "required for MNIST benchmarks")),
                };
                let base = load_mnist_idx(images, labels)?;
                if self.benchmark == Benchmark::Permuted {
                    make_permuted(base, self.tasks, seed, self.identity_first, split)
                } else {
                    make_rotated(base, &rotation_schedule(self.tasks, self.rotation_step_degrees), split)
                }
            }
        }
    }
}

/// Parses command-line arguments (without the program name). A `--config`
/// file is applied first, then every other flag in order.
pub fn parse_args(args: &[String]) -> Result<ExperimentConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut config_file: Option<String> = None;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Error::config(arg.as_str(), "expected a `--key value` flag"));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let value = it
                    .next()
                    .ok_or_else(|| Error::config(flag, "missing value"))?;
                (flag.to_string(), value.clone())
            }
        };
        if normalize_key(&key) == "config" {
            config_file = Some(value);
        } else {
            pairs.push((key, value));
        }
    }
    let mut config = ExperimentConfig::default();
    if let Some(path) = config_file {
        let text = fs::read_to_string(&path).map_err(|e| Error::config("config", format!("{path}: {e}")))?;
        config.apply_text(&text)?;
    }
    for (k, v) in pairs {
        config.set(&k, &v)?;
    }
    config.validate()?;
    Ok(config)
}

/// Every accepted configuration key.
pub fn known_keys() -> &'static [&'static str] {
    KEYS
}

/// Outcome of one (variant, seed) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub dir: PathBuf,
    pub summary: MetricsSummary,
    /// Error that stopped the run, if any.
    pub error: Option<String>,
}

pub fn run_dir(out: &Path, variant: Variant, seed: u64) -> PathBuf {
    out.join(format!("{}-seed{seed}", variant.slug()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run_one(config: &ExperimentConfig, tasks: &TaskSequence, variant: Variant, seed: u64) -> Result<RunOutcome> {
    let dir = run_dir(&config.out, variant, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let _ = fs::remove_file(dir.join(FAILED_MARKER));
    let mut echo = config.to_config_text();
    let _ = writeln!(echo, "# run: variant {variant} seed {seed}");
    write(&dir.join(CONFIG_ECHO_FILE), &echo)?;

    let train = TrainConfig {
        variant,
        seed,
        ..config.train.clone()
    };
    let (matrix, log, error) = match Experiment::new(tasks, train) {
        Ok(mut exp) => {
            let res = exp.run();
            let (m, log, _) = exp.into_parts();
            (m, log, res.err())
        }
        Err(e) => {
            let mut log = RunLog::new(variant, seed);
            log.aborted = Some(e.to_string());
            (Default::default(), log, Some(e))
        }
    };
    let summary = emit_results(&matrix, &log, &ResultPaths::in_dir(&dir))?;
    write(&dir.join(RUN_LOG_FILE), &log.to_text())?;
    let error = error.map(|e| format!("[{}] {e}", e.module_tag()));
    if let Some(msg) = &error {
        write(&dir.join(FAILED_MARKER), &format!("{msg}\n"))?;
    }
    Ok(RunOutcome {
        variant,
        seed,
        dir,
        summary,
        error,
    })
}

/// Runs every (variant, seed) pair, writing one result directory per run.
pub fn run(config: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    write(&config.out.join(CONFIG_ECHO_FILE), &config.to_config_text())?;

    let per_seed = |seed: u64| -> Result<Vec<RunOutcome>> {
        let tasks = config.build_tasks(seed)?;
        config
            .variants
            .iter()
            .map(|&v| run_one(config, &tasks, v, seed))
            .collect()
    };
    let mut outcomes = Vec::new();
    if config.parallel && config.seeds.len() > 1 {
        let results: Vec<Result<Vec<RunOutcome>>> = std::thread::scope(|s| {
            let handles: Vec<_> = config
                .seeds
                .iter()
                .map(|&seed| s.spawn(move || per_seed(seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("run thread panicked"))
                .collect()
        });
        for r in results {
            outcomes.extend(r?);
        }
    } else {
        for &seed in &config.seeds {
            outcomes.extend(per_seed(seed)?);
        }
    }
    Ok(outcomes)
}

/// One line per run: variant, seed, average accuracy and forgetting in percent.
pub fn format_summary(outcomes: &[RunOutcome]) -> String {
    let mut s = String::from("variant  seed  avg_accuracy  avg_forgetting  status\n");
    for o in outcomes {
        let acc = o.summary.average_accuracy.map_or("-".into(), percent);
        let fgt = o.summary.average_forgetting.map_or("-".into(), percent);
        let status = if o.error.is_some() { "FAILED" } else { "ok" };
        let _ = writeln!(s, "{:<8} {:>4}  {:>12}  {:>14}  {status}", o.variant.to_string(), o.seed, acc, fgt);
    }
    s
}

/// Mean and spread of a metric over seeds, per variant.
pub fn aggregate(outcomes: &[RunOutcome]) -> BTreeMap<String, (f64, f64, f64, f64)> {
    let mut groups: BTreeMap<String, Vec<&MetricsSummary>> = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.error.is_none()) {
        groups.entry(o.variant.to_string()).or_default().push(&o.summary);
    }
    let stats = |xs: Vec<f64>| {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    groups
        .into_iter()
        .map(|(k, runs)| {
            let (am, asd) = stats(runs.iter().filter_map(|r| r.average_accuracy).collect());
            let (fm, fsd) = stats(runs.iter().filter_map(|r| r.average_forgetting).collect());
            (k, (am, asd, fm, fsd))
        })
        .collect()
}
