//! Sequential training over a task sequence with the SGD / OGD / OGD+ / ONG /
//! ONG+ update rules.
//!
//! Every training step follows the same path: compute the minibatch gradient,
//! precondition it with the EKFAC inverse Fisher (ONG variants), project it
//! off the stored memory directions (all but SGD), then step. After each task
//! [`finalize_task`] adds logit-gradient directions for a sample of the task's
//! examples (plus a replay sample of earlier tasks for the `+` variants).

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ekfac::{EkfacConfig, FisherApprox, FisherMode};
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;
use crate::model::{sample_labels, Batch, GradientVec, ModelParams};
use crate::projection::{descent_check, DescentCheck, OrthoBasis};
use crate::tasks::{Dataset, TaskSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Sgd,
    Ogd,
    OgdPlus,
    Ong,
    OngPlus,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Sgd,
        Variant::Ogd,
        Variant::OgdPlus,
        Variant::Ong,
        Variant::OngPlus,
    ];

    pub fn preconditions(self) -> bool {
        matches!(self, Variant::Ong | Variant::OngPlus)
    }

    pub fn uses_sample_memory(self) -> bool {
        matches!(self, Variant::OgdPlus | Variant::OngPlus)
    }

    pub fn projects(self) -> bool {
        self != Variant::Sgd
    }

    /// Filesystem-friendly name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Sgd => "sgd",
            Variant::Ogd => "ogd",
            Variant::OgdPlus => "ogd-plus",
            Variant::Ong => "ong",
            Variant::OngPlus => "ong-plus",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Sgd => "SGD",
            Variant::Ogd => "OGD",
            Variant::OgdPlus => "OGD+",
            Variant::Ong => "ONG",
            Variant::OngPlus => "ONG+",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Variant::Sgd),
            "ogd" => Ok(Variant::Ogd),
            "ogd+" | "ogdplus" | "ogd-plus" => Ok(Variant::OgdPlus),
            "ong" => Ok(Variant::Ong),
            "ong+" | "ongplus" | "ong-plus" => Ok(Variant::OngPlus),
            other => Err(format!("unknown variant `{other}` (sgd|ogd|ogd+|ong|ong+)")),
        }
    }
}

/// Which logit gradients become memory directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryLogits {
    /// Only the logit of the example's true class.
    TrueClass,
    /// Every class logit.
    AllClasses,
}

impl FromStr for MemoryLogits {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "true-class" | "true" => Ok(MemoryLogits::TrueClass),
            "all" | "all-classes" => Ok(MemoryLogits::AllClasses),
            other => Err(format!("unknown memory logits `{other}` (true-class|all)")),
        }
    }
}

impl fmt::Display for MemoryLogits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryLogits::TrueClass => "true-class",
            MemoryLogits::AllClasses => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub memory_per_task: usize,
    /// Size of the replay sample `H` drawn from the sample memory.
    pub replay_sample_size: usize,
    pub seed: u64,
    pub ekfac: EkfacConfig,
    /// Hidden-layer widths; empty for a linear model.
    pub hidden: Vec<usize>,
    pub memory_logits: MemoryLogits,
    /// FIFO cap on stored directions; `None` keeps all.
    pub basis_capacity: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Ogd,
            learning_rate: 1e-3,
            epochs_per_task: 3,
            batch_size: 32,
            memory_per_task: 100,
            replay_sample_size: 100,
            seed: 0,
            ekfac: EkfacConfig::default(),
            hidden: vec![100, 100],
            memory_logits: MemoryLogits::TrueClass,
            basis_capacity: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if self.epochs_per_task == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch-size", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        self.ekfac.validate()
    }

    pub fn dims(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryExample {
    pub x: Vec<f64>,
    pub y: usize,
    /// Zero-based index of the task the example came from.
    pub task: usize,
}

/// Raw examples kept from earlier tasks (`+` variants).
#[derive(Debug, Clone, Default)]
pub struct SampleMemory {
    examples: Vec<MemoryExample>,
}

impl SampleMemory {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[MemoryExample] {
        &self.examples
    }

    pub fn push(&mut self, example: MemoryExample) {
        self.examples.push(example);
    }

    /// Uniform sample of up to `n` stored examples, without replacement.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<&MemoryExample> {
        let n = n.min(self.len());
        index::sample(rng, self.len(), n)
            .into_iter()
            .map(|i| &self.examples[i])
            .collect()
    }
}

/// Touch counters, used to check that each variant only uses its own parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub steps: u64,
    pub tasks_finalized: u64,
    pub fisher_updates: u64,
    pub eigen_refreshes: u64,
    pub preconditions: u64,
    pub projections: u64,
    pub directions_offered: u64,
    pub directions_added: u64,
    pub descent_failures: u64,
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: ModelParams,
    /// Present for ONG variants only.
    pub fisher: Option<FisherApprox>,
    pub basis: OrthoBasis,
    pub sample_memory: SampleMemory,
    pub counters: Counters,
    /// Zero-based index of the current task.
    pub task: usize,
    pub epoch: usize,
    shuffle_rng: ChaCha8Rng,
    fisher_rng: ChaCha8Rng,
    memory_rng: ChaCha8Rng,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl TrainerState {
    pub fn new(params: ModelParams, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let fisher = if config.variant.preconditions() {
            Some(FisherApprox::new(&params, config.ekfac)?)
        } else {
            None
        };
        let dim = params.param_count();
        let basis = match config.basis_capacity {
            Some(cap) => OrthoBasis::with_capacity(dim, cap),
            None => OrthoBasis::new(dim),
        };
        Ok(TrainerState {
            params,
            fisher,
            basis,
            sample_memory: SampleMemory::default(),
            counters: Counters::default(),
            task: 0,
            epoch: 0,
            shuffle_rng: stream_rng(config.seed, 1),
            fisher_rng: stream_rng(config.seed, 2),
            memory_rng: stream_rng(config.seed, 3),
        })
    }

    /// Kaiming-initialized network sized for the given data.
    pub fn for_data(input_dim: usize, classes: usize, config: &TrainConfig) -> Result<Self> {
        let params = ModelParams::init_kaiming(&config.dims(input_dim, classes), config.seed)?;
        Self::new(params, config)
    }

    fn precondition(&mut self, g: &GradientVec) -> Result<GradientVec> {
        let fisher = self.fisher.as_ref().ok_or_else(|| Error::State("no Fisher state".into()))?;
        self.counters.preconditions += 1;
        fisher.precondition(g)
    }
}

/// Diagnostics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// `‖g‖` of the raw minibatch gradient.
    pub grad_norm: f64,
    /// `‖F⁻¹g‖` (equals `grad_norm` without preconditioning).
    pub preconditioned_norm: f64,
    /// `‖g̃‖`, the norm of the applied direction.
    pub update_norm: f64,
    /// Present whenever the direction was projected.
    pub descent: Option<DescentCheck>,
}

/// One optimizer step on `batch`.
pub fn train_step(state: &mut TrainerState, batch: &Batch, config: &TrainConfig) -> Result<StepReport> {
    let cache = state.params.forward(&batch.x)?;
    let back = state.params.backward(&cache, &batch.y)?;
    if !back.loss.is_finite() {
        return Err(Error::numerical("non-finite loss"));
    }
    let grad_norm = back.grad.norm();
    let mut direction = back.grad;

    if let Some(fisher) = state.fisher.as_mut() {
        let stats = match fisher.mode() {
            FisherMode::True => {
                let sampled = sample_labels(&cache, &mut state.fisher_rng);
                state.params.backward(&cache, &sampled)?.stats
            }
            FisherMode::Empirical => back.stats,
        };
        fisher.update_factors(&stats)?;
        let period = config.ekfac.refresh_period as u64;
        if !fisher.is_ready() || state.counters.fisher_updates % period == 0 {
            fisher.refresh_eigenbasis()?;
            state.counters.eigen_refreshes += 1;
        }
        fisher.update_scalings(&stats)?;
        state.counters.fisher_updates += 1;
        direction = state.precondition(&direction)?;
    }
    let preconditioned_norm = direction.norm();

    let (update, descent) = if config.variant.projects() {
        let projected = state.basis.project_out(&direction)?;
        state.counters.projections += 1;
        let check = descent_check(&direction, &projected);
        if !check.ok || check.inner < 0.0 {
            state.counters.descent_failures += 1;
        }
        (projected, Some(check))
    } else {
        (direction, None)
    };
    if !update.is_finite() {
        return Err(Error::numerical("non-finite update direction"));
    }
    state.params.apply_update(config.learning_rate, &update)?;
    state.counters.steps += 1;
    Ok(StepReport {
        loss: back.loss,
        grad_norm,
        preconditioned_norm,
        update_norm: update.norm(),
        descent,
    })
}

/// What [`finalize_task`] stored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FinalizeReport {
    pub task_examples: usize,
    pub replay_examples: usize,
    pub directions_offered: usize,
    pub directions_added: usize,
    pub basis_size: usize,
    pub sample_memory_size: usize,
}

/// Adds memory directions for the task just trained on `task_train`.
pub fn finalize_task(state: &mut TrainerState, task_train: &Dataset, config: &TrainConfig) -> Result<FinalizeReport> {
    if task_train.is_empty() {
        return Err(Error::structural("finalize_task: empty task data"));
    }
    state.counters.tasks_finalized += 1;
    let mut report = FinalizeReport {
        basis_size: state.basis.len(),
        sample_memory_size: state.sample_memory.len(),
        ..FinalizeReport::default()
    };
    if !config.variant.projects() || config.memory_per_task == 0 && !config.variant.uses_sample_memory() {
        return Ok(report);
    }

    let picked: Vec<usize> = index::sample(
        &mut state.memory_rng,
        task_train.len(),
        config.memory_per_task.min(task_train.len()),
    )
    .into_vec();
    let mut examples: Vec<(Vec<f64>, usize)> = picked
        .iter()
        .map(|&i| {
            let (x, y) = task_train.example(i);
            (x.to_vec(), y)
        })
        .collect();
    report.task_examples = examples.len();
    if config.variant.uses_sample_memory() {
        let replay: Vec<(Vec<f64>, usize)> = state
            .sample_memory
            .sample(config.replay_sample_size, &mut state.memory_rng)
            .into_iter()
            .map(|e| (e.x.clone(), e.y))
            .collect();
        report.replay_examples = replay.len();
        examples.extend(replay);
    }
    if examples.is_empty() {
        return Ok(report);
    }

    if let Some(fisher) = state.fisher.as_mut() {
        if fisher.layers().iter().all(|l| l.factor_updates() > 0) {
            fisher.refresh_eigenbasis()?;
            state.counters.eigen_refreshes += 1;
        }
    }

    let classes = state.params.num_classes();
    for (x, y) in &examples {
        let logits: Vec<usize> = match config.memory_logits {
            MemoryLogits::TrueClass => vec![*y],
            MemoryLogits::AllClasses => (0..classes).collect(),
        };
        for class in logits {
            let mut g = state.params.logit_gradient(x, class)?;
            if state.fisher.is_some() {
                g = state.precondition(&g)?;
            }
            let u = state.basis.project_out(&g)?;
            state.counters.projections += 1;
            report.directions_offered += 1;
            state.counters.directions_offered += 1;
            if state.basis.add_direction(u)? {
                report.directions_added += 1;
                state.counters.directions_added += 1;
            }
        }
    }

    if config.variant.uses_sample_memory() {
        for &i in &picked {
            let (x, y) = task_train.example(i);
            state.sample_memory.push(MemoryExample {
                x: x.to_vec(),
                y,
                task: state.task,
            });
        }
    }
    report.basis_size = state.basis.len();
    report.sample_memory_size = state.sample_memory.len();
    Ok(report)
}

/// Per-step record kept in the run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub task: usize,
    pub epoch: usize,
    pub report: StepReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task: usize,
    pub finalize: FinalizeReport,
    /// Validation accuracy on tasks `0..=task` after finishing this one.
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub tasks: Vec<TaskRecord>,
    pub counters: Counters,
    pub basis_size: usize,
    /// Error message if the run stopped early.
    pub aborted: Option<String>,
}

impl RunLog {
    pub fn new(variant: Variant, seed: u64) -> Self {
        RunLog {
            variant,
            seed,
            epochs: Vec::new(),
            steps: Vec::new(),
            tasks: Vec::new(),
            counters: Counters::default(),
            basis_size: 0,
            aborted: None,
        }
    }

    /// Human-readable log; one line per epoch and per task.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "variant {} seed {}", self.variant, self.seed);
        let mut tasks = self.tasks.iter().peekable();
        for e in &self.epochs {
            let in_epoch = self
                .steps
                .iter()
                .filter(|r| r.task == e.task && r.epoch == e.epoch);
            let (mut g, mut p, mut n, mut worst) = (0.0, 0.0, 0usize, 0.0f64);
            for r in in_epoch {
                g += r.report.grad_norm;
                p += r.report.update_norm;
                n += 1;
                if let Some(d) = r.report.descent {
                    worst = worst.max(d.residual() / d.projected_norm_sq.max(1.0));
                }
            }
            let n = n.max(1) as f64;
            let _ = writeln!(
                w,
                "task {} epoch {} steps {} loss {:.6} mean_grad_norm {:.6} mean_update_norm {:.6} max_descent_residual {:.3e}",
                e.task + 1,
                e.epoch + 1,
                e.steps,
                e.mean_loss,
                g / n,
                p / n,
                worst
            );
            let task_done = self.epochs.iter().filter(|x| x.task == e.task).map(|x| x.epoch).max() == Some(e.epoch);
            if task_done {
                if let Some(t) = tasks.next_if(|t| t.task == e.task) {
                    let accs: Vec<String> = t.accuracies.iter().map(|a| format!("{a:.4}")).collect();
                    let _ = writeln!(
                        w,
                        "task {} done: directions {}/{} basis {} sample_memory {} accuracies [{}]",
                        t.task + 1,
                        t.finalize.directions_added,
                        t.finalize.directions_offered,
                        t.finalize.basis_size,
                        t.finalize.sample_memory_size,
                        accs.join(", ")
                    );
                }
            }
        }
        let c = &self.counters;
        let _ = writeln!(
            w,
            "counters steps {} fisher_updates {} eigen_refreshes {} preconditions {} projections {} directions {}/{} descent_failures {}",
            c.steps,
            c.fisher_updates,
            c.eigen_refreshes,
            c.preconditions,
            c.projections,
            c.directions_added,
            c.directions_offered,
            c.descent_failures
        );
        if let Some(msg) = &self.aborted {
            let _ = writeln!(w, "ABORTED: {msg}");
        }
        s
    }
}

/// A run in progress; keeps partial results when a task fails.
pub struct Experiment<'a> {
    tasks: &'a TaskSequence,
    config: TrainConfig,
    state: TrainerState,
    matrix: AccuracyMatrix,
    log: RunLog,
}

impl<'a> Experiment<'a> {
    pub fn new(tasks: &'a TaskSequence, config: TrainConfig) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::structural("no tasks"));
        }
        let state = TrainerState::for_data(tasks.input_dim(), tasks.num_classes(), &config)?;
        let log = RunLog::new(config.variant, config.seed);
        Ok(Experiment {
            tasks,
            config,
            state,
            matrix: AccuracyMatrix::new(),
            log,
        })
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn matrix(&self) -> &AccuracyMatrix {
        &self.matrix
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn tasks_done(&self) -> usize {
        self.matrix.tasks()
    }

    /// Trains and finalizes the next task, then evaluates every task seen.
    pub fn run_next_task(&mut self) -> Result<()> {
        let k = self.tasks_done();
        if k >= self.tasks.len() {
            return Err(Error::State("all tasks already trained".into()));
        }
        let result = self.train_task(k);
        self.log.counters = self.state.counters;
        self.log.basis_size = self.state.basis.len();
        if let Err(e) = &result {
            self.log.aborted = Some(e.to_string());
        }
        result
    }

    fn train_task(&mut self, k: usize) -> Result<()> {
        let train = self.tasks.train(k)?;
        if train.is_empty() {
            return Err(Error::structural(format!("task {} has no training data", k + 1)));
        }
        self.state.task = k;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..self.config.epochs_per_task {
            self.state.epoch = epoch;
            order.shuffle(&mut self.state.shuffle_rng);
            let mut loss_sum = 0.0;
            let mut steps = 0;
            for (i, chunk) in order.chunks(self.config.batch_size).enumerate() {
                let batch = train.batch(chunk)?;
                let report = train_step(&mut self.state, &batch, &self.config).map_err(|e| {
                    Error::numerical(format!("task {} epoch {} step {}: {e}", k + 1, epoch + 1, i + 1))
                })?;
                loss_sum += report.loss;
                steps += 1;
                self.log.steps.push(StepRecord {
                    task: k,
                    epoch,
                    report,
                });
            }
            self.log.epochs.push(EpochRecord {
                task: k,
                epoch,
                mean_loss: loss_sum / steps as f64,
                steps,
            });
        }
        let finalize = finalize_task(&mut self.state, &train, &self.config)?;
        let accuracies = (0..=k)
            .map(|j| {
                let val = self.tasks.validation(j)?;
                self.state.params.accuracy(&val.images, &val.labels)
            })
            .collect::<Result<Vec<f64>>>()?;
        self.matrix.push_row(accuracies.clone())?;
        self.log.tasks.push(TaskRecord {
            task: k,
            finalize,
            accuracies,
        });
        Ok(())
    }

    /// Runs all remaining tasks, stopping at the first error.
    pub fn run(&mut self) -> Result<()> {
        while self.tasks_done() < self.tasks.len() {
            self.run_next_task()?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (AccuracyMatrix, RunLog, TrainerState) {
        (self.matrix, self.log, self.state)
    }
}

/// Trains on every task in order and returns the accuracy matrix and log.
pub fn run_experiment(tasks: &TaskSequence, config: &TrainConfig) -> Result<(AccuracyMatrix, RunLog)> {
    let mut exp = Experiment::new(tasks, config.clone())?;
    exp.run()?;
    let (m, log, _) = exp.into_parts();
    Ok((m, log))
}
