//! Continual-training loops for experience replay and generative replay,
//! per-task evaluation, and the accuracy / forgetting-rate / average-time
//! metrics.
//!
//! A run is a pure function of its [`RunConfig`]: every random draw comes
//! from a seed derived as `derive(run_seed, [purpose, task, step])`, so two
//! runs with equal configs produce bit-identical accuracy matrices.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::data::{self, OrderSpec, Scenario, SynthSpec, TaskStream};
use crate::error::{Error, Result};
use crate::memory::MemoryBuffer;
use crate::nn::{Batch, ForwardMode, ModelParams};
use crate::seeds::{self, tag};
use crate::strategies::{self, DifficultyMode, Direction, Selection, Strategy};
use crate::vae::{pseudo_label, VaeParams};

/// Classifier hidden widths; embeddings come from the last hidden layer.
pub const HIDDEN_DIMS: [usize; 2] = [128, 64];

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;
pub const DEFAULT_MINIBATCH: usize = 32;
pub const DEFAULT_EPOCHS_PER_TASK: usize = 1;
pub const DEFAULT_SUBSAMPLE_SIZE: usize = 50;
pub const DEFAULT_REPLAY_SIZE: usize = 10;
pub const DEFAULT_MC_PASSES: usize = 10;
pub const DEFAULT_KMEANS_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReplayKind {
    Experience,
    Generative,
    None,
}

impl fmt::Display for ReplayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplayKind::Experience => "experience",
            ReplayKind::Generative => "generative",
            ReplayKind::None => "none",
        })
    }
}

impl FromStr for ReplayKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "experience" => Ok(ReplayKind::Experience),
            "generative" => Ok(ReplayKind::Generative),
            "none" => Ok(ReplayKind::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown replay kind `{other}`; valid: experience, generative, none"
            ))),
        }
    }
}

/// Where the task stream comes from. Building consumes the run seed, so the
/// seeded parts (train-cap subsampling, synthetic draws) vary across seeds
/// but are identical across strategy arms at a fixed seed.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamSpec {
    /// IDX image/label files in `dir` using the standard MNIST file names
    /// (`train-images-idx3-ubyte`, ..., optionally gzipped), split into
    /// contiguous-class tasks.
    Idx {
        dir: PathBuf,
        n_tasks: usize,
        per_task_train_cap: usize,
        downscale: bool,
    },
    Synth(SynthSpec),
}

fn find_idx_file(dir: &std::path::Path, base: &str) -> Result<PathBuf> {
    for name in [base.to_string(), format!("{base}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no `{base}` or `{base}.gz` in {}",
        dir.display()
    )))
}

impl StreamSpec {
    pub fn build(&self, run_seed: u64) -> Result<TaskStream> {
        let stream_seed = seeds::derive(run_seed, &[tag::STREAM]);
        match self {
            StreamSpec::Idx {
                dir,
                n_tasks,
                per_task_train_cap,
                downscale,
            } => {
                let train = data::load_idx(
                    &find_idx_file(dir, "train-images-idx3-ubyte")?,
                    &find_idx_file(dir, "train-labels-idx1-ubyte")?,
                )?;
                let test = data::load_idx(
                    &find_idx_file(dir, "t10k-images-idx3-ubyte")?,
                    &find_idx_file(dir, "t10k-labels-idx1-ubyte")?,
                )?;
                let (train, test) = if *downscale {
                    let side = (train.feature_dim() as f64).sqrt() as usize;
                    if side * side != train.feature_dim() || side % 2 != 0 {
                        return Err(Error::InvalidArgument(format!(
                            "cannot downscale non-square images of dim {}",
                            train.feature_dim()
                        )));
                    }
                    (
                        data::mean_pool(&train, side, side, 2)?,
                        data::mean_pool(&test, side, side, 2)?,
                    )
                } else {
                    (train, test)
                };
                data::make_class_incremental(&train, &test, *n_tasks, *per_task_train_cap, stream_seed)
            }
            StreamSpec::Synth(spec) => data::synth_stream(spec, stream_seed),
        }
    }

    pub fn scenario(&self) -> Scenario {
        match self {
            StreamSpec::Idx { .. } => Scenario::ClassIncremental,
            StreamSpec::Synth(spec) => spec.scenario,
        }
    }

    fn canonical(&self) -> String {
        match self {
            StreamSpec::Idx {
                dir,
                n_tasks,
                per_task_train_cap,
                downscale,
            } => format!(
                "idx:{}:{n_tasks}:{per_task_train_cap}:{downscale}",
                dir.display()
            ),
            StreamSpec::Synth(s) => format!(
                "synth:{}:{}:{}:{}:{}:{}:{}",
                s.scenario, s.n_tasks, s.classes_per_task, s.dims, s.cluster_spread, s.domain_shift, s.per_task_n
            ),
        }
    }
}

/// VAE shape and step size for generative replay.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 8,
            hidden_dim: 128,
            learning_rate: 0.05,
        }
    }
}

/// Full description of one run. Fields not used by the chosen replay kind
/// (e.g. `strategy` under generative replay) are ignored but still part of
/// the fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub mode: DifficultyMode,
    pub replay: ReplayKind,
    /// N_s: candidates drawn from the buffer each step.
    pub subsample_size: usize,
    /// N_r: replay samples selected per step.
    pub replay_size: usize,
    pub epochs_per_task: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    /// k: MC-dropout passes for the disagreement score.
    pub mc_passes: usize,
    /// `None` keeps every seen sample; `Some(c)` reservoir-samples.
    pub buffer_capacity: Option<usize>,
    pub kmeans_max_iters: usize,
    pub vae: VaeConfig,
    pub seed: u64,
    pub stream: StreamSpec,
    pub order: OrderSpec,
}

impl RunConfig {
    pub fn new(stream: StreamSpec, seed: u64) -> Self {
        RunConfig {
            strategy: Strategy::Random,
            mode: DifficultyMode::Simple,
            replay: ReplayKind::Experience,
            subsample_size: DEFAULT_SUBSAMPLE_SIZE,
            replay_size: DEFAULT_REPLAY_SIZE,
            epochs_per_task: DEFAULT_EPOCHS_PER_TASK,
            minibatch: DEFAULT_MINIBATCH,
            learning_rate: DEFAULT_LEARNING_RATE,
            dropout_rate: DEFAULT_DROPOUT_RATE,
            mc_passes: DEFAULT_MC_PASSES,
            buffer_capacity: None,
            kmeans_max_iters: DEFAULT_KMEANS_MAX_ITERS,
            vae: VaeConfig::default(),
            seed,
            stream,
            order: OrderSpec::Default,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subsample_size == 0 || self.minibatch == 0 || self.epochs_per_task == 0 || self.mc_passes == 0 {
            return Err(Error::InvalidArgument(
                "subsample_size, minibatch, epochs_per_task and mc_passes must be positive".into(),
            ));
        }
        if self.buffer_capacity == Some(0) {
            return Err(Error::InvalidArgument("buffer capacity must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument("dropout rate must lie in [0, 1)".into()));
        }
        if self.vae.latent_dim == 0 || self.vae.hidden_dim == 0 {
            return Err(Error::InvalidArgument("vae dimensions must be positive".into()));
        }
        if self.kmeans_max_iters == 0 {
            return Err(Error::InvalidArgument("kmeans_max_iters must be positive".into()));
        }
        Ok(())
    }

    fn canonical(&self) -> String {
        format!(
            "strategy={}\nmode={}\nreplay={}\nsubsample_size={}\nreplay_size={}\nepochs_per_task={}\nminibatch={}\nlearning_rate={}\ndropout_rate={}\nmc_passes={}\nbuffer_capacity={}\nkmeans_max_iters={}\nvae_latent={}\nvae_hidden={}\nvae_learning_rate={}\nseed={}\nstream={}\norder={}\n",
            self.strategy,
            self.mode,
            self.replay,
            self.subsample_size,
            self.replay_size,
            self.epochs_per_task,
            self.minibatch,
            self.learning_rate,
            self.dropout_rate,
            self.mc_passes,
            self.buffer_capacity.map_or("unbounded".to_string(), |c| c.to_string()),
            self.kmeans_max_iters,
            self.vae.latent_dim,
            self.vae.hidden_dim,
            self.vae.learning_rate,
            self.seed,
            self.stream.canonical(),
            self.order,
        )
    }

    /// Hex digest of the canonical field encoding; changes iff any config
    /// field changes.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

/// `R[i][j]` = accuracy on task j (column order = stream order) after
/// finishing training task i.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    task_ids: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(task_ids: Vec<usize>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let t = task_ids.len();
        if t == 0 || rows.len() != t {
            return Err(Error::InvalidArgument(format!(
                "accuracy matrix needs T x T entries, got {} rows for {t} tasks",
                rows.len()
            )));
        }
        for row in &rows {
            if row.len() != t || !row.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("accuracy entries must lie in [0, 1]".into()));
            }
        }
        Ok(AccuracyMatrix { task_ids, rows })
    }

    pub fn n_tasks(&self) -> usize {
        self.task_ids.len()
    }

    pub fn task_ids(&self) -> &[usize] {
        &self.task_ids
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn entry(&self, after_task: usize, task: usize) -> f64 {
        self.rows[after_task][task]
    }

    pub fn final_row(&self) -> &[f64] {
        self.rows.last().expect("T >= 1")
    }
}

/// Mean final-row accuracy: `(1/T) Σ_i R[T-1][i]`.
pub fn accuracy_metric(m: &AccuracyMatrix) -> f64 {
    let row = m.final_row();
    row.iter().sum::<f64>() / row.len() as f64
}

/// Mean over tasks of (best recorded accuracy − final accuracy).
pub fn forgetting_metric(m: &AccuracyMatrix) -> f64 {
    let t = m.n_tasks();
    let final_row = m.final_row();
    (0..t)
        .map(|j| {
            let best = m
                .rows
                .iter()
                .map(|row| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            best - final_row[j]
        })
        .sum::<f64>()
        / t as f64
}

/// `T_r / n_r`.
pub fn average_time(total_seconds: f64, n_runs: usize) -> Result<f64> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("average_time needs n_runs >= 1".into()));
    }
    Ok(total_seconds / n_runs as f64)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub accuracy: f64,
    pub forgetting_rate: f64,
    pub wall_time_seconds: f64,
    pub accuracy_matrix: AccuracyMatrix,
    pub config_fingerprint: String,
    pub seed: u64,
}

// ─── Training loops ────────────────────────────────────

/// Builds the stream from the config (including task ordering) and runs the
/// matching training loop.
pub fn run(config: &RunConfig) -> Result<RunResult> {
    config.validate()?;
    let stream = data::reorder(&config.stream.build(config.seed)?, &config.order)?;
    match config.replay {
        ReplayKind::Generative => train_gr(config, &stream),
        ReplayKind::Experience | ReplayKind::None => train_er(config, &stream),
    }
}

fn check_stream(config: &RunConfig, stream: &TaskStream) -> Result<()> {
    config.validate()?;
    if stream.tasks.iter().any(|t| t.train.is_empty() || t.test.is_empty()) {
        return Err(Error::InvalidArgument(
            "every task needs non-empty train and test splits".into(),
        ));
    }
    let dim = stream.feature_dim();
    if stream
        .tasks
        .iter()
        .any(|t| t.train.feature_dim() != dim || t.test.feature_dim() != dim)
    {
        return Err(Error::InvalidArgument("tasks disagree on feature width".into()));
    }
    Ok(())
}

fn init_classifier(config: &RunConfig, stream: &TaskStream) -> Result<ModelParams> {
    let dims = [
        &[stream.feature_dim()][..],
        &HIDDEN_DIMS[..],
        &[stream.total_classes][..],
    ]
    .concat();
    ModelParams::init(&dims, config.learning_rate, config.dropout_rate, config.seed)
}

fn shuffled_indices(n: usize, config_seed: u64, task_pos: usize, epoch: usize) -> Vec<usize> {
    let mut rng = seeds::rng(config_seed, &[tag::SHUFFLE, task_pos as u64, epoch as u64]);
    crate::sampling::sample_without_replacement(n, n, &mut rng)
}

/// Picks the replay indices for one step. Never mutates the live model; the
/// interference branch scores against a discarded virtual update.
fn select_replay(
    params: &ModelParams,
    config: &RunConfig,
    sub: &crate::memory::Subsample,
    new_batch: &Batch,
    task_pos: usize,
    step: u64,
) -> Result<Selection> {
    let n_r = config.replay_size;
    let step_seed = seeds::derive(config.seed, &[task_pos as u64, step]);
    match config.strategy {
        Strategy::Random => Ok(strategies::select_random(sub.len(), n_r, step_seed)),
        Strategy::Entropy | Strategy::Confidence | Strategy::Margin => {
            let (preds, _) = params.forward(&sub.batch, ForwardMode::Eval)?;
            let scores = match config.strategy {
                Strategy::Entropy => strategies::score_entropy(&preds),
                Strategy::Confidence => strategies::score_confidence(&preds),
                _ => strategies::score_margin(&preds),
            };
            let dir = strategies::topk_direction(config.strategy, config.mode).expect("score strategy");
            Ok(strategies::select_topk(&scores, n_r, dir))
        }
        Strategy::Bald => {
            let mc_seed = seeds::derive(config.seed, &[tag::MC_DROPOUT, task_pos as u64, step]);
            let mc = params.mc_predict(&sub.batch, config.mc_passes, mc_seed)?;
            let scores = strategies::score_bald(&mc)?;
            let dir = strategies::topk_direction(Strategy::Bald, config.mode).expect("score strategy");
            Ok(strategies::select_topk(&scores, n_r, dir))
        }
        Strategy::Kmeans => {
            let emb = params.extract_embeddings(&sub.batch)?;
            strategies::select_kmeans(&emb, n_r.min(sub.len()), step_seed, config.kmeans_max_iters)
        }
        Strategy::Coreset => {
            let emb = params.extract_embeddings(&sub.batch)?;
            strategies::select_coreset(&emb, n_r.min(sub.len()), step_seed)
        }
        Strategy::Mir => {
            // Gradient of the incoming minibatch, a virtual step, then the
            // per-sample loss increase under the virtual model.
            let grad_seed = seeds::derive(config.seed, &[tag::MIR_GRAD, task_pos as u64, step]);
            let (_, cache) = params.forward(new_batch, ForwardMode::Train { seed: grad_seed })?;
            let grad = params.backward(&cache, new_batch.labels())?;
            let virtual_model = params.virtual_update(&grad)?;
            let scores = strategies::score_mir(params, &virtual_model, sub)?;
            Ok(strategies::select_topk(&scores, n_r, Direction::Largest))
        }
    }
}

/// Experience-replay training (also covers plain fine-tuning when the
/// replay kind is `none`). Per minibatch: draw a subsample from the buffer,
/// select replay data with the configured strategy, and take one SGD step on
/// the concatenation; after each task, store its training data and evaluate
/// on every task's test set.
pub fn train_er(config: &RunConfig, stream: &TaskStream) -> Result<RunResult> {
    train_er_traced(config, stream).map(|(result, _)| result)
}

/// [`train_er`] plus the final memory buffer, so provenance (which split
/// each stored sample came from) can be audited.
pub fn train_er_traced(config: &RunConfig, stream: &TaskStream) -> Result<(RunResult, MemoryBuffer)> {
    if config.replay == ReplayKind::Generative {
        return Err(Error::InvalidArgument(
            "train_er expects replay kind experience or none".into(),
        ));
    }
    check_stream(config, stream)?;
    let started = Instant::now();

    let mut params = init_classifier(config, stream)?;
    let mut buffer = MemoryBuffer::new(config.buffer_capacity)?;
    let mut rows = Vec::with_capacity(stream.len());
    let mut step: u64 = 0;

    for (task_pos, task) in stream.tasks.iter().enumerate() {
        for epoch in 0..config.epochs_per_task {
            let order = shuffled_indices(task.train.len(), config.seed, task_pos, epoch);
            for chunk in order.chunks(config.minibatch) {
                let new_batch = task.train.select(chunk);
                let replay = if config.replay == ReplayKind::Experience
                    && config.replay_size > 0
                    && !buffer.is_empty()
                {
                    let sub_seed = seeds::derive(config.seed, &[task_pos as u64, step]);
                    let sub = buffer.draw_subsample(config.subsample_size, sub_seed)?;
                    let selection = select_replay(&params, config, &sub, &new_batch, task_pos, step)?;
                    Some(selection.resolve(&sub.batch))
                } else {
                    None
                };
                let train_batch = match &replay {
                    Some(r) if !r.is_empty() => new_batch.concat(r)?,
                    _ => new_batch,
                };
                let train_seed = seeds::derive(config.seed, &[tag::TRAIN_DROPOUT, task_pos as u64, step]);
                let (_, cache) = params.forward(&train_batch, ForwardMode::Train { seed: train_seed })?;
                let grad = params.backward(&cache, train_batch.labels())?;
                params = params.sgd_step(&grad)?;
                step += 1;
            }
        }
        if config.replay == ReplayKind::Experience {
            let store_seed = seeds::derive(config.seed, &[task_pos as u64]);
            buffer.store(&task.train, task.task_id, store_seed);
        }
        rows.push(eval_tasks(&params, stream)?);
    }

    Ok((finish(config, stream, rows, started)?, buffer))
}

/// Generative-replay training: pseudo-samples come from the previous task's
/// VAE snapshot, pseudo-labels from the previous classifier snapshot; the
/// live VAE trains jointly on real + pseudo features. Snapshots refresh at
/// task boundaries.
pub fn train_gr(config: &RunConfig, stream: &TaskStream) -> Result<RunResult> {
    if config.replay != ReplayKind::Generative {
        return Err(Error::InvalidArgument("train_gr expects replay kind generative".into()));
    }
    check_stream(config, stream)?;
    let started = Instant::now();

    let mut params = init_classifier(config, stream)?;
    let vae_seed = seeds::derive(config.seed, &[tag::VAE_INIT]);
    let mut vae = VaeParams::init(
        stream.feature_dim(),
        config.vae.hidden_dim,
        config.vae.latent_dim,
        config.vae.learning_rate,
        vae_seed,
    )?;
    let mut snapshot: Option<(ModelParams, VaeParams)> = None;
    let mut rows = Vec::with_capacity(stream.len());
    let mut step: u64 = 0;

    for (task_pos, task) in stream.tasks.iter().enumerate() {
        for epoch in 0..config.epochs_per_task {
            let order = shuffled_indices(task.train.len(), config.seed, task_pos, epoch);
            for chunk in order.chunks(config.minibatch) {
                let real = task.train.select(chunk);
                let train_batch = match &snapshot {
                    Some((prev_classifier, prev_vae)) if config.replay_size > 0 => {
                        let sample_seed = seeds::derive(config.seed, &[task_pos as u64, step]);
                        let pseudo_x = prev_vae.sample(config.replay_size, sample_seed)?;
                        let pseudo = pseudo_label(prev_classifier, &pseudo_x)?;
                        real.concat(&pseudo.to_batch()?)?
                    }
                    _ => real,
                };

                let train_seed = seeds::derive(config.seed, &[tag::TRAIN_DROPOUT, task_pos as u64, step]);
                let (_, cache) = params.forward(&train_batch, ForwardMode::Train { seed: train_seed })?;
                let grad = params.backward(&cache, train_batch.labels())?;
                params = params.sgd_step(&grad)?;

                // The VAE sees the same real + pseudo features.
                let vae_step_seed = seeds::derive(config.seed, &[tag::VAE_NOISE, task_pos as u64, step]);
                vae = vae.train_step(&train_batch, vae_step_seed)?;
                step += 1;
            }
        }
        snapshot = Some((params.clone(), vae.clone()));
        rows.push(eval_tasks(&params, stream)?);
    }

    finish(config, stream, rows, started)
}

fn finish(
    config: &RunConfig,
    stream: &TaskStream,
    rows: Vec<Vec<f64>>,
    started: Instant,
) -> Result<RunResult> {
    let task_ids: Vec<usize> = stream.tasks.iter().map(|t| t.task_id).collect();
    let matrix = AccuracyMatrix::new(task_ids, rows)?;
    Ok(RunResult {
        accuracy: accuracy_metric(&matrix),
        forgetting_rate: forgetting_metric(&matrix),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        accuracy_matrix: matrix,
        config_fingerprint: config.fingerprint(),
        seed: config.seed,
    })
}

/// Eval-mode argmax accuracy on every task's test set, in stream order.
pub fn eval_tasks(params: &ModelParams, stream: &TaskStream) -> Result<Vec<f64>> {
    stream
        .tasks
        .iter()
        .map(|task| {
            if task.test.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "task {} has an empty test set",
                    task.task_id
                )));
            }
            let (preds, _) = params.forward(&task.test, ForwardMode::Eval)?;
            let correct = task
                .test
                .labels()
                .iter()
                .enumerate()
                .filter(|&(i, &label)| {
                    let row = preds.row(i);
                    let mut best = 0;
                    for (c, &p) in row.iter().enumerate() {
                        if p > row[best] {
                            best = c;
                        }
                    }
                    best == label
                })
                .count();
            Ok(correct as f64 / task.test.len() as f64)
        })
        .collect()
}
