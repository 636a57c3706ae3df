//! Plan files: line-oriented `key = value` entries under `[stream]` and
//! `[run]` section headers, expanded into the full run matrix
//! (replay kinds x strategies x modes x seeds).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use replaybench_core::data::{OrderSpec, Scenario, SynthSpec};
use replaybench_core::engine::{
    ReplayKind, RunConfig, StreamSpec, VaeConfig, DEFAULT_DROPOUT_RATE, DEFAULT_EPOCHS_PER_TASK,
    DEFAULT_KMEANS_MAX_ITERS, DEFAULT_LEARNING_RATE, DEFAULT_MC_PASSES, DEFAULT_MINIBATCH,
    DEFAULT_REPLAY_SIZE, DEFAULT_SUBSAMPLE_SIZE,
};
use replaybench_core::strategies::{DifficultyMode, Strategy};

/// Environment variable naming the default dataset root for `kind = mnist`
/// streams.
pub const DATA_ENV: &str = "REPLAYBENCH_DATA";

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        path: PathBuf,
        line: usize,
        key: String,
        section: String,
    },

    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PlanError>;

/// One expanded run with its stable identifier.
#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub run_id: String,
    pub config: RunConfig,
}

/// The full expanded experiment.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub runs: Vec<PlannedRun>,
    pub out_dir: PathBuf,
    pub parallelism: usize,
    pub resume: bool,
}

/// Command-line overrides applied on top of the plan file.
#[derive(Debug, Clone, Default)]
pub struct PlanOverrides {
    pub out_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub resume: bool,
    /// Replaces the plan's seed list with this single seed.
    pub seed: Option<u64>,
    /// Forces image downscaling for idx streams.
    pub downscale: bool,
}

const STREAM_KEYS: &[&str] = &[
    "kind",
    "scenario",
    "n_tasks",
    "classes_per_task",
    "dims",
    "cluster_spread",
    "domain_shift",
    "per_task_n",
    "order",
    "data_dir",
    "per_task_train_cap",
    "downscale",
];

const RUN_KEYS: &[&str] = &[
    "replay",
    "strategies",
    "modes",
    "seeds",
    "subsample_size",
    "replay_size",
    "epochs_per_task",
    "minibatch",
    "learning_rate",
    "dropout",
    "mc_passes",
    "buffer_capacity",
    "kmeans_max_iters",
    "vae_latent",
    "vae_hidden",
    "vae_learning_rate",
];

struct Entry {
    value: String,
    line: usize,
}

struct Section {
    name: &'static str,
    entries: Vec<(String, Entry)>,
}

impl Section {
    fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, e)| e)
    }
}

fn parse_sections(path: &Path, text: &str) -> Result<(Section, Section)> {
    let mut stream = Section {
        name: "stream",
        entries: Vec::new(),
    };
    let mut run = Section {
        name: "run",
        entries: Vec::new(),
    };
    let mut current: Option<&mut Section> = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = match name.trim() {
                "stream" => Some(&mut stream),
                "run" => Some(&mut run),
                other => {
                    return Err(PlanError::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: format!("unknown section `[{other}]`; valid: [stream], [run]"),
                    })
                }
            };
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(PlanError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let Some(section) = current.as_deref_mut() else {
            return Err(PlanError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "key outside any [section]".into(),
            });
        };
        let allowed = if section.name == "stream" { STREAM_KEYS } else { RUN_KEYS };
        if !allowed.contains(&key.as_str()) {
            return Err(PlanError::UnknownKey {
                path: path.to_path_buf(),
                line: line_no,
                key,
                section: section.name.to_string(),
            });
        }
        if section.get(&key).is_some() {
            return Err(PlanError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("duplicate key `{key}`"),
            });
        }
        section.entries.push((key, Entry { value, line: line_no }));
    }
    Ok((stream, run))
}

fn parse_value<T: FromStr>(path: &Path, entry: &Entry, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    entry.value.parse().map_err(|e: T::Err| PlanError::Parse {
        path: path.to_path_buf(),
        line: entry.line,
        message: format!("invalid {what} `{}`: {e}", entry.value),
    })
}

fn get_or<T: FromStr>(path: &Path, section: &Section, key: &str, default: T, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    match section.get(key) {
        Some(entry) => parse_value(path, entry, what),
        None => Ok(default),
    }
}

fn parse_bool(path: &Path, section: &Section, key: &str, default: bool) -> Result<bool> {
    match section.get(key) {
        None => Ok(default),
        Some(entry) => match entry.value.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(PlanError::Parse {
                path: path.to_path_buf(),
                line: entry.line,
                message: format!("invalid boolean `{other}`"),
            }),
        },
    }
}

fn parse_list<T: FromStr>(path: &Path, entry: &Entry, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let mut out = Vec::new();
    for part in entry.value.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse().map_err(|e: T::Err| PlanError::Parse {
            path: path.to_path_buf(),
            line: entry.line,
            message: format!("invalid {what} `{part}`: {e}"),
        })?);
    }
    if out.is_empty() {
        return Err(PlanError::Parse {
            path: path.to_path_buf(),
            line: entry.line,
            message: format!("empty {what} list"),
        });
    }
    Ok(out)
}

fn dedup<T: PartialEq + Clone>(items: Vec<T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn parse_order(path: &Path, entry: &Entry) -> Result<OrderSpec> {
    match entry.value.as_str() {
        "default" => Ok(OrderSpec::Default),
        "easy_first" => Ok(OrderSpec::EasyFirst),
        "hard_first" => Ok(OrderSpec::HardFirst),
        other => {
            let perm: std::result::Result<Vec<usize>, _> =
                other.split(',').map(|p| p.trim().parse()).collect();
            match perm {
                Ok(p) => Ok(OrderSpec::Permutation(p)),
                Err(_) => Err(PlanError::Parse {
                    path: path.to_path_buf(),
                    line: entry.line,
                    message: format!(
                        "invalid order `{other}`; valid: default, easy_first, hard_first, or a comma permutation like 2,0,1"
                    ),
                }),
            }
        }
    }
}

fn parse_stream_section(path: &Path, stream: &Section, force_downscale: bool) -> Result<(StreamSpec, OrderSpec)> {
    let order = match stream.get("order") {
        Some(e) => parse_order(path, e)?,
        None => OrderSpec::Default,
    };
    let kind = stream.get("kind").map(|e| e.value.clone()).unwrap_or_else(|| "synth".into());
    let spec = match kind.as_str() {
        "mnist" | "idx" => {
            let dir = match stream.get("data_dir") {
                Some(e) => PathBuf::from(&e.value),
                None => match std::env::var_os(DATA_ENV) {
                    Some(v) => PathBuf::from(v),
                    None => {
                        return Err(PlanError::Invalid {
                            path: path.to_path_buf(),
                            message: format!(
                                "stream kind `{kind}` needs `data_dir` or the {DATA_ENV} environment variable"
                            ),
                        })
                    }
                },
            };
            StreamSpec::Idx {
                dir,
                n_tasks: get_or(path, stream, "n_tasks", 5, "n_tasks")?,
                per_task_train_cap: get_or(path, stream, "per_task_train_cap", 1000, "per_task_train_cap")?,
                downscale: parse_bool(path, stream, "downscale", false)? || force_downscale,
            }
        }
        "synth" => {
            let scenario: Scenario = match stream.get("scenario") {
                Some(e) => parse_value(path, e, "scenario")?,
                None => Scenario::ClassIncremental,
            };
            StreamSpec::Synth(SynthSpec {
                scenario,
                n_tasks: get_or(path, stream, "n_tasks", 5, "n_tasks")?,
                classes_per_task: get_or(path, stream, "classes_per_task", 2, "classes_per_task")?,
                dims: get_or(path, stream, "dims", 16, "dims")?,
                cluster_spread: get_or(path, stream, "cluster_spread", 0.1, "cluster_spread")?,
                domain_shift: get_or(path, stream, "domain_shift", 0.0, "domain_shift")?,
                per_task_n: get_or(path, stream, "per_task_n", 256, "per_task_n")?,
            })
        }
        other => {
            let line = stream.get("kind").map(|e| e.line).unwrap_or(1);
            return Err(PlanError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("unknown stream kind `{other}`; valid: mnist, synth"),
            });
        }
    };
    Ok((spec, order))
}

/// Parses a plan file and expands the run matrix.
///
/// Experience-replay arms expand over strategies x modes x seeds; generative
/// and no-replay arms expand over seeds only (their strategy/mode fields are
/// recorded but unused).
pub fn parse_plan(path: &Path, overrides: &PlanOverrides) -> Result<ExperimentPlan> {
    let text = std::fs::read_to_string(path)?;
    let (stream, run) = parse_sections(path, &text)?;
    let (stream_spec, order) = parse_stream_section(path, &stream, overrides.downscale)?;

    let replay_kinds: Vec<ReplayKind> = match run.get("replay") {
        Some(e) => dedup(parse_list(path, e, "replay kind")?),
        None => vec![ReplayKind::Experience],
    };
    let strategies: Vec<Strategy> = match run.get("strategies") {
        Some(e) => dedup(parse_list(path, e, "strategy")?),
        None => vec![Strategy::Random],
    };
    let modes: Vec<DifficultyMode> = match run.get("modes") {
        Some(e) => dedup(parse_list(path, e, "difficulty mode")?),
        None => vec![DifficultyMode::Simple],
    };
    let seeds: Vec<u64> = match overrides.seed {
        Some(s) => vec![s],
        None => match run.get("seeds") {
            Some(e) => dedup(parse_list(path, e, "seed")?),
            None => vec![0],
        },
    };

    let buffer_capacity = match run.get("buffer_capacity") {
        None => None,
        Some(e) if e.value == "unbounded" => None,
        Some(e) => Some(parse_value::<usize>(path, e, "buffer capacity")?),
    };

    let base = {
        let mut c = RunConfig::new(stream_spec, 0);
        c.order = order;
        c.subsample_size = get_or(path, &run, "subsample_size", DEFAULT_SUBSAMPLE_SIZE, "subsample_size")?;
        c.replay_size = get_or(path, &run, "replay_size", DEFAULT_REPLAY_SIZE, "replay_size")?;
        c.epochs_per_task = get_or(path, &run, "epochs_per_task", DEFAULT_EPOCHS_PER_TASK, "epochs_per_task")?;
        c.minibatch = get_or(path, &run, "minibatch", DEFAULT_MINIBATCH, "minibatch")?;
        c.learning_rate = get_or(path, &run, "learning_rate", DEFAULT_LEARNING_RATE, "learning_rate")?;
        c.dropout_rate = get_or(path, &run, "dropout", DEFAULT_DROPOUT_RATE, "dropout")?;
        c.mc_passes = get_or(path, &run, "mc_passes", DEFAULT_MC_PASSES, "mc_passes")?;
        c.kmeans_max_iters = get_or(path, &run, "kmeans_max_iters", DEFAULT_KMEANS_MAX_ITERS, "kmeans_max_iters")?;
        c.buffer_capacity = buffer_capacity;
        c.vae = VaeConfig {
            latent_dim: get_or(path, &run, "vae_latent", VaeConfig::default().latent_dim, "vae_latent")?,
            hidden_dim: get_or(path, &run, "vae_hidden", VaeConfig::default().hidden_dim, "vae_hidden")?,
            learning_rate: get_or(
                path,
                &run,
                "vae_learning_rate",
                VaeConfig::default().learning_rate,
                "vae_learning_rate",
            )?,
        };
        c
    };

    let mut runs = Vec::new();
    for &replay in &replay_kinds {
        for &seed in &seeds {
            match replay {
                ReplayKind::Experience => {
                    for &strategy in &strategies {
                        for &mode in &modes {
                            let mut config = base.clone();
                            config.replay = replay;
                            config.strategy = strategy;
                            config.mode = mode;
                            config.seed = seed;
                            runs.push(PlannedRun {
                                run_id: format!("er-{strategy}-{mode}-s{seed}"),
                                config,
                            });
                        }
                    }
                }
                ReplayKind::Generative | ReplayKind::None => {
                    let mut config = base.clone();
                    config.replay = replay;
                    config.seed = seed;
                    let tag = if replay == ReplayKind::Generative { "gr" } else { "none" };
                    runs.push(PlannedRun {
                        run_id: format!("{tag}-s{seed}"),
                        config,
                    });
                }
            }
        }
    }

    let ids: BTreeSet<&str> = runs.iter().map(|r| r.run_id.as_str()).collect();
    if ids.len() != runs.len() {
        return Err(PlanError::Invalid {
            path: path.to_path_buf(),
            message: "expanded run ids are not unique".into(),
        });
    }
    for r in &runs {
        r.config.validate().map_err(|e| PlanError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }

    Ok(ExperimentPlan {
        runs,
        out_dir: overrides.out_dir.clone().unwrap_or_else(|| PathBuf::from("results")),
        parallelism: overrides.parallelism.unwrap_or(1).max(1),
        resume: overrides.resume,
    })
}

/// Parses only the `[stream]` section (used by `gen-data`).
pub fn parse_stream_only(path: &Path, downscale: bool) -> Result<(StreamSpec, OrderSpec)> {
    let text = std::fs::read_to_string(path)?;
    let (stream, _) = parse_sections(path, &text)?;
    parse_stream_section(path, &stream, downscale)
}
