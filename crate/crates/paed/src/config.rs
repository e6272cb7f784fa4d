//! Line-oriented `key = value` run configuration.
//!
//! Values are resolved from the built-in defaults, then a config file,
//! then `PAED_<KEY>` environment variables, then command-line overrides;
//! later sources win. The fully resolved configuration is written next to
//! every artifact and embedded in checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use paed_core::labelspace::{CategorySet, TaskDecomposition, DEFAULT_CATEGORIES};
use paed_core::model::{HeadKind, ModelConfig};
use paed_core::training::TrainConfig;
use paed_core::Precision;

use crate::datasets::{CorpusSpec, Recipe};
use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "PAED_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    MultiTask,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decomposition {
    /// `tasks` equal contiguous groups in category order
    AutoEqual,
    /// groups of category names
    Explicit(Vec<Vec<String>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub categories: Vec<String>,
    pub model: ModelKind,
    pub tasks: usize,
    pub decomposition: Decomposition,
    pub precision: Precision,
    pub n_mels: usize,
    pub filters: Vec<usize>,
    pub gru_hidden: usize,
    pub fc_units: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// 0 for no limit
    pub max_steps: usize,
    pub threshold: f64,
    pub train_recordings: usize,
    pub val_recordings: usize,
    pub test_recordings: usize,
    pub duration: f64,
    pub events: usize,
    pub max_polyphony: usize,
    pub event_min: f64,
    pub event_max: f64,
    /// `None` cycles through the recipes in category order
    pub recipes: Option<Vec<Recipe>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            model: ModelKind::MultiTask,
            tasks: 8,
            decomposition: Decomposition::AutoEqual,
            precision: Precision::Fast,
            n_mels: 64,
            filters: vec![64, 64, 128, 128, 256],
            gru_hidden: 256,
            fc_units: 512,
            dropout: 0.25,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            max_steps: 0,
            threshold: 0.5,
            train_recordings: 60,
            val_recordings: 20,
            test_recordings: 20,
            duration: 30.0,
            events: 12,
            max_polyphony: 6,
            event_min: 0.5,
            event_max: 3.0,
            recipes: None,
        }
    }
}

/// Every key, in echo order.
pub const KEYS: [&str; 25] = [
    "seed",
    "categories",
    "model",
    "tasks",
    "decomposition",
    "precision",
    "n_mels",
    "filters",
    "gru_hidden",
    "fc_units",
    "dropout",
    "learning_rate",
    "batch_size",
    "epochs",
    "max_steps",
    "threshold",
    "train_recordings",
    "val_recordings",
    "test_recordings",
    "duration",
    "events",
    "max_polyphony",
    "event_min",
    "event_max",
    "recipes",
];

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::usage(format!("`{key}`: `{value}` is not a valid number")))
}

fn real(key: &str, value: &str) -> Result<f64> {
    let v: f64 = number(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::usage(format!("`{key}` must be finite")))
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = number(key, value)?,
            "categories" => {
                self.categories = match value.parse::<usize>() {
                    Ok(n) if (1..=DEFAULT_CATEGORIES.len()).contains(&n) => DEFAULT_CATEGORIES[..n]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    Ok(n) => {
                        return Err(Error::usage(format!(
                            "`categories = {n}`: a count must be in 1..={}; list names for more",
                            DEFAULT_CATEGORIES.len()
                        )))
                    }
                    Err(_) => list(value),
                }
            }
            "model" => {
                self.model = match value {
                    "multitask" => ModelKind::MultiTask,
                    "baseline" => ModelKind::Baseline,
                    _ => {
                        return Err(Error::usage(format!(
                            "`model` must be multitask or baseline, got `{value}`"
                        )))
                    }
                }
            }
            "tasks" => self.tasks = number(key, value)?,
            "decomposition" => {
                self.decomposition = if value == "auto-equal" {
                    Decomposition::AutoEqual
                } else {
                    Decomposition::Explicit(value.split('|').map(list).collect())
                }
            }
            "precision" => {
                self.precision = Precision::parse(value).ok_or_else(|| {
                    Error::usage(format!("`precision` must be fast or high, got `{value}`"))
                })?
            }
            "n_mels" => self.n_mels = number(key, value)?,
            "filters" => {
                self.filters = list(value)
                    .iter()
                    .map(|v| number(key, v))
                    .collect::<Result<_>>()?;
            }
            "gru_hidden" => self.gru_hidden = number(key, value)?,
            "fc_units" => self.fc_units = number(key, value)?,
            "dropout" => self.dropout = real(key, value)?,
            "learning_rate" => self.learning_rate = real(key, value)?,
            "batch_size" => self.batch_size = number(key, value)?,
            "epochs" => self.epochs = number(key, value)?,
            "max_steps" => self.max_steps = number(key, value)?,
            "threshold" => self.threshold = real(key, value)?,
            "train_recordings" => self.train_recordings = number(key, value)?,
            "val_recordings" => self.val_recordings = number(key, value)?,
            "test_recordings" => self.test_recordings = number(key, value)?,
            "duration" => self.duration = real(key, value)?,
            "events" => self.events = number(key, value)?,
            "max_polyphony" => self.max_polyphony = number(key, value)?,
            "event_min" => self.event_min = real(key, value)?,
            "event_max" => self.event_max = real(key, value)?,
            "recipes" => {
                self.recipes = if value == "auto" {
                    None
                } else {
                    Some(
                        list(value)
                            .iter()
                            .map(|r| {
                                Recipe::parse(r).ok_or_else(|| {
                                    Error::usage(format!(
                                        "unknown recipe `{r}`; expected one of {}",
                                        Recipe::ALL.map(Recipe::name).join(", ")
                                    ))
                                })
                            })
                            .collect::<Result<_>>()?,
                    )
                }
            }
            _ => return Err(Error::usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let join = |v: &[String]| v.join(", ");
        Some(match key {
            "seed" => self.seed.to_string(),
            "categories" => join(&self.categories),
            "model" => match self.model {
                ModelKind::MultiTask => "multitask".into(),
                ModelKind::Baseline => "baseline".into(),
            },
            "tasks" => self.tasks.to_string(),
            "decomposition" => match &self.decomposition {
                Decomposition::AutoEqual => "auto-equal".into(),
                Decomposition::Explicit(groups) => groups
                    .iter()
                    .map(|g| join(g))
                    .collect::<Vec<_>>()
                    .join(" | "),
            },
            "precision" => self.precision.name().into(),
            "n_mels" => self.n_mels.to_string(),
            "filters" => self
                .filters
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(", "),
            "gru_hidden" => self.gru_hidden.to_string(),
            "fc_units" => self.fc_units.to_string(),
            "dropout" => self.dropout.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "threshold" => self.threshold.to_string(),
            "train_recordings" => self.train_recordings.to_string(),
            "val_recordings" => self.val_recordings.to_string(),
            "test_recordings" => self.test_recordings.to_string(),
            "duration" => self.duration.to_string(),
            "events" => self.events.to_string(),
            "max_polyphony" => self.max_polyphony.to_string(),
            "event_min" => self.event_min.to_string(),
            "event_max" => self.event_max.to_string(),
            "recipes" => match &self.recipes {
                None => "auto".into(),
                Some(r) => r.iter().map(|r| r.name()).collect::<Vec<_>>().join(", "),
            },
            _ => return None,
        })
    }

    /// Applies the `key = value` lines of `text`. Blank lines and lines
    /// starting with `#` are skipped; unknown or repeated keys are errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |m: String| Error::usage(format!("{origin}:{}: {m}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(at(format!("`{key}` is set twice")));
            }
            seen.push(key);
            self.set(key, value).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "config")?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `PAED_<KEY>` variables from `vars`. Variables with the prefix
    /// that name no key are errors.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|k| (k.to_ascii_lowercase(), v))
            })
            .collect();
        found.sort();
        for (key, value) in found {
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::usage(format!(
                    "environment variable {ENV_PREFIX}{} names no config key",
                    key.to_ascii_uppercase()
                )));
            }
            self.set(&key, &value).map_err(|e| {
                Error::usage(format!("{ENV_PREFIX}{}: {e}", key.to_ascii_uppercase()))
            })?;
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key).unwrap()).unwrap();
        }
        out
    }

    pub fn category_set(&self) -> Result<CategorySet> {
        CategorySet::new(self.categories.iter().map(String::as_str))
            .map_err(|e| Error::usage(e.to_string()))
    }

    pub fn task_decomposition(&self) -> Result<TaskDecomposition> {
        let set = self.category_set()?;
        let d = match &self.decomposition {
            Decomposition::AutoEqual => TaskDecomposition::equal_split(set.len(), self.tasks),
            Decomposition::Explicit(groups) => {
                if groups.len() != self.tasks {
                    return Err(Error::usage(format!(
                        "`decomposition` lists {} groups but `tasks = {}`",
                        groups.len(),
                        self.tasks
                    )));
                }
                TaskDecomposition::from_names(groups, &set)
            }
        };
        d.map_err(|e| Error::usage(format!("task decomposition: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let head = match self.model {
            ModelKind::MultiTask => HeadKind::MultiTask(self.task_decomposition()?),
            ModelKind::Baseline => HeadKind::Baseline {
                categories: self.categories.len(),
            },
        };
        let cfg = ModelConfig {
            head,
            n_mels: self.n_mels,
            filters: self.filters.clone(),
            gru_hidden: self.gru_hidden,
            fc_units: self.fc_units,
            dropout: self.dropout,
        };
        cfg.validate()
            .map_err(|e| Error::usage(format!("model: {e}")))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            seed: self.seed,
            threshold: self.threshold,
        };
        cfg.validate()
            .map_err(|e| Error::usage(format!("training: {e}")))?;
        Ok(cfg)
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        let categories = self.category_set()?;
        let recipes = match &self.recipes {
            None => Recipe::cycle(categories.len()),
            Some(r) => r.clone(),
        };
        let spec = CorpusSpec {
            seed: self.seed,
            categories,
            recordings: [
                self.train_recordings,
                self.val_recordings,
                self.test_recordings,
            ],
            duration: self.duration,
            events: self.events,
            max_polyphony: self.max_polyphony,
            event_len: (self.event_min, self.event_max),
            recipes,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("decomposition", "rain, thunder | bus,mixer")
            .unwrap();
        cfg.set("recipes", "tone, clicks").unwrap();
        cfg.set("learning_rate", "0.003").unwrap();
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
        assert_eq!(
            RunConfig::parse(&RunConfig::default().echo()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn unknown_and_repeated_keys_are_rejected() {
        let err = RunConfig::parse("seed = 1\nlearnig_rate = 2")
            .unwrap_err()
            .to_string();
        assert!(err.contains(":2") && err.contains("learnig_rate"), "{err}");
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = RunConfig::parse("# run\n\n  tasks = 4  \n").unwrap();
        assert_eq!(cfg.tasks, 4);
    }

    #[test]
    fn env_overrides_and_rejects_strays() {
        let mut cfg = RunConfig::default();
        cfg.apply_env([
            ("PAED_EPOCHS".to_string(), "3".to_string()),
            ("HOME".into(), "/".into()),
        ])
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(cfg
            .apply_env([("PAED_EPOCH".to_string(), "3".to_string())])
            .is_err());
    }

    #[test]
    fn indivisible_task_count_is_a_usage_error() {
        let cfg = RunConfig::parse("tasks = 3").unwrap();
        assert!(matches!(cfg.model_config(), Err(Error::Usage(_))));
        let cfg = RunConfig::parse("tasks = 8").unwrap();
        assert_eq!(cfg.model_config().unwrap().class_counts(), vec![4; 8]);
    }

    #[test]
    fn category_count_takes_the_table_prefix() {
        let cfg = RunConfig::parse("categories = 4\ntasks = 2").unwrap();
        assert_eq!(cfg.categories, DEFAULT_CATEGORIES[..4]);
        assert!(RunConfig::parse("categories = 17").is_err());
    }
}
