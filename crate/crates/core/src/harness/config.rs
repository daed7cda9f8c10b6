//! Flat `section.key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::datasets::{load_idx, synthetic_blobs, BlobSpec, DataError, Split, TrainTest};
use crate::models::{Arch, ModelError, ModelSpec, Norm};
use crate::pruning::{Denominator, Eligibility, PruneSchedule};
use crate::tickets::{RunConfig, Seeds};
use crate::train::{OptimizerChoice, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given twice")]
    Duplicate(String),
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        shape: [usize; 3],
        separation: f64,
        noise: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DatasetConfig {
    pub fn load(&self) -> Result<TrainTest, DataError> {
        match self {
            DatasetConfig::Blobs {
                classes,
                per_class,
                shape,
                separation,
                noise,
                seed,
            } => synthetic_blobs(&BlobSpec {
                num_classes: *classes,
                per_class: *per_class,
                shape: *shape,
                separation: *separation,
                noise: *noise,
                seed: *seed,
            }),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                let k = train.num_classes().max(test.num_classes());
                Ok(TrainTest {
                    train: train.with_classes(k, Split::Train)?,
                    test: test.with_classes(k, Split::Test)?,
                })
            }
        }
    }

    /// Short identifier recorded in ticket provenance.
    pub fn id(&self) -> String {
        match self {
            DatasetConfig::Blobs {
                classes, shape, seed, ..
            } => format!("blobs{classes}-{}x{}x{}-s{seed}", shape[0], shape[1], shape[2]),
            DatasetConfig::Idx { train_images, .. } => format!("idx:{}", train_images.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub p_lth: f64,
    pub p_colt: f64,
    pub target_sparsity: f64,
    pub denominator: Denominator,
    pub max_rounds: usize,
    pub eligibility: Eligibility,
    pub milestones: Vec<f64>,
    pub accuracy_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub training: TrainConfig,
    pub seeds: Seeds,
    pub output: PathBuf,
}

const KEYS: &[&str] = &[
    "experiment.name",
    "model.arch",
    "model.widths",
    "model.norm",
    "dataset.kind",
    "dataset.classes",
    "dataset.per_class",
    "dataset.shape",
    "dataset.separation",
    "dataset.noise",
    "dataset.seed",
    "dataset.train_images",
    "dataset.train_labels",
    "dataset.test_images",
    "dataset.test_labels",
    "schedule.p_lth",
    "schedule.p_colt",
    "schedule.target_sparsity",
    "schedule.denominator",
    "schedule.max_rounds",
    "schedule.eligibility",
    "schedule.milestones",
    "schedule.accuracy_target",
    "training.epochs",
    "training.batch_size",
    "training.lr",
    "training.warmup",
    "training.anneal_at",
    "training.anneal_factor",
    "training.optimizer",
    "training.momentum",
    "training.beta1",
    "training.beta2",
    "training.weight_decay",
    "training.val_fraction",
    "seeds.init",
    "seeds.data",
    "seeds.head",
    "output.dir",
];

/// Raw key/value pairs, removed as they are read.
struct Table {
    values: BTreeMap<String, String>,
}

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("expected `section.key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            if !key.contains('.') || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("malformed key `{key}`"),
                });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate(key.to_string()));
            }
        }
        Ok(Self { values })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        debug_assert!(KEYS.contains(&key), "{key}");
        self.values.remove(key)
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| invalid(key, format!("`{v}`: {e}"))),
        }
    }

    fn required(&mut self, key: &str) -> Result<String> {
        self.raw(key).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        if v.is_empty() {
            return Ok(Some(Vec::new()));
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|e: T::Err| invalid(key, format!("`{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

fn parse_shape(key: &str, s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| invalid(key, format!("expected CxHxW, got `{s}`")))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(invalid(key, format!("expected three positive dimensions CxHxW, got `{s}`"))),
    }
}

fn check_fraction(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must lie in (0, 1), got {v}")))
    }
}

fn check_positive(key: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(invalid(key, "must be positive"))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Table::parse(text)?;
        let name = t.get("experiment.name", "experiment".to_string())?;

        let arch: Arch = t
            .required("model.arch")?
            .parse()
            .map_err(|e: ModelError| invalid("model.arch", e.to_string()))?;
        let norm: Norm = t.get("model.norm", Norm::None)?;

        let kind = t.required("dataset.kind")?;
        let dataset = match kind.as_str() {
            "blobs" => DatasetConfig::Blobs {
                classes: t.get("dataset.classes", 8)?,
                per_class: t.get("dataset.per_class", 100)?,
                shape: match t.raw("dataset.shape") {
                    Some(s) => parse_shape("dataset.shape", &s)?,
                    None => [1, 16, 16],
                },
                separation: t.get("dataset.separation", 3.0)?,
                noise: t.get("dataset.noise", 0.1)?,
                seed: t.get("dataset.seed", 0)?,
            },
            "idx" => {
                let mut path = |key: &str| -> Result<PathBuf> {
                    let p = PathBuf::from(t.required(key)?);
                    if !p.is_file() {
                        return Err(invalid(key, format!("no such file `{}`", p.display())));
                    }
                    Ok(p)
                };
                DatasetConfig::Idx {
                    train_images: path("dataset.train_images")?,
                    train_labels: path("dataset.train_labels")?,
                    test_images: path("dataset.test_images")?,
                    test_labels: path("dataset.test_labels")?,
                }
            }
            other => return Err(invalid("dataset.kind", format!("expected `blobs` or `idx`, got `{other}`"))),
        };
        let (input, classes) = match &dataset {
            DatasetConfig::Blobs {
                classes,
                per_class,
                shape,
                separation,
                noise,
                ..
            } => {
                if *classes < 2 {
                    return Err(invalid("dataset.classes", "need at least 2 classes"));
                }
                check_positive("dataset.per_class", *per_class)?;
                if !(*noise > 0.0) {
                    return Err(invalid("dataset.noise", format!("must be positive, got {noise}")));
                }
                if !(*separation >= 0.0) {
                    return Err(invalid("dataset.separation", format!("must be non-negative, got {separation}")));
                }
                (*shape, *classes)
            }
            // Shape and class count are only known once the files are read.
            DatasetConfig::Idx { .. } => ([1, 28, 28], 10),
        };
        let mut model = match arch {
            Arch::Mlp => ModelSpec::mlp(input, classes),
            Arch::Conv3s => ModelSpec::conv3s(input, classes),
        };
        model.norm = norm;
        if let Some(w) = t.list::<usize>("model.widths")? {
            if w.is_empty() || w.contains(&0) {
                return Err(invalid("model.widths", "widths must be positive"));
            }
            if arch == Arch::Conv3s && w.len() != 3 {
                return Err(invalid("model.widths", "conv3s takes exactly three channel counts"));
            }
            model.widths = w;
        }

        let schedule = ScheduleConfig {
            p_lth: t.get("schedule.p_lth", 0.2)?,
            p_colt: t.get("schedule.p_colt", 0.15)?,
            target_sparsity: t.get("schedule.target_sparsity", 89.0)?,
            denominator: t.get("schedule.denominator", Denominator::Eligible)?,
            max_rounds: t.get("schedule.max_rounds", 30)?,
            eligibility: t.get("schedule.eligibility", Eligibility::ConvOnly)?,
            milestones: t.list("schedule.milestones")?.unwrap_or_default(),
            accuracy_target: match t.raw("schedule.accuracy_target") {
                None => None,
                Some(v) => Some(
                    v.parse::<f64>()
                        .map_err(|e| invalid("schedule.accuracy_target", format!("`{v}`: {e}")))?,
                ),
            },
        };
        check_fraction("schedule.p_lth", schedule.p_lth)?;
        check_fraction("schedule.p_colt", schedule.p_colt)?;
        if !(0.0..100.0).contains(&schedule.target_sparsity) {
            return Err(invalid(
                "schedule.target_sparsity",
                format!("must lie in [0, 100), got {}", schedule.target_sparsity),
            ));
        }
        check_positive("schedule.max_rounds", schedule.max_rounds)?;
        if let Some(m) = schedule.milestones.iter().find(|m| !(0.0..=100.0).contains(*m)) {
            return Err(invalid("schedule.milestones", format!("{m} is not a percentage")));
        }
        if let Some(a) = schedule.accuracy_target {
            if !(0.0..=100.0).contains(&a) {
                return Err(invalid("schedule.accuracy_target", format!("{a} is not a percentage")));
            }
        }

        let defaults = TrainConfig::default();
        let optimizer = match t.get("training.optimizer", "adam".to_string())?.as_str() {
            "adam" => OptimizerChoice::Adam {
                beta1: t.get("training.beta1", 0.9)?,
                beta2: t.get("training.beta2", 0.999)?,
            },
            "sgd" => OptimizerChoice::Sgd {
                momentum: t.get("training.momentum", 0.9)?,
            },
            other => return Err(invalid("training.optimizer", format!("expected `adam` or `sgd`, got `{other}`"))),
        };
        // Hyperparameters of the optimizer not chosen are still validated keys.
        for key in ["training.beta1", "training.beta2", "training.momentum"] {
            if let Some(v) = t.raw(key) {
                v.parse::<f32>().map_err(|e| invalid(key, format!("`{v}`: {e}")))?;
            }
        }
        match optimizer {
            OptimizerChoice::Adam { beta1, beta2 } => {
                for (key, b) in [("training.beta1", beta1), ("training.beta2", beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        return Err(invalid(key, format!("must lie in [0, 1), got {b}")));
                    }
                }
            }
            OptimizerChoice::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(invalid("training.momentum", format!("must lie in [0, 1), got {momentum}")));
                }
            }
        }
        let training = TrainConfig {
            epochs: t.get("training.epochs", defaults.epochs)?,
            batch_size: t.get("training.batch_size", defaults.batch_size)?,
            lr: t.get("training.lr", defaults.lr)?,
            warmup: t.get("training.warmup", defaults.warmup)?,
            anneal_at: t.list("training.anneal_at")?.unwrap_or_default(),
            anneal_factor: t.get("training.anneal_factor", defaults.anneal_factor)?,
            optimizer,
            weight_decay: t.get("training.weight_decay", defaults.weight_decay)?,
            val_fraction: t.get("training.val_fraction", defaults.val_fraction)?,
        };
        check_positive("training.epochs", training.epochs)?;
        check_positive("training.batch_size", training.batch_size)?;
        if !(training.lr > 0.0 && training.lr.is_finite()) {
            return Err(invalid("training.lr", format!("must be positive, got {}", training.lr)));
        }
        if let Some(f) = training.anneal_at.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(invalid("training.anneal_at", format!("{f} is not an epoch fraction in [0, 1]")));
        }
        if !(training.anneal_factor >= 1.0) {
            return Err(invalid("training.anneal_factor", "must be at least 1"));
        }
        if !(training.weight_decay >= 0.0) {
            return Err(invalid("training.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&training.val_fraction) {
            return Err(invalid("training.val_fraction", "must lie in [0, 1)"));
        }

        let seeds = Seeds {
            init: t.get("seeds.init", 0)?,
            data: t.get("seeds.data", 0)?,
            head: t.get("seeds.head", 0)?,
        };
        let output = PathBuf::from(t.get("output.dir", "out".to_string())?);

        debug_assert!(t.values.is_empty(), "unconsumed keys {:?}", t.values.keys());
        model
            .validate()
            .map_err(|e| invalid("model.arch", e.to_string()))?;
        Ok(Self {
            name,
            model,
            dataset,
            schedule,
            training,
            seeds,
            output,
        })
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        put("experiment.name", self.name.clone());
        put("model.arch", self.model.arch.as_str().into());
        put(
            "model.widths",
            self.model.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        put("model.norm", self.model.norm.as_str().into());
        match &self.dataset {
            DatasetConfig::Blobs {
                classes,
                per_class,
                shape,
                separation,
                noise,
                seed,
            } => {
                put("dataset.kind", "blobs".into());
                put("dataset.classes", classes.to_string());
                put("dataset.per_class", per_class.to_string());
                put("dataset.shape", format!("{}x{}x{}", shape[0], shape[1], shape[2]));
                put("dataset.separation", separation.to_string());
                put("dataset.noise", noise.to_string());
                put("dataset.seed", seed.to_string());
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                put("dataset.kind", "idx".into());
                put("dataset.train_images", train_images.display().to_string());
                put("dataset.train_labels", train_labels.display().to_string());
                put("dataset.test_images", test_images.display().to_string());
                put("dataset.test_labels", test_labels.display().to_string());
            }
        }
        let sc = &self.schedule;
        put("schedule.p_lth", sc.p_lth.to_string());
        put("schedule.p_colt", sc.p_colt.to_string());
        put("schedule.target_sparsity", sc.target_sparsity.to_string());
        put("schedule.denominator", sc.denominator.as_str().into());
        put("schedule.max_rounds", sc.max_rounds.to_string());
        put("schedule.eligibility", sc.eligibility.as_str().into());
        put("schedule.milestones", join(&sc.milestones));
        if let Some(a) = sc.accuracy_target {
            put("schedule.accuracy_target", a.to_string());
        }
        let tr = &self.training;
        put("training.epochs", tr.epochs.to_string());
        put("training.batch_size", tr.batch_size.to_string());
        put("training.lr", tr.lr.to_string());
        put("training.warmup", tr.warmup.to_string());
        put("training.anneal_at", join(&tr.anneal_at));
        put("training.anneal_factor", tr.anneal_factor.to_string());
        match tr.optimizer {
            OptimizerChoice::Adam { beta1, beta2 } => {
                put("training.optimizer", "adam".into());
                put("training.beta1", beta1.to_string());
                put("training.beta2", beta2.to_string());
            }
            OptimizerChoice::Sgd { momentum } => {
                put("training.optimizer", "sgd".into());
                put("training.momentum", momentum.to_string());
            }
        }
        put("training.weight_decay", tr.weight_decay.to_string());
        put("training.val_fraction", tr.val_fraction.to_string());
        put("seeds.init", self.seeds.init.to_string());
        put("seeds.data", self.seeds.data.to_string());
        put("seeds.head", self.seeds.head.to_string());
        put("output.dir", self.output.display().to_string());
        s
    }

    /// Pruning schedule for `fraction` (the LTH or COLT rate).
    pub fn prune_schedule(&self, fraction: f64) -> PruneSchedule {
        PruneSchedule {
            fraction,
            eligibility: self.schedule.eligibility,
            target_sparsity: self.schedule.target_sparsity,
            target_denominator: self.schedule.denominator,
            max_rounds: self.schedule.max_rounds,
        }
    }

    pub fn run_config(&self, fraction: f64) -> RunConfig {
        RunConfig {
            train: self.training.clone(),
            schedule: self.prune_schedule(fraction),
            seeds: self.seeds,
            milestones: self.schedule.milestones.clone(),
            accuracy_target: self.schedule.accuracy_target,
            threads: 1,
            source: self.dataset.id(),
        }
    }

    /// Model spec matching a loaded dataset's input shape and class count.
    pub fn model_for(&self, data: &TrainTest) -> ModelSpec {
        ModelSpec {
            input: data.train.shape(),
            num_classes: data.train.num_classes(),
            ..self.model.clone()
        }
    }
}
