//! Run configuration and the end-to-end commands behind the CLI.
//!
//! Every command reads a [`RunConfig`], writes its artifacts under
//! `out_dir`, and returns a summary. Artifacts of earlier stages are found by
//! fixed file names inside `out_dir`, so a pipeline is just the commands run
//! in order against one config.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cost::{
    macs_model, profile_model, ConstraintChecker, CostReport, LatencyReport, ResourceConstraint,
};
use crate::data::{
    generate_dataset, load_idx, load_splits, save_splits, split, Dataset, DatasetSpec, Splits,
};
use crate::error::{Error, Result};
use crate::model::{ExecutionCounts, Model, ModelConfig, ModelParams};
use crate::search::{
    evolve, exhaustive_search, random_search, search_log_csv, SearchOutcome, SearchSettings,
};
use crate::sparsity::SparsityConfig;
use crate::tensor::Tensor;
use crate::train::{
    adapt, curve_csv, evaluate, finetune, train_dense, TrainOutcome, TrainSettings,
};

pub const DATASET_FILE: &str = "dataset.spwv";
pub const DENSE_FILE: &str = "dense.spwv";
pub const ADAPTED_FILE: &str = "adapted.spwv";
pub const FINETUNED_FILE: &str = "finetuned.spwv";
pub const SPARSITY_FILE: &str = "best_sparsity.json";
pub const SEARCH_LOG_FILE: &str = "search_log.csv";
pub const SEARCH_RESULT_FILE: &str = "search_result.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const PROFILE_REPORT_FILE: &str = "profile_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated on demand from a dataset spec; its seed is replaced by the run seed.
    Synthetic(DatasetSpec),
    /// IDX files; the train files are split into train and validation.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        val_fraction: f64,
    },
    /// Splits cached by `generate-data`.
    Cache { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(DatasetSpec::default())
    }
}

/// Search constraint; the fraction form is relative to the dense model's MACs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSpec {
    Macs {
        budget: u64,
    },
    MacsFraction {
        fraction: f64,
    },
    Latency {
        budget_ms: f64,
        warmup: usize,
        iters: usize,
    },
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        ConstraintSpec::MacsFraction { fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSettings {
    pub warmup: usize,
    pub iters: usize,
    /// Input side for latency runs; the dataset's image size when absent.
    pub resolution: Option<usize>,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        ProfileSettings {
            warmup: 50,
            iters: 100,
            resolution: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// JSON model config; the reference model when absent.
    pub model: Option<PathBuf>,
    pub data: DataSource,
    pub train: TrainSettings,
    pub adapt: TrainSettings,
    pub finetune: TrainSettings,
    pub search: SearchSettings,
    pub constraint: ConstraintSpec,
    pub profile: ProfileSettings,
    pub out_dir: PathBuf,
    /// Seeds every stochastic component; overrides the per-section seeds.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            data: DataSource::default(),
            train: TrainSettings {
                steps: 300,
                ..TrainSettings::default()
            },
            adapt: TrainSettings {
                steps: 300,
                ..TrainSettings::default()
            },
            finetune: TrainSettings {
                steps: 150,
                ..TrainSettings::default()
            },
            search: SearchSettings::default(),
            constraint: ConstraintSpec::default(),
            profile: ProfileSettings::default(),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &mut cfg.model {
            resolve(base, m);
        }
        match &mut cfg.data {
            DataSource::Synthetic(_) => {}
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    resolve(base, p);
                }
            }
            DataSource::Cache { path } => resolve(base, path),
        }
        resolve(base, &mut cfg.out_dir);
        Ok(cfg)
    }

    /// Applies the run seed everywhere and checks every section and path.
    pub fn validate(&mut self) -> Result<()> {
        let s = self.seed;
        self.train.seed = s;
        self.adapt.seed = s.wrapping_add(1);
        self.finetune.seed = s.wrapping_add(2);
        self.search.seed = s.wrapping_add(3);
        if let DataSource::Synthetic(spec) = &mut self.data {
            spec.seed = s;
            spec.validate()?;
        }
        self.train.validate()?;
        self.adapt.validate()?;
        self.finetune.validate()?;
        self.search.validate()?;
        let mut paths: Vec<&Path> = Vec::new();
        if let Some(m) = &self.model {
            paths.push(m);
        }
        match &self.data {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                val_fraction,
            } => {
                if !(0.0..1.0).contains(val_fraction) {
                    return Err(Error::Config(format!(
                        "val_fraction {val_fraction} outside [0, 1)"
                    )));
                }
                paths.extend(
                    [train_images, train_labels, test_images, test_labels].map(|p| p.as_path()),
                );
            }
            DataSource::Cache { path } => paths.push(path),
            DataSource::Synthetic(_) => {}
        }
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "path {} does not exist",
                    p.display()
                )));
            }
        }
        if self.profile.iters < 4 || !self.profile.iters.is_multiple_of(2) {
            return Err(Error::Config("profile.iters must be even and >= 4".into()));
        }
        self.model_config()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        match &self.model {
            None => Ok(ModelConfig::reference()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let cfg: ModelConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn load_data(&self) -> Result<Splits> {
        match &self.data {
            DataSource::Synthetic(spec) => generate_dataset(spec),
            DataSource::Cache { path } => load_splits(path),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                val_fraction,
            } => {
                let full = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                let mut parts = split(&full, &[1.0 - val_fraction, *val_fraction], self.seed)?;
                let val = parts.pop().expect("two parts");
                let train = parts.pop().expect("two parts");
                Ok(Splits { train, val, test })
            }
        }
    }

    /// Input resolution implied by the data.
    pub fn resolution(&self, splits: &Splits) -> Result<(usize, usize)> {
        let first = [&splits.train, &splits.val, &splits.test]
            .into_iter()
            .find_map(|d| d.samples.first())
            .ok_or_else(|| Error::EmptyDataset("every split is empty".into()))?;
        Ok((first.image.shape()[0], first.image.shape()[1]))
    }

    pub fn resource_constraint(
        &self,
        cfg: &ModelConfig,
        resolution: (usize, usize),
    ) -> Result<ResourceConstraint> {
        Ok(match self.constraint {
            ConstraintSpec::Macs { budget } => ResourceConstraint::Macs { budget },
            ConstraintSpec::MacsFraction { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::Config(format!(
                        "MACs fraction {fraction} outside (0, 1]"
                    )));
                }
                let dense =
                    macs_model(cfg, &SparsityConfig::dense(&cfg.depths()), resolution)?.total;
                ResourceConstraint::Macs {
                    budget: (dense as f64 * fraction).floor() as u64,
                }
            }
            ConstraintSpec::Latency {
                budget_ms,
                warmup,
                iters,
            } => ResourceConstraint::Latency {
                budget_ms,
                warmup,
                iters,
            },
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn load_sparsity(path: &Path) -> Result<SparsityConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SparsityConfig::from_json(&text)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} {} not found; run the earlier stage first",
            path.display()
        )))
    }
}

fn check_model_matches(model: &Model, run: &RunConfig) -> Result<()> {
    let cfg = run.model_config()?;
    if model.config != cfg {
        return Err(Error::Config(
            "checkpoint model config differs from the run's model config".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub path: PathBuf,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn cmd_generate_data(run: &RunConfig) -> Result<DataSummary> {
    let splits = run.load_data()?;
    let path = run.artifact(DATASET_FILE);
    save_splits(&path, &splits)?;
    Ok(DataSummary {
        path,
        train: splits.train.len(),
        val: splits.val.len(),
        test: splits.test.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub final_loss: Option<f32>,
    pub val_accuracy: Option<f64>,
}

fn finish_training(
    run: &RunConfig,
    out: TrainOutcome,
    ckpt: &str,
    curve: &str,
    val: &Dataset,
    eval_sparsity: &SparsityConfig,
) -> Result<TrainSummary> {
    let checkpoint = run.artifact(ckpt);
    save_checkpoint(&checkpoint, &out.model)?;
    let curve_path = run.artifact(curve);
    write_text(&curve_path, &curve_csv(&out.curve)?)?;
    let val_accuracy = if val.is_empty() {
        None
    } else {
        Some(evaluate(&out.model, val, eval_sparsity)?)
    };
    Ok(TrainSummary {
        checkpoint,
        curve: curve_path,
        final_loss: out.curve.last().map(|s| s.loss),
        val_accuracy,
    })
}

/// Initializes from the run seed and trains densely.
pub fn cmd_train(run: &RunConfig) -> Result<TrainSummary> {
    let cfg = run.model_config()?;
    let splits = run.load_data()?;
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    let model = Model {
        config: cfg,
        params,
    };
    let out = train_dense(&model, &splits.train, &run.train)?;
    let dense = SparsityConfig::dense(&model.config.depths());
    finish_training(run, out, DENSE_FILE, "train_curve.csv", &splits.val, &dense)
}

/// Sparsity-aware adaptation of the dense checkpoint.
pub fn cmd_adapt(run: &RunConfig) -> Result<TrainSummary> {
    let path = run.artifact(DENSE_FILE);
    require(&path, "dense checkpoint")?;
    let model = load_checkpoint(&path)?;
    check_model_matches(&model, run)?;
    let splits = run.load_data()?;
    let out = adapt(&model, &splits.train, &run.adapt)?;
    let half = SparsityConfig::uniform(&model.config.depths(), 5)?;
    finish_training(
        run,
        out,
        ADAPTED_FILE,
        "adapt_curve.csv",
        &splits.val,
        &half,
    )
}

/// Finetunes the adapted checkpoint at the searched config (or `sparsity`).
pub fn cmd_finetune(run: &RunConfig, sparsity: Option<&Path>) -> Result<TrainSummary> {
    let path = run.artifact(ADAPTED_FILE);
    require(&path, "adapted checkpoint")?;
    let sp_path = sparsity
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.artifact(SPARSITY_FILE));
    require(&sp_path, "sparsity config")?;
    let fixed = load_sparsity(&sp_path)?;
    let model = load_checkpoint(&path)?;
    check_model_matches(&model, run)?;
    let splits = run.load_data()?;
    let out = finetune(&model, &fixed, &splits.train, &run.finetune)?;
    finish_training(
        run,
        out,
        FINETUNED_FILE,
        "finetune_curve.csv",
        &splits.val,
        &fixed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Evolutionary,
    Random,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub mode: SearchMode,
    pub best: SparsityConfig,
    pub best_fitness: f64,
    pub best_resource: f64,
    pub budget: f64,
    pub evaluations: usize,
    pub fallbacks: usize,
    pub generations_logged: usize,
}

/// Searches for the config with the best validation accuracy on the adapted
/// checkpoint within the constraint. Random search gets the evaluation
/// budget evolution would spend, `n·(G+1)`.
pub fn cmd_search(run: &RunConfig, mode: SearchMode) -> Result<SearchSummary> {
    let path = run.artifact(ADAPTED_FILE);
    require(&path, "adapted checkpoint")?;
    let model = load_checkpoint(&path)?;
    check_model_matches(&model, run)?;
    let splits = run.load_data()?;
    if splits.val.is_empty() {
        return Err(Error::EmptyDataset("validation split".into()));
    }
    let resolution = run.resolution(&splits)?;
    let constraint = run.resource_constraint(&model.config, resolution)?;
    let needs_model = matches!(constraint, ResourceConstraint::Latency { .. });
    let mut checker = ConstraintChecker::new(
        constraint,
        model.config.clone(),
        resolution,
        needs_model.then(|| model.clone()),
    )?;
    let fitness = |c: &SparsityConfig| evaluate(&model, &splits.val, c);
    let s = &run.search;
    let outcome: SearchOutcome = match mode {
        SearchMode::Evolutionary => evolve(s, &mut checker, fitness)?,
        SearchMode::Random => {
            random_search(s.population * (s.generations + 1), s, &mut checker, fitness)?
        }
        SearchMode::Exhaustive => exhaustive_search(&mut checker, fitness)?,
    };
    write_text(
        &run.artifact(SPARSITY_FILE),
        &outcome.best.config.to_json()?,
    )?;
    write_text(
        &run.artifact(SEARCH_LOG_FILE),
        &search_log_csv(&outcome.log)?,
    )?;
    let summary = SearchSummary {
        mode,
        best: outcome.best.config.clone(),
        best_fitness: outcome.best.fitness.unwrap_or(f64::NAN),
        best_resource: outcome.best.resource,
        budget: checker.constraint.budget(),
        evaluations: outcome.evaluations,
        fallbacks: outcome.fallbacks,
        generations_logged: outcome.log.len(),
    };
    write_json(&run.artifact(SEARCH_RESULT_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn pick(self, splits: &Splits) -> &Dataset {
        match self {
            Split::Train => &splits.train,
            Split::Val => &splits.val,
            Split::Test => &splits.test,
        }
    }
}

/// Which checkpoint and config a report-style command uses.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    /// Defaults to the finetuned checkpoint, then adapted, then dense.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to dense.
    pub sparsity: Option<PathBuf>,
}

impl Selection {
    fn resolve(&self, run: &RunConfig) -> Result<(Model, SparsityConfig)> {
        let ckpt = match &self.checkpoint {
            Some(p) => p.clone(),
            None => [FINETUNED_FILE, ADAPTED_FILE, DENSE_FILE]
                .iter()
                .map(|f| run.artifact(f))
                .find(|p| p.exists())
                .ok_or_else(|| {
                    Error::Config(format!("no checkpoint found in {}", run.out_dir.display()))
                })?,
        };
        require(&ckpt, "checkpoint")?;
        let model = load_checkpoint(&ckpt)?;
        let sparsity = match &self.sparsity {
            Some(p) => load_sparsity(p)?,
            None => SparsityConfig::dense(&model.config.depths()),
        };
        if sparsity.depths() != model.config.depths().as_slice() {
            return Err(Error::Sparsity(format!(
                "sparsity config covers stages {:?}, checkpoint has {:?}",
                sparsity.depths(),
                model.config.depths()
            )));
        }
        Ok((model, sparsity))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub sparsity: SparsityConfig,
    pub accuracy: f64,
    pub cost: CostReport,
    pub latency: LatencyReport,
}

pub fn cmd_eval(run: &RunConfig, sel: &Selection, which: Split) -> Result<EvalReport> {
    let (model, sparsity) = sel.resolve(run)?;
    let splits = run.load_data()?;
    let data = which.pick(&splits);
    let accuracy = evaluate(&model, data, &sparsity)?;
    let resolution = run.resolution(&splits)?;
    let cost = macs_model(&model.config, &sparsity, resolution)?;
    let input = data.samples[0].image.clone();
    let latency = profile_model(
        &model,
        &sparsity,
        &input,
        run.profile.warmup,
        run.profile.iters,
    )?;
    let report = EvalReport {
        split: which,
        samples: data.len(),
        sparsity,
        accuracy,
        cost,
        latency,
    };
    write_json(&run.artifact(EVAL_REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub pgm: PathBuf,
    pub csv: PathBuf,
    pub max_count: u32,
    pub total_sublayers: u32,
}

/// Execution-count heatmap of one test image.
pub fn cmd_heatmap(
    run: &RunConfig,
    sel: &Selection,
    which: Split,
    index: usize,
) -> Result<HeatmapSummary> {
    let (model, sparsity) = sel.resolve(run)?;
    let splits = run.load_data()?;
    let data = which.pick(&splits);
    let sample = data.samples.get(index).ok_or(Error::Index {
        what: "image",
        index,
        len: data.len(),
    })?;
    let (_, counts) = model.forward(&sample.image, &sparsity, true)?;
    let counts: ExecutionCounts = counts.expect("requested");
    let pgm = run.artifact(&format!("heatmap_{index}.pgm"));
    let csv = run.artifact(&format!("heatmap_{index}.csv"));
    if let Some(dir) = pgm.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&pgm, counts.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
    write_text(&csv, &counts.to_csv())?;
    Ok(HeatmapSummary {
        pgm,
        csv,
        max_count: counts.max(),
        total_sublayers: counts.total_sublayers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub resolution: (usize, usize),
    pub sparsity: SparsityConfig,
    pub macs: u64,
    pub latency: LatencyReport,
}

/// Latency of one config on a fixed input at the profile resolution.
pub fn cmd_profile(run: &RunConfig, sel: &Selection) -> Result<ProfileReport> {
    let (model, sparsity) = sel.resolve(run)?;
    let side = match run.profile.resolution {
        Some(r) => r,
        None => run.resolution(&run.load_data()?)?.0,
    };
    let resolution = (side, side);
    let cost = macs_model(&model.config, &sparsity, resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let input = Tensor::rand_uniform(&[side, side, model.config.in_channels], 0.0, 1.0, &mut rng);
    let latency = profile_model(
        &model,
        &sparsity,
        &input,
        run.profile.warmup,
        run.profile.iters,
    )?;
    let report = ProfileReport {
        resolution,
        sparsity,
        macs: cost.total,
        latency,
    };
    write_json(&run.artifact(PROFILE_REPORT_FILE), &report)?;
    Ok(report)
}
