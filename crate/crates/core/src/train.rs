//! Dense training, sparsity-aware adaptation, fixed-config finetuning, and
//! evaluation.
//!
//! All three training modes share one loop and differ only in where each
//! step's sparsity config comes from. Data order and config sampling draw
//! from separate seeded streams, so adapting with the grid `{0}` replays
//! dense training exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{bind_params, forward_batch, Model, ModelParams};
use crate::sparsity::{SparsityConfig, FULL_GRID};
use crate::tape::Tape;
use crate::tensor::Tensor;

const DATA_STREAM: u64 = 0;
const SPARSITY_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    /// Only `"adam"` is supported.
    pub optimizer: String,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    /// Only `"constant"` is supported.
    pub schedule: String,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Ratios (tenths) that adaptation samples from.
    pub grid: Vec<u8>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            optimizer: "adam".into(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: "constant".into(),
            batch_size: 32,
            steps: 1000,
            seed: 0,
            grid: FULL_GRID.to_vec(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.optimizer != "adam" {
            return fail(format!("unsupported optimizer {:?}", self.optimizer));
        }
        if self.schedule != "constant" {
            return fail(format!("unsupported schedule {:?}", self.schedule));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if self.grid.is_empty() || self.grid.iter().any(|&t| t > 8) {
            return fail(format!(
                "sparsity grid {:?} must be a non-empty subset of 0..=8",
                self.grid
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f32,
    /// Accuracy on the step's batch.
    pub accuracy: f32,
    /// Average sparsity of the step's config.
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<StepLog>,
}

/// Where each step's sparsity config comes from.
#[derive(Debug, Clone, Copy)]
pub enum ConfigSource<'a> {
    Dense,
    Sampled,
    Fixed(&'a SparsityConfig),
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .to_vec()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], s: &TrainSettings) {
        self.t += 1;
        let c1 = 1.0 - s.beta1.powi(self.t);
        let c2 = 1.0 - s.beta2.powi(self.t);
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g;
                v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= s.lr * mhat / (vhat.sqrt() + s.adam_eps);
            }
        }
    }
}

/// Mean cross-entropy, batch accuracy and per-parameter gradients of one
/// batch under `sparsity`.
pub fn loss_and_grads(
    model: &Model,
    images: &[&Tensor],
    labels: &[usize],
    sparsity: &SparsityConfig,
) -> Result<(f32, f32, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &model.params, true);
    let out = forward_batch(&mut tape, &model.config, &vars, images, sparsity)?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    let acc = batch_accuracy(tape.value(out.logits), labels);
    tape.backward(loss)?;
    let grads = vars
        .to_vec()
        .into_iter()
        .map(|&v| tape.grad_tensor(v))
        .collect();
    Ok((tape.value(loss).data()[0], acc, grads))
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f32 {
    let k = logits.last_dim();
    let hits = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f32 / labels.len() as f32
}

/// First index of the maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The shared training loop.
pub fn train(
    model: &Model,
    data: &Dataset,
    settings: &TrainSettings,
    source: ConfigSource<'_>,
) -> Result<TrainOutcome> {
    settings.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training split".into()));
    }
    let depths = model.config.depths();
    let dense = SparsityConfig::dense(&depths);
    if let ConfigSource::Fixed(cfg) = source {
        if cfg.depths() != depths.as_slice() {
            return Err(Error::Sparsity(format!(
                "sparsity config covers stages {:?}, model has {:?}",
                cfg.depths(),
                depths
            )));
        }
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    data_rng.set_stream(DATA_STREAM);
    let mut sparsity_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    sparsity_rng.set_stream(SPARSITY_STREAM);

    let mut model = model.clone();
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut idx = Vec::with_capacity(settings.batch_size);
        while idx.len() < settings.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut data_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let images: Vec<&Tensor> = idx.iter().map(|&i| &data.samples[i].image).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].label).collect();
        let sampled;
        let sparsity = match source {
            ConfigSource::Dense => &dense,
            ConfigSource::Sampled => {
                sampled = SparsityConfig::sample(&depths, &settings.grid, &mut sparsity_rng)?;
                &sampled
            }
            ConfigSource::Fixed(cfg) => cfg,
        };
        let (loss, accuracy, grads) = loss_and_grads(&model, &images, &labels, sparsity)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        adam.step(&mut model.params, &grads, settings);
        curve.push(StepLog {
            step,
            loss,
            accuracy,
            sparsity: sparsity.average(),
        });
    }
    Ok(TrainOutcome { model, curve })
}

pub fn train_dense(
    model: &Model,
    data: &Dataset,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    train(model, data, settings, ConfigSource::Dense)
}

/// A fresh config from `settings.grid` at every step.
pub fn adapt(model: &Model, data: &Dataset, settings: &TrainSettings) -> Result<TrainOutcome> {
    train(model, data, settings, ConfigSource::Sampled)
}

pub fn finetune(
    model: &Model,
    fixed: &SparsityConfig,
    data: &Dataset,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    train(model, data, settings, ConfigSource::Fixed(fixed))
}

const EVAL_BATCH: usize = 64;

/// Predicted class of every sample.
pub fn predict(model: &Model, data: &Dataset, sparsity: &SparsityConfig) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let (logits, _) = model.forward_batch(&images, sparsity)?;
        preds.extend(logits.data().chunks_exact(logits.last_dim()).map(argmax));
    }
    Ok(preds)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(model: &Model, data: &Dataset, sparsity: &SparsityConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation split".into()));
    }
    let preds = predict(model, data, sparsity)?;
    let hits = preds
        .iter()
        .zip(data.samples.iter())
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Curve as CSV: `step,loss,accuracy,sparsity`.
pub fn curve_csv(curve: &[StepLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in curve {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
