//! Modality mixture sampling and the adapter training loop with logical
//! data-parallel workers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use framecap_tensor::{Gradients, Graph};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::model::{Example, ForwardOptions, Model, PrefixCache};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{hash_str, stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncMode {
    /// Each worker draws its own modality.
    #[default]
    Independent,
    /// One shared draw per step for all workers.
    Synchronized,
}

impl std::str::FromStr for SyncMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "synchronized" | "sync" => Ok(Self::Synchronized),
            other => Err(Error::Config(format!("unknown sync mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub p_image: f64,
    pub image_batch: usize,
    pub video_batch: usize,
    pub workers: usize,
    pub base_seed: u64,
    pub sync: SyncMode,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            p_image: 0.95,
            image_batch: 32,
            video_batch: 4,
            workers: 1,
            base_seed: 0,
            sync: SyncMode::Independent,
        }
    }
}

/// Indices into one modality pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchDraw {
    pub modality: Modality,
    pub indices: Vec<usize>,
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_image) {
            return Err(Error::Config(format!("p_image {} outside [0, 1]", self.p_image)));
        }
        if self.image_batch == 0 || self.video_batch == 0 || self.workers == 0 {
            return Err(Error::Config("batch sizes and worker count must be positive".into()));
        }
        Ok(())
    }

    /// The same mixture with one shared modality draw per step.
    pub fn fully_synchronized(&self) -> Self {
        Self {
            sync: SyncMode::Synchronized,
            ..self.clone()
        }
    }

    pub fn batch_size(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.image_batch,
            Modality::Video => self.video_batch,
        }
    }

    /// Modality of `worker` at `step`.
    pub fn modality(&self, worker: usize, step: u64) -> Modality {
        let mut rng = match self.sync {
            SyncMode::Independent => stream(&[self.base_seed, hash_str("modality"), worker as u64, step]),
            SyncMode::Synchronized => stream(&[self.base_seed, hash_str("modality-sync"), step]),
        };
        if rng.random_bool(self.p_image) {
            Modality::Image
        } else {
            Modality::Video
        }
    }

    /// A homogeneous batch for `worker` at `step`; `micro` selects the
    /// gradient-accumulation slice.
    pub fn sample_batch(&self, data: &Dataset, worker: usize, step: u64, micro: usize) -> Result<BatchDraw> {
        let modality = self.modality(worker, step);
        let pool = data.pool(modality).len();
        if pool == 0 {
            return Err(Error::Data(format!("no {modality:?} samples to draw from")));
        }
        let mut rng = stream(&[self.base_seed, hash_str("batch"), worker as u64, step, micro as u64]);
        let indices = (0..self.batch_size(modality)).map(|_| rng.random_range(0..pool)).collect();
        Ok(BatchDraw { modality, indices })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: String,
    /// Absolute step to train up to.
    pub steps: u64,
    pub adam: AdamConfig,
    pub warmup_steps: u64,
    pub mixture: MixtureConfig,
    pub grad_accum: usize,
    pub use_prefix_cache: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: "pretrain".into(),
            steps: 100,
            adam: AdamConfig::default(),
            warmup_steps: 0,
            mixture: MixtureConfig::default(),
            grad_accum: 1,
            use_prefix_cache: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.mixture.validate()?;
        if self.grad_accum == 0 {
            return Err(Error::Config("grad_accum must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.adam.lr
        } else {
            self.adam.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: String,
    pub modalities: Vec<Modality>,
    pub loss: f64,
    pub lr: f64,
    pub gate_mean_abs: f64,
}

/// Averages per-worker gradients in worker order.
pub fn reduce_gradients(worker_grads: Vec<Gradients>) -> Gradients {
    let n = worker_grads.len();
    let mut iter = worker_grads.into_iter();
    let mut total = iter.next().unwrap_or_default();
    for g in iter {
        total.add_assign(&g);
    }
    if n > 1 {
        total.scale(1.0 / n as f64);
    }
    total
}

struct WorkerResult {
    modality: Modality,
    loss: f64,
    grads: Gradients,
}

fn worker_step(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    worker: usize,
    step: u64,
    cache: Option<&PrefixCache>,
) -> Result<WorkerResult> {
    let mut grads = Gradients::default();
    let mut loss_sum = 0.0;
    let mut modality = Modality::Video;
    for micro in 0..cfg.grad_accum {
        let draw = cfg.mixture.sample_batch(data, worker, step, micro)?;
        modality = draw.modality;
        let pool = data.pool(draw.modality);
        let batch: Vec<Example<'_>> = draw.indices.iter().map(|&i| pool[i].example()).collect();
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &batch, ForwardOptions { text_only: false, cache })?;
        loss_sum += g.scalar(loss);
        grads.add_assign(&g.backward(loss)?);
    }
    if cfg.grad_accum > 1 {
        grads.scale(1.0 / cfg.grad_accum as f64);
    }
    Ok(WorkerResult {
        modality,
        loss: loss_sum / cfg.grad_accum as f64,
        grads,
    })
}

/// Runs optimizer steps from `adam.step` up to `cfg.steps`. Every random
/// draw is keyed by the absolute step, so a run resumed from a checkpoint
/// continues exactly where the uninterrupted run would be.
pub fn train(
    model: &mut Model,
    adam: &mut AdamState,
    data: &Dataset,
    cfg: &TrainConfig,
    cache: &PrefixCache,
    on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let cache = cfg.use_prefix_cache.then_some(cache);
    let mut records = Vec::new();
    while adam.step < cfg.steps {
        let step = adam.step;
        let results: Vec<Result<WorkerResult>> = if cfg.mixture.workers == 1 {
            vec![worker_step(model, data, cfg, 0, step, cache)]
        } else {
            let shared: &Model = model;
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..cfg.mixture.workers)
                    .map(|w| scope.spawn(move || worker_step(shared, data, cfg, w, step, cache)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Backend("worker panicked".into()))))
                    .collect()
            })
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let loss = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                reason: format!("loss is {loss}"),
            });
        }
        let modalities = results.iter().map(|r| r.modality).collect();
        let grads = reduce_gradients(results.into_iter().map(|r| r.grads).collect());
        adam.config.lr = cfg.lr_at(step);
        adam.step(&mut model.store, &grads)?;
        let record = StepRecord {
            step: adam.step,
            phase: cfg.phase.clone(),
            modalities,
            loss,
            lr: adam.config.lr,
            gate_mean_abs: model.gate_snapshot().mean_abs(),
        };
        on_step(&record)?;
        records.push(record);
    }
    Ok(records)
}

/// Append-only JSONL writer for step records.
pub struct MetricsLog {
    out: BufWriter<fs::File>,
}

impl MetricsLog {
    pub fn append_to(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("metrics log", e))
    }
}
