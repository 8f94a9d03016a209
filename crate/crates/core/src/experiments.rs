//! Scripted desk-scale comparisons: pseudolabel vs ASR pre-training,
//! modality mixtures, gate initialization, Adam β₂ and modality sync.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{gate_drift, GateDrift, GateInitMode, GateMode};
use crate::data::{prepare_samples, Dataset, FeatureCache, Sample};
use crate::error::{Error, Result};
use crate::metrics::{cider_d, mean_nll, token_accuracy, EvalPair};
use crate::model::{Model, ModelConfig, PrefixCache, Strategy};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, hash_str};
use crate::synth::{gen_corpus, CorpusKind, Split, SynthGeometry};
use crate::trainer::{train, MixtureConfig, SyncMode, TrainConfig};

pub const EXPERIMENTS: [&str; 5] = ["asr-vs-pseudo", "image-vs-video-vs-mix", "gate-init", "beta2", "sync-mode"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub model: ModelConfig,
    pub geometry: SynthGeometry,
    pub pretrain_videos: usize,
    pub pretrain_images: usize,
    pub finetune_videos: usize,
    pub eval_videos: usize,
    /// Eval videos captioned greedily for CIDEr-D.
    pub cider_videos: usize,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub video_batch: usize,
    pub image_batch: usize,
    pub finetune_batch: usize,
    pub p_image: f64,
    pub lr: f64,
    pub finetune_lr: f64,
    pub beta2: f64,
    pub seeds: Vec<u64>,
    pub eval_seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            geometry: SynthGeometry::default(),
            pretrain_videos: 1024,
            pretrain_images: 1024,
            finetune_videos: 128,
            eval_videos: 200,
            cider_videos: 48,
            pretrain_steps: 1000,
            finetune_steps: 150,
            video_batch: 2,
            image_batch: 16,
            finetune_batch: 8,
            p_image: 0.95,
            lr: 7e-3,
            finetune_lr: 2e-3,
            beta2: 0.999,
            seeds: vec![1, 2, 3],
            eval_seed: 12_345,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pretrain {
    None,
    PseudoMix,
    PseudoVideo,
    PseudoImage,
    AsrVideo,
}

/// One experimental condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub pretrain: Pretrain,
    pub gate_init: GateInitMode,
    pub gate_mode: GateMode,
    pub lr: Option<f64>,
    pub beta2: Option<f64>,
    pub pretrain_steps: Option<u64>,
    pub finetune: bool,
    pub workers: usize,
    pub sync: SyncMode,
}

impl Arm {
    pub fn new(name: &str, pretrain: Pretrain) -> Self {
        Self {
            name: name.into(),
            pretrain,
            gate_init: GateInitMode::Zero,
            gate_mode: GateMode::Vector,
            lr: None,
            beta2: None,
            pretrain_steps: None,
            finetune: true,
            workers: 1,
            sync: SyncMode::Independent,
        }
    }

    pub fn gate_init(mut self, g: GateInitMode) -> Self {
        self.gate_init = g;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub token_accuracy: f64,
    pub motion_accuracy: f64,
    pub loss: f64,
    pub cider_d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub pretrain_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub eval: Option<EvalSummary>,
    pub finetune_gate_drift: Option<GateDrift>,
    pub divergence: Option<String>,
    pub wall_s: f64,
}

impl RunResult {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        let e = self.eval.as_ref()?;
        Some(match m {
            Metric::TokenAccuracy => e.token_accuracy,
            Metric::MotionAccuracy => e.motion_accuracy,
            Metric::CiderD => e.cider_d,
            Metric::Loss => e.loss,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    TokenAccuracy,
    MotionAccuracy,
    CiderD,
    Loss,
}

/// `a − b` in units of the pooled per-arm standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metric: Metric,
    pub mean_a: f64,
    pub mean_b: f64,
    pub delta: f64,
    pub pooled_sigma: f64,
    pub margin_sigmas: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn compare(a: &str, xs: &[f64], b: &str, ys: &[f64], metric: Metric) -> Comparison {
    let (ma, sa) = mean_std(xs);
    let (mb, sb) = mean_std(ys);
    let pooled = ((sa * sa + sb * sb) / 2.0).sqrt();
    let delta = ma - mb;
    let margin = if pooled > 0.0 {
        delta / pooled
    } else if delta == 0.0 {
        0.0
    } else {
        delta.signum() * f64::INFINITY
    };
    Comparison {
        a: a.into(),
        b: b.into(),
        metric,
        mean_a: ma,
        mean_b: mb,
        delta,
        pooled_sigma: pooled,
        margin_sigmas: margin,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum CorpusSlot {
    PseudoVideo,
    AsrVideo,
    PseudoImage,
    Finetune,
    Eval,
}

/// A pre-trained frozen backbone plus caches shared by every run.
pub struct Lab {
    pub config: LabConfig,
    pub base: Model,
    features: FeatureCache,
    prefix: PrefixCache,
    corpora: Mutex<HashMap<(CorpusSlot, u64), Arc<Vec<Sample>>>>,
}

impl Lab {
    pub fn new(config: LabConfig) -> Result<Self> {
        let base = Model::build(config.model.clone())?;
        Ok(Self::with_model(config, base))
    }

    pub fn with_model(config: LabConfig, base: Model) -> Self {
        Self {
            config,
            base,
            features: FeatureCache::default(),
            prefix: PrefixCache::default(),
            corpora: Mutex::new(HashMap::new()),
        }
    }

    fn corpus(&self, slot: CorpusSlot, seed: u64) -> Result<Arc<Vec<Sample>>> {
        let key = (slot, if slot == CorpusSlot::Eval { 0 } else { seed });
        if let Some(c) = self.corpora.lock().expect("corpus lock").get(&key) {
            return Ok(Arc::clone(c));
        }
        let c = &self.config;
        let (n, kind, split, data_seed) = match slot {
            CorpusSlot::PseudoVideo => (c.pretrain_videos, CorpusKind::Pseudo, Split::Train, derive_seed(&[seed, hash_str("pt-video")])),
            CorpusSlot::AsrVideo => (c.pretrain_videos, CorpusKind::Asr, Split::Train, derive_seed(&[seed, hash_str("pt-video")])),
            CorpusSlot::PseudoImage => (c.pretrain_images, CorpusKind::Image, Split::Train, derive_seed(&[seed, hash_str("pt-image")])),
            CorpusSlot::Finetune => (c.finetune_videos, CorpusKind::GroundTruth, Split::Train, derive_seed(&[seed, hash_str("ft")])),
            CorpusSlot::Eval => (c.eval_videos, CorpusKind::GroundTruth, Split::Eval, c.eval_seed),
        };
        let records = gen_corpus(n, kind, split, data_seed, c.geometry)?;
        let samples = Arc::new(prepare_samples(&self.base, &records, c.geometry, &self.features)?);
        self.corpora.lock().expect("corpus lock").insert(key, Arc::clone(&samples));
        Ok(samples)
    }

    pub fn eval_samples(&self) -> Result<Arc<Vec<Sample>>> {
        self.corpus(CorpusSlot::Eval, 0)
    }

    fn pretrain_data(&self, p: Pretrain, seed: u64) -> Result<(Dataset, f64)> {
        let c = &self.config;
        let videos = |slot| -> Result<Vec<Sample>> { Ok(self.corpus(slot, seed)?.to_vec()) };
        Ok(match p {
            Pretrain::None => (Dataset::default(), 0.0),
            Pretrain::PseudoMix => (
                Dataset {
                    images: videos(CorpusSlot::PseudoImage)?,
                    videos: videos(CorpusSlot::PseudoVideo)?,
                },
                c.p_image,
            ),
            Pretrain::PseudoVideo => (Dataset { images: vec![], videos: videos(CorpusSlot::PseudoVideo)? }, 0.0),
            Pretrain::AsrVideo => (Dataset { images: vec![], videos: videos(CorpusSlot::AsrVideo)? }, 0.0),
            Pretrain::PseudoImage => (Dataset { images: videos(CorpusSlot::PseudoImage)?, videos: vec![] }, 1.0),
        })
    }

    /// Fresh adapters on the shared backbone.
    pub fn fresh_model(&self, arm: &Arm, seed: u64) -> Result<Model> {
        let mut model = if arm.gate_mode == self.base.config.gate_mode {
            self.base.clone()
        } else {
            let mut cfg = self.base.config.clone();
            cfg.gate_mode = arm.gate_mode;
            let mut m = Model::init(cfg)?;
            for id in self.base.frozen_ids() {
                let name = self.base.store.name(id);
                let target = m.store.id(name)?;
                *m.store.value_mut(target) = self.base.store.value(id).clone();
            }
            m.freeze_backbones();
            m
        };
        model.reinit_adapters(derive_seed(&[seed, hash_str("adapter-init")]), arm.gate_init)?;
        Ok(model)
    }

    pub fn run(&self, arm: &Arm, seed: u64) -> Result<RunResult> {
        let started = Instant::now();
        let c = &self.config;
        let mut model = self.fresh_model(arm, seed)?;
        let adam_cfg = AdamConfig {
            lr: arm.lr.unwrap_or(c.lr),
            beta2: arm.beta2.unwrap_or(c.beta2),
            ..AdamConfig::default()
        };
        let mut result = RunResult {
            arm: arm.name.clone(),
            seed,
            pretrain_losses: Vec::new(),
            finetune_losses: Vec::new(),
            eval: None,
            finetune_gate_drift: None,
            divergence: None,
            wall_s: 0.0,
        };

        if arm.pretrain != Pretrain::None {
            let (data, p_image) = self.pretrain_data(arm.pretrain, seed)?;
            let cfg = TrainConfig {
                phase: "pretrain".into(),
                steps: arm.pretrain_steps.unwrap_or(c.pretrain_steps),
                adam: adam_cfg,
                warmup_steps: 0,
                mixture: MixtureConfig {
                    p_image,
                    image_batch: c.image_batch,
                    video_batch: c.video_batch,
                    workers: arm.workers,
                    base_seed: derive_seed(&[seed, hash_str("pretrain")]),
                    sync: arm.sync,
                },
                grad_accum: 1,
                use_prefix_cache: true,
            };
            let mut adam = AdamState::new(adam_cfg);
            let out = train(&mut model, &mut adam, &data, &cfg, &self.prefix, &mut |r| {
                result.pretrain_losses.push(r.loss);
                Ok(())
            });
            if let Err(e) = out {
                return self.diverged(result, e, started);
            }
        }

        if arm.finetune {
            let data = Dataset {
                images: vec![],
                videos: self.corpus(CorpusSlot::Finetune, seed)?.to_vec(),
            };
            let ft_adam = AdamConfig {
                lr: arm.lr.unwrap_or(c.finetune_lr),
                ..adam_cfg
            };
            let cfg = TrainConfig {
                phase: "finetune".into(),
                steps: c.finetune_steps,
                adam: ft_adam,
                warmup_steps: 0,
                mixture: MixtureConfig {
                    p_image: 0.0,
                    image_batch: c.image_batch,
                    video_batch: c.finetune_batch,
                    workers: 1,
                    base_seed: derive_seed(&[seed, hash_str("finetune")]),
                    sync: SyncMode::Independent,
                },
                grad_accum: 1,
                use_prefix_cache: true,
            };
            let before = model.gate_snapshot();
            let mut adam = AdamState::new(ft_adam);
            let out = train(&mut model, &mut adam, &data, &cfg, &self.prefix, &mut |r| {
                result.finetune_losses.push(r.loss);
                Ok(())
            });
            if let Err(e) = out {
                return self.diverged(result, e, started);
            }
            result.finetune_gate_drift = Some(gate_drift(&before, &model.gate_snapshot())?);
        }

        result.eval = Some(self.evaluate(&model)?);
        result.wall_s = started.elapsed().as_secs_f64();
        log::info!(
            "{} seed {}: acc {:.4} in {:.1}s",
            arm.name,
            seed,
            result.eval.as_ref().map_or(f64::NAN, |e| e.token_accuracy),
            result.wall_s
        );
        Ok(result)
    }

    fn diverged(&self, mut result: RunResult, e: Error, started: Instant) -> Result<RunResult> {
        match e {
            Error::Divergence { .. } => {
                log::warn!("{} seed {} diverged: {e}", result.arm, result.seed);
                result.divergence = Some(e.to_string());
                result.wall_s = started.elapsed().as_secs_f64();
                Ok(result)
            }
            other => Err(other),
        }
    }

    pub fn evaluate(&self, model: &Model) -> Result<EvalSummary> {
        let eval = self.eval_samples()?;
        let acc = token_accuracy(model, &eval, Some(&self.prefix))?;
        let loss = mean_nll(model, &eval, Some(&self.prefix))?;
        let n = self.config.cider_videos.min(eval.len());
        let cider = if n >= 2 {
            let pairs: Vec<EvalPair> = eval[..n]
                .iter()
                .map(|s| {
                    let gen = model.generate(&s.video, Strategy::Greedy, model.config.max_caption_len, 0)?;
                    let mut cand = model.vocab.decode(&gen);
                    if cand.is_empty() {
                        cand = "<empty>".into();
                    }
                    Ok(EvalPair::from_text(&cand, &[&model.vocab.decode(&s.tokens)]))
                })
                .collect::<Result<_>>()?;
            cider_d(&pairs)?.corpus
        } else {
            f64::NAN
        };
        Ok(EvalSummary {
            token_accuracy: acc.accuracy,
            motion_accuracy: acc.motion_accuracy,
            loss,
            cider_d: cider,
        })
    }

    pub fn run_arms(&self, arms: &[Arm]) -> Result<Vec<ArmResult>> {
        arms.iter()
            .map(|arm| {
                let runs = self
                    .config
                    .seeds
                    .iter()
                    .map(|&s| self.run(arm, s))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ArmResult::new(arm.clone(), runs))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub runs: Vec<RunResult>,
    pub mean_token_accuracy: f64,
    pub std_token_accuracy: f64,
    pub mean_motion_accuracy: f64,
    pub mean_cider_d: f64,
    pub divergences: usize,
}

impl ArmResult {
    pub fn new(arm: Arm, runs: Vec<RunResult>) -> Self {
        let acc = Self::values_of(&runs, Metric::TokenAccuracy);
        let (mean, std) = if acc.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&acc) };
        let avg = |m| {
            let v = Self::values_of(&runs, m);
            if v.is_empty() {
                f64::NAN
            } else {
                mean_std(&v).0
            }
        };
        Self {
            mean_token_accuracy: mean,
            std_token_accuracy: std,
            mean_motion_accuracy: avg(Metric::MotionAccuracy),
            mean_cider_d: avg(Metric::CiderD),
            divergences: runs.iter().filter(|r| r.divergence.is_some()).count(),
            arm,
            runs,
        }
    }

    fn values_of(runs: &[RunResult], m: Metric) -> Vec<f64> {
        runs.iter().filter_map(|r| r.metric(m)).collect()
    }

    pub fn values(&self, m: Metric) -> Vec<f64> {
        Self::values_of(&self.runs, m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub lab: LabConfig,
    pub arms: Vec<ArmResult>,
    pub comparisons: Vec<Comparison>,
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm.name == name)
    }

    pub fn comparison(&self, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.a == a && c.b == b)
    }

    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let mut out = format!("experiment {}\n", self.name);
        out.push_str(&format!(
            "{:<24} {:>9} {:>9} {:>9} {:>8} {:>6}\n",
            "arm", "tok_acc", "std", "motion", "cider", "div"
        ));
        for a in &self.arms {
            out.push_str(&format!(
                "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>8.3} {:>6}\n",
                a.arm.name, a.mean_token_accuracy, a.std_token_accuracy, a.mean_motion_accuracy, a.mean_cider_d, a.divergences
            ));
        }
        for c in &self.comparisons {
            out.push_str(&format!(
                "{} - {}: {:+.4} ({:+.2} sigma)\n",
                c.a, c.b, c.delta, c.margin_sigmas
            ));
        }
        out
    }
}

fn report(lab: &Lab, name: &str, arms: Vec<ArmResult>, pairs: &[(&str, &str)]) -> ExperimentReport {
    let find = |n: &str| arms.iter().find(|a| a.arm.name == n).expect("arm exists");
    let comparisons = pairs
        .iter()
        .map(|(a, b)| {
            compare(
                a,
                &find(a).values(Metric::TokenAccuracy),
                b,
                &find(b).values(Metric::TokenAccuracy),
                Metric::TokenAccuracy,
            )
        })
        .collect();
    ExperimentReport {
        name: name.into(),
        lab: lab.config.clone(),
        arms,
        comparisons,
    }
}

/// Arms of a named playbook.
pub fn playbook_arms(name: &str) -> Result<(Vec<Arm>, Vec<(&'static str, &'static str)>)> {
    use GateInitMode::{One, Zero};
    Ok(match name {
        "asr-vs-pseudo" => (
            vec![
                Arm::new("pseudo", Pretrain::PseudoVideo),
                Arm::new("asr", Pretrain::AsrVideo),
                Arm::new("scratch", Pretrain::None),
            ],
            vec![("pseudo", "asr"), ("pseudo", "scratch"), ("asr", "scratch")],
        ),
        "image-vs-video-vs-mix" => (
            vec![
                Arm::new("mix", Pretrain::PseudoMix),
                Arm::new("image", Pretrain::PseudoImage),
                Arm::new("video", Pretrain::PseudoVideo),
                Arm::new("scratch", Pretrain::None),
            ],
            vec![("mix", "image"), ("mix", "video"), ("mix", "scratch")],
        ),
        "gate-init" => (
            vec![
                Arm::new("scratch-init0", Pretrain::None).gate_init(Zero),
                Arm::new("scratch-init1", Pretrain::None).gate_init(One),
                Arm::new("pretrained-init0", Pretrain::PseudoMix).gate_init(Zero),
                Arm::new("pretrained-init1", Pretrain::PseudoMix).gate_init(One),
            ],
            vec![
                ("scratch-init1", "scratch-init0"),
                ("pretrained-init0", "scratch-init0"),
                ("pretrained-init1", "scratch-init1"),
            ],
        ),
        "beta2" => {
            let arm = |name: &str, beta2: f64, mode: GateMode| Arm {
                lr: Some(7e-3),
                beta2: Some(beta2),
                gate_mode: mode,
                pretrain_steps: Some(500),
                finetune: false,
                ..Arm::new(name, Pretrain::PseudoMix)
            };
            (
                vec![
                    arm("beta2-0.95", 0.95, GateMode::Vector),
                    arm("beta2-0.999", 0.999, GateMode::Vector),
                    arm("scalar-beta2-0.95", 0.95, GateMode::Scalar),
                ],
                vec![("beta2-0.95", "beta2-0.999")],
            )
        }
        "sync-mode" => {
            let arm = |name: &str, sync: SyncMode| Arm {
                workers: 4,
                sync,
                finetune: false,
                ..Arm::new(name, Pretrain::PseudoMix)
            };
            (
                vec![arm("independent", SyncMode::Independent), arm("synchronized", SyncMode::Synchronized)],
                vec![("independent", "synchronized")],
            )
        }
        other => {
            return Err(Error::Config(format!(
                "unknown experiment `{other}`; expected one of {}",
                EXPERIMENTS.join(", ")
            )))
        }
    })
}

pub fn run_experiment(lab: &Lab, name: &str) -> Result<ExperimentReport> {
    let (arms, pairs) = playbook_arms(name)?;
    let results = lab.run_arms(&arms)?;
    Ok(report(lab, name, results, &pairs))
}

/// Loss variance over the last half of each run, a crude stability probe.
pub fn late_loss_variance(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len() / 2..];
    if tail.len() < 2 {
        return 0.0;
    }
    mean_std(tail).1.powi(2)
}
