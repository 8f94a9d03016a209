//! `framecap` command line: synthetic data, pseudolabeling, training,
//! evaluation, generation, FLOP benchmarks and experiment playbooks.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use framecap::adapter::GateInitMode;
use framecap::attention::{count_flops, CrossAttentionVariant};
use framecap::checkpoint::{load_checkpoint, save_checkpoint};
use framecap::data::{prepare_samples, Dataset, FeatureCache, Sample};
use framecap::experiments::{run_experiment, Lab, LabConfig, EXPERIMENTS};
use framecap::metrics::{cider_d, mean_nll, token_accuracy, EvalPair};
use framecap::model::{Model, ModelConfig, PrefixCache, Strategy};
use framecap::optim::{AdamConfig, AdamState};
use framecap::pipeline::{
    corpus_stats, read_manifest, run_pipeline, CaptionerBackend, PipelineConfig, RemoteConfig, DEFAULT_CLIP_LEN,
};
use framecap::shard::{read_shard, write_shard, ClipRecord};
use framecap::synth::{gen_corpus, gen_specs, manifest_entry, CorpusKind, Split, SynthGeometry, SyntheticFrameSource};
use framecap::trainer::{train, MetricsLog, MixtureConfig, SyncMode, TrainConfig};
use framecap::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use report::RunReport;

#[derive(Parser, Debug)]
#[command(name = "framecap", version, about = "Frozen-backbone video captioning at desk scale")]
struct Cli {
    /// Workspace root; relative paths are resolved against it.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,
    /// Default directory for generated artifacts.
    #[arg(long, global = true, env = "FRAMECAP_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Where to write the JSON run report [default: <data-dir>/reports/<command>.json].
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus shard (and optionally its manifest).
    Synth(SynthArgs),
    /// Caption the centre frame of every clip in a manifest.
    Pseudolabel(PseudolabelArgs),
    /// Closed-form vs instrumented MAC counts of the cross-attention variants.
    BenchAttention(BenchArgs),
    /// Run a scripted comparison.
    Experiment(ExperimentArgs),
    /// Train adapters on caption shards.
    Train(TrainArgs),
    /// Token accuracy, perplexity and CIDEr-D of a checkpoint.
    Eval(EvalArgs),
    /// Print one generated caption per clip.
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct ModelArgs {
    /// Narrow model with 4×16×16 clips, for smoke runs.
    #[arg(long)]
    tiny: bool,
    /// LM pre-training steps [default: 2000, or 0 with --tiny].
    #[arg(long)]
    lm_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let mut c = if self.tiny { ModelConfig::tiny() } else { ModelConfig::default() };
        if let Some(s) = self.lm_steps {
            c.lm_pretrain.steps = s;
        }
        c.seed = self.model_seed;
        c
    }
}

fn geometry_of(c: &ModelConfig) -> SynthGeometry {
    SynthGeometry {
        t: c.max_t,
        h: c.frame_h,
        w: c.frame_w,
    }
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// pseudo | asr | ground-truth | image
    #[arg(long, default_value = "pseudo")]
    kind: CorpusKind,
    /// train | eval
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output shard [default: <data-dir>/synth/<kind>-<split>-<seed>.jsonl].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a video manifest of the same scenes.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// 4×16×16 clips instead of 8×32×32.
    #[arg(long)]
    tiny: bool,
}

#[derive(Args, Debug, Serialize)]
struct PseudolabelArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CLIP_LEN)]
    clip_len: f64,
    /// stub | remote
    #[arg(long, default_value = "stub")]
    backend: String,
    /// Captioning service URL for the remote backend.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output shard [default: <data-dir>/shards/pseudo.jsonl].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 3)]
    retries: u32,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    /// Decode synthetic locators at 4×16×16.
    #[arg(long)]
    tiny: bool,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    /// Timed forward passes per row.
    #[arg(long, default_value_t = 1)]
    reps: usize,
}

#[derive(Args, Debug, Serialize)]
struct ExperimentArgs {
    /// asr-vs-pseudo | image-vs-video-vs-mix | gate-init | beta2 | sync-mode
    name: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
    #[arg(long)]
    finetune_steps: Option<u64>,
    #[arg(long)]
    pretrain_videos: Option<usize>,
    #[arg(long)]
    pretrain_images: Option<usize>,
    #[arg(long)]
    finetune_videos: Option<usize>,
    #[arg(long)]
    eval_videos: Option<usize>,
    #[arg(long)]
    cider_videos: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Caption shards of synthetic clips; repeatable.
    #[arg(long = "shard", required = true)]
    shards: Vec<PathBuf>,
    /// Start from this checkpoint's weights with a fresh optimizer.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue a run, optimizer state included, up to --steps.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "pretrain")]
    phase: String,
    #[arg(long, default_value_t = 0.95)]
    p_image: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 7e-3)]
    lr: f64,
    /// zero | one
    #[arg(long, default_value = "zero")]
    gate_init: GateInitMode,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Absolute step to stop at.
    #[arg(long, default_value_t = 100)]
    steps: u64,
    /// independent | synchronized
    #[arg(long, default_value = "independent")]
    sync_mode: SyncMode,
    #[arg(long, default_value_t = 32)]
    image_batch: usize,
    #[arg(long, default_value_t = 4)]
    video_batch: usize,
    #[arg(long, default_value_t = 0)]
    warmup: u64,
    #[arg(long, default_value_t = 1)]
    grad_accum: usize,
    /// Save every N steps in addition to the end of the run.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Final checkpoint [default: <data-dir>/checkpoints/<phase>.fcap].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Step log [default: <data-dir>/logs/<phase>.jsonl].
    #[arg(long)]
    metrics_log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "shard", required = true)]
    shards: Vec<PathBuf>,
    /// Clips captioned greedily for CIDEr-D.
    #[arg(long, default_value_t = 64)]
    cider_n: usize,
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    shard: PathBuf,
    /// Nucleus sampling mass; greedy when absent.
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
}

struct Ctx {
    root: PathBuf,
    data_dir: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn out(&self, explicit: &Option<PathBuf>, default: impl AsRef<Path>) -> PathBuf {
        match explicit {
            Some(p) => self.path(p),
            None => self.data_dir.join(default),
        }
    }
}

/// What a command hands back for its report.
struct Outcome {
    seed: Option<u64>,
    metrics: Value,
    artifacts: Vec<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::Parse { .. }
        | Error::Io { .. }
        | Error::Decode(_)
        | Error::Empty(_)
        | Error::Checkpoint(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ctx = Ctx {
        data_dir: if cli.data_dir.is_absolute() {
            cli.data_dir.clone()
        } else {
            cli.root.join(&cli.data_dir)
        },
        root: cli.root.clone(),
    };
    let (name, config) = match &cli.command {
        Command::Synth(a) => ("synth", serde_json::to_value(a)),
        Command::Pseudolabel(a) => ("pseudolabel", serde_json::to_value(a)),
        Command::BenchAttention(a) => ("bench-attention", serde_json::to_value(a)),
        Command::Experiment(a) => ("experiment", serde_json::to_value(a)),
        Command::Train(a) => ("train", serde_json::to_value(a)),
        Command::Eval(a) => ("eval", serde_json::to_value(a)),
        Command::Generate(a) => ("generate", serde_json::to_value(a)),
    };
    let started = Instant::now();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Pseudolabel(a) => cmd_pseudolabel(&ctx, a),
        Command::BenchAttention(a) => cmd_bench(a),
        Command::Experiment(a) => cmd_experiment(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Generate(a) => cmd_generate(&ctx, a),
    };
    let report_path = ctx.out(&cli.report, format!("reports/{name}.json"));
    let mut report = RunReport {
        command: name.to_string(),
        config: config.expect("arguments serialize"),
        seed: None,
        status: "ok".into(),
        error: None,
        metrics: Value::Null,
        wall_s: started.elapsed().as_secs_f64(),
        artifacts: Vec::new(),
    };
    let code = match &result {
        Ok(out) => {
            report.seed = out.seed;
            report.metrics = out.metrics.clone();
            report.artifacts = out.artifacts.iter().map(|p| p.display().to_string()).collect();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            report.status = "error".into();
            report.error = Some(e.to_string());
            exit_code(e)
        }
    };
    if let Err(e) = report.write(&report_path) {
        eprintln!("error: cannot write report: {e}");
        return ExitCode::from(if code == 0 { 3 } else { code });
    }
    log::info!("report written to {}", report_path.display());
    ExitCode::from(code)
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<Outcome> {
    let geo = if a.tiny {
        geometry_of(&ModelConfig::tiny())
    } else {
        SynthGeometry::default()
    };
    let kind = serde_json::to_value(a.kind).expect("kind serializes");
    let split = serde_json::to_value(a.split).expect("split serializes");
    let default = format!(
        "synth/{}-{}-{}.jsonl",
        kind.as_str().unwrap_or("corpus"),
        split.as_str().unwrap_or("split"),
        a.seed
    );
    let out = ctx.out(&a.out, default);
    let records = gen_corpus(a.n, a.kind, a.split, a.seed, geo)?;
    write_shard(&records, &out)?;
    let mut artifacts = vec![out];
    if let Some(m) = &a.manifest {
        let path = ctx.path(m);
        let entries: Vec<_> = gen_specs(a.n, a.split, a.seed, geo)?
            .iter()
            .map(|s| manifest_entry(s, geo))
            .collect();
        write_text(&path, &framecap::pipeline::format_manifest(&entries))?;
        artifacts.push(path);
    }
    let stats = corpus_stats(&[records])?;
    println!(
        "{} clips, {:.2} words per caption, vocabulary {}",
        stats.clips, stats.mean_words, stats.vocab_size
    );
    Ok(Outcome {
        seed: Some(a.seed),
        metrics: serde_json::to_value(stats).expect("stats serialize"),
        artifacts,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_pseudolabel(ctx: &Ctx, a: &PseudolabelArgs) -> Result<Outcome> {
    let backend = match a.backend.as_str() {
        "stub" => CaptionerBackend::Stub,
        "remote" => {
            let endpoint = a
                .endpoint
                .clone()
                .ok_or_else(|| Error::Config("--backend remote needs --endpoint".into()))?;
            CaptionerBackend::Remote(RemoteConfig {
                top_p: a.top_p,
                retries: a.retries,
                timeout_ms: a.timeout_ms,
                ..RemoteConfig::new(endpoint)
            })
        }
        other => return Err(Error::Config(format!("unknown backend `{other}`; expected stub or remote"))),
    };
    if !(a.top_p > 0.0 && a.top_p <= 1.0) {
        return Err(Error::Config(format!("--top-p must lie in (0, 1], got {}", a.top_p)));
    }
    let entries = read_manifest(&ctx.path(&a.manifest))?;
    let geometry = if a.tiny {
        geometry_of(&ModelConfig::tiny())
    } else {
        SynthGeometry::default()
    };
    let cfg = PipelineConfig {
        clip_len: a.clip_len,
        backend,
        workers: a.workers,
        seed: a.seed,
    };
    let out = run_pipeline(&entries, &cfg, &SyntheticFrameSource { geometry })?;
    let shard = ctx.out(&a.out, "shards/pseudo.jsonl");
    write_shard(&out.records, &shard)?;
    let mut artifacts = vec![shard.clone()];
    if !out.failures.is_empty() {
        let path = shard.with_extension("failures.jsonl");
        let text: String = out
            .failures
            .iter()
            .map(|f| serde_json::to_string(f).expect("failure serializes") + "\n")
            .collect();
        write_text(&path, &text)?;
        artifacts.push(path);
    }
    println!(
        "{} clips captioned, {} failed, shard {}",
        out.records.len(),
        out.failures.len(),
        shard.display()
    );
    let stats = if out.records.is_empty() {
        Value::Null
    } else {
        serde_json::to_value(corpus_stats(&[out.records.clone()])?).expect("stats serialize")
    };
    Ok(Outcome {
        seed: Some(a.seed),
        metrics: json!({"videos": entries.len(), "clips": out.records.len(), "failures": out.failures.len(), "corpus": stats}),
        artifacts,
    })
}

/// `(q, t, s, d)` rows of the default sweep.
const BENCH_SWEEP: [(usize, usize, usize, usize); 6] = [
    (16, 16, 196, 64),
    (16, 1, 196, 64),
    (12, 8, 16, 128),
    (8, 4, 49, 32),
    (16, 8, 64, 64),
    (4, 32, 16, 16),
];

fn cmd_bench(a: &BenchArgs) -> Result<Outcome> {
    println!(
        "{:<12} {:>3} {:>3} {:>4} {:>4} {:>12} {:>12} {:>12} {:>12} {:>5} {:>8} {:>9}",
        "variant", "q", "t", "s", "d", "score", "score_meas", "proj", "proj_meas", "match", "vs_full", "ms"
    );
    let mut rows = Vec::new();
    for &(q, t, s, d) in &BENCH_SWEEP {
        let full = count_flops(CrossAttentionVariant::Full, q, t, s, d)?;
        for variant in CrossAttentionVariant::ALL {
            let started = Instant::now();
            let mut r = count_flops(variant, q, t, s, d)?;
            for _ in 1..a.reps.max(1) {
                r = count_flops(variant, q, t, s, d)?;
            }
            let ms = started.elapsed().as_secs_f64() * 1e3 / a.reps.max(1) as f64;
            let ratio = full.score_pass_macs as f64 / r.score_pass_macs as f64;
            println!(
                "{:<12} {:>3} {:>3} {:>4} {:>4} {:>12} {:>12} {:>12} {:>12} {:>5} {:>8.2} {:>9.3}",
                variant.name(),
                q,
                t,
                s,
                d,
                r.score_macs,
                r.instrumented_score_macs,
                r.projection_macs,
                r.instrumented_projection_macs,
                if r.counts_match() { "yes" } else { "NO" },
                ratio,
                ms
            );
            let mut row = serde_json::to_value(&r).expect("report serializes");
            row["full_over_variant_score"] = json!(ratio);
            row["wall_ms"] = json!(ms);
            rows.push(row);
        }
    }
    let all_match = rows.iter().all(|r| r["score_macs"] == r["instrumented_score_macs"]);
    if !all_match {
        return Err(Error::Backend("instrumented counts disagree with the closed form".into()));
    }
    Ok(Outcome {
        seed: None,
        metrics: json!({ "rows": rows }),
        artifacts: Vec::new(),
    })
}

fn cmd_experiment(_ctx: &Ctx, a: &ExperimentArgs) -> Result<Outcome> {
    if !EXPERIMENTS.contains(&a.name.as_str()) {
        return Err(Error::Config(format!(
            "unknown experiment `{}`; expected one of {}",
            a.name,
            EXPERIMENTS.join(", ")
        )));
    }
    if a.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let model = a.model.config();
    let mut cfg = LabConfig {
        geometry: geometry_of(&model),
        model,
        seeds: a.seeds.clone(),
        ..LabConfig::default()
    };
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    set!(pretrain_steps, finetune_steps, pretrain_videos, pretrain_images, finetune_videos, eval_videos, cider_videos, lr, finetune_lr, beta2);
    let lab = Lab::new(cfg)?;
    let report = run_experiment(&lab, &a.name)?;
    print!("{}", report.table());
    Ok(Outcome {
        seed: a.seeds.first().copied(),
        metrics: json!({
            "lm_pretrain": lab.base.lm_report,
            "experiment": report,
        }),
        artifacts: Vec::new(),
    })
}

fn load_samples(model: &Model, shards: &[PathBuf], ctx: &Ctx) -> Result<Vec<Sample>> {
    let mut records: Vec<ClipRecord> = Vec::new();
    for s in shards {
        records.extend(read_shard(&ctx.path(s))?);
    }
    if records.is_empty() {
        return Err(Error::Empty("training shards"));
    }
    prepare_samples(model, &records, geometry_of(&model.config), &FeatureCache::default())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<Outcome> {
    let (mut model, mut adam) = if let Some(p) = &a.resume {
        let (m, adam, header) = load_checkpoint(&ctx.path(p))?;
        let adam = adam.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume".into()))?;
        log::info!("resuming {} at step {}", p.display(), header.step);
        (m, adam)
    } else {
        let adam_cfg = AdamConfig {
            lr: a.lr,
            beta2: a.beta2,
            ..AdamConfig::default()
        };
        adam_cfg.validate()?;
        let m = match &a.init {
            Some(p) => load_checkpoint(&ctx.path(p))?.0,
            None => {
                let mut c = a.model.config();
                c.gate_init = a.gate_init;
                Model::build(c)?
            }
        };
        (m, AdamState::new(adam_cfg))
    };
    let data = Dataset::from_samples(load_samples(&model, &a.shards, ctx)?);
    let p_image = match (data.images.is_empty(), data.videos.is_empty()) {
        (true, false) => 0.0,
        (false, true) => 1.0,
        _ => a.p_image,
    };
    if p_image != a.p_image {
        log::warn!("only one modality in the shards; p_image set to {p_image}");
    }
    let mut cfg = TrainConfig {
        phase: a.phase.clone(),
        steps: a.steps,
        adam: adam.config,
        warmup_steps: a.warmup,
        mixture: MixtureConfig {
            p_image,
            image_batch: a.image_batch,
            video_batch: a.video_batch,
            workers: a.workers,
            base_seed: a.seed,
            sync: a.sync_mode,
        },
        grad_accum: a.grad_accum,
        use_prefix_cache: true,
    };
    cfg.validate()?;
    let out = ctx.out(&a.out, format!("checkpoints/{}.fcap", a.phase));
    let log_path = ctx.out(&a.metrics_log, format!("logs/{}.jsonl", a.phase));
    let mut log = MetricsLog::append_to(&log_path)?;
    let cache = PrefixCache::default();
    let gates_before = model.gate_snapshot();
    let mut losses = Vec::new();
    let mut artifacts = vec![log_path.clone()];
    let every = a.checkpoint_every.filter(|&n| n > 0).unwrap_or(u64::MAX);
    let target = a.steps;
    while adam.step < target {
        cfg.steps = adam.step.saturating_add(every).min(target);
        train(&mut model, &mut adam, &data, &cfg, &cache, &mut |r| {
            losses.push(r.loss);
            log.write(r)
        })?;
        if cfg.steps < target {
            let path = out.with_extension(format!("step{}.fcap", adam.step));
            save_checkpoint(&path, &model, Some(&adam), adam.step, json!({"loss": losses.last()}))?;
            artifacts.push(path);
        }
    }
    let drift = framecap::adapter::gate_drift(&gates_before, &model.gate_snapshot())?;
    let metrics = json!({
        "steps": adam.step,
        "first_loss": losses.first(),
        "last_loss": losses.last(),
        "gate_mean_abs": model.gate_snapshot().mean_abs(),
        "gate_drift": drift,
        "lm_pretrain": model.lm_report,
    });
    save_checkpoint(&out, &model, Some(&adam), adam.step, metrics.clone())?;
    artifacts.push(out.clone());
    println!(
        "trained to step {}; loss {} -> {}; checkpoint {}",
        adam.step,
        losses.first().map_or("-".into(), |l| format!("{l:.4}")),
        losses.last().map_or("-".into(), |l| format!("{l:.4}")),
        out.display()
    );
    Ok(Outcome {
        seed: Some(a.seed),
        metrics,
        artifacts,
    })
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<Outcome> {
    let (model, _, header) = load_checkpoint(&ctx.path(&a.checkpoint))?;
    let samples = load_samples(&model, &a.shards, ctx)?;
    let cache = PrefixCache::default();
    let acc = token_accuracy(&model, &samples, Some(&cache))?;
    let nll = mean_nll(&model, &samples, Some(&cache))?;
    let n = a.cider_n.min(samples.len());
    let cider = if n >= 2 {
        let pairs = samples[..n]
            .iter()
            .map(|s| {
                let gen = model.generate(&s.video, Strategy::Greedy, model.config.max_caption_len, 0)?;
                let cand = model.vocab.decode(&gen);
                let cand = if cand.is_empty() { "<empty>".to_string() } else { cand };
                Ok(EvalPair::from_text(&cand, &[&model.vocab.decode(&s.tokens)]))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(cider_d(&pairs)?.corpus)
    } else {
        None
    };
    println!("{:<18} {:>10}", "metric", "value");
    println!("{:<18} {:>10.4}", "token_accuracy", acc.accuracy);
    println!("{:<18} {:>10.4}", "motion_accuracy", acc.motion_accuracy);
    println!("{:<18} {:>10.4}", "nll", nll);
    println!("{:<18} {:>10.4}", "perplexity", nll.exp());
    if let Some(c) = cider {
        println!("{:<18} {:>10.4}", "cider_d", c);
    }
    Ok(Outcome {
        seed: None,
        metrics: json!({
            "checkpoint_step": header.step,
            "samples": samples.len(),
            "token_accuracy": acc,
            "nll": nll,
            "perplexity": nll.exp(),
            "cider_d": cider,
            "cider_pairs": n,
        }),
        artifacts: Vec::new(),
    })
}

fn cmd_generate(ctx: &Ctx, a: &GenerateArgs) -> Result<Outcome> {
    let (model, _, _) = load_checkpoint(&ctx.path(&a.checkpoint))?;
    let strategy = match a.top_p {
        Some(p) => Strategy::Nucleus(p),
        None => Strategy::Greedy,
    };
    let mut records = read_shard(&ctx.path(&a.shard))?;
    if let Some(l) = a.limit {
        records.truncate(l);
    }
    let samples = prepare_samples(&model, &records, geometry_of(&model.config), &FeatureCache::default())?;
    let max_len = a.max_len.unwrap_or(model.config.max_caption_len);
    let mut captions = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let seed = framecap::rng::derive_seed(&[a.seed, i as u64]);
        let out = model.generate(&s.video, strategy, max_len, seed)?;
        let text = model.vocab.decode(&out);
        println!("{text}");
        captions.push(json!({"video_id": s.video_id, "caption": text}));
    }
    Ok(Outcome {
        seed: Some(a.seed),
        metrics: json!({ "captions": captions }),
        artifacts: Vec::new(),
    })
}
