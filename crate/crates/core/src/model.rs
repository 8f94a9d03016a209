//! Toy captioner: a frozen decoder LM and a frozen video encoder joined by
//! trainable gated adapters.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, Mutex};

use framecap_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{init_gates, GateInitMode, GateMode, GateSnapshot, GatedAdapter};
use crate::attention::{multi_head_attention, SelfAttentionParams, VideoFeatures};
use crate::error::{Error, Result};
use crate::nn::{sinusoid, Builder, Ffn, Linear, Norm};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{hash_str, stream};
use crate::synth::{chatter, Color, SceneSpec, Shape};
use crate::vocab::{CaptionTokens, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmPretrainConfig {
    pub sentences: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        Self {
            sentences: 50_000,
            steps: 2000,
            batch: 32,
            lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub adapter_layers: Vec<usize>,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub max_t: usize,
    pub max_caption_len: usize,
    pub seed: u64,
    pub gate_mode: GateMode,
    pub gate_init: GateInitMode,
    pub lm_pretrain: LmPretrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d: 128,
            lm_layers: 8,
            lm_heads: 4,
            adapter_layers: default_adapter_layers(8),
            frame_h: 32,
            frame_w: 32,
            channels: 3,
            patch: 8,
            max_t: 8,
            max_caption_len: 12,
            seed: 0,
            gate_mode: GateMode::Vector,
            gate_init: GateInitMode::Zero,
            lm_pretrain: LmPretrainConfig::default(),
        }
    }
}

/// Every other layer of the second half, stopping two layers before the top:
/// 24 layers give 12, 14, …, 22 and 8 layers give 4, 6.
pub fn default_adapter_layers(lm_layers: usize) -> Vec<usize> {
    (lm_layers / 2..=lm_layers.saturating_sub(2)).step_by(2).collect()
}

impl ModelConfig {
    /// A narrow configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            d: 16,
            lm_layers: 4,
            lm_heads: 2,
            adapter_layers: default_adapter_layers(4),
            frame_h: 16,
            frame_w: 16,
            max_t: 4,
            lm_pretrain: LmPretrainConfig {
                sentences: 2000,
                steps: 0,
                batch: 16,
                lr: 3e-3,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.lm_layers == 0 || self.vocab_size == 0 {
            return bad("d, lm_layers and vocab_size must be positive".into());
        }
        if self.lm_heads == 0 || self.d % self.lm_heads != 0 {
            return bad(format!("{} heads do not divide d = {}", self.lm_heads, self.d));
        }
        if self.d % 2 != 0 {
            return bad(format!("d = {} must be even", self.d));
        }
        if self.patch == 0 || self.frame_h % self.patch != 0 || self.frame_w % self.patch != 0 {
            return bad(format!(
                "patch {} does not divide {}x{} frames",
                self.patch, self.frame_h, self.frame_w
            ));
        }
        if self.max_caption_len < 3 {
            return bad("captions need room for at least one word".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &i in &self.adapter_layers {
            if i >= self.lm_layers || !seen.insert(i) {
                return bad(format!(
                    "adapter layer {i} is invalid for a {}-layer LM",
                    self.lm_layers
                ));
            }
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.frame_h / self.patch) * (self.frame_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Pre-norm transformer layer.
#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: Norm,
    attn: SelfAttentionParams,
    ln2: Norm,
    ffn: Ffn,
}

impl Block {
    fn init<R: Rng>(b: &mut Builder<'_, R>, name: &str, d: usize, heads: usize, std: f64) -> Result<Self> {
        Ok(Self {
            ln1: b.norm(&format!("{name}.ln1"), d)?,
            attn: SelfAttentionParams::init(b, &format!("{name}.attn"), d, heads, std)?,
            ln2: b.norm(&format!("{name}.ln2"), d)?,
            ffn: b.ffn(&format!("{name}.ffn"), d, 4, std)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segments: &[Range<usize>], causal: bool) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = multi_head_attention(g, store, &self.attn, h, segments, causal)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        Ok(g.add(x, f)?)
    }
}

/// One caption paired with its encoded video.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub tokens: &'a CaptionTokens,
    pub video: &'a VideoFeatures,
}

/// Hidden states after the last adapter-free layer, keyed by input ids.
/// Valid for the lifetime of a model because those layers are frozen.
#[derive(Debug, Default)]
pub struct PrefixCache {
    map: Mutex<HashMap<Vec<usize>, Arc<Tensor>>>,
}

impl PrefixCache {
    pub fn len(&self) -> usize {
        self.map.lock().expect("prefix cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Skip adapters entirely (frozen text-only LM).
    pub text_only: bool,
    pub cache: Option<&'a PrefixCache>,
}

pub struct Forward {
    /// `[N, vocab]`, one row per predicted position.
    pub logits: Var,
    pub targets: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Strategy {
    Greedy,
    Nucleus(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmPretrainReport {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    layers: Vec<Block>,
    final_norm: Norm,
    head: Linear,
    enc_patch: Linear,
    enc_block: Block,
    enc_norm: Norm,
    enc_pos: Tensor,
    pub adapters: Vec<GatedAdapter>,
    pub lm_report: Option<LmPretrainReport>,
}

impl Model {
    /// Initializes all parameters, pre-trains the LM on synthetic caption
    /// text, then freezes everything except the adapters.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let mut model = Self::init(config)?;
        model.pretrain_lm()?;
        model.freeze_backbones();
        Ok(model)
    }

    /// Parameters at initialization, before LM pre-training; LM weights are
    /// still trainable.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::standard(config.vocab_size)?;
        let (d, heads) = (config.d, config.lm_heads);
        let mut store = ParamStore::new();
        let mut rng = stream(&[config.seed, hash_str("init")]);
        let std = 0.02;

        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            trainable: true,
        };
        let tok = b.normal("lm.tok", &[config.vocab_size, d], std)?;
        let pos = b.normal("lm.pos", &[config.max_caption_len, d], std)?;
        let layers = (0..config.lm_layers)
            .map(|i| Block::init(&mut b, &format!("lm.l{i}"), d, heads, std))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = b.norm("lm.final_norm", d)?;
        let head = b.linear("lm.head", d, config.vocab_size, std)?;

        b.trainable = false;
        let pd = config.patch_dim();
        let enc_patch = b.linear("enc.patch", pd, d, 2.0 / (pd as f64).sqrt())?;
        let enc_block = Block::init(&mut b, "enc.l0", d, heads, 1.0 / (d as f64).sqrt())?;
        let enc_norm = b.norm("enc.final_norm", d)?;

        let mut adapter_rng = stream(&[config.seed, hash_str("adapters")]);
        let adapters = init_adapters(&mut store, &mut adapter_rng, &config, config.gate_init)?;

        let enc_pos = encoder_positions(config.max_t, config.patches_per_frame(), d);
        Ok(Self {
            config,
            vocab,
            store,
            tok,
            pos,
            layers,
            final_norm,
            head,
            enc_patch,
            enc_block,
            enc_norm,
            enc_pos,
            adapters,
            lm_report: None,
        })
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapters.iter().flat_map(|a| a.ids()).collect()
    }

    /// Every parameter that is not part of an adapter.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        let adapter: std::collections::HashSet<ParamId> = self.adapter_ids().into_iter().collect();
        self.store.ids().filter(|id| !adapter.contains(id)).collect()
    }

    pub fn freeze_backbones(&mut self) {
        for id in self.frozen_ids() {
            self.store.set_requires_grad(id, false);
        }
    }

    pub fn set_gate_init(&mut self, mode: GateInitMode) {
        for a in &self.adapters {
            init_gates(&mut self.store, a, mode);
        }
    }

    /// Redraws every adapter parameter from `seed`, leaving the frozen
    /// backbones untouched.
    pub fn reinit_adapters(&mut self, seed: u64, gate_init: GateInitMode) -> Result<()> {
        let mut scratch = ParamStore::new();
        let mut rng = stream(&[seed, hash_str("adapters")]);
        let fresh = init_adapters(&mut scratch, &mut rng, &self.config, gate_init)?;
        for (id, p) in fresh.iter().flat_map(|a| a.ids()).map(|id| (id, scratch.param(id))) {
            let target = self.store.id(&p.name)?;
            *self.store.value_mut(target) = scratch.value(id).clone();
        }
        self.config.gate_init = gate_init;
        Ok(())
    }

    pub fn gate_snapshot(&self) -> GateSnapshot {
        GateSnapshot::capture(&self.store, &self.adapters)
    }

    pub fn encode_caption(&self, text: &str) -> Result<CaptionTokens> {
        self.vocab.encode(text, self.config.max_caption_len)
    }

    /// Patch embedding, additive space/time positions, one frozen
    /// transformer layer over all `t·s` tokens, final norm.
    pub fn encode_video(&self, video: &Tensor) -> Result<VideoFeatures> {
        let cfg = &self.config;
        let shape = video.shape();
        if shape.len() != 4 || shape[3] != cfg.channels {
            return Err(Error::Data(format!("video shape {shape:?} is not [t, h, w, {}]", cfg.channels)));
        }
        let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let p = cfg.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Data(format!("{h}x{w} frames are not divisible by patch {p}")));
        }
        if h != cfg.frame_h || w != cfg.frame_w {
            return Err(Error::Data(format!(
                "expected {}x{} frames, got {h}x{w}",
                cfg.frame_h, cfg.frame_w
            )));
        }
        if t > cfg.max_t {
            return Err(Error::Data(format!("{t} frames exceed max_t = {}", cfg.max_t)));
        }
        let (gh, gw) = (h / p, w / p);
        let s = gh * gw;
        let pd = p * p * c;
        let px = video.data();
        let mut patches = Vec::with_capacity(t * s * pd);
        for k in 0..t {
            for py in 0..gh {
                for pxi in 0..gw {
                    for y in 0..p {
                        let row = ((k * h + py * p + y) * w + pxi * p) * c;
                        patches.extend_from_slice(&px[row..row + p * c]);
                    }
                }
            }
        }
        let d = cfg.d;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![t * s, pd], patches)?);
        let x = self.enc_patch.forward(&mut g, &self.store, x)?;
        let pos = Tensor::new(vec![t * s, d], self.enc_pos.data()[..t * s * d].to_vec())?;
        let pos = g.constant(pos);
        let x = g.add(x, pos)?;
        let x = self.enc_block.forward(&mut g, &self.store, x, &[0..t * s], false)?;
        let x = self.enc_norm.forward(&mut g, &self.store, x)?;
        let x = g.reshape(x, &[t, s, d])?;
        VideoFeatures::new(g.value(x).clone())
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], positions: &[usize]) -> Result<Var> {
        let tok = g.param(&self.store, self.tok);
        let pos = g.param(&self.store, self.pos);
        let te = g.embedding(tok, ids)?;
        let pe = g.embedding(pos, positions)?;
        Ok(g.add(te, pe)?)
    }

    fn first_adapter_layer(&self) -> Option<usize> {
        self.config.adapter_layers.iter().copied().min()
    }

    /// Hidden state of one input sequence after layer `upto` (inclusive).
    fn text_prefix(&self, ids: &[usize], upto: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut x = self.embed(&mut g, ids, &positions)?;
        for layer in &self.layers[..=upto] {
            x = layer.forward(&mut g, &self.store, x, &[0..ids.len()], true)?;
        }
        Ok(g.value(x).clone())
    }

    fn cached_prefix(&self, cache: &PrefixCache, ids: &[usize], upto: usize) -> Result<Arc<Tensor>> {
        if let Some(t) = cache.map.lock().expect("prefix cache lock").get(ids) {
            return Ok(Arc::clone(t));
        }
        let t = Arc::new(self.text_prefix(ids, upto)?);
        cache.map.lock().expect("prefix cache lock").insert(ids.to_vec(), Arc::clone(&t));
        Ok(t)
    }

    /// Logits for row-stacked input sequences, each conditioned on its video.
    pub fn forward_inputs(
        &self,
        g: &mut Graph,
        seqs: &[(&[usize], &VideoFeatures)],
        opts: ForwardOptions<'_>,
    ) -> Result<(Var, Vec<Range<usize>>)> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut segments = Vec::with_capacity(seqs.len());
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for (input, _) in seqs {
            if input.is_empty() {
                return Err(Error::Data("empty caption".into()));
            }
            if input.len() > self.config.max_caption_len {
                return Err(Error::Data(format!(
                    "sequence of {} tokens exceeds max caption length {}",
                    input.len(),
                    self.config.max_caption_len
                )));
            }
            segments.push(ids.len()..ids.len() + input.len());
            ids.extend_from_slice(input);
            positions.extend(0..input.len());
        }
        let use_adapters = !opts.text_only && !self.adapters.is_empty();
        let videos: Vec<Var> = if use_adapters {
            seqs.iter().map(|(_, v)| g.constant(v.tensor().clone())).collect()
        } else {
            Vec::new()
        };

        let (mut x, start) = match (opts.cache, self.first_adapter_layer()) {
            (Some(cache), Some(first)) => {
                let mut data = Vec::with_capacity(ids.len() * self.config.d);
                for (input, _) in seqs {
                    data.extend_from_slice(self.cached_prefix(cache, input, first)?.data());
                }
                let x = g.constant(Tensor::new(vec![ids.len(), self.config.d], data)?);
                (x, first)
            }
            _ => {
                let x = self.embed(g, &ids, &positions)?;
                let x = self.layers[0].forward(g, &self.store, x, &segments, true)?;
                (x, 0)
            }
        };
        for (i, layer) in self.layers.iter().enumerate() {
            if i > start {
                x = layer.forward(g, &self.store, x, &segments, true)?;
            }
            if use_adapters {
                for (a, _) in self.adapters.iter().zip(&self.config.adapter_layers).filter(|(_, &l)| l == i) {
                    x = a.forward_segments(g, &self.store, x, &segments, &videos)?;
                }
            }
        }
        let x = self.final_norm.forward(g, &self.store, x)?;
        let logits = self.head.forward(g, &self.store, x)?;
        Ok((logits, segments))
    }

    /// Teacher-forced logits and next-token targets for a batch.
    pub fn forward(&self, g: &mut Graph, batch: &[Example<'_>], opts: ForwardOptions<'_>) -> Result<Forward> {
        let seqs: Vec<(&[usize], &VideoFeatures)> = batch.iter().map(|e| (e.tokens.inputs(), e.video)).collect();
        let (logits, segments) = self.forward_inputs(g, &seqs, opts)?;
        let targets = batch.iter().flat_map(|e| e.tokens.targets().iter().copied()).collect();
        Ok(Forward {
            logits,
            targets,
            segments,
        })
    }

    /// Mean next-token negative log-likelihood over all caption tokens.
    pub fn loss(&self, g: &mut Graph, batch: &[Example<'_>], opts: ForwardOptions<'_>) -> Result<Var> {
        let f = self.forward(g, batch, opts)?;
        Ok(g.cross_entropy(f.logits, &f.targets)?)
    }

    pub fn loss_value(&self, batch: &[Example<'_>], opts: ForwardOptions<'_>) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, batch, opts)?;
        Ok(g.scalar(loss))
    }

    /// Logits of one teacher-forced caption as a `[n-1, vocab]` tensor.
    pub fn logits(&self, example: Example<'_>, opts: ForwardOptions<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, &[example], opts)?;
        Ok(g.value(f.logits).clone())
    }

    /// Autoregressive decoding from `<bos>`; stops at `<eos>` or when the
    /// sequence reaches `max_len` tokens, in which case `<eos>` is forced.
    pub fn generate(&self, video: &VideoFeatures, strategy: Strategy, max_len: usize, seed: u64) -> Result<CaptionTokens> {
        if let Strategy::Nucleus(p) = strategy {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("top-p must lie in (0, 1], got {p}")));
            }
        }
        let max_len = max_len.clamp(2, self.config.max_caption_len + 1);
        let (bos, eos) = (self.vocab.bos(), self.vocab.eos());
        let mut rng = stream(&[seed, hash_str("generate")]);
        let mut ids = vec![bos];
        while ids.len() < max_len - 1 {
            let mut g = Graph::new();
            let (logits, _) = self.forward_inputs(&mut g, &[(&ids, video)], ForwardOptions::default())?;
            let row = ids.len() - 1;
            let v = self.config.vocab_size;
            let mut scores = g.value(logits).data()[row * v..(row + 1) * v].to_vec();
            scores[bos] = f64::NEG_INFINITY;
            let next = match strategy {
                Strategy::Greedy => argmax(&scores),
                Strategy::Nucleus(p) => {
                    let probs = softmax(&scores);
                    let support = nucleus_filter(&probs, p);
                    let r: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = support.last().expect("non-empty support").0;
                    for &(i, q) in &support {
                        acc += q;
                        if r < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
            };
            ids.push(next);
            if next == eos {
                break;
            }
        }
        if *ids.last().expect("non-empty") != eos {
            ids.push(eos);
        }
        self.vocab.tokens(ids)
    }

    /// Trains only the LM parameters on synthetic caption text.
    fn pretrain_lm(&mut self) -> Result<()> {
        let cfg = self.config.lm_pretrain.clone();
        if cfg.steps == 0 {
            return Ok(());
        }
        let sentences = lm_sentences(cfg.sentences, self.config.seed);
        let tokens: Vec<CaptionTokens> = sentences
            .iter()
            .map(|s| self.encode_caption(s))
            .collect::<Result<_>>()?;
        let adapter_ids = self.adapter_ids();
        for &id in &adapter_ids {
            self.store.set_requires_grad(id, false);
        }
        let mut adam = AdamState::new(AdamConfig {
            lr: cfg.lr,
            beta2: 0.99,
            ..AdamConfig::default()
        });
        let dummy = VideoFeatures::new(Tensor::zeros(&[1, 1, self.config.d]))?;
        let (mut first, mut last) = (f64::NAN, f64::NAN);
        for step in 0..cfg.steps {
            let mut rng = stream(&[self.config.seed, hash_str("lm-pretrain"), step as u64]);
            let batch: Vec<Example<'_>> = (0..cfg.batch)
                .map(|_| Example {
                    tokens: &tokens[rng.random_range(0..tokens.len())],
                    video: &dummy,
                })
                .collect();
            let mut g = Graph::new();
            let opts = ForwardOptions {
                text_only: true,
                cache: None,
            };
            let loss = self.loss(&mut g, &batch, opts)?;
            let value = g.scalar(loss);
            let grads = g.backward(loss)?;
            adam.step(&mut self.store, &grads)?;
            if step == 0 {
                first = value;
            }
            last = value;
        }
        for &id in &adapter_ids {
            self.store.set_requires_grad(id, true);
        }
        log::info!("LM pre-training: loss {first:.4} -> {last:.4} over {} steps", cfg.steps);
        self.lm_report = Some(LmPretrainReport {
            steps: cfg.steps,
            first_loss: first,
            last_loss: last,
        });
        Ok(())
    }

    /// Snapshot of every lm/encoder parameter for freeze checks.
    pub fn frozen_values(&self) -> Vec<Tensor> {
        self.frozen_ids().into_iter().map(|id| self.store.value(id).clone()).collect()
    }
}

fn init_adapters<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    config: &ModelConfig,
    gate_init: GateInitMode,
) -> Result<Vec<GatedAdapter>> {
    let mut b = Builder {
        store,
        rng,
        trainable: true,
    };
    config
        .adapter_layers
        .iter()
        .map(|&i| GatedAdapter::init(&mut b, &format!("adapter.l{i}"), config.d, config.gate_mode, gate_init))
        .collect()
}

/// Space sinusoids in the first half of each row, time sinusoids in the
/// second half; row `k·s + j` is frame `k`, patch `j`.
fn encoder_positions(t: usize, s: usize, d: usize) -> Tensor {
    let half = d / 2;
    let space = sinusoid(s, half);
    let time = sinusoid(t, d - half);
    let mut data = Vec::with_capacity(t * s * d);
    for k in 0..t {
        for j in 0..s {
            data.extend_from_slice(&space[j * half..(j + 1) * half]);
            data.extend_from_slice(&time[k * (d - half)..(k + 1) * (d - half)]);
        }
    }
    Tensor::new(vec![t * s, d], data).expect("sizes agree")
}

/// Text the frozen LM is pre-trained on: motion captions, still-image
/// captions and chatter in equal parts.
pub fn lm_sentences(n: usize, seed: u64) -> Vec<String> {
    let mut rng = stream(&[seed, hash_str("lm-sentences")]);
    (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => SceneSpec::random(&mut rng, 8, 32, 32).expect("default geometry fits").caption(),
            1 => {
                if rng.random_bool(0.05) {
                    "an object".to_string()
                } else {
                    let c = Color::ALL[rng.random_range(0..4)];
                    let s = Shape::ALL[rng.random_range(0..4)];
                    format!("a {} {}", c.name(), s.name())
                }
            }
            _ => chatter(&mut rng),
        })
        .collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Smallest set of most-probable tokens whose mass reaches `p`,
/// renormalized. Ties keep the lower token id first.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        if probs[i] <= 0.0 {
            break;
        }
        kept.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    kept.into_iter().map(|i| (i, probs[i] / mass)).collect()
}
