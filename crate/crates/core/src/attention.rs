//! Cross-attention from text queries to a `[t, s, d]` video grid, the causal
//! self-attention used by the language model, and exact MAC accounting.
//!
//! Three cross-attention variants share one parameter layout:
//!
//! * [`full_cross_attention`] attends from every query to all `t·s` tokens.
//! * [`naive_axial_cross_attention`] runs `t` per-frame space attentions and
//!   `s` per-position time attentions and averages them (reference baseline,
//!   twice the score cost of full attention).
//! * [`separable_cross_attention`] max-pools the grid over space for a time
//!   branch and over time for a space branch, layer-normalizes each pooled
//!   sequence, attends to both, and merges the concatenated outputs with a
//!   `2d -> d` projection. Score cost is `q·(t+s)·d` per pass.
//!
//! The two baselines use the time-branch projections as their single Q/K/V set.

use std::ops::Range;

use framecap_tensor::{flops, Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Linear, Norm, Qkv};

/// MAC category of attention-score and value-mixing matmuls.
pub const SCORE: &str = "score";
/// MAC category of every learned projection.
pub const PROJECTION: &str = "projection";

/// Encoded video `[t, s, d]`; images are `t = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    tensor: Tensor,
}

impl VideoFeatures {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.ndim() != 3 {
            return Err(Error::Data(format!(
                "video features must be [t, s, d], got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self { tensor })
    }

    pub fn t(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn s(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// Reorders time indices: output frame `i` is input frame `perm[i]`.
    pub fn permute_time(&self, perm: &[usize]) -> Self {
        self.permute(perm, true)
    }

    /// Reorders spatial indices within every frame.
    pub fn permute_space(&self, perm: &[usize]) -> Self {
        self.permute(perm, false)
    }

    fn permute(&self, perm: &[usize], time: bool) -> Self {
        let (t, s, d) = (self.t(), self.s(), self.d());
        assert_eq!(perm.len(), if time { t } else { s });
        let src = self.tensor.data();
        let mut out = Vec::with_capacity(src.len());
        for i in 0..t {
            for j in 0..s {
                let (si, sj) = if time { (perm[i], j) } else { (i, perm[j]) };
                let base = (si * s + sj) * d;
                out.extend_from_slice(&src[base..base + d]);
            }
        }
        Self {
            tensor: Tensor::new(vec![t, s, d], out).expect("same extent"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossAttentionVariant {
    Full,
    NaiveAxial,
    Separable,
}

impl CrossAttentionVariant {
    pub const ALL: [Self; 3] = [Self::Full, Self::NaiveAxial, Self::Separable];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NaiveAxial => "naive-axial",
            Self::Separable => "separable",
        }
    }
}

/// Single-head cross-attention parameters.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionParams {
    pub d: usize,
    pub time: Qkv,
    pub space: Qkv,
    pub time_norm: Norm,
    pub space_norm: Norm,
    /// `2d -> d`.
    pub merge: Linear,
}

impl CrossAttentionParams {
    pub fn init<R: rand::Rng>(b: &mut Builder<'_, R>, name: &str, d: usize) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            d,
            time: b.qkv(&format!("{name}.time"), d, std)?,
            space: b.qkv(&format!("{name}.space"), d, std)?,
            time_norm: b.norm(&format!("{name}.time_norm"), d)?,
            space_norm: b.norm(&format!("{name}.space_norm"), d)?,
            merge: b.linear(&format!("{name}.merge"), 2 * d, d, std / 2f64.sqrt())?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.time.ids();
        ids.extend(self.space.ids());
        ids.extend(self.time_norm.ids());
        ids.extend(self.space_norm.ids());
        ids.extend(self.merge.ids());
        ids
    }
}

fn project(g: &mut Graph, store: &ParamStore, lin: &Linear, x: Var) -> Result<Var> {
    flops::with_category(PROJECTION, || lin.forward(g, store, x))
}

/// Scaled dot-product attention of `q[nq, dh]` over `k, v[nk, dh]`.
fn attend(g: &mut Graph, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
    let dh = g.shape(q)[1];
    flops::with_category(SCORE, || -> Result<Var> {
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = if causal { g.causal_mask(scores)? } else { scores };
        let weights = g.softmax(scores, 1)?;
        Ok(g.matmul(weights, v)?)
    })
}

fn check_inputs(g: &Graph, p: &CrossAttentionParams, query: Var, video: Var) -> Result<(usize, usize, usize)> {
    let (qs, vs) = (g.shape(query), g.shape(video));
    if qs.len() != 2 || vs.len() != 3 || qs[1] != p.d || vs[2] != p.d {
        return Err(TensorError::ShapeMismatch {
            op: "cross_attention",
            left: qs.to_vec(),
            right: vs.to_vec(),
        }
        .into());
    }
    Ok((vs[0], vs[1], vs[2]))
}

/// Attention from `query[q, d]` to all `t·s` tokens of `video[t, s, d]`.
pub fn full_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &CrossAttentionParams,
    query: Var,
    video: Var,
) -> Result<Var> {
    let (t, s, d) = check_inputs(g, p, query, video)?;
    let tokens = g.reshape(video, &[t * s, d])?;
    let q = project(g, store, &p.time.q, query)?;
    let k = project(g, store, &p.time.k, tokens)?;
    let v = project(g, store, &p.time.v, tokens)?;
    attend(g, q, k, v, false)
}

/// `t` space attentions (one per frame) and `s` time attentions (one per
/// spatial position); each family is averaged and the two averages are
/// averaged.
pub fn naive_axial_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &CrossAttentionParams,
    query: Var,
    video: Var,
) -> Result<Var> {
    let (t, s, d) = check_inputs(g, p, query, video)?;
    let tokens = g.reshape(video, &[t * s, d])?;
    let q = project(g, store, &p.time.q, query)?;
    let k = project(g, store, &p.time.k, tokens)?;
    let v = project(g, store, &p.time.v, tokens)?;
    let k3 = g.reshape(k, &[t, s, d])?;
    let v3 = g.reshape(v, &[t, s, d])?;

    let mut space_outs = Vec::with_capacity(t);
    for frame in 0..t {
        let kf = g.slice(k, 0, frame * s, s)?;
        let vf = g.slice(v, 0, frame * s, s)?;
        space_outs.push(attend(g, q, kf, vf, false)?);
    }
    let mut time_outs = Vec::with_capacity(s);
    for pos in 0..s {
        let kp = g.slice(k3, 1, pos, 1)?;
        let kp = g.reshape(kp, &[t, d])?;
        let vp = g.slice(v3, 1, pos, 1)?;
        let vp = g.reshape(vp, &[t, d])?;
        time_outs.push(attend(g, q, kp, vp, false)?);
    }
    let space = mean_of(g, &space_outs)?;
    let time = mean_of(g, &time_outs)?;
    let both = g.add(space, time)?;
    Ok(g.scale(both, 0.5))
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, 1.0 / vars.len() as f64))
}

/// Time branch over the space-max-pooled grid, space branch over the
/// time-max-pooled grid, merged by a linear layer on their concatenation.
pub fn separable_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &CrossAttentionParams,
    query: Var,
    video: Var,
) -> Result<Var> {
    let q = g.shape(query)[0];
    separable_cross_attention_batched(g, store, p, query, &[0..q], &[video])
}

/// Separable cross-attention for row-stacked query sequences: the rows in
/// `segments[i]` attend to `videos[i]`. Projections run once over all rows.
pub fn separable_cross_attention_batched(
    g: &mut Graph,
    store: &ParamStore,
    p: &CrossAttentionParams,
    query: Var,
    segments: &[Range<usize>],
    videos: &[Var],
) -> Result<Var> {
    if segments.is_empty() || segments.len() != videos.len() {
        return Err(Error::Config(format!(
            "{} query segments for {} videos",
            segments.len(),
            videos.len()
        )));
    }
    let mut time_pooled = Vec::with_capacity(videos.len());
    let mut space_pooled = Vec::with_capacity(videos.len());
    for &video in videos {
        check_inputs(g, p, query, video)?;
        time_pooled.push(g.max_pool_axis(video, 1)?); // [t, d]
        space_pooled.push(g.max_pool_axis(video, 0)?); // [s, d]
    }
    let stack = |g: &mut Graph, parts: &[Var]| -> Result<(Var, Vec<usize>)> {
        let lens = parts.iter().map(|&v| g.shape(v)[0]).collect();
        let joined = if parts.len() == 1 { parts[0] } else { g.concat(parts, 0)? };
        Ok((joined, lens))
    };
    let (time_keys, time_lens) = stack(g, &time_pooled)?;
    let (space_keys, space_lens) = stack(g, &space_pooled)?;
    let time_keys = p.time_norm.forward(g, store, time_keys)?;
    let space_keys = p.space_norm.forward(g, store, space_keys)?;

    let branch = |g: &mut Graph, qkv: &Qkv, keys: Var, lens: &[usize]| -> Result<Var> {
        let q = project(g, store, &qkv.q, query)?;
        let k = project(g, store, &qkv.k, keys)?;
        let v = project(g, store, &qkv.v, keys)?;
        if segments.len() == 1 {
            return attend(g, q, k, v, false);
        }
        let mut outs = Vec::with_capacity(segments.len());
        let mut offset = 0;
        for (seg, &len) in segments.iter().zip(lens) {
            let qs = g.slice(q, 0, seg.start, seg.end - seg.start)?;
            let ks = g.slice(k, 0, offset, len)?;
            let vs = g.slice(v, 0, offset, len)?;
            outs.push(attend(g, qs, ks, vs, false)?);
            offset += len;
        }
        Ok(g.concat(&outs, 0)?)
    };
    let time_out = branch(g, &p.time, time_keys, &time_lens)?;
    let space_out = branch(g, &p.space, space_keys, &space_lens)?;
    let merged = g.concat(&[time_out, space_out], 1)?;
    project(g, store, &p.merge, merged)
}

pub fn cross_attention(
    variant: CrossAttentionVariant,
    g: &mut Graph,
    store: &ParamStore,
    p: &CrossAttentionParams,
    query: Var,
    video: Var,
) -> Result<Var> {
    match variant {
        CrossAttentionVariant::Full => full_cross_attention(g, store, p, query, video),
        CrossAttentionVariant::NaiveAxial => naive_axial_cross_attention(g, store, p, query, video),
        CrossAttentionVariant::Separable => separable_cross_attention(g, store, p, query, video),
    }
}

/// Multi-head self-attention parameters (frozen LM layers, video encoder).
#[derive(Clone, Copy, Debug)]
pub struct SelfAttentionParams {
    pub heads: usize,
    pub qkv: Qkv,
    pub out: Linear,
}

impl SelfAttentionParams {
    pub fn init<R: rand::Rng>(b: &mut Builder<'_, R>, name: &str, d: usize, heads: usize, std: f64) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        Ok(Self {
            heads,
            qkv: b.qkv(name, d, std)?,
            out: b.linear(&format!("{name}.o"), d, d, std)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.qkv.ids();
        ids.extend(self.out.ids());
        ids
    }
}

/// Multi-head attention over rows of `x[N, d]`, where each range in
/// `segments` is an independent sequence. With `causal`, row `i` of a
/// segment attends only to rows `<= i` of the same segment.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &SelfAttentionParams,
    x: Var,
    segments: &[Range<usize>],
    causal: bool,
) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / p.heads;
    let q = project(g, store, &p.qkv.q, x)?;
    let k = project(g, store, &p.qkv.k, x)?;
    let v = project(g, store, &p.qkv.v, x)?;
    let mut seq_outs = Vec::with_capacity(segments.len());
    for seg in segments {
        let n = seg.end - seg.start;
        let (qs, ks, vs) = (
            g.slice(q, 0, seg.start, n)?,
            g.slice(k, 0, seg.start, n)?,
            g.slice(v, 0, seg.start, n)?,
        );
        let mut heads = Vec::with_capacity(p.heads);
        for h in 0..p.heads {
            let qh = g.slice(qs, 1, h * dh, dh)?;
            let kh = g.slice(ks, 1, h * dh, dh)?;
            let vh = g.slice(vs, 1, h * dh, dh)?;
            heads.push(attend(g, qh, kh, vh, causal)?);
        }
        seq_outs.push(if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? });
    }
    let joined = if seq_outs.len() == 1 {
        seq_outs[0]
    } else {
        g.concat(&seq_outs, 0)?
    };
    project(g, store, &p.out, joined)
}

/// Masked multi-head attention over one sequence `x[n, d]`.
pub fn causal_self_attention(g: &mut Graph, store: &ParamStore, p: &SelfAttentionParams, x: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    multi_head_attention(g, store, p, x, &[0..n], true)
}

/// Exact MAC counts of one cross-attention forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub variant: CrossAttentionVariant,
    pub q: usize,
    pub t: usize,
    pub s: usize,
    pub d: usize,
    /// MACs of one score pass (`Q·Kᵀ`); the value pass costs the same.
    pub score_pass_macs: u64,
    /// Score plus value-mixing MACs.
    pub score_macs: u64,
    pub projection_macs: u64,
    pub total: u64,
    pub instrumented_score_macs: u64,
    pub instrumented_projection_macs: u64,
}

impl FlopReport {
    pub fn counts_match(&self) -> bool {
        self.score_macs == self.instrumented_score_macs && self.projection_macs == self.instrumented_projection_macs
    }
}

/// Closed-form `(score_pass_macs, projection_macs)`.
pub fn closed_form_macs(variant: CrossAttentionVariant, q: usize, t: usize, s: usize, d: usize) -> (u64, u64) {
    let (q, t, s, d) = (q as u64, t as u64, s as u64, d as u64);
    match variant {
        CrossAttentionVariant::Full => (q * t * s * d, q * d * d + 2 * t * s * d * d),
        CrossAttentionVariant::NaiveAxial => (2 * q * t * s * d, q * d * d + 2 * t * s * d * d),
        CrossAttentionVariant::Separable => (q * (t + s) * d, 4 * q * d * d + 2 * (t + s) * d * d),
    }
}

/// Cost ratio of axial over full self-attention on a `t × s` grid:
/// `(t²s + ts²) / (ts)²`.
pub fn separable_self_attention_ratio(t: usize, s: usize) -> f64 {
    let (t, s) = (t as f64, s as f64);
    (t * t * s + t * s * s) / ((t * s) * (t * s))
}

/// Closed-form counts plus counts measured from a real forward pass over
/// random inputs.
pub fn count_flops(variant: CrossAttentionVariant, q: usize, t: usize, s: usize, d: usize) -> Result<FlopReport> {
    if q == 0 || t == 0 || s == 0 || d == 0 {
        return Err(Error::Config("all dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed(&[q as u64, t as u64, s as u64, d as u64]));
    let mut store = ParamStore::new();
    let params = CrossAttentionParams::init(
        &mut Builder {
            store: &mut store,
            rng: &mut rng,
            trainable: false,
        },
        "xattn",
        d,
    )?;
    let query = Tensor::from_fn(&[q, d], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
    let video = Tensor::from_fn(&[t, s, d], |i| ((i * 104_729) % 17) as f64 / 17.0 - 0.5);

    let (out, counts) = flops::measure(|| -> Result<()> {
        let mut g = Graph::new();
        let qv = g.constant(query);
        let vv = g.constant(video);
        cross_attention(variant, &mut g, &store, &params, qv, vv)?;
        Ok(())
    });
    out?;
    let (pass, projection) = closed_form_macs(variant, q, t, s, d);
    Ok(FlopReport {
        variant,
        q,
        t,
        s,
        d,
        score_pass_macs: pass,
        score_macs: 2 * pass,
        projection_macs: projection,
        total: 2 * pass + projection,
        instrumented_score_macs: counts.get(SCORE).copied().unwrap_or(0),
        instrumented_projection_macs: counts.get(PROJECTION).copied().unwrap_or(0),
    })
}
