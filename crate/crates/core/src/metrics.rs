//! Caption metrics: CIDEr-D, teacher-forced token accuracy and perplexity.

use std::collections::{BTreeMap, BTreeSet};

use framecap_tensor::Graph;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, PrefixCache};

pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

/// One candidate with its references, as word tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    /// Lowercased whitespace tokenization of raw strings.
    pub fn from_text(candidate: &str, references: &[&str]) -> Self {
        let tok = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>();
        Self {
            candidate: tok(candidate),
            references: references.iter().map(|r| tok(r)).collect(),
        }
    }
}

type Counts = BTreeMap<Vec<String>, f64>;

fn ngram_counts(words: &[String]) -> Vec<Counts> {
    (1..=CIDER_MAX_N)
        .map(|n| {
            let mut c = Counts::new();
            for w in words.windows(n) {
                *c.entry(w.to_vec()).or_insert(0.0) += 1.0;
            }
            c
        })
        .collect()
}

struct Weighted {
    vecs: Vec<BTreeMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    len: f64,
}

fn weigh(counts: &[Counts], df: &BTreeMap<Vec<String>, f64>, log_n: f64, len: usize) -> Weighted {
    let mut vecs = Vec::with_capacity(counts.len());
    let mut norms = Vec::with_capacity(counts.len());
    for c in counts {
        let v: BTreeMap<Vec<String>, f64> = c
            .iter()
            .map(|(g, &tf)| {
                let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
                (g.clone(), tf * (log_n - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    Weighted { vecs, norms, len: len as f64 }
}

fn similarity(hyp: &Weighted, r: &Weighted) -> f64 {
    let delta = hyp.len - r.len;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_MAX_N {
        let mut val = 0.0;
        for (g, &h) in &hyp.vecs[n] {
            if let Some(&rv) = r.vecs[n].get(g) {
                val += h.min(rv) * rv;
            }
        }
        if hyp.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= hyp.norms[n] * r.norms[n];
        }
        total += val * penalty;
    }
    total / CIDER_MAX_N as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderReport {
    pub corpus: f64,
    pub per_pair: Vec<f64>,
}

/// CIDEr-D with document frequencies taken from the references of `pairs`.
pub fn cider_d(pairs: &[EvalPair]) -> Result<CiderReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    for p in pairs {
        if p.candidate.is_empty() || p.references.is_empty() || p.references.iter().any(|r| r.is_empty()) {
            return Err(Error::Data("evaluation pairs need a candidate and non-empty references".into()));
        }
    }
    let ref_counts: Vec<Vec<Vec<Counts>>> = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| ngram_counts(r)).collect())
        .collect();
    let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
    for refs in &ref_counts {
        let grams: BTreeSet<&Vec<String>> = refs.iter().flatten().flat_map(|c| c.keys()).collect();
        for g in grams {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (pairs.len() as f64).ln();
    let per_pair: Vec<f64> = pairs
        .iter()
        .zip(&ref_counts)
        .map(|(p, refs)| {
            let hyp = weigh(&ngram_counts(&p.candidate), &df, log_n, p.candidate.len());
            let sum: f64 = refs
                .iter()
                .zip(&p.references)
                .map(|(rc, r)| similarity(&hyp, &weigh(rc, &df, log_n, r.len())))
                .sum();
            sum / refs.len() as f64 * 10.0
        })
        .collect();
    Ok(CiderReport {
        corpus: per_pair.iter().sum::<f64>() / per_pair.len() as f64,
        per_pair,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAccuracy {
    pub accuracy: f64,
    pub motion_accuracy: f64,
    pub tokens: usize,
    pub motion_tokens: usize,
}

/// Teacher-forced argmax accuracy, overall and on motion-word targets.
pub fn token_accuracy(model: &Model, samples: &[Sample], cache: Option<&PrefixCache>) -> Result<TokenAccuracy> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let (mut hits, mut total, mut motion_hits, mut motion_total) = (0usize, 0usize, 0usize, 0usize);
    let v = model.config.vocab_size;
    for chunk in samples.chunks(64) {
        let batch: Vec<_> = chunk.iter().map(Sample::example).collect();
        let mut g = Graph::new();
        let f = model.forward(&mut g, &batch, ForwardOptions { text_only: false, cache })?;
        let logits = g.value(f.logits).data();
        for (row, &target) in f.targets.iter().enumerate() {
            let scores = &logits[row * v..(row + 1) * v];
            let pred = (0..v).fold(0, |best, i| if scores[i] > scores[best] { i } else { best });
            let hit = pred == target;
            hits += hit as usize;
            total += 1;
            if model.vocab.is_motion(target) {
                motion_hits += hit as usize;
                motion_total += 1;
            }
        }
    }
    Ok(TokenAccuracy {
        accuracy: hits as f64 / total as f64,
        motion_accuracy: if motion_total == 0 {
            f64::NAN
        } else {
            motion_hits as f64 / motion_total as f64
        },
        tokens: total,
        motion_tokens: motion_total,
    })
}

/// Token-weighted mean negative log-likelihood over all samples.
pub fn mean_nll(model: &Model, samples: &[Sample], cache: Option<&PrefixCache>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in samples.chunks(64) {
        let batch: Vec<_> = chunk.iter().map(Sample::example).collect();
        let n: usize = batch.iter().map(|e| e.tokens.targets().len()).sum();
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &batch, ForwardOptions { text_only: false, cache })?;
        sum += g.scalar(loss) * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

/// `exp` of [`mean_nll`].
pub fn perplexity(model: &Model, samples: &[Sample], cache: Option<&PrefixCache>) -> Result<f64> {
    Ok(mean_nll(model, samples, cache)?.exp())
}
