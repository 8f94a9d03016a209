//! Gated adapters inserted between frozen language-model layers.

use std::ops::Range;

use framecap_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{separable_cross_attention_batched, CrossAttentionParams};
use crate::error::{Error, Result};
use crate::nn::{Builder, Ffn, Norm};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// One α per hidden dimension.
    #[default]
    Vector,
    /// One α per sublayer.
    Scalar,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateInitMode {
    #[default]
    Zero,
    One,
}

impl GateInitMode {
    pub fn alpha(self) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::One => 1.0,
        }
    }
}

impl std::str::FromStr for GateInitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" | "0" => Ok(Self::Zero),
            "one" | "1" => Ok(Self::One),
            other => Err(Error::Config(format!("unknown gate init `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GatedAdapter {
    pub name: String,
    pub attn_norm: Norm,
    pub xattn: CrossAttentionParams,
    pub alpha_attn: ParamId,
    pub ffn_norm: Norm,
    pub ffn: Ffn,
    pub alpha_ffn: ParamId,
    pub mode: GateMode,
}

impl GatedAdapter {
    pub fn init<R: rand::Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        d: usize,
        mode: GateMode,
        gate_init: GateInitMode,
    ) -> Result<Self> {
        let gate_len = match mode {
            GateMode::Vector => d,
            GateMode::Scalar => 1,
        };
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            name: name.to_string(),
            attn_norm: b.norm(&format!("{name}.attn_norm"), d)?,
            xattn: CrossAttentionParams::init(b, &format!("{name}.xattn"), d)?,
            alpha_attn: b.constant(&format!("{name}.alpha_attn"), &[gate_len], gate_init.alpha())?,
            ffn_norm: b.norm(&format!("{name}.ffn_norm"), d)?,
            ffn: b.ffn(&format!("{name}.ffn"), d, 4, std)?,
            alpha_ffn: b.constant(&format!("{name}.alpha_ffn"), &[gate_len], gate_init.alpha())?,
            mode,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.attn_norm.ids().to_vec();
        ids.extend(self.xattn.ids());
        ids.push(self.alpha_attn);
        ids.extend(self.ffn_norm.ids());
        ids.extend(self.ffn.ids());
        ids.push(self.alpha_ffn);
        ids
    }

    pub fn gate_ids(&self) -> [ParamId; 2] {
        [self.alpha_attn, self.alpha_ffn]
    }

    /// Single query sequence `h[q, d]` conditioned on `video[t, s, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, video: Var) -> Result<Var> {
        let q = g.shape(h)[0];
        self.forward_segments(g, store, h, &[0..q], &[video])
    }

    /// Row-stacked sequences: rows in `segments[i]` attend to `videos[i]`.
    pub fn forward_segments(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        segments: &[Range<usize>],
        videos: &[Var],
    ) -> Result<Var> {
        let normed = self.attn_norm.forward(g, store, h)?;
        let attended = separable_cross_attention_batched(g, store, &self.xattn, normed, segments, videos)?;
        let alpha = g.param(store, self.alpha_attn);
        let gated = g.gate(attended, alpha)?;
        let u = g.add(h, gated)?;

        let normed = self.ffn_norm.forward(g, store, u)?;
        let ff = self.ffn.forward(g, store, normed)?;
        let alpha = g.param(store, self.alpha_ffn);
        let gated = g.gate(ff, alpha)?;
        Ok(g.add(u, gated)?)
    }
}

/// Sets every gate component to α = 0 or α = 1.
pub fn init_gates(store: &mut ParamStore, adapter: &GatedAdapter, mode: GateInitMode) {
    for id in adapter.gate_ids() {
        store.value_mut(id).data_mut().fill(mode.alpha());
    }
}

/// Effective gate values `tanh(α)` of one adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterGates {
    pub name: String,
    pub attn: Vec<f64>,
    pub ffn: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateSnapshot {
    pub adapters: Vec<AdapterGates>,
}

impl GateSnapshot {
    pub fn capture(store: &ParamStore, adapters: &[GatedAdapter]) -> Self {
        let eff = |id: ParamId| store.value(id).data().iter().map(|a| a.tanh()).collect();
        Self {
            adapters: adapters
                .iter()
                .map(|a| AdapterGates {
                    name: a.name.clone(),
                    attn: eff(a.alpha_attn),
                    ffn: eff(a.alpha_ffn),
                })
                .collect(),
        }
    }

    /// Mean absolute effective gate over all components.
    pub fn mean_abs(&self) -> f64 {
        let vals: Vec<f64> = self
            .adapters
            .iter()
            .flat_map(|a| a.attn.iter().chain(&a.ffn))
            .map(|v| v.abs())
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDrift {
    pub per_adapter: Vec<(String, f64)>,
    pub max: f64,
}

/// Largest `|tanh α_after − tanh α_before|`, per adapter and overall.
pub fn gate_drift(before: &GateSnapshot, after: &GateSnapshot) -> Result<GateDrift> {
    let mismatch = || Error::Config("gate snapshots come from different architectures".into());
    if before.adapters.len() != after.adapters.len() {
        return Err(mismatch());
    }
    let mut per_adapter = Vec::new();
    let mut max = 0.0f64;
    for (b, a) in before.adapters.iter().zip(&after.adapters) {
        if b.name != a.name || b.attn.len() != a.attn.len() || b.ffn.len() != a.ffn.len() {
            return Err(mismatch());
        }
        let drift = b
            .attn
            .iter()
            .zip(&a.attn)
            .chain(b.ffn.iter().zip(&a.ffn))
            .map(|(x, y)| (y - x).abs())
            .fold(0.0, f64::max);
        max = max.max(drift);
        per_adapter.push((b.name.clone(), drift));
    }
    Ok(GateDrift { per_adapter, max })
}

/// Ties every component of a vector gate to the mean of the scalar gate.
pub fn broadcast_scalar_gate(alpha: &Tensor, d: usize) -> Tensor {
    Tensor::full(&[d], alpha.data()[0])
}
