//! Parameter layouts shared by the encoder, language model and adapters.

use framecap_tensor::{Graph, ParamId, ParamStore, Tensor, Var, LN_EPS};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Registers parameters under a common name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub trainable: bool,
}

impl<R: Rng> Builder<'_, R> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut *self.rng));
        Ok(self.store.insert(name, t, self.trainable)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::full(shape, value), self.trainable)?)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Result<Linear> {
        Ok(Linear {
            w: self.normal(&format!("{name}.w"), &[fan_in, fan_out], std)?,
            b: self.constant(&format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    pub fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.constant(&format!("{name}.g"), &[d], 1.0)?,
            bias: self.constant(&format!("{name}.b"), &[d], 0.0)?,
        })
    }

    pub fn qkv(&mut self, name: &str, d: usize, std: f64) -> Result<Qkv> {
        Ok(Qkv {
            q: self.linear(&format!("{name}.q"), d, d, std)?,
            k: self.linear(&format!("{name}.k"), d, d, std)?,
            v: self.linear(&format!("{name}.v"), d, d, std)?,
        })
    }

    pub fn ffn(&mut self, name: &str, d: usize, mult: usize, std: f64) -> Result<Ffn> {
        Ok(Ffn {
            up: self.linear(&format!("{name}.up"), d, d * mult, std)?,
            down: self.linear(&format!("{name}.down"), d * mult, d, std / (mult as f64).sqrt())?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Qkv {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Qkv {
    pub fn ids(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v].iter().flat_map(|l| l.ids()).collect()
    }
}

/// `d -> mult·d -> d` with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.up, self.down].iter().flat_map(|l| l.ids()).collect()
    }
}

/// Fixed sinusoidal table `[positions, width]`.
pub fn sinusoid(positions: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions * width];
    for pos in 0..positions {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / width as f64);
            let angle = pos as f64 * freq;
            out[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
