#![allow(dead_code)]

use framecap::attention::{CrossAttentionParams, VideoFeatures};
use framecap::nn::Builder;
use framecap::tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_video(t: usize, s: usize, d: usize, seed: u64) -> VideoFeatures {
    VideoFeatures::new(random(&[t, s, d], seed)).unwrap()
}

pub fn xattn(d: usize, seed: u64, trainable: bool) -> (ParamStore, CrossAttentionParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = CrossAttentionParams::init(
        &mut Builder {
            store: &mut store,
            rng: &mut rng,
            trainable,
        },
        "x",
        d,
    )
    .unwrap();
    (store, p)
}

pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}
