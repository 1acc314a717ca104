#![allow(dead_code)]

use drive_core::losses::{DriveObjective, FrozenReference, LossMask, LossWeights};
use drive_core::model::{Batch, CbmParams, ConceptSpace, Dims, Sample};
use drive_core::rng;
use drive_core::synth::SynthSpec;
use drive_core::Tensor;

pub const DIMS: Dims = Dims {
    d: 5,
    l: 4,
    m: 6,
    hidden: 6,
    t: 2,
};

pub fn space(m: usize, l: usize, seed: u64) -> ConceptSpace {
    let mut r = rng::stream(seed, 1000, 0);
    let raw = Tensor::matrix(m, l, rng::normals(&mut r, m * l, 1.0)).unwrap();
    ConceptSpace::from_raw(raw, (0..m).map(|i| format!("c{i}")).collect()).unwrap()
}

pub fn params(seed: u64, dims: Dims, space: &ConceptSpace) -> CbmParams {
    CbmParams::init(seed, dims, space).unwrap()
}

/// `params` moved by Gaussian noise so it differs from its source everywhere.
pub fn jittered(p: &CbmParams, sigma: f64, seed: u64) -> CbmParams {
    let mut r = rng::stream(seed, 1001, 0);
    let flat: Vec<f64> = p
        .flatten()
        .iter()
        .zip(rng::normals(&mut r, p.n_params(), sigma))
        .map(|(a, e)| a + e)
        .collect();
    p.with_flat(&flat).unwrap()
}

pub fn samples(n: usize, seq_len: usize, d: usize, t: usize, seed: u64) -> Vec<Sample> {
    let mut r = rng::stream(seed, 1002, 0);
    (0..n)
        .map(|_| {
            let f = Tensor::matrix(seq_len, d, rng::normals(&mut r, seq_len * d, 1.0)).unwrap();
            let y = Tensor::vector(rng::normals(&mut r, t, 1.0)).unwrap();
            Sample::new(f, y).unwrap()
        })
        .collect()
}

pub fn batch(samples: &[Sample]) -> Batch {
    let refs: Vec<&Sample> = samples.iter().collect();
    Batch::from_samples(&refs).unwrap()
}

pub fn objective<'a>(
    space: &'a ConceptSpace,
    frozen: &'a FrozenReference,
    weights: LossWeights,
    k: usize,
) -> DriveObjective<'a> {
    DriveObjective {
        space,
        frozen,
        weights,
        k1: k,
        k2: k,
        layout: Default::default(),
    }
}

pub fn weights(mask: LossMask) -> LossWeights {
    LossWeights {
        mask,
        ..LossWeights::default()
    }
}

/// A small instance that trains in well under a second per epoch.
pub fn small_spec(seed: u64) -> SynthSpec {
    serde_json::from_value(serde_json::json!({
        "n_samples": 240, "d": 8, "l": 4, "m": 6, "seq_len": 4, "t": 2,
        "k_true": 2, "noise_sigma": 0.02, "seed": seed
    }))
    .unwrap()
}

pub fn small_dims() -> Dims {
    Dims {
        d: 8,
        l: 4,
        m: 6,
        hidden: 16,
        t: 2,
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
