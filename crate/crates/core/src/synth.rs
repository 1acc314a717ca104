//! Seeded synthetic sequence-regression data with known active concepts.
//!
//! Each sample activates `k_true` concepts with positive weights. Every frame
//! is the weighted concept mix (weights jittered per frame) lifted into input
//! space by a fixed random map, plus Gaussian noise. Targets are a fixed
//! linear map of the sample's mean concept weights plus small noise.
//!
//! Samples are redrawn until the pooled noiseless cosine scores put the active
//! concepts strictly on top, so an encoder that inverts the lift recovers the
//! ground truth exactly.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ConceptSpace, Sample};
use crate::rng;
use crate::tensor::{read_bundle, write_bundle, Tensor};
use crate::training::Splits;

pub const FORMAT_VERSION: &str = "drive-synth-v1";

/// Minimum gap between the weakest active and strongest inactive pooled score.
const RANK_MARGIN: f64 = 1e-6;
const MAX_REDRAWS: usize = 10_000;

fn default_split() -> [f64; 3] {
    [0.85, 0.05, 0.10]
}
fn default_target_noise() -> f64 {
    0.01
}
fn one() -> f64 {
    1.0
}
fn default_jitter() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_samples: usize,
    /// Input width per frame.
    pub d: usize,
    /// Concept embedding width.
    pub l: usize,
    /// Number of concepts.
    pub m: usize,
    /// Frames per sample.
    pub seq_len: usize,
    /// Number of targets (1 or 2).
    pub t: usize,
    pub k_true: usize,
    /// Frame-level observation noise.
    pub noise_sigma: f64,
    /// Train/val/test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_target_noise")]
    pub target_noise_sigma: f64,
    /// Multiplier on the lifted frames.
    #[serde(default = "one")]
    pub frame_scale: f64,
    /// Multiplier on the concept-to-target map.
    #[serde(default = "one")]
    pub target_scale: f64,
    /// Relative per-frame jitter of the concept weights, in `[0, 1)`.
    #[serde(default = "default_jitter")]
    pub temporal_jitter: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, detail: String| {
            Err(Error::Config {
                path: format!("data.{path}"),
                detail,
            })
        };
        for (name, v) in [
            ("n_samples", self.n_samples),
            ("d", self.d),
            ("l", self.l),
            ("seq_len", self.seq_len),
            ("k_true", self.k_true),
        ] {
            if v == 0 {
                return bad(name, "must be >= 1".into());
            }
        }
        if self.m < 2 {
            return bad("m", format!("needs at least 2 concepts, got {}", self.m));
        }
        if !(1..=2).contains(&self.t) {
            return bad("t", format!("must be 1 or 2, got {}", self.t));
        }
        if self.k_true >= self.m {
            return bad("k_true", format!("must be < m = {}, got {}", self.m, self.k_true));
        }
        if self.d < self.l {
            return bad("d", format!("must be >= l = {} so the lift is invertible", self.l));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split", format!("fractions must lie in [0, 1] and sum to 1, got {:?}", self.split));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("target_noise_sigma", self.target_noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("must be >= 0, got {v}"));
            }
        }
        for (name, v) in [("frame_scale", self.frame_scale), ("target_scale", self.target_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, format!("must be > 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.temporal_jitter) {
            return bad("temporal_jitter", format!("must lie in [0, 1), got {}", self.temporal_jitter));
        }
        Ok(())
    }

    /// `(train, val, test)` counts: `floor(fraction * n)` for val and test, the remainder to train.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.n_samples;
        let val = (self.split[1] * n as f64 + 1e-9).floor() as usize;
        let test = (self.split[2] * n as f64 + 1e-9).floor() as usize;
        [n - val - test, val, test]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub samples: Vec<Sample>,
    /// Active concept indices per sample, ascending.
    pub active: Vec<Vec<usize>>,
    pub space: ConceptSpace,
    /// `[l x d]` map from concept mixes to frames.
    pub lift: Tensor,
    /// `[m x t]` map from concept weights to targets.
    pub target_map: Tensor,
    /// `[n x m]` mean concept weights per sample (zero off the active set).
    pub true_weights: Tensor,
    pub split: SplitIndices,
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let SynthSpec {
        n_samples: n,
        d,
        l,
        m,
        seq_len,
        t,
        ..
    } = *spec;

    let mut g = rng::stream(spec.seed, rng::TAG_SYNTH, 0);
    let mut concepts = rng::normals(&mut g, m * l, 1.0);
    concepts.chunks_mut(l).for_each(unit);
    let labels = (0..m).map(|i| format!("concept_{i:02}")).collect();
    let space = ConceptSpace::new(Tensor::matrix(m, l, concepts.clone())?, labels)?;
    let lift = rng::normals(&mut g, l * d, 1.0 / (l as f64).sqrt());
    let target_map = rng::normals(&mut g, m * t, spec.target_scale);

    let mut samples = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    let mut weights = vec![0.0; n * m];
    for i in 0..n {
        let mut r = rng::stream(spec.seed, rng::TAG_SYNTH, i as u64 + 1);
        let (idx, mixes, mean_w) = draw_mixture(&mut r, spec, &concepts)?;

        let mut frames = Vec::with_capacity(seq_len * d);
        for mix in mixes.chunks(l) {
            let noise = rng::normals(&mut r, d, spec.noise_sigma);
            for (j, e) in noise.into_iter().enumerate() {
                let v: f64 = (0..l).map(|a| mix[a] * lift[a * d + j]).sum();
                frames.push(spec.frame_scale * v + e);
            }
        }
        let noise = rng::normals(&mut r, t, spec.target_noise_sigma);
        let target: Vec<f64> = (0..t)
            .map(|c| (0..m).map(|j| mean_w[j] * target_map[j * t + c]).sum::<f64>() + noise[c])
            .collect();
        weights[i * m..(i + 1) * m].copy_from_slice(&mean_w);
        samples.push(Sample::new(Tensor::matrix(seq_len, d, frames)?, Tensor::vector(target)?)?);
        active.push(idx);
    }

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(spec.seed, rng::TAG_SPLIT, 0));
    let [n_train, n_val, _] = spec.split_sizes();
    let mut split = SplitIndices {
        train: perm[..n_train].to_vec(),
        val: perm[n_train..n_train + n_val].to_vec(),
        test: perm[n_train + n_val..].to_vec(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();

    Ok(SynthDataset {
        spec: spec.clone(),
        samples,
        active,
        space,
        lift: Tensor::matrix(l, d, lift)?,
        target_map: Tensor::matrix(m, t, target_map)?,
        true_weights: Tensor::matrix(n, m, weights)?,
        split,
    })
}

/// Draws active concepts and per-frame weights until the pooled cosine
/// ranking of the noiseless mixes is exact. Returns the active set, the
/// `[T x l]` frame mixes and the mean weight vector.
fn draw_mixture(
    r: &mut rand_chacha::ChaCha8Rng,
    spec: &SynthSpec,
    concepts: &[f64],
) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let (m, l, k, seq_len) = (spec.m, spec.l, spec.k_true, spec.seq_len);
    for _ in 0..MAX_REDRAWS {
        let mut idx = index::sample(r, m, k).into_vec();
        idx.sort_unstable();
        let base: Vec<f64> = (0..k).map(|_| r.random_range(0.5..1.5)).collect();
        let mut mixes = vec![0.0; seq_len * l];
        let mut mean_w = vec![0.0; m];
        let mut pooled = vec![0.0; m];
        for f in 0..seq_len {
            let mix = &mut mixes[f * l..(f + 1) * l];
            for (a, &j) in idx.iter().enumerate() {
                let w = base[a] * (1.0 + spec.temporal_jitter * r.random_range(-1.0..1.0));
                mean_w[j] += w / seq_len as f64;
                for (x, c) in mix.iter_mut().zip(&concepts[j * l..(j + 1) * l]) {
                    *x += w * c;
                }
            }
            let norm = dot(mix, mix).sqrt();
            for (j, p) in pooled.iter_mut().enumerate() {
                *p += dot(mix, &concepts[j * l..(j + 1) * l]) / norm / seq_len as f64;
            }
        }
        let weakest_active = idx.iter().map(|&j| pooled[j]).fold(f64::INFINITY, f64::min);
        let strongest_other = (0..m)
            .filter(|j| idx.binary_search(j).is_err())
            .map(|j| pooled[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if weakest_active - strongest_other > RANK_MARGIN {
            return Ok((idx, mixes, mean_w));
        }
    }
    Err(Error::Config {
        path: "data.k_true".into(),
        detail: format!("could not draw a separable mixture of {k} concepts in {MAX_REDRAWS} tries"),
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    spec: SynthSpec,
    labels: Vec<String>,
    active: Vec<Vec<usize>>,
    split: SplitIndices,
}

impl SynthDataset {
    pub fn splits(&self) -> Splits {
        let pick = |ix: &[usize]| ix.iter().map(|&i| self.samples[i].clone()).collect();
        Splits {
            train: pick(&self.split.train),
            val: pick(&self.split.val),
            test: pick(&self.split.test),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_value(Manifest {
            version: FORMAT_VERSION.into(),
            spec: self.spec.clone(),
            labels: self.space.labels().to_vec(),
            active: self.active.clone(),
            split: self.split.clone(),
        })?;
        let frames = Tensor::stack(&self.samples.iter().map(|s| s.frames.clone()).collect::<Vec<_>>())?;
        let targets = Tensor::stack(&self.samples.iter().map(|s| s.target.clone()).collect::<Vec<_>>())?;
        write_bundle(
            &manifest,
            &[
                ("concepts", self.space.embeddings()),
                ("lift", &self.lift),
                ("target_map", &self.target_map),
                ("true_weights", &self.true_weights),
                ("frames", &frames),
                ("targets", &targets),
            ],
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bundle = read_bundle(bytes)?;
        let version = bundle.manifest.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible {
                expected: FORMAT_VERSION.into(),
                found: version.into(),
            });
        }
        let man: Manifest = serde_json::from_value(bundle.manifest.clone()).map_err(|e| Error::Format {
            offset: 8,
            detail: format!("bad dataset manifest: {e}"),
        })?;
        let space = ConceptSpace::new(bundle.tensor("concepts")?.clone(), man.labels)?;
        let frames = bundle.tensor("frames")?;
        let targets = bundle.tensor("targets")?;
        let (n, seq_len, d, t) = (man.spec.n_samples, man.spec.seq_len, man.spec.d, man.spec.t);
        if frames.shape() != [n, seq_len, d] || targets.shape() != [n, t] || man.active.len() != n {
            return Err(Error::Format {
                offset: 0,
                detail: format!("payload shapes {:?} / {:?} disagree with the spec", frames.shape(), targets.shape()),
            });
        }
        let per = seq_len * d;
        let samples = (0..n)
            .map(|i| {
                Sample::new(
                    Tensor::matrix(seq_len, d, frames.data()[i * per..(i + 1) * per].to_vec())?,
                    Tensor::vector(targets.row(i).to_vec())?,
                )
            })
            .collect::<Result<_>>()?;
        Ok(SynthDataset {
            spec: man.spec,
            samples,
            active: man.active,
            space,
            lift: bundle.tensor("lift")?.clone(),
            target_map: bundle.tensor("target_map")?.clone(),
            true_weights: bundle.tensor("true_weights")?.clone(),
            split: man.split,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// sha256 of the serialized form.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
