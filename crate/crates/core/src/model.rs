//! The concept-bottleneck regressor `head(concepts(frames))`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// Model dimensions: frame width `d`, embedding width `l`, concept count `m`,
/// hidden width shared by encoder and head, and target count `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub d: usize,
    pub l: usize,
    pub m: usize,
    pub hidden: usize,
    pub t: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        let Dims { d, l, m, hidden, t } = *self;
        if [d, l, m, hidden, t].contains(&0) {
            return Err(Error::contract(format!("all dims must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Fixed concept dictionary: one unit-norm embedding row per concept.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSpace {
    embeddings: Tensor,
    labels: Vec<String>,
    id: String,
}

const UNIT_TOL: f64 = 1e-9;

impl ConceptSpace {
    pub fn new(embeddings: Tensor, labels: Vec<String>) -> Result<Self> {
        let [m, _l] = embeddings.shape() else {
            return Err(Error::dim(
                "concept_space",
                format!("embeddings must be a matrix, got {:?}", embeddings.shape()),
            ));
        };
        let m = *m;
        if m < 2 {
            return Err(Error::contract("concept space needs at least 2 concepts"));
        }
        if labels.len() != m {
            return Err(Error::contract(format!("{} labels for {m} concepts", labels.len())));
        }
        let mut sorted: Vec<&String> = labels.iter().collect();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("concept labels must be distinct"));
        }
        for i in 0..m {
            let n = embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::contract(format!("concept row {i} has norm {n}")));
            }
        }
        let mut h = Sha256::new();
        for label in &labels {
            h.update(label.as_bytes());
            h.update([0u8]);
        }
        h.update(embeddings.to_le_bytes());
        let id = hex::encode(&h.finalize()[..8]);
        Ok(ConceptSpace {
            embeddings,
            labels,
            id,
        })
    }

    /// Normalizes each row to unit length, then validates.
    pub fn from_raw(raw: Tensor, labels: Vec<String>) -> Result<Self> {
        let (m, l) = (raw.rows(), raw.cols());
        let mut data = raw.into_data();
        for row in data.chunks_mut(l) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate {
                    op: "concept_space",
                    detail: "zero embedding row".into(),
                });
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        ConceptSpace::new(Tensor::matrix(m, l, data)?, labels)
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Number of concepts `m`.
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embedding width `l`.
    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    /// `gelu(x W1 + b1) W2 + b2`
    Mlp {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    /// `x W + b`; used for oracle encoders in tests and audits.
    Linear { w: Tensor, b: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All trainable parameters plus the id of the concept space they were trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct CbmParams {
    pub encoder: Encoder,
    pub head: Head,
    concept_space_ref: String,
}

fn uniform_init(rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    use rand::Rng;
    let bound = (1.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

impl CbmParams {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
    pub fn init(seed: u64, dims: Dims, space: &ConceptSpace) -> Result<Self> {
        dims.validate()?;
        if space.len() != dims.m || space.width() != dims.l {
            return Err(Error::dim(
                "init_params",
                format!(
                    "space is {}x{}, dims want m={} l={}",
                    space.len(),
                    space.width(),
                    dims.m,
                    dims.l
                ),
            ));
        }
        let mut r = rng::stream(seed, rng::TAG_INIT, 0);
        let Dims { d, l, m, hidden, t } = dims;
        let encoder = Encoder::Mlp {
            w1: uniform_init(&mut r, d, hidden),
            b1: Tensor::zeros(vec![hidden]),
            w2: uniform_init(&mut r, hidden, l),
            b2: Tensor::zeros(vec![l]),
        };
        let head = Head {
            w1: uniform_init(&mut r, m, hidden),
            b1: Tensor::zeros(vec![hidden]),
            w2: uniform_init(&mut r, hidden, t),
            b2: Tensor::zeros(vec![t]),
        };
        Ok(CbmParams {
            encoder,
            head,
            concept_space_ref: space.id().to_string(),
        })
    }

    /// Assembles params from parts, checking the shapes against each other.
    pub fn from_parts(encoder: Encoder, head: Head, space: &ConceptSpace) -> Result<Self> {
        let p = CbmParams {
            encoder,
            head,
            concept_space_ref: space.id().to_string(),
        };
        p.check_shapes(space.len(), space.width())?;
        Ok(p)
    }

    fn check_shapes(&self, m: usize, l: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::dim("params", what.to_string()));
        let (d, enc_out) = match &self.encoder {
            Encoder::Mlp { w1, b1, w2, b2 } => {
                if w1.shape().len() != 2 || w2.shape().len() != 2 {
                    return bad("encoder weights must be matrices");
                }
                if b1.len() != w1.cols() || w2.rows() != w1.cols() || b2.len() != w2.cols() {
                    return bad("encoder layer widths disagree");
                }
                (w1.rows(), w2.cols())
            }
            Encoder::Linear { w, b } => {
                if w.shape().len() != 2 || b.len() != w.cols() {
                    return bad("linear encoder shape");
                }
                (w.rows(), w.cols())
            }
        };
        let _ = d;
        if enc_out != l {
            return bad("encoder output width differs from concept width");
        }
        let h = &self.head;
        if h.w1.rows() != m
            || h.b1.len() != h.w1.cols()
            || h.w2.rows() != h.w1.cols()
            || h.b2.len() != h.w2.cols()
        {
            return bad("head shapes disagree");
        }
        Ok(())
    }

    pub fn concept_space_ref(&self) -> &str {
        &self.concept_space_ref
    }

    pub fn input_width(&self) -> usize {
        match &self.encoder {
            Encoder::Mlp { w1, .. } => w1.rows(),
            Encoder::Linear { w, .. } => w.rows(),
        }
    }

    pub fn n_targets(&self) -> usize {
        self.head.b2.len()
    }

    pub fn check_binding(&self, space: &ConceptSpace) -> Result<()> {
        if self.concept_space_ref != space.id() {
            return Err(Error::Binding {
                expected: self.concept_space_ref.clone(),
                found: space.id().to_string(),
            });
        }
        Ok(())
    }

    /// Same weights, bound to a different concept space of identical shape.
    pub fn rebind(&self, space: &ConceptSpace) -> Result<Self> {
        self.check_shapes(space.len(), space.width())?;
        Ok(CbmParams {
            concept_space_ref: space.id().to_string(),
            ..self.clone()
        })
    }

    /// Parameter tensors in their canonical (flatten) order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = match &self.encoder {
            Encoder::Mlp { w1, b1, w2, b2 } => vec![
                ("enc.w1", w1),
                ("enc.b1", b1),
                ("enc.w2", w2),
                ("enc.b2", b2),
            ],
            Encoder::Linear { w, b } => vec![("enc.w", w), ("enc.b", b)],
        };
        let h = &self.head;
        out.extend([
            ("head.w1", &h.w1),
            ("head.b1", &h.b1),
            ("head.w2", &h.w2),
            ("head.b2", &h.b2),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = match &mut self.encoder {
            Encoder::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            Encoder::Linear { w, b } => vec![w, b],
        };
        let h = &mut self.head;
        out.extend([&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Copy of `self` with every parameter replaced from `flat` (same order as [`CbmParams::flatten`]).
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(Error::dim(
                "unflatten",
                format!("{} values for {} params", flat.len(), self.n_params()),
            ));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            *t = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?;
            offset += n;
        }
        Ok(out)
    }

    /// SHA-256 over the flattened parameter bytes and binding.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.concept_space_ref.as_bytes());
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn to_vars(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let encoder = match &self.encoder {
            Encoder::Mlp { w1, b1, w2, b2 } => EncoderVars::Mlp {
                w1: leaf(w1),
                b1: leaf(b1),
                w2: leaf(w2),
                b2: leaf(b2),
            },
            Encoder::Linear { w, b } => EncoderVars::Linear {
                w: leaf(w),
                b: leaf(b),
            },
        };
        let h = &self.head;
        let head = HeadVars {
            w1: leaf(&h.w1),
            b1: leaf(&h.b1),
            w2: leaf(&h.w2),
            b2: leaf(&h.b2),
        };
        ParamVars { encoder, head }
    }

    /// Builds param vars as reshaped slices of one flat vector already on the tape.
    pub fn vars_from_flat(&self, tape: &mut Tape, flat: Var) -> Result<ParamVars> {
        let mut offset = 0;
        let mut slices = Vec::new();
        for (_, t) in self.named_tensors() {
            let idx: Vec<usize> = (offset..offset + t.len()).collect();
            offset += t.len();
            let g = tape.gather(flat, idx)?;
            slices.push(tape.reshape(g, t.shape().to_vec())?);
        }
        let encoder = match self.encoder {
            Encoder::Mlp { .. } => EncoderVars::Mlp {
                w1: slices[0],
                b1: slices[1],
                w2: slices[2],
                b2: slices[3],
            },
            Encoder::Linear { .. } => EncoderVars::Linear {
                w: slices[0],
                b: slices[1],
            },
        };
        let s = &slices[slices.len() - 4..];
        Ok(ParamVars {
            encoder,
            head: HeadVars {
                w1: s[0],
                b1: s[1],
                w2: s[2],
                b2: s[3],
            },
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum EncoderVars {
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
    Linear { w: Var, b: Var },
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Parameters living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

impl ParamVars {
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = match self.encoder {
            EncoderVars::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            EncoderVars::Linear { w, b } => vec![w, b],
        };
        out.extend([self.head.w1, self.head.b1, self.head.w2, self.head.b2]);
        out
    }

    /// Gradient w.r.t. every parameter, concatenated in flatten order.
    pub fn flat_grad(&self, tape: &Tape, grads: &crate::tensor::Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for v in self.leaves() {
            let shape = tape.value(v).shape().to_vec();
            out.extend_from_slice(grads.get_or_zeros(v, &shape).data());
        }
        out
    }

    /// Embeds each row of `frames[n x d]` into `[n x l]`.
    pub fn encode(&self, tape: &mut Tape, frames: Var) -> Result<Var> {
        match self.encoder {
            EncoderVars::Mlp { w1, b1, w2, b2 } => {
                let h = tape.matmul(frames, w1)?;
                let h = tape.add_row(h, b1)?;
                let h = tape.gelu(h)?;
                let o = tape.matmul(h, w2)?;
                tape.add_row(o, b2)
            }
            EncoderVars::Linear { w, b } => {
                let o = tape.matmul(frames, w)?;
                tape.add_row(o, b)
            }
        }
    }

    /// Pooled concept scores `[B x m]` for `B` stacked sequences of `seq_len` frames.
    pub fn concept_scores(
        &self,
        tape: &mut Tape,
        concepts: Var,
        frames: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let emb = self.encode(tape, frames)?;
        let per_frame = tape.cosine(emb, concepts)?;
        tape.window_mean_pool(per_frame, seq_len)
    }

    /// Prediction head `[B x m] -> [B x t]`.
    pub fn head(&self, tape: &mut Tape, scores: Var) -> Result<Var> {
        let h = self.head;
        let z = tape.matmul(scores, h.w1)?;
        let z = tape.add_row(z, h.b1)?;
        let z = tape.gelu(z)?;
        let o = tape.matmul(z, h.w2)?;
        tape.add_row(o, h.b2)
    }
}

/// One input sequence and its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[T x d]`
    pub frames: Tensor,
    /// `[t]`
    pub target: Tensor,
}

impl Sample {
    pub fn new(frames: Tensor, target: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 || frames.rows() == 0 {
            return Err(Error::dim(
                "sample",
                format!("frames must be [T x d] with T >= 1, got {:?}", frames.shape()),
            ));
        }
        if target.shape().len() != 1 {
            return Err(Error::dim("sample", "target must be a vector"));
        }
        Ok(Sample { frames, target })
    }

    pub fn seq_len(&self) -> usize {
        self.frames.rows()
    }
}

/// Samples of equal length stacked for batched evaluation.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[(B*T) x d]`
    pub frames: Tensor,
    /// `[B x t]`
    pub targets: Tensor,
    pub seq_len: usize,
    pub size: usize,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::contract("empty batch"))?;
        let seq_len = first.seq_len();
        if samples.iter().any(|s| s.seq_len() != seq_len) {
            return Err(Error::contract("batch samples must share sequence length"));
        }
        let frames: Vec<&Tensor> = samples.iter().map(|s| &s.frames).collect();
        let frames = Tensor::concat_rows(&frames)?;
        let t = first.target.len();
        if samples.iter().any(|s| s.target.len() != t) {
            return Err(Error::contract("batch samples must share target width"));
        }
        let targets: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.target.data().iter().copied())
            .collect();
        Ok(Batch {
            frames,
            targets: Tensor::matrix(samples.len(), t, targets)?,
            seq_len,
            size: samples.len(),
        })
    }
}

/// Concept scores and predictions for a batch, as plain tensors.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// `[B x m]`
    pub scores: Tensor,
    /// `[B x t]`
    pub preds: Tensor,
}

/// Forward pass without gradients.
pub fn forward(params: &CbmParams, space: &ConceptSpace, frames: &Tensor, seq_len: usize) -> Result<Outputs> {
    params.check_binding(space)?;
    let mut tape = Tape::new();
    let pv = params.to_vars(&mut tape, false);
    let c = tape.constant(space.embeddings().clone());
    let x = tape.constant(frames.clone());
    let s = pv.concept_scores(&mut tape, c, x, seq_len)?;
    let p = pv.head(&mut tape, s)?;
    Ok(Outputs {
        scores: tape.value(s).clone(),
        preds: tape.value(p).clone(),
    })
}

/// Pooled concept-score vector `[m]` for one sequence `frames[T x d]`.
pub fn concept_scores(params: &CbmParams, space: &ConceptSpace, frames: &Tensor) -> Result<Tensor> {
    let out = forward(params, space, frames, frames.rows())?;
    let m = out.scores.len();
    out.scores.reshape(vec![m])
}

/// Prediction `[t]` for one sequence.
pub fn predict(params: &CbmParams, space: &ConceptSpace, frames: &Tensor) -> Result<Tensor> {
    let out = forward(params, space, frames, frames.rows())?;
    let t = out.preds.len();
    out.preds.reshape(vec![t])
}

/// Runs `samples` through the model in chunks; returns per-sample (scores, preds).
pub fn forward_samples(
    params: &CbmParams,
    space: &ConceptSpace,
    samples: &[&Sample],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let b = Batch::from_samples(chunk)?;
        let o = forward(params, space, &b.frames, b.seq_len)?;
        for i in 0..b.size {
            out.push((o.scores.row(i).to_vec(), o.preds.row(i).to_vec()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;

    fn space(m: usize, l: usize, seed: u64) -> ConceptSpace {
        let mut r = rng::stream(seed, 99, 0);
        let raw = Tensor::matrix(m, l, rng::normals(&mut r, m * l, 1.0)).unwrap();
        ConceptSpace::from_raw(raw, (0..m).map(|i| format!("c{i}")).collect()).unwrap()
    }

    fn random_frames(t: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 98, 0);
        Tensor::matrix(t, d, rng::normals(&mut r, t * d, 1.0)).unwrap()
    }

    fn dims() -> Dims {
        Dims { d: 5, l: 4, m: 6, hidden: 7, t: 2 }
    }

    #[test]
    fn concept_space_validation() {
        let s = space(3, 4, 1);
        assert_eq!(s.len(), 3);
        assert!(ConceptSpace::new(Tensor::matrix(2, 2, vec![1., 0., 0.5, 0.]).unwrap(), vec!["a".into(), "b".into()]).is_err());
        assert!(ConceptSpace::new(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap(), vec!["a".into(), "a".into()]).is_err());
        assert!(ConceptSpace::new(Tensor::matrix(1, 2, vec![1., 0.]).unwrap(), vec!["a".into()]).is_err());
        assert_ne!(space(3, 4, 1).id(), space(3, 4, 2).id());
        assert_eq!(space(3, 4, 1).id(), s.id());
    }

    #[test]
    fn identity_encoder_scores_parallel_frame_as_one() {
        let s = space(4, 3, 7);
        let encoder = Encoder::Linear {
            w: Tensor::identity(3),
            b: Tensor::zeros(vec![3]),
        };
        let head = Head {
            w1: Tensor::zeros(vec![4, 2]),
            b1: Tensor::zeros(vec![2]),
            w2: Tensor::zeros(vec![2, 1]),
            b2: Tensor::zeros(vec![1]),
        };
        let p = CbmParams::from_parts(encoder, head, &s).unwrap();
        let frames = Tensor::matrix(1, 3, s.embeddings().row(2).to_vec()).unwrap();
        let g = concept_scores(&p, &s, &frames).unwrap();
        assert!((g.data()[2] - 1.0).abs() < 1e-12);

        // two frames pool to the mean of their per-frame scores
        let f2 = Tensor::matrix(1, 3, s.embeddings().row(0).to_vec()).unwrap();
        let v1 = concept_scores(&p, &s, &frames).unwrap();
        let v2 = concept_scores(&p, &s, &f2).unwrap();
        let both = Tensor::concat_rows(&[&frames, &f2]).unwrap();
        let pooled = concept_scores(&p, &s, &both).unwrap();
        for j in 0..4 {
            assert!((pooled.data()[j] - 0.5 * (v1.data()[j] + v2.data()[j])).abs() < 1e-12);
        }
    }

    /// Straight-line re-evaluation: embed, per-frame cosine, arithmetic mean, head.
    fn naive_forward(p: &CbmParams, s: &ConceptSpace, frames: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let dense = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..w.cols())
                .map(|j| b.data()[j] + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>())
                .collect()
        };
        let Encoder::Mlp { w1, b1, w2, b2 } = &p.encoder else { unreachable!() };
        let m = s.len();
        let mut g = vec![0.0; m];
        for t in 0..frames.rows() {
            let h: Vec<f64> = dense(frames.row(t), w1, b1).into_iter().map(gelu).collect();
            let e = dense(&h, w2, b2);
            let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, gj) in g.iter_mut().enumerate() {
                let c = s.embeddings().row(j);
                let dot: f64 = e.iter().zip(c).map(|(a, b)| a * b).sum();
                *gj += dot / en / frames.rows() as f64;
            }
        }
        let h: Vec<f64> = dense(&g, &p.head.w1, &p.head.b1).into_iter().map(gelu).collect();
        let y = dense(&h, &p.head.w2, &p.head.b2);
        (g, y)
    }

    #[test]
    fn forward_matches_naive_composition() {
        let s = space(6, 4, 3);
        let mut p = CbmParams::init(11, dims(), &s).unwrap();
        // nonzero biases so the oracle exercises them
        let n = p.n_params();
        let mut r = rng::stream(5, 0, 0);
        let flat: Vec<f64> = p.flatten().iter().map(|v| v + 0.1 * r.random_range(-1.0..1.0)).collect();
        p = p.with_flat(&flat).unwrap();
        assert_eq!(p.n_params(), n);
        let frames = random_frames(3, 5, 4);
        let (g, y) = naive_forward(&p, &s, &frames);
        let got_g = concept_scores(&p, &s, &frames).unwrap();
        let got_y = predict(&p, &s, &frames).unwrap();
        for (a, b) in got_g.data().iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(got_y.len(), 2);
        for (a, b) in got_y.data().iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_predicts_bias() {
        let s = space(6, 4, 3);
        let mut p = CbmParams::init(1, dims(), &s).unwrap();
        p.head.w1 = Tensor::zeros(vec![6, 7]);
        p.head.w2 = Tensor::zeros(vec![7, 2]);
        p.head.b2 = Tensor::vector(vec![1.5, -2.0]).unwrap();
        let y = predict(&p, &s, &random_frames(4, 5, 1)).unwrap();
        assert_eq!(y.data(), &[1.5, -2.0]);
    }

    #[test]
    fn init_is_deterministic_and_fan_in_bounded() {
        let s = space(6, 4, 3);
        let a = CbmParams::init(42, dims(), &s).unwrap();
        let b = CbmParams::init(42, dims(), &s).unwrap();
        let c = CbmParams::init(43, dims(), &s).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_ne!(a.flatten(), c.flatten());
        for (name, t) in a.named_tensors() {
            if name.contains(".b") {
                assert!(t.data().iter().all(|v| *v == 0.0));
            } else {
                let bound = (1.0 / t.rows() as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
        assert!(CbmParams::init(1, Dims { d: 0, ..dims() }, &s).is_err());
    }

    #[test]
    fn flatten_round_trip_is_bit_exact() {
        let s = space(6, 4, 3);
        let p = CbmParams::init(9, dims(), &s).unwrap();
        let q = p.with_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(p.with_flat(&[0.0; 3]).is_err());
    }

    #[test]
    fn binding_mismatch_errors() {
        let s = space(6, 4, 3);
        let other = space(6, 4, 4);
        let p = CbmParams::init(9, dims(), &s).unwrap();
        let f = random_frames(2, 5, 0);
        assert!(matches!(concept_scores(&p, &other, &f), Err(Error::Binding { .. })));
        assert!(matches!(predict(&p, &other, &f), Err(Error::Binding { .. })));
        let q = p.rebind(&other).unwrap();
        assert!(predict(&q, &other, &f).is_ok());
    }

    #[test]
    fn scores_in_range_and_scale_invariant_for_linear_encoder() {
        let s = space(6, 4, 3);
        let mut r = rng::stream(1, 1, 1);
        let encoder = Encoder::Linear {
            w: Tensor::matrix(5, 4, rng::normals(&mut r, 20, 1.0)).unwrap(),
            b: Tensor::zeros(vec![4]),
        };
        let base = CbmParams::init(0, dims(), &s).unwrap();
        let p = CbmParams::from_parts(encoder, base.head.clone(), &s).unwrap();
        let f = random_frames(3, 5, 2);
        let g = concept_scores(&p, &s, &f).unwrap();
        assert!(g.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for c in [0.01, 3.0, 250.0] {
            let scaled = Tensor::new(f.shape().to_vec(), f.data().iter().map(|v| v * c).collect()).unwrap();
            let gs = concept_scores(&p, &s, &scaled).unwrap();
            for (a, b) in g.data().iter().zip(gs.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn predict_grad_check_frames_and_params() {
        let s = space(6, 4, 3);
        let p = CbmParams::init(21, dims(), &s).unwrap();
        let frames = random_frames(3, 5, 8);
        let weights = [0.7, -1.3];
        let err = grad_check(
            |t, x| {
                let pv = p.to_vars(t, false);
                let c = t.constant(s.embeddings().clone());
                let sc = pv.concept_scores(t, c, x, 3)?;
                let y = pv.head(t, sc)?;
                let w = t.constant(Tensor::matrix(1, 2, weights.to_vec())?);
                let wy = t.mul(y, w)?;
                t.sum(wy)
            },
            &frames,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "frames: {err}");

        let flat = Tensor::vector(p.flatten()).unwrap();
        let err = grad_check(
            |t, x| {
                let pv = p.vars_from_flat(t, x)?;
                let c = t.constant(s.embeddings().clone());
                let f = t.constant(frames.clone());
                let sc = pv.concept_scores(t, c, f, 3)?;
                let y = pv.head(t, sc)?;
                let w = t.constant(Tensor::matrix(1, 2, weights.to_vec())?);
                let wy = t.mul(y, w)?;
                t.sum(wy)
            },
            &flat,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "params: {err}");
    }

    #[test]
    fn batch_forward_equals_per_sample() {
        let s = space(6, 4, 3);
        let p = CbmParams::init(21, dims(), &s).unwrap();
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample::new(random_frames(3, 5, 100 + i), Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap())
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let out = forward_samples(&p, &s, &refs).unwrap();
        for (smp, (g, y)) in samples.iter().zip(&out) {
            assert_eq!(concept_scores(&p, &s, &smp.frames).unwrap().data(), g.as_slice());
            assert_eq!(predict(&p, &s, &smp.frames).unwrap().data(), y.as_slice());
        }
    }
}
