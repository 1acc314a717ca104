//! Training objectives: base RMSE and the four dependability terms.
//!
//! The concept terms (Ci, Si) are top-k restricted L1 distances. Both index
//! sets are recomputed from the current values on every evaluation and are
//! treated as constants by the backward pass, so gradients flow through the
//! selected values only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::top_k_set;
use crate::model::{Batch, CbmParams, ConceptSpace, Outputs, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

/// Which dependability terms are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossMask {
    pub ci: bool,
    pub si: bool,
    pub co: bool,
    pub so: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        LossMask::ALL
    }
}

impl LossMask {
    pub const NONE: LossMask = LossMask {
        ci: false,
        si: false,
        co: false,
        so: false,
    };
    pub const ALL: LossMask = LossMask {
        ci: true,
        si: true,
        co: true,
        so: true,
    };

    /// Parses ablation notation: `A` is the base loss (always on), `BC` the
    /// concept pair, `DE` the output pair; single letters `B`..`E` are accepted.
    pub fn parse(s: &str) -> Result<Self> {
        let mut m = LossMask::NONE;
        let mut saw_a = false;
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            for c in tok.chars() {
                match c.to_ascii_uppercase() {
                    'A' => saw_a = true,
                    'B' => m.ci = true,
                    'C' => m.si = true,
                    'D' => m.co = true,
                    'E' => m.so = true,
                    _ => {
                        return Err(Error::Config {
                            path: "mask".into(),
                            detail: format!("unknown term {c:?} in {s:?}"),
                        })
                    }
                }
            }
        }
        if !saw_a {
            return Err(Error::Config {
                path: "mask".into(),
                detail: format!("mask {s:?} must include the base term A"),
            });
        }
        Ok(m)
    }

    /// Inverse of [`LossMask::parse`], grouping pairs as `BC` / `DE`.
    pub fn label(&self) -> String {
        let mut out = String::from("A");
        let pair = |a: bool, b: bool, both: &str, x: &str, y: &str| match (a, b) {
            (true, true) => format!(",{both}"),
            (true, false) => format!(",{x}"),
            (false, true) => format!(",{y}"),
            _ => String::new(),
        };
        out += &pair(self.ci, self.si, "BC", "B", "C");
        out += &pair(self.co, self.so, "DE", "D", "E");
        out
    }

    pub fn any(&self) -> bool {
        self.ci || self.si || self.co || self.so
    }
}

/// Regularization weights and the term mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ci: f64,
    pub lambda_si: f64,
    pub lambda_co: f64,
    pub lambda_so: f64,
    #[serde(default)]
    pub mask: LossMask,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ci: 1e2,
            lambda_si: 1e2,
            lambda_co: 1e-2,
            lambda_so: 1e-2,
            mask: LossMask::ALL,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ci", self.lambda_ci),
            ("lambda_si", self.lambda_si),
            ("lambda_co", self.lambda_co),
            ("lambda_so", self.lambda_so),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    path: format!("train.weights.{name}"),
                    detail: format!("must be a finite value >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// RMSE over a batch: `sqrt(sum_i ||pred_i - y_i||^2 / N)` for `[N x t]` inputs.
pub fn rmse(tape: &mut Tape, preds: Var, targets: Var) -> Result<Var> {
    let n = tape.value(preds).rows();
    let r = tape.sub(preds, targets)?;
    let sq = tape.mul(r, r)?;
    let s = tape.sum(sq)?;
    let s = tape.scale(s, 1.0 / n as f64)?;
    tape.sqrt(s)
}

/// Two-sided top-k restricted L1 between matching rows of `a[B x m]` and
/// `b[B x m]`, divided by `2k` and averaged over rows.
pub fn topk_l1(tape: &mut Tape, a: Var, b: Var, k: usize) -> Result<Var> {
    let (rows, m) = (tape.value(a).rows(), tape.value(a).cols());
    if tape.value(b).shape() != tape.value(a).shape() {
        return Err(Error::dim(
            "topk_l1",
            format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
        ));
    }
    let mut idx = Vec::with_capacity(rows * 2 * k);
    for r in 0..rows {
        let sa = top_k_set(tape.value(a).row(r), k)?;
        let sb = top_k_set(tape.value(b).row(r), k)?;
        idx.extend(sa.indices().iter().map(|i| r * m + i));
        idx.extend(sb.indices().iter().map(|i| r * m + i));
    }
    let diff = tape.sub(a, b)?;
    let picked = tape.gather(diff, idx)?;
    let abs = tape.abs(picked)?;
    let s = tape.sum(abs)?;
    tape.scale(s, 1.0 / (2.0 * k as f64 * rows as f64))
}

/// Mean absolute difference over all entries.
pub fn mean_abs_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let abs = tape.abs(diff)?;
    tape.mean(abs)
}

fn row_pair(a: &[f64], b: &[f64]) -> Result<(Tape, Var, Var)> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut t = Tape::new();
    let va = t.constant(Tensor::matrix(1, a.len(), a.to_vec())?);
    let vb = t.constant(Tensor::matrix(1, b.len(), b.to_vec())?);
    Ok((t, va, vb))
}

/// RMSE over lists of prediction/target vectors.
pub fn rmse_loss<P: AsRef<[f64]>, T: AsRef<[f64]>>(preds: &[P], targets: &[T]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::contract(format!(
            "rmse needs equal nonzero counts, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let w = preds[0].as_ref().len();
    let flat = |v: &[&[f64]]| -> Result<Tensor> {
        if v.iter().any(|r| r.len() != w) {
            return Err(Error::contract("rmse: ragged widths"));
        }
        Tensor::matrix(v.len(), w, v.iter().flat_map(|r| r.iter().copied()).collect())
    };
    let p: Vec<&[f64]> = preds.iter().map(|r| r.as_ref()).collect();
    let y: Vec<&[f64]> = targets.iter().map(|r| r.as_ref()).collect();
    let mut t = Tape::new();
    let vp = t.constant(flat(&p)?);
    let vy = t.constant(flat(&y)?);
    let l = rmse(&mut t, vp, vy)?;
    t.value(l).item()
}

/// Concept consistency between the fine-tuned and base concept vectors.
pub fn surrogate_ci(g_tilde: &[f64], g_base: &[f64], k: usize) -> Result<f64> {
    let (mut t, a, b) = row_pair(g_base, g_tilde)?;
    let l = topk_l1(&mut t, a, b, k)?;
    t.value(l).item()
}

/// Concept stability between clean and perturbed concept vectors.
pub fn surrogate_si(g_clean: &[f64], g_pert: &[f64], k: usize) -> Result<f64> {
    let (mut t, a, b) = row_pair(g_clean, g_pert)?;
    let l = topk_l1(&mut t, a, b, k)?;
    t.value(l).item()
}

pub fn loss_co(pred_tilde: &[f64], pred_base: &[f64]) -> Result<f64> {
    let (mut t, a, b) = row_pair(pred_tilde, pred_base)?;
    let l = mean_abs_diff(&mut t, a, b)?;
    t.value(l).item()
}

pub fn loss_so(pred_clean: &[f64], pred_pert: &[f64]) -> Result<f64> {
    loss_co(pred_clean, pred_pert)
}

/// Immutable snapshot of the base model taken before fine-tuning.
#[derive(Clone, Debug)]
pub struct FrozenReference {
    params: CbmParams,
    hash: String,
}

impl FrozenReference {
    pub fn new(params: &CbmParams) -> Self {
        FrozenReference {
            hash: params.content_hash(),
            params: params.clone(),
        }
    }

    pub fn params(&self) -> &CbmParams {
        &self.params
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// True while the snapshot still hashes to its creation-time value.
    pub fn is_intact(&self) -> bool {
        self.params.content_hash() == self.hash
    }

    pub fn outputs(&self, space: &ConceptSpace, batch: &Batch) -> Result<Outputs> {
        crate::model::forward(&self.params, space, &batch.frames, batch.seq_len)
    }
}

/// How a perturbation is laid out over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsLayout {
    /// One `[d]` shift per sample, added to every frame: `eps` is `[B x d]`.
    #[default]
    SharedAcrossFrames,
    /// Independent shift per frame: `eps` is `[(B*T) x d]`.
    PerFrame,
}

impl EpsLayout {
    pub fn shape(&self, batch: &Batch) -> Vec<usize> {
        let d = batch.frames.cols();
        match self {
            EpsLayout::SharedAcrossFrames => vec![batch.size, d],
            EpsLayout::PerFrame => vec![batch.size * batch.seq_len, d],
        }
    }

    /// Entries of `eps` belonging to each sample.
    pub fn block_len(&self, batch: &Batch) -> usize {
        let d = batch.frames.cols();
        match self {
            EpsLayout::SharedAcrossFrames => d,
            EpsLayout::PerFrame => batch.seq_len * d,
        }
    }

    /// Per-block ball radius that keeps the whole-sample frame shift within `rho`.
    /// A shared shift is repeated over `seq_len` frames, scaling its norm by `sqrt(seq_len)`.
    pub fn block_radius(&self, rho: f64, seq_len: usize) -> f64 {
        match self {
            EpsLayout::SharedAcrossFrames => rho / (seq_len as f64).sqrt(),
            EpsLayout::PerFrame => rho,
        }
    }

    /// `frames + eps`, broadcasting a per-sample shift over its frames when shared.
    pub fn apply(&self, tape: &mut Tape, frames: Var, eps: Var, seq_len: usize) -> Result<Var> {
        match self {
            EpsLayout::SharedAcrossFrames => {
                let rows = tape.value(frames).rows();
                let spread = tape.gather_rows(eps, (0..rows).map(|r| r / seq_len).collect())?;
                tape.add(frames, spread)
            }
            EpsLayout::PerFrame => tape.add(frames, eps),
        }
    }
}

/// The individual terms of one objective evaluation. Absent terms were not constructed.
#[derive(Clone, Copy, Debug)]
pub struct DriveTerms {
    pub l_init: Option<Var>,
    pub ci: Option<Var>,
    pub si: Option<Var>,
    pub co: Option<Var>,
    pub so: Option<Var>,
}

impl DriveTerms {
    pub fn named(&self) -> [(&'static str, Option<Var>); 4] {
        [("ci", self.ci), ("si", self.si), ("co", self.co), ("so", self.so)]
    }
}

/// Everything the fine-tuning objective needs besides the current params.
#[derive(Clone, Copy, Debug)]
pub struct DriveObjective<'a> {
    pub space: &'a ConceptSpace,
    pub frozen: &'a FrozenReference,
    pub weights: LossWeights,
    pub k1: usize,
    pub k2: usize,
    pub layout: EpsLayout,
}

impl DriveObjective<'_> {
    /// Builds the requested terms on `tape`.
    ///
    /// `clean` supplies the current model's unperturbed outputs as constants;
    /// when `None` they are computed on the tape (needed for param gradients).
    #[allow(clippy::too_many_arguments)]
    pub fn terms(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        batch: &Batch,
        frozen_out: &Outputs,
        eps: Var,
        with_init: bool,
        clean: Option<&Outputs>,
    ) -> Result<DriveTerms> {
        let mask = self.weights.mask;
        let concepts = tape.constant(self.space.embeddings().clone());
        let frames = tape.constant(batch.frames.clone());

        let need_clean = with_init || mask.ci || mask.co || mask.si || mask.so;
        let (g_clean, y_clean) = match clean {
            Some(o) => (tape.constant(o.scores.clone()), tape.constant(o.preds.clone())),
            None if need_clean => {
                let g = pv.concept_scores(tape, concepts, frames, batch.seq_len)?;
                let y = pv.head(tape, g)?;
                (g, y)
            }
            None => return Err(Error::contract("objective with nothing to compute")),
        };

        let (g_pert, y_pert) = if mask.si || mask.so {
            let x = self.layout.apply(tape, frames, eps, batch.seq_len)?;
            let g = pv.concept_scores(tape, concepts, x, batch.seq_len)?;
            let y = pv.head(tape, g)?;
            (Some(g), Some(y))
        } else {
            (None, None)
        };

        let l_init = if with_init {
            let y = tape.constant(batch.targets.clone());
            Some(rmse(tape, y_clean, y)?)
        } else {
            None
        };
        let ci = if mask.ci {
            let g_base = tape.constant(frozen_out.scores.clone());
            Some(topk_l1(tape, g_base, g_clean, self.k1)?)
        } else {
            None
        };
        let si = match g_pert {
            Some(gp) if mask.si => Some(topk_l1(tape, g_clean, gp, self.k2)?),
            _ => None,
        };
        let co = if mask.co {
            let y_base = tape.constant(frozen_out.preds.clone());
            Some(mean_abs_diff(tape, y_clean, y_base)?)
        } else {
            None
        };
        let so = match y_pert {
            Some(yp) if mask.so => Some(mean_abs_diff(tape, y_clean, yp)?),
            _ => None,
        };
        Ok(DriveTerms {
            l_init,
            ci,
            si,
            co,
            so,
        })
    }

    /// `L_init + λ1·Ci + λ2·Si + λ3·Co + λ4·So` over the enabled terms.
    pub fn combined(&self, tape: &mut Tape, terms: &DriveTerms) -> Result<Var> {
        let mut total = terms
            .l_init
            .ok_or_else(|| Error::contract("combined loss needs L_init"))?;
        let w = &self.weights;
        let lambdas = [w.lambda_ci, w.lambda_si, w.lambda_co, w.lambda_so];
        for ((_, term), lambda) in terms.named().into_iter().zip(lambdas) {
            if let Some(v) = term {
                let s = tape.scale(v, lambda)?;
                total = tape.add(total, s)?;
            }
        }
        Ok(total)
    }

    /// Unweighted sum of the enabled dependability terms (the perturbation search objective).
    pub fn adversarial(&self, tape: &mut Tape, terms: &DriveTerms) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for (_, term) in terms.named() {
            if let Some(v) = term {
                total = Some(match total {
                    Some(t) => tape.add(t, v)?,
                    None => v,
                });
            }
        }
        Ok(total)
    }
}

/// Value and param/eps gradients of the combined objective for one batch.
pub struct CombinedEval {
    pub loss: f64,
    pub l_init: f64,
    pub terms: [Option<f64>; 4],
    pub param_grad: Vec<f64>,
    pub eps_grad: Tensor,
}

/// Evaluates the combined loss for `params` on `batch` with perturbation `eps`.
pub fn combined_loss(
    objective: &DriveObjective,
    params: &CbmParams,
    batch: &Batch,
    eps: &Tensor,
) -> Result<CombinedEval> {
    params.check_binding(objective.space)?;
    objective.frozen.params().check_binding(objective.space)?;
    let frozen_out = objective.frozen.outputs(objective.space, batch)?;
    let mut tape = Tape::new();
    let pv = params.to_vars(&mut tape, true);
    let e = tape.param(eps.clone());
    let terms = objective.terms(&mut tape, &pv, batch, &frozen_out, e, true, None)?;
    let total = objective.combined(&mut tape, &terms)?;
    let grads = tape.backward(total)?;
    let val = |v: Option<Var>| v.map(|v| tape.value(v).data()[0]);
    Ok(CombinedEval {
        loss: tape.value(total).item()?,
        l_init: val(terms.l_init).unwrap_or(0.0),
        terms: [val(terms.ci), val(terms.si), val(terms.co), val(terms.so)],
        param_grad: pv.flat_grad(&tape, &grads),
        eps_grad: grads.get_or_zeros(e, eps.shape()),
    })
}
