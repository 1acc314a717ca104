//! Evaluation-time perturbations (input noise, concept-set swaps, parameter
//! noise) and the projected-gradient worst-case input perturbation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{DriveObjective, EpsLayout, FrozenReference, LossWeights};
use crate::model::{forward, forward_samples, Batch, CbmParams, ConceptSpace, Outputs, Sample};
use crate::rng;
use crate::tensor::{Tape, Tensor};

fn default_jitter() -> f64 {
    0.1
}

/// A perturbation family with its parameters. Serialized with a `kind` tag
/// whose values are exactly `P1`, `P2`, `P3`, `PGD`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum PerturbationSpec {
    /// Gaussian noise on every input entry.
    P1 {
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Replace a fraction of concept embeddings by jittered copies.
    P2 {
        fraction: f64,
        #[serde(default = "default_jitter")]
        jitter_sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Gaussian noise on every model parameter.
    P3 {
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Worst-case input shift inside an L2 ball.
    #[serde(rename = "PGD")]
    Pgd {
        rho: f64,
        alpha: f64,
        steps: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: String| {
            Err(Error::Config {
                path: field.to_string(),
                detail,
            })
        };
        let nonneg = |field: &str, v: f64| -> Result<()> {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("must be finite and >= 0, got {v}"));
            }
            Ok(())
        };
        match *self {
            PerturbationSpec::P1 { sigma, .. } | PerturbationSpec::P3 { sigma, .. } => {
                nonneg("sigma", sigma)
            }
            PerturbationSpec::P2 {
                fraction,
                jitter_sigma,
                ..
            } => {
                if !(0.0..=1.0).contains(&fraction) {
                    return bad("fraction", format!("must lie in [0, 1], got {fraction}"));
                }
                nonneg("jitter_sigma", jitter_sigma)
            }
            PerturbationSpec::Pgd {
                rho, alpha, steps, ..
            } => {
                nonneg("rho", rho)?;
                nonneg("alpha", alpha)?;
                if steps == 0 {
                    return bad("steps", "must be >= 1".into());
                }
                Ok(())
            }
        }
    }

    /// Row label in result tables, e.g. `P1(0.08)`, `P2(10%)`.
    pub fn label(&self) -> String {
        self.to_string()
    }

    pub fn seed(&self) -> u64 {
        match *self {
            PerturbationSpec::P1 { seed, .. }
            | PerturbationSpec::P2 { seed, .. }
            | PerturbationSpec::P3 { seed, .. }
            | PerturbationSpec::Pgd { seed, .. } => seed,
        }
    }

    /// Table 1 perturbed rows, in order.
    pub fn default_sweep() -> Vec<PerturbationSpec> {
        vec![
            PerturbationSpec::P1 { sigma: 0.08, seed: 0 },
            PerturbationSpec::P1 { sigma: 0.10, seed: 0 },
            PerturbationSpec::P2 {
                fraction: 0.10,
                jitter_sigma: default_jitter(),
                seed: 0,
            },
            PerturbationSpec::P3 { sigma: 0.01, seed: 0 },
            PerturbationSpec::P3 { sigma: 0.02, seed: 0 },
        ]
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbationSpec::P1 { sigma, .. } => write!(f, "P1({sigma:.2})"),
            PerturbationSpec::P2 { fraction, .. } => write!(f, "P2({}%)", (fraction * 100.0).round()),
            PerturbationSpec::P3 { sigma, .. } => write!(f, "P3({sigma:.2})"),
            PerturbationSpec::Pgd { rho, .. } => write!(f, "PGD({rho:.2})"),
        }
    }
}

/// `frames + N(0, sigma^2)` entrywise.
pub fn perturb_input(frames: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::contract(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(frames.clone());
    }
    let mut r = rng::stream(seed, rng::TAG_P1, 0);
    let noise = rng::normals(&mut r, frames.len(), sigma);
    let data = frames.data().iter().zip(noise).map(|(x, e)| x + e).collect();
    Tensor::new(frames.shape().to_vec(), data)
}

/// Number of rows replaced for `fraction` of `m` concepts.
pub fn swap_count(fraction: f64, m: usize) -> usize {
    ((fraction * m as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Replaces `ceil(fraction * m)` uniformly chosen concept rows with
/// renormalized copies jittered by `N(0, jitter_sigma^2)`.
pub fn perturb_concept_space(
    space: &ConceptSpace,
    fraction: f64,
    jitter_sigma: f64,
    seed: u64,
) -> Result<ConceptSpace> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract(format!("fraction must lie in [0, 1], got {fraction}")));
    }
    let (m, l) = (space.len(), space.width());
    let count = swap_count(fraction, m).min(m);
    let mut r = rng::stream(seed, rng::TAG_P2, 0);
    let mut chosen = rand::seq::index::sample(&mut r, m, count).into_vec();
    chosen.sort_unstable();

    let mut data = space.embeddings().data().to_vec();
    let mut labels = space.labels().to_vec();
    for &i in &chosen {
        let row = &mut data[i * l..(i + 1) * l];
        let noise = rng::normals(&mut r, l, jitter_sigma);
        row.iter_mut().zip(noise).for_each(|(v, e)| *v += e);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate {
                op: "perturb_concept_space",
                detail: format!("jittered row {i} collapsed to zero"),
            });
        }
        row.iter_mut().for_each(|v| *v /= n);
        labels[i] = format!("{}~syn", labels[i]);
    }
    ConceptSpace::new(Tensor::matrix(m, l, data)?, labels)
}

/// Adds `N(0, sigma^2)` to every flattened parameter.
pub fn perturb_params(params: &CbmParams, sigma: f64, seed: u64) -> Result<CbmParams> {
    if !(sigma >= 0.0) {
        return Err(Error::contract(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(params.clone());
    }
    let mut r = rng::stream(seed, rng::TAG_P3, 0);
    let flat = params.flatten();
    let noise = rng::normals(&mut r, flat.len(), sigma);
    let out: Vec<f64> = flat.iter().zip(noise).map(|(p, e)| p + e).collect();
    params.with_flat(&out)
}

/// Relative slack on the ball boundary. Rescaling can land an ulp outside,
/// and re-projecting such a point must leave it unchanged.
const BALL_SLACK: f64 = 1e-12;

/// Projects `v` onto the L2 ball of `radius` in place.
pub fn project_l2(v: &mut [f64], radius: f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > radius * (1.0 + BALL_SLACK) {
        let s = if n > 0.0 { radius / n } else { 0.0 };
        v.iter_mut().for_each(|x| *x *= s);
    }
}

/// Projected gradient ascent. `eps` is split into consecutive blocks of
/// `block` entries, each kept inside its own L2 ball of radius `rho`:
///
/// `eps <- P(eps) + alpha * grad(P(eps))`, repeated `steps` times, then a final projection.
pub fn pgd_ascent<F>(
    init: Vec<f64>,
    block: usize,
    rho: f64,
    alpha: f64,
    steps: usize,
    mut grad: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if block == 0 || init.len() % block != 0 {
        return Err(Error::contract(format!(
            "perturbation of {} entries does not split into blocks of {block}",
            init.len()
        )));
    }
    let project = |e: &mut Vec<f64>| e.chunks_mut(block).for_each(|c| project_l2(c, rho));
    let mut eps = init;
    for _ in 0..steps {
        project(&mut eps);
        let g = grad(&eps)?;
        eps.iter_mut().zip(&g).for_each(|(e, gv)| *e += alpha * gv);
    }
    project(&mut eps);
    Ok(eps)
}

/// One seeded unit direction per block, scaled to `length`.
fn random_directions(r: &mut rand_chacha::ChaCha8Rng, len: usize, block: usize, length: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len / block {
        let mut dir = rng::normals(r, block, 1.0);
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|x| *x *= length / n);
        out.extend(dir);
    }
    out
}

/// Settings for the worst-case search.
#[derive(Clone, Copy, Debug)]
pub struct PgdSettings {
    /// Bound on the L2 norm of each sample's full frame shift.
    pub rho: f64,
    pub alpha: f64,
    pub steps: usize,
    pub seed: u64,
}

/// Worst-case `eps` for `batch` against the current `params`: ascends the
/// unweighted sum of the enabled dependability terms. Shape follows
/// `objective.layout`.
///
/// At `eps = 0` the stability terms sit on their L1 kink with zero
/// subgradient, so the ascent starts one step of length `alpha` along a
/// seeded random direction instead of exactly at zero.
pub fn pgd_perturbation(
    objective: &DriveObjective,
    params: &CbmParams,
    batch: &Batch,
    settings: PgdSettings,
) -> Result<Tensor> {
    let PgdSettings {
        rho,
        alpha,
        steps,
        seed,
    } = settings;
    if !(rho >= 0.0 && alpha >= 0.0) || steps == 0 {
        return Err(Error::contract(format!(
            "pgd needs rho, alpha >= 0 and steps >= 1 (got {rho}, {alpha}, {steps})"
        )));
    }
    params.check_binding(objective.space)?;
    let shape = objective.layout.shape(batch);
    let len: usize = shape.iter().product();
    let block = objective.layout.block_len(batch);
    let radius = objective.layout.block_radius(rho, batch.seq_len);
    let mut r = rng::stream(seed, rng::TAG_PGD, 0);
    let init = random_directions(&mut r, len, block, alpha);

    let mask = objective.weights.mask;
    if !(mask.si || mask.so) || rho == 0.0 {
        // Nothing depends on eps (or the ball is a point): ascent cannot move it.
        let eps = pgd_ascent(init, block, radius, 0.0, 1, |e| Ok(vec![0.0; e.len()]))?;
        return Tensor::new(shape, eps);
    }

    let frozen_out = objective.frozen.outputs(objective.space, batch)?;
    let clean = forward(params, objective.space, &batch.frames, batch.seq_len)?;
    let eps = pgd_ascent(init, block, radius, alpha, steps, |e| {
        adversarial_grad(objective, params, batch, &frozen_out, &clean, &shape, e)
    })?;
    Tensor::new(shape, eps)
}

fn adversarial_grad(
    objective: &DriveObjective,
    params: &CbmParams,
    batch: &Batch,
    frozen_out: &Outputs,
    clean: &Outputs,
    shape: &[usize],
    eps: &[f64],
) -> Result<Vec<f64>> {
    let run = |only: Option<&'static str>| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pv = params.to_vars(&mut tape, false);
        let e = tape.param(Tensor::new(shape.to_vec(), eps.to_vec())?);
        let terms = objective.terms(&mut tape, &pv, batch, frozen_out, e, false, Some(clean))?;
        let target = match only {
            None => objective.adversarial(&mut tape, &terms)?,
            Some(name) => terms.named().into_iter().find(|(n, _)| *n == name).and_then(|(_, v)| v),
        };
        let Some(target) = target else {
            return Ok(vec![0.0; eps.len()]);
        };
        let grads = tape.backward(target)?;
        let g = grads.get_or_zeros(e, shape).into_data();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "pgd gradient" });
        }
        Ok(g)
    };
    match run(None) {
        Ok(g) => Ok(g),
        Err(Error::NonFinite { .. }) | Err(Error::Degenerate { .. }) => {
            for name in ["ci", "si", "co", "so"] {
                if matches!(run(Some(name)), Err(Error::NonFinite { .. }) | Err(Error::Degenerate { .. })) {
                    return Err(Error::Perturbation { term: name });
                }
            }
            Err(Error::Perturbation { term: "sum" })
        }
        Err(e) => Err(e),
    }
}

/// What a PGD evaluation needs beyond the model under test.
#[derive(Clone, Copy, Debug)]
pub struct PgdContext {
    pub weights: LossWeights,
    pub k1: usize,
    pub k2: usize,
    pub layout: EpsLayout,
    pub batch_size: usize,
}

/// Per-sample (scores, preds) under a perturbation.
#[derive(Clone, Debug)]
pub struct PerturbedRun {
    pub outputs: Vec<(Vec<f64>, Vec<f64>)>,
    /// Largest L2 norm of the per-sample input shift, for input perturbations.
    pub max_input_norm: Option<f64>,
}

/// Runs `samples` through `params` under `spec`.
///
/// P1 noise is seeded per sample index so two models see identical noise;
/// P2 evaluates against the swapped concept set; P3 evaluates noised weights.
/// PGD needs the frozen reference `base` and a [`PgdContext`].
pub fn perturbed_outputs(
    params: &CbmParams,
    space: &ConceptSpace,
    samples: &[&Sample],
    spec: &PerturbationSpec,
    base: Option<&CbmParams>,
    pgd: Option<&PgdContext>,
) -> Result<PerturbedRun> {
    spec.validate()?;
    params.check_binding(space)?;
    match *spec {
        PerturbationSpec::P1 { sigma, seed } => {
            let noisy: Vec<Sample> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let frames = perturb_input(&s.frames, sigma, rng::derive_seed(seed, rng::TAG_P1, i as u64))?;
                    Ok(Sample {
                        frames,
                        target: s.target.clone(),
                    })
                })
                .collect::<Result<_>>()?;
            let max_norm = samples
                .iter()
                .zip(&noisy)
                .map(|(a, b)| {
                    a.frames
                        .data()
                        .iter()
                        .zip(b.frames.data())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(0.0, f64::max);
            let refs: Vec<&Sample> = noisy.iter().collect();
            Ok(PerturbedRun {
                outputs: forward_samples(params, space, &refs)?,
                max_input_norm: Some(max_norm),
            })
        }
        PerturbationSpec::P2 {
            fraction,
            jitter_sigma,
            seed,
        } => {
            let swapped = perturb_concept_space(space, fraction, jitter_sigma, seed)?;
            let rebound = params.rebind(&swapped)?;
            Ok(PerturbedRun {
                outputs: forward_samples(&rebound, &swapped, samples)?,
                max_input_norm: None,
            })
        }
        PerturbationSpec::P3 { sigma, seed } => {
            let noisy = perturb_params(params, sigma, seed)?;
            Ok(PerturbedRun {
                outputs: forward_samples(&noisy, space, samples)?,
                max_input_norm: None,
            })
        }
        PerturbationSpec::Pgd {
            rho,
            alpha,
            steps,
            seed,
        } => {
            let (Some(base), Some(ctx)) = (base, pgd) else {
                return Err(Error::contract("PGD evaluation needs a frozen reference and settings"));
            };
            let frozen = FrozenReference::new(base);
            let objective = DriveObjective {
                space,
                frozen: &frozen,
                weights: ctx.weights,
                k1: ctx.k1,
                k2: ctx.k2,
                layout: ctx.layout,
            };
            let mut outputs = Vec::with_capacity(samples.len());
            let mut max_norm: f64 = 0.0;
            for (bi, chunk) in samples.chunks(ctx.batch_size.max(1)).enumerate() {
                let batch = Batch::from_samples(chunk)?;
                let settings = PgdSettings {
                    rho,
                    alpha,
                    steps,
                    seed: rng::derive_seed(seed, rng::TAG_PGD, bi as u64),
                };
                let eps = pgd_perturbation(&objective, params, &batch, settings)?;
                let mut tape = Tape::new();
                let f = tape.constant(batch.frames.clone());
                let e = tape.constant(eps.clone());
                let x = ctx.layout.apply(&mut tape, f, e, batch.seq_len)?;
                let shifted = tape.value(x).clone();
                let per_sample = batch.seq_len * batch.frames.cols();
                for (a, b) in shifted.data().chunks(per_sample).zip(batch.frames.data().chunks(per_sample)) {
                    let n = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                    max_norm = max_norm.max(n);
                }
                let o = forward(params, space, &shifted, batch.seq_len)?;
                for i in 0..batch.size {
                    outputs.push((o.scores.row(i).to_vec(), o.preds.row(i).to_vec()));
                }
            }
            Ok(PerturbedRun {
                outputs,
                max_input_norm: Some(max_norm),
            })
        }
    }
}
