//! Base training on the RMSE objective, dependability fine-tuning with an
//! inner worst-case search, and the four-row ablation.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, combined_loss, DriveObjective, EpsLayout, FrozenReference, LossMask, LossWeights};
use crate::metrics::{evaluate_cell, mae, CellMetrics};
use crate::model::{forward_samples, Batch, CbmParams, ConceptSpace, Dims, Sample};
use crate::optim::{Adam, AdamSettings};
use crate::perturb::{pgd_perturbation, PerturbationSpec, PgdContext, PgdSettings};
use crate::rng;
use crate::tensor::Tape;

/// Train/validation/test partition of a dataset.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub rho: f64,
    pub alpha: f64,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            rho: 0.08,
            alpha: 0.001,
            steps: 5,
            seed: 0,
        }
    }
}

impl PgdConfig {
    pub fn spec(&self) -> PerturbationSpec {
        PerturbationSpec::Pgd {
            rho: self.rho,
            alpha: self.alpha,
            steps: self.steps,
            seed: self.seed,
        }
    }
}

/// Optimization settings for both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_epochs: usize,
    pub drive_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub pgd: PgdConfig,
    /// Top-k size for the concept-consistency term; `None` means `ceil(m / 5)`.
    pub k1: Option<usize>,
    /// Top-k size for the concept-stability term; `None` means `ceil(m / 5)`.
    pub k2: Option<usize>,
    pub eps_layout: EpsLayout,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_epochs: 200,
            drive_epochs: 40,
            learning_rate: 1e-5,
            weight_decay: 1e-5,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            pgd: PgdConfig::default(),
            k1: None,
            k2: None,
            eps_layout: EpsLayout::default(),
            seed: 0,
        }
    }
}

/// `ceil(m / 5)`, at least 1.
pub fn default_k(m: usize) -> usize {
    m.div_ceil(5).max(1)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, detail: &str| {
            Err(Error::Config {
                path: format!("train.{path}"),
                detail: detail.into(),
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be > 0");
        }
        if matches!(self.k1, Some(0)) || matches!(self.k2, Some(0)) {
            return bad("k1", "top-k sizes must be >= 1");
        }
        self.weights.validate()?;
        self.pgd.spec().validate()
    }

    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn k1_for(&self, m: usize) -> usize {
        self.k1.unwrap_or_else(|| default_k(m))
    }

    pub fn k2_for(&self, m: usize) -> usize {
        self.k2.unwrap_or_else(|| default_k(m))
    }

    pub fn pgd_context(&self, m: usize, mask: LossMask) -> PgdContext {
        PgdContext {
            weights: LossWeights { mask, ..self.weights },
            k1: self.k1_for(m),
            k2: self.k2_for(m),
            layout: self.eps_layout,
            batch_size: self.batch_size,
        }
    }
}

/// One epoch of training. Term columns are `None` when the term was not built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_init: f64,
    pub l_ci: Option<f64>,
    pub l_si: Option<f64>,
    pub l_co: Option<f64>,
    pub l_so: Option<f64>,
    pub val_a_mae: Option<f64>,
    pub val_d_mae: Option<f64>,
    pub ms: u128,
    pub skipped_batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const LOG_COLUMNS: [&str; 9] = [
    "epoch", "l_init", "l_ci", "l_si", "l_co", "l_so", "val_a_mae", "val_d_mae", "ms",
];

impl TrainLog {
    /// CSV with a fixed header; terms that were not built are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        let mut out = LOG_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.9e},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.l_init,
                opt(r.l_ci),
                opt(r.l_si),
                opt(r.l_co),
                opt(r.l_so),
                opt(r.val_a_mae),
                opt(r.val_d_mae),
                r.ms
            ));
        }
        out
    }
}

fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, rng::TAG_SHUFFLE, epoch as u64);
    order.shuffle(&mut r);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn val_mae(params: &CbmParams, space: &ConceptSpace, val: &[Sample]) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let out = forward_samples(params, space, &refs(val))?;
    let preds: Vec<&[f64]> = out.iter().map(|o| o.1.as_slice()).collect();
    let targets: Vec<&[f64]> = val.iter().map(|s| s.target.data()).collect();
    let m = mae(&preds, &targets)?;
    Ok((Some(m[0]), m.get(1).copied()))
}

fn diverged(epoch: usize, last_good: Option<usize>) -> Error {
    Error::Training {
        epoch,
        last_good_epoch: last_good,
    }
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Degenerate { .. })
}

/// Fits `init` on the RMSE objective for `config.base_epochs` epochs.
pub fn train_base_from(
    init: CbmParams,
    splits: &Splits,
    space: &ConceptSpace,
    config: &TrainConfig,
) -> Result<(CbmParams, TrainLog)> {
    config.validate()?;
    init.check_binding(space)?;
    if splits.train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let mut params = init;
    let mut flat = params.flatten();
    let mut opt = Adam::new(config.adam(), flat.len());
    let mut log = TrainLog::default();
    let mut last_good = None;
    let concepts = space.embeddings().clone();

    for epoch in 0..config.base_epochs {
        let start = Instant::now();
        let mut sum = 0.0;
        let batches = epoch_batches(splits.train.len(), config.batch_size, config.seed, epoch);
        for idx in &batches {
            let chunk: Vec<&Sample> = idx.iter().map(|&i| &splits.train[i]).collect();
            let batch = Batch::from_samples(&chunk)?;
            let mut tape = Tape::new();
            let pv = params.to_vars(&mut tape, true);
            let c = tape.constant(concepts.clone());
            let f = tape.constant(batch.frames.clone());
            let y = tape.constant(batch.targets.clone());
            let step = (|| {
                let g = pv.concept_scores(&mut tape, c, f, batch.seq_len)?;
                let p = pv.head(&mut tape, g)?;
                let loss = losses::rmse(&mut tape, p, y)?;
                let grads = tape.backward(loss)?;
                Ok::<_, Error>((tape.value(loss).item()?, pv.flat_grad(&tape, &grads)))
            })();
            let (loss, grad) = match step {
                Ok(v) => v,
                Err(e) if is_numeric_failure(&e) => return Err(diverged(epoch, last_good)),
                Err(e) => return Err(e),
            };
            opt.step(&mut flat, &grad)?;
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(diverged(epoch, last_good));
            }
            params = params.with_flat(&flat)?;
            sum += loss;
        }
        let (va, vd) = val_mae(&params, space, &splits.val)?;
        log.records.push(EpochRecord {
            epoch,
            l_init: sum / batches.len() as f64,
            l_ci: None,
            l_si: None,
            l_co: None,
            l_so: None,
            val_a_mae: va,
            val_d_mae: vd,
            ms: start.elapsed().as_millis(),
            skipped_batches: 0,
        });
        last_good = Some(epoch);
    }
    Ok((params, log))
}

/// Initializes from `config.seed` and runs [`train_base_from`].
pub fn train_base(
    splits: &Splits,
    space: &ConceptSpace,
    dims: Dims,
    config: &TrainConfig,
) -> Result<(CbmParams, TrainLog)> {
    let init = CbmParams::init(config.seed, dims, space)?;
    train_base_from(init, splits, space, config)
}

/// Fine-tunes a copy of `base` on the combined objective with terms enabled by `mask`.
///
/// Each batch first searches a worst-case input shift against the current
/// params, then takes one optimizer step. A batch whose search fails
/// numerically is skipped and counted in the log.
pub fn train_drive(
    base: &CbmParams,
    splits: &Splits,
    space: &ConceptSpace,
    config: &TrainConfig,
    mask: LossMask,
) -> Result<(CbmParams, TrainLog)> {
    config.validate()?;
    base.check_binding(space)?;
    if splits.train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let frozen = FrozenReference::new(base);
    let m = space.len();
    let objective = DriveObjective {
        space,
        frozen: &frozen,
        weights: LossWeights {
            mask,
            ..config.weights
        },
        k1: config.k1_for(m),
        k2: config.k2_for(m),
        layout: config.eps_layout,
    };
    let pgd_seed = rng::derive_seed(config.seed, rng::TAG_PGD, config.pgd.seed);

    let mut params = base.clone();
    let mut flat = params.flatten();
    let mut opt = Adam::new(config.adam(), flat.len());
    let mut log = TrainLog::default();
    let mut last_good = None;
    let mut global = 0u64;

    for epoch in 0..config.drive_epochs {
        let start = Instant::now();
        let mut init_sum = 0.0;
        let mut term_sum = [0.0; 4];
        let mut done = 0usize;
        let mut skipped = 0usize;
        // Offset the shuffle stream so fine-tuning does not replay the base order.
        let batches = epoch_batches(
            splits.train.len(),
            config.batch_size,
            config.seed ^ 0x5eed_d21e,
            epoch,
        );
        for idx in &batches {
            global += 1;
            let chunk: Vec<&Sample> = idx.iter().map(|&i| &splits.train[i]).collect();
            let batch = Batch::from_samples(&chunk)?;
            let settings = PgdSettings {
                rho: config.pgd.rho,
                alpha: config.pgd.alpha,
                steps: config.pgd.steps,
                seed: rng::derive_seed(pgd_seed, rng::TAG_PGD, global),
            };
            let eps = match pgd_perturbation(&objective, &params, &batch, settings) {
                Ok(e) => e,
                Err(Error::Perturbation { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let eval = match combined_loss(&objective, &params, &batch, &eps) {
                Ok(v) => v,
                Err(e) if is_numeric_failure(&e) => return Err(diverged(epoch, last_good)),
                Err(e) => return Err(e),
            };
            opt.step(&mut flat, &eval.param_grad)?;
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(diverged(epoch, last_good));
            }
            params = params.with_flat(&flat)?;
            init_sum += eval.l_init;
            for (acc, t) in term_sum.iter_mut().zip(eval.terms) {
                *acc += t.unwrap_or(0.0);
            }
            done += 1;
        }
        if !frozen.is_intact() {
            return Err(Error::contract("frozen reference changed during fine-tuning"));
        }
        let denom = done.max(1) as f64;
        let term = |on: bool, i: usize| on.then(|| term_sum[i] / denom);
        let (va, vd) = val_mae(&params, space, &splits.val)?;
        log.records.push(EpochRecord {
            epoch,
            l_init: init_sum / denom,
            l_ci: term(mask.ci, 0),
            l_si: term(mask.si, 1),
            l_co: term(mask.co, 2),
            l_so: term(mask.so, 3),
            val_a_mae: va,
            val_d_mae: vd,
            ms: start.elapsed().as_millis(),
            skipped_batches: skipped,
        });
        last_good = Some(epoch);
    }
    Ok((params, log))
}

/// The four ablation masks in table order: `{A}`, `{A,BC}`, `{A,DE}`, `{A,BC,DE}`.
pub const ABLATION_MASKS: [LossMask; 4] = [
    LossMask::NONE,
    LossMask {
        ci: true,
        si: true,
        co: false,
        so: false,
    },
    LossMask {
        ci: false,
        si: false,
        co: true,
        so: true,
    },
    LossMask::ALL,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: String,
    pub metrics: CellMetrics,
}

#[derive(Clone, Debug)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// Fine-tuned params per row; the `{A}` row holds the untouched base model.
    pub models: Vec<CbmParams>,
}

impl Ablation {
    pub const HEADER: [&'static str; 5] = ["losses", "a-MAE", "d-MAE", "(a,d)-MAE", "top-k"];

    pub fn to_csv(&self) -> String {
        let mut out = crate::report::csv_header(&Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("\"{}\",{}\n", r.mask, crate::report::cell_csv(&r.metrics)));
        }
        out
    }
}

/// Trains one fine-tuned model per ablation mask and evaluates each on the
/// test split under `eval_spec` (input noise of 0.08 in the standard protocol).
///
/// Row `{A}` has no regularizer, so it is the base model itself.
pub fn run_ablation(
    base: &CbmParams,
    splits: &Splits,
    space: &ConceptSpace,
    config: &TrainConfig,
    eval_spec: &PerturbationSpec,
    k: usize,
) -> Result<Ablation> {
    let test = refs(&splits.test);
    let mut rows = Vec::with_capacity(4);
    let mut models = Vec::with_capacity(4);
    for mask in ABLATION_MASKS {
        let model = if mask.any() {
            train_drive(base, splits, space, config, mask)?.0
        } else {
            base.clone()
        };
        let metrics = evaluate_cell(&model, space, &test, Some(eval_spec), k, None)?;
        rows.push(AblationRow {
            mask: mask.label(),
            metrics,
        });
        models.push(model);
    }
    Ok(Ablation { rows, models })
}
