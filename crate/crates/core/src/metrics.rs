//! Top-k sets and overlaps, MAE, and the four-way dependability audit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::model::{forward_samples, CbmParams, ConceptSpace, Sample};
use crate::perturb::{perturbed_outputs, PerturbationSpec, PgdContext};

/// Indices of the `k` largest entries, kept in ascending index order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopKSet {
    k: usize,
    indices: Vec<usize>,
}

impl TopKSet {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn intersection_len(&self, other: &TopKSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// Ranking order used everywhere: larger value first, lower index wins ties.
pub(crate) fn ranked_indices(x: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx
}

pub fn top_k_set(x: &[f64], k: usize) -> Result<TopKSet> {
    if k == 0 || k > x.len() {
        return Err(Error::contract(format!("top-k needs 1 <= k <= {}, got {k}", x.len())));
    }
    let mut indices = ranked_indices(x);
    indices.truncate(k);
    indices.sort_unstable();
    Ok(TopKSet { k, indices })
}

/// `|T_k(x) ∩ T_k(y)| / k`.
pub fn top_k_overlap(x: &[f64], y: &[f64], k: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "overlap of vectors with lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let a = top_k_set(x, k)?;
    let b = top_k_set(y, k)?;
    Ok(a.intersection_len(&b) as f64 / k as f64)
}

/// Per-target mean absolute error.
pub fn mae<P: AsRef<[f64]>, T: AsRef<[f64]>>(preds: &[P], targets: &[T]) -> Result<Vec<f64>> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::contract(format!(
            "mae needs equal nonzero counts, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let t = preds[0].as_ref().len();
    let mut acc = vec![0.0; t];
    for (p, y) in preds.iter().zip(targets) {
        let (p, y) = (p.as_ref(), y.as_ref());
        if p.len() != t || y.len() != t {
            return Err(Error::contract("mae: ragged target widths"));
        }
        for ((a, pv), yv) in acc.iter_mut().zip(p).zip(y) {
            *a += (pv - yv).abs();
        }
    }
    let n = preds.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// A float that may be `+inf`; serialized as the string `"inf"` in that case.
pub mod inf_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v.is_finite() => Ok(v),
            Raw::Str(s) if matches!(s.as_str(), "inf" | "+inf" | "infinity" | "Infinity") => {
                Ok(f64::INFINITY)
            }
            Raw::Num(v) => Err(de::Error::custom(format!("invalid threshold {v}"))),
            Raw::Str(s) => Err(de::Error::custom(format!("invalid threshold {s:?}"))),
        }
    }
}

/// Upper limits on the four measured divergences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(with = "inf_float")]
    pub ci: f64,
    #[serde(with = "inf_float")]
    pub si: f64,
    #[serde(with = "inf_float")]
    pub co: f64,
    #[serde(with = "inf_float")]
    pub so: f64,
}

impl Thresholds {
    pub fn uniform(v: f64) -> Self {
        Thresholds {
            ci: v,
            si: v,
            co: v,
            so: v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ci", self.ci), ("si", self.si), ("co", self.co), ("so", self.so)] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config {
                    path: format!("thresholds.{name}"),
                    detail: format!("must be >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gammas {
    pub ci: f64,
    pub si: f64,
    pub co: f64,
    pub so: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdicts {
    pub ci: bool,
    pub si: bool,
    pub co: bool,
    pub so: bool,
}

impl Verdicts {
    pub fn all(&self) -> bool {
        self.ci && self.si && self.co && self.so
    }
}

/// Measured divergences against thresholds for one perturbation setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependabilityReport {
    pub k: usize,
    pub n_samples: usize,
    pub gamma: Gammas,
    pub thresholds: Thresholds,
    /// Input-perturbation budgets `[rho_1, rho_2]` actually used (max L2 norm of the applied input shift).
    pub rho: [f64; 2],
    pub verdicts: Verdicts,
    pub overlap_ci: f64,
    pub overlap_si: f64,
    pub perturbation: PerturbationSpec,
}

impl DependabilityReport {
    /// Re-derives verdicts for new thresholds without re-measuring.
    pub fn with_thresholds(&self, thresholds: Thresholds) -> Self {
        DependabilityReport {
            thresholds,
            verdicts: verdicts(&self.gamma, &thresholds),
            ..self.clone()
        }
    }
}

fn verdicts(g: &Gammas, t: &Thresholds) -> Verdicts {
    Verdicts {
        ci: g.ci <= t.ci,
        si: g.si <= t.si,
        co: g.co <= t.co,
        so: g.so <= t.so,
    }
}

/// Audits `drive` against the frozen `base` on `data` under `spec`.
///
/// Concept divergences use the top-k restricted L1 surrogate, output
/// divergences the mean absolute difference; expectations are sample means.
pub fn dependability_report(
    base: &CbmParams,
    drive: &CbmParams,
    space: &ConceptSpace,
    data: &[&Sample],
    spec: &PerturbationSpec,
    thresholds: Thresholds,
    k: usize,
    pgd: Option<&PgdContext>,
) -> Result<DependabilityReport> {
    base.check_binding(space)?;
    drive.check_binding(space)?;
    thresholds.validate()?;
    if data.is_empty() {
        return Err(Error::contract("audit needs at least one sample"));
    }
    let base_out = forward_samples(base, space, data)?;
    let drive_out = forward_samples(drive, space, data)?;
    let pert = perturbed_outputs(drive, space, data, spec, Some(base), pgd)?;

    let n = data.len() as f64;
    let mut gamma = Gammas {
        ci: 0.0,
        si: 0.0,
        co: 0.0,
        so: 0.0,
    };
    let (mut ov_ci, mut ov_si) = (0.0, 0.0);
    for ((b, d), p) in base_out.iter().zip(&drive_out).zip(&pert.outputs) {
        gamma.ci += losses::surrogate_ci(&d.0, &b.0, k)?;
        gamma.si += losses::surrogate_si(&d.0, &p.0, k)?;
        gamma.co += losses::loss_co(&d.1, &b.1)?;
        gamma.so += losses::loss_so(&d.1, &p.1)?;
        ov_ci += top_k_overlap(&d.0, &b.0, k)?;
        ov_si += top_k_overlap(&d.0, &p.0, k)?;
    }
    gamma.ci /= n;
    gamma.si /= n;
    gamma.co /= n;
    gamma.so /= n;
    let rho = pert.max_input_norm.unwrap_or(0.0);
    Ok(DependabilityReport {
        k,
        n_samples: data.len(),
        gamma,
        thresholds,
        rho: [rho, rho],
        verdicts: verdicts(&gamma, &thresholds),
        overlap_ci: ov_ci / n,
        overlap_si: ov_si / n,
        perturbation: spec.clone(),
    })
}

/// One result-table cell: prediction errors under a perturbation and the
/// mean top-k overlap between clean and perturbed concept scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub a_mae: f64,
    /// Absent for single-target models.
    pub d_mae: Option<f64>,
    /// Mean of the per-target errors.
    pub ad_mae: f64,
    /// Absent for the unperturbed row.
    pub top_k: Option<f64>,
}

/// Evaluates `params` on `samples`, clean when `spec` is `None`.
///
/// PGD cells need the frozen reference and search settings in `pgd`.
pub fn evaluate_cell(
    params: &CbmParams,
    space: &ConceptSpace,
    samples: &[&Sample],
    spec: Option<&PerturbationSpec>,
    k: usize,
    pgd: Option<(&CbmParams, &PgdContext)>,
) -> Result<CellMetrics> {
    let clean = forward_samples(params, space, samples)?;
    let targets: Vec<&[f64]> = samples.iter().map(|s| s.target.data()).collect();
    let (outputs, top_k) = match spec {
        None => (clean, None),
        Some(spec) => {
            let run = perturbed_outputs(params, space, samples, spec, pgd.map(|p| p.0), pgd.map(|p| p.1))?;
            let mut overlap = 0.0;
            for (c, p) in clean.iter().zip(&run.outputs) {
                overlap += top_k_overlap(&c.0, &p.0, k)?;
            }
            let n = samples.len() as f64;
            (run.outputs, Some(overlap / n))
        }
    };
    let preds: Vec<&[f64]> = outputs.iter().map(|o| o.1.as_slice()).collect();
    let per_target = mae(&preds, &targets)?;
    Ok(CellMetrics {
        a_mae: per_target[0],
        d_mae: per_target.get(1).copied(),
        ad_mae: per_target.iter().sum::<f64>() / per_target.len() as f64,
        top_k,
    })
}
