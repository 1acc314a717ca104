mod common;

use drive_core::losses::{EpsLayout, FrozenReference, LossMask};
use drive_core::perturb::{
    pgd_perturbation, perturb_concept_space, perturb_input, perturb_params, project_l2, swap_count, PgdSettings,
};
use drive_core::Tensor;
use proptest::prelude::*;
use rand::{rngs::StdRng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use common::*;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sample mean and variance.
fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn projection_is_idempotent_and_bounded(v in prop::collection::vec(-10.0f64..10.0, 1..30), radius in 0.0f64..5.0) {
        let mut once = v.clone();
        project_l2(&mut once, radius);
        prop_assert!(norm(&once) <= radius * (1.0 + 1e-12));
        let mut twice = once.clone();
        project_l2(&mut twice, radius);
        prop_assert_eq!(&once, &twice);
        if norm(&v) <= radius {
            prop_assert_eq!(&once, &v);
        }
    }

    #[test]
    fn swapped_space_stays_unit_norm(fraction in 0.0f64..=1.0, seed in any::<u64>(), jitter in 0.0f64..0.5) {
        let s = space(10, 6, 1);
        let p = perturb_concept_space(&s, fraction, jitter, seed).unwrap();
        let e = p.embeddings();
        for i in 0..10 {
            prop_assert!((norm(e.row(i)) - 1.0).abs() < 1e-9);
        }
        let changed = (0..10).filter(|&i| p.labels()[i] != s.labels()[i]).count();
        prop_assert_eq!(changed, swap_count(fraction, 10));
        for i in 0..10 {
            if p.labels()[i] == s.labels()[i] {
                prop_assert_eq!(e.row(i), s.embeddings().row(i));
            }
        }
    }
}

#[test]
fn swap_count_rounds_up() {
    assert_eq!(swap_count(0.1, 24), 3);
    assert_eq!(swap_count(0.1, 10), 1);
    assert_eq!(swap_count(0.0, 24), 0);
    assert_eq!(swap_count(1.0, 24), 24);
    assert_eq!(swap_count(0.05, 24), 2);
}

#[test]
fn input_noise_has_the_requested_moments() {
    const SIGMA: f64 = 0.08;
    let zeros = Tensor::zeros(vec![1000, 1000]);
    let noise = perturb_input(&zeros, SIGMA, 17).unwrap();
    let (mean, var) = moments(noise.data());
    // 10^6 draws: the mean's standard error is SIGMA / 1000.
    assert!(mean.abs() < 5.0 * SIGMA / 1000.0, "mean {mean}");
    assert!((var / (SIGMA * SIGMA) - 1.0).abs() < 0.01, "var {var}");
    assert_ne!(noise, perturb_input(&zeros, SIGMA, 18).unwrap());
    assert_eq!(noise, perturb_input(&zeros, SIGMA, 17).unwrap());
}

#[test]
fn parameter_noise_has_the_requested_moments() {
    const SIGMA: f64 = 0.02;
    let s = space(DIMS.m, DIMS.l, 2);
    let p = params(2, DIMS, &s);
    let base = p.flatten();
    let mut diffs = Vec::new();
    let mut seed = 0;
    while diffs.len() < 1_000_000 {
        let q = perturb_params(&p, SIGMA, seed).unwrap().flatten();
        diffs.extend(q.iter().zip(&base).map(|(a, b)| a - b));
        seed += 1;
    }
    let (mean, var) = moments(&diffs);
    assert!(mean.abs() < 5.0 * SIGMA / (diffs.len() as f64).sqrt(), "mean {mean}");
    assert!((var / (SIGMA * SIGMA) - 1.0).abs() < 0.01, "var {var}");
    assert_eq!(perturb_params(&p, 0.0, 9).unwrap(), p);
}

#[test]
fn synonym_jitter_matches_monte_carlo_cosine() {
    const JITTER: f64 = 0.1;
    const L: usize = 8;
    let s = space(10, L, 3);
    let mut cosines = Vec::new();
    for seed in 0..2000 {
        let p = perturb_concept_space(&s, 1.0, JITTER, seed).unwrap();
        for i in 0..10 {
            cosines.push(p.embeddings().row(i).iter().zip(s.embeddings().row(i)).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    let got = moments(&cosines).0;

    // Independent oracle: the cosine between e1 and e1 + N(0, JITTER^2 I) is rotation invariant.
    let mut r = StdRng::seed_from_u64(99);
    let draws = 400_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let v: Vec<f64> = (0..L)
            .map(|j| {
                let z: f64 = StandardNormal.sample(&mut r);
                f64::from(j == 0) + JITTER * z
            })
            .collect();
        acc += v[0] / norm(&v);
    }
    let want = acc / draws as f64;
    assert!((got - want).abs() < 1e-3, "library {got} vs oracle {want}");
}

struct PgdCase {
    space: drive_core::model::ConceptSpace,
    frozen: FrozenReference,
    params: drive_core::model::CbmParams,
    batch: drive_core::model::Batch,
}

fn pgd_case(seed: u64) -> PgdCase {
    let space = space(DIMS.m, DIMS.l, seed);
    let base = params(seed, DIMS, &space);
    PgdCase {
        params: jittered(&base, 0.1, seed),
        frozen: FrozenReference::new(&base),
        space,
        batch: batch(&samples(4, 3, DIMS.d, DIMS.t, seed)),
    }
}

fn per_sample_shift(eps: &Tensor, layout: EpsLayout, seq_len: usize, sample: usize) -> f64 {
    match layout {
        EpsLayout::SharedAcrossFrames => norm(eps.row(sample)) * (seq_len as f64).sqrt(),
        EpsLayout::PerFrame => {
            let rows: Vec<f64> = (0..seq_len).flat_map(|f| eps.row(sample * seq_len + f).to_vec()).collect();
            norm(&rows)
        }
    }
}

#[test]
fn pgd_stays_in_the_ball_and_is_deterministic() {
    for layout in [EpsLayout::SharedAcrossFrames, EpsLayout::PerFrame] {
        for seed in 0..10 {
            let c = pgd_case(seed);
            let obj = drive_core::losses::DriveObjective {
                layout,
                ..objective(&c.space, &c.frozen, weights(LossMask::ALL), 2)
            };
            let settings = PgdSettings { rho: 0.08, alpha: 0.05, steps: 5, seed };
            let eps = pgd_perturbation(&obj, &c.params, &c.batch, settings).unwrap();
            for i in 0..c.batch.size {
                assert!(per_sample_shift(&eps, layout, c.batch.seq_len, i) <= 0.08 * (1.0 + 1e-12));
            }
            assert_eq!(eps, pgd_perturbation(&obj, &c.params, &c.batch, settings).unwrap());
        }
    }
}

#[test]
fn pgd_degenerate_settings_give_zero() {
    let c = pgd_case(1);
    let obj = objective(&c.space, &c.frozen, weights(LossMask::ALL), 2);
    let zero = |rho, alpha| {
        let e = pgd_perturbation(&obj, &c.params, &c.batch, PgdSettings { rho, alpha, steps: 3, seed: 1 }).unwrap();
        e.data().iter().all(|v| *v == 0.0)
    };
    assert!(zero(0.0, 0.1));
    assert!(zero(0.5, 0.0));
    let bad = PgdSettings { rho: 0.1, alpha: 0.1, steps: 0, seed: 1 };
    assert!(pgd_perturbation(&obj, &c.params, &c.batch, bad).is_err());
}

#[test]
fn pgd_beats_random_directions_of_equal_norm() {
    use drive_core::losses::combined_loss;
    let mut wins = 0;
    let trials = 20;
    for seed in 0..trials {
        let c = pgd_case(100 + seed);
        let obj = objective(&c.space, &c.frozen, weights(LossMask::ALL), 2);
        let eps = pgd_perturbation(&obj, &c.params, &c.batch, PgdSettings { rho: 0.08, alpha: 0.001, steps: 5, seed }).unwrap();
        let terms = |e: &Tensor| {
            let t = combined_loss(&obj, &c.params, &c.batch, e).unwrap().terms;
            t[1].unwrap() + t[3].unwrap()
        };
        let mut r = drive_core::rng::stream(seed, 77, 0);
        let mut random = drive_core::rng::normals(&mut r, eps.len(), 1.0);
        let scale = norm(eps.data()) / norm(&random);
        random.iter_mut().for_each(|v| *v *= scale);
        let random = Tensor::new(eps.shape().to_vec(), random).unwrap();
        if terms(&eps) >= terms(&random) {
            wins += 1;
        }
    }
    assert!(wins >= 18, "PGD won {wins}/{trials}");
}
