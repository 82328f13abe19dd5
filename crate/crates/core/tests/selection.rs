use lfparafac::covariance::{quadrature, CovarianceConfig, CovarianceField};
use lfparafac::data::{Dataset, LongitudinalSample};
use lfparafac::inference::sample_log_likelihood;
use lfparafac::model::{fit, FitConfig, LfParafacModel};
use lfparafac::selection::*;
use lfparafac::simulation::{generate, SimConfig};
use lfparafac::smoothing::MeanField;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn white_noise_model(p: usize, sigma2: f64) -> LfParafacModel {
    let q = quadrature((0.0, 1.0), 11).unwrap();
    let mean = MeanField::zeros(q.nodes.clone(), p);
    let field = CovarianceField::from_fn(q.clone(), vec![p], sigma2, mean, |_, _, _, _| 0.0).unwrap();
    let phi = DMatrix::from_element(q.len(), 1, 1.0);
    let mut m = LfParafacModel::new(&field, phi, vec![DMatrix::from_element(p, 1, 1.0)], DMatrix::zeros(1, 1)).unwrap();
    m.sigma2 = sigma2;
    m
}

fn random_dataset(n: usize, p: usize, seed: u64, scale: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let k = rng.random_range(2..6);
            let mut times: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let slices = (0..k)
                .map(|_| (0..p).map(|_| rng.random_bool(0.8).then(|| scale * normal(&mut rng))).collect())
                .collect();
            LongitudinalSample::new(format!("s{i}"), times, slices).unwrap()
        })
        .collect();
    Dataset::new(samples, vec![p], Some((0.0, 1.0))).unwrap()
}

#[test]
fn zero_lambda_gives_white_noise_likelihood() {
    for sigma2 in [0.3, 1.0, 2.5] {
        let m = white_noise_model(3, sigma2);
        let d = random_dataset(15, 3, 1, 1.0);
        let ll = log_likelihood(&m, &d).unwrap();
        let mut ss = 0.0;
        let mut n = 0.0;
        for s in d.samples() {
            for (k, j) in s.observed_pairs() {
                ss += s.value(k, j).unwrap().powi(2);
                n += 1.0;
            }
        }
        let expect = -0.5 * (ss / sigma2 + n * sigma2.ln());
        assert!((ll - expect).abs() < 1e-10 * expect.abs(), "{ll} vs {expect}");
    }
}

#[test]
fn doubling_residuals_quadruples_the_quadratic_term() {
    let m = white_noise_model(4, 1.0);
    let a = log_likelihood(&m, &random_dataset(10, 4, 2, 1.0)).unwrap();
    let b = log_likelihood(&m, &random_dataset(10, 4, 2, 2.0)).unwrap();
    assert!((b - 4.0 * a).abs() < 1e-10 * b.abs());
}

fn fitted(seed: u64, rank: usize) -> (LfParafacModel, Dataset) {
    let cfg = SimConfig { n: 40, dims: vec![4], sparsity: 0.3, seed, ..SimConfig::default() };
    let (d, _) = generate(&cfg).unwrap();
    let (m, _, _) = fit(&d, rank, &CovarianceConfig { grid_size: 21, ..CovarianceConfig::default() }, &FitConfig::default())
        .unwrap();
    (m, d)
}

#[test]
fn likelihood_is_additive_and_order_free() {
    let (m, d) = fitted(3, 2);
    let total = log_likelihood(&m, &d).unwrap();
    let parts: f64 = d.samples().iter().map(|s| sample_log_likelihood(&m, s).unwrap()).sum();
    assert!((total - parts).abs() < 1e-9 * total.abs());
    let mut idx: Vec<usize> = (0..d.n_samples()).rev().collect();
    idx.rotate_left(7);
    let shuffled = log_likelihood(&m, &d.subset(&idx).unwrap()).unwrap();
    assert!((total - shuffled).abs() < 1e-9 * total.abs());
    let halves = log_likelihood(&m, &d.subset(&(0..20).collect::<Vec<_>>()).unwrap()).unwrap()
        + log_likelihood(&m, &d.subset(&(20..40).collect::<Vec<_>>()).unwrap()).unwrap();
    assert!((total - halves).abs() < 1e-9 * total.abs());
}

#[test]
fn masked_entries_do_not_enter_the_likelihood() {
    let (m, d) = fitted(4, 2);
    for s in d.samples().iter().take(10) {
        let base = sample_log_likelihood(&m, s).unwrap();
        let last = *s.times().last().unwrap();
        let mut times = s.times().to_vec();
        let mut slices: Vec<Vec<Option<f64>>> =
            (0..s.n_times()).map(|k| (0..s.n_entries()).map(|j| s.value(k, j)).collect()).collect();
        times.push(last + 1e-3);
        slices.push(vec![None; s.n_entries()]);
        let padded = LongitudinalSample::new(s.id(), times, slices).unwrap();
        assert_eq!(sample_log_likelihood(&m, &padded).unwrap(), base);
    }
}

#[test]
fn duplicated_halves_give_equal_fold_values() {
    let (base, _) = generate(&SimConfig { n: 30, dims: vec![3], seed: 5, ..SimConfig::default() }).unwrap();
    let folds = fold_assignment(60, 2, 9).unwrap();
    let mut slots: Vec<Option<LongitudinalSample>> = vec![None; 60];
    for f in &folds {
        for (i, &pos) in f.iter().enumerate() {
            slots[pos] = Some(base.samples()[i].clone());
        }
    }
    let d = Dataset::new(slots.into_iter().map(Option::unwrap).collect(), vec![3], Some(base.domain())).unwrap();
    let cov_cfg = CovarianceConfig { grid_size: 21, ..CovarianceConfig::default() };
    let sel = select_rank_lcv(&d, &[1, 2], 2, 9, &cov_cfg, &FitConfig::default()).unwrap();
    for s in &sel.scores {
        assert_eq!(s.fold_values.len(), 2);
        assert!((s.fold_values[0] - s.fold_values[1]).abs() < 1e-9 * s.fold_values[0].abs(), "{:?}", s.fold_values);
    }
}

#[test]
fn cross_validation_is_deterministic() {
    let (d, _) = generate(&SimConfig { n: 30, dims: vec![3], seed: 6, ..SimConfig::default() }).unwrap();
    let cov_cfg = CovarianceConfig { grid_size: 21, ..CovarianceConfig::default() };
    let run = || select_rank_lcv(&d, &[1, 2, 3], 3, 4, &cov_cfg, &FitConfig::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.best, b.best);
    for (x, y) in a.scores.iter().zip(&b.scores) {
        assert_eq!(x.fold_values, y.fold_values);
        assert_eq!(x.criterion.to_bits(), y.criterion.to_bits());
    }
    assert_eq!(fold_assignment(30, 3, 4).unwrap(), fold_assignment(30, 3, 4).unwrap());
}

#[test]
fn aic_penalties_differ_only_by_the_penalty() {
    let (d, _) = generate(&SimConfig { n: 30, dims: vec![3], seed: 7, ..SimConfig::default() }).unwrap();
    let cov_cfg = CovarianceConfig { grid_size: 21, ..CovarianceConfig::default() };
    let lit = select_rank_aic(&d, &[1, 2], AicPenalty::Rank, &cov_cfg, &FitConfig::default()).unwrap();
    let par = select_rank_aic(&d, &[1, 2], AicPenalty::ParameterCount, &cov_cfg, &FitConfig::default()).unwrap();
    for (a, b) in lit.scores.iter().zip(&par.scores) {
        let diff = b.criterion - a.criterion;
        let expect = (parameter_count(a.rank, 21, &[3]) - a.rank) as f64;
        assert!((diff - expect).abs() < 1e-8 * a.criterion.abs());
    }
    // Λ: 1, Φ: 1, σ²: 1; a single-row factor is fixed by its norm.
    assert_eq!(parameter_count(1, 2, &[1]), 3);
}

#[test]
fn true_rank_beats_one_fewer_in_likelihood() {
    let mut wins = 0;
    for seed in 0..20 {
        let (d, _) = generate(&SimConfig { n: 60, seed: 100 + seed, ..SimConfig::default() }).unwrap();
        let cov_cfg = CovarianceConfig { grid_size: 31, ..CovarianceConfig::default() };
        let ll = |r| {
            let (m, _, _) = fit(&d, r, &cov_cfg, &FitConfig::default()).unwrap();
            log_likelihood(&m, &d).unwrap()
        };
        if ll(3) > ll(2) {
            wins += 1;
        }
    }
    assert!(wins > 10, "{wins}/20");
}
