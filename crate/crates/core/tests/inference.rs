use lfparafac::covariance::{quadrature, CovarianceField};
use lfparafac::data::LongitudinalSample;
use lfparafac::inference::*;
use lfparafac::model::LfParafacModel;
use lfparafac::smoothing::MeanField;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A model on `g` grid nodes over [0, 1] with smooth Φ, positive factors,
/// the given Λ and σ², and constant mean levels.
fn model(shape: &[usize], lambda: DMatrix<f64>, sigma2: f64, g: usize, levels: Vec<f64>, seed: u64) -> LfParafacModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = lambda.nrows();
    let q = quadrature((0.0, 1.0), g).unwrap();
    let phi = DMatrix::from_fn(g, r, |i, c| {
        let t = q.nodes[i];
        ((c + 1) as f64 * std::f64::consts::PI * t).sin() + 0.2 * c as f64 * t + 0.5
    });
    let unif = Uniform::new(0.2, 1.0).unwrap();
    let factors = shape.iter().map(|&p| DMatrix::from_fn(p, r, |_, _| unif.sample(&mut rng))).collect();
    let mean = MeanField::constant(q.nodes.clone(), levels);
    let field = CovarianceField::from_fn(q, shape.to_vec(), sigma2, mean, |_, _, _, _| 0.0).unwrap();
    let mut m = LfParafacModel::new(&field, phi, factors, lambda).unwrap();
    m.sigma2 = sigma2;
    m
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

/// Slices of `mean + (A ⊙ Φ(t)) u + noise`.
fn synth(m: &LfParafacModel, u: &[f64], times: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    reconstruct(m, u, times)
        .unwrap()
        .into_iter()
        .map(|row| row.into_iter().map(|v| v + noise * normal(rng)).collect())
        .collect()
}

fn grid_times(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

#[test]
fn design_matrix_rows_follow_observed_pairs() {
    let m = model(&[3, 2], diag(&[2.0, 1.0]), 0.5, 11, vec![0.0; 6], 1);
    let a = m.khatri_rao();
    let f = design_matrix(&m, &[0.3], &(0..6).map(|j| (0, j)).collect::<Vec<_>>()).unwrap();
    assert_eq!(f.shape(), (6, 2));
    let times: Vec<f64> = m.grid()[..4].to_vec();
    let pairs: Vec<(usize, usize)> = (0..6).flat_map(|j| (0..4).map(move |k| (k, j))).collect();
    let f = design_matrix(&m, &times, &pairs).unwrap();
    for (row, &(k, j)) in pairs.iter().enumerate() {
        for r in 0..2 {
            assert!((f[(row, r)] - a[(j, r)] * m.phi[(k, r)]).abs() < 1e-15);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let times = vec![0.05, 0.41, 0.77];
    let slices: Vec<Vec<Option<f64>>> =
        (0..3).map(|_| (0..6).map(|_| rng.random_bool(0.6).then(|| normal(&mut rng))).collect()).collect();
    let s = LongitudinalSample::new("s", times.clone(), slices.clone()).unwrap();
    let (f, r) = sample_system(&m, &s).unwrap();
    let mut row = 0;
    for j in 0..6 {
        for k in 0..3 {
            if let Some(y) = slices[k][j] {
                let phi = m.phi_at(times[k]);
                for c in 0..2 {
                    assert!((f[(row, c)] - a[(j, c)] * phi[c]).abs() < 1e-15);
                }
                assert_eq!(r[row], y);
                row += 1;
            }
        }
    }
    assert_eq!(row, f.nrows());
}

#[test]
fn observation_at_the_mean_gives_zero_scores() {
    let levels = vec![1.0, -2.0, 0.5, 3.0];
    let m = model(&[4], diag(&[3.0, 1.0]), 0.2, 21, levels.clone(), 3);
    let times = vec![0.1, 0.5, 0.9];
    let s = LongitudinalSample::dense("s", times, vec![levels.clone(); 3]).unwrap();
    let p = predict_scores(&m, &s).unwrap();
    assert!(p.u_hat.iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn all_missing_is_an_error() {
    let m = model(&[2], diag(&[1.0]), 0.1, 5, vec![0.0; 2], 4);
    let s = LongitudinalSample::new("s", vec![0.5], vec![vec![None, None]]).unwrap();
    assert!(predict_scores(&m, &s).is_err());
}

#[test]
fn vanishing_noise_inverts_a_square_design() {
    let m = model(&[2], diag(&[2.0, 0.5]), 1e-12, 21, vec![0.3, -0.1], 5);
    let s = LongitudinalSample::dense("s", vec![0.37], vec![vec![1.7, -0.4]]).unwrap();
    let (f, r) = sample_system(&m, &s).unwrap();
    let direct = f.lu().solve(&r).unwrap();
    let p = predict_scores(&m, &s).unwrap();
    let err = (DVector::from_vec(p.u_hat.clone()) - &direct).norm() / direct.norm();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn dense_noiseless_sample_recovers_scores() {
    let m = model(&[4, 3], diag(&[4.0, 2.0, 1.0]), 0.01, 31, vec![0.5; 12], 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let u: Vec<f64> = (0..3).map(|r| m.lambda[(r, r)].sqrt() * normal(&mut rng)).collect();
        let times = grid_times(20);
        let s = LongitudinalSample::dense("s", times.clone(), synth(&m, &u, &times, 0.0, &mut rng)).unwrap();
        let p = predict_scores(&m, &s).unwrap();
        let err = (DVector::from_vec(p.u_hat) - DVector::from_vec(u.clone())).norm() / DVector::from_vec(u).norm();
        assert!(err < 0.02, "{err}");
    }
}

#[test]
fn posterior_mean_shrinks_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (lam, seed) in [(diag(&[2.0, 2.0]), 9u64), (diag(&[5.0, 0.3]), 10)] {
        let m = model(&[3], lam.clone(), 0.8, 21, vec![0.0; 3], seed);
        let times = vec![0.2, 0.6];
        let s = LongitudinalSample::dense("s", times.clone(), synth(&m, &[1.0, -1.0], &times, 1.0, &mut rng)).unwrap();
        let (f, r) = sample_system(&m, &s).unwrap();
        let gls = (f.transpose() * &f).cholesky().unwrap().solve(&(f.transpose() * &r));
        let u = DVector::from_vec(predict_scores(&m, &s).unwrap().u_hat);
        let inv = lam.clone().try_inverse().unwrap();
        assert!(u.dot(&(&inv * &u)) <= gls.dot(&(&inv * &gls)) + 1e-12);
        if lam[(0, 0)] == lam[(1, 1)] {
            assert!(u.norm() <= gls.norm() + 1e-12);
        }
    }
}

fn loewner_gap(lambda: &DMatrix<f64>, c: &DMatrix<f64>) -> (f64, f64) {
    let c_min = c.clone().symmetric_eigenvalues().min();
    let gap_min = (lambda - c).symmetric_eigenvalues().min();
    (c_min, gap_min)
}

#[test]
fn posterior_covariance_is_psd_below_prior_and_monotone_in_observations() {
    let lam = DMatrix::from_row_slice(3, 3, &[4.0, 0.5, 0.2, 0.5, 2.0, -0.3, 0.2, -0.3, 1.0]);
    let m = model(&[3, 2], lam.clone(), 0.5, 21, vec![0.0; 6], 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let times = grid_times(6);
        let full = synth(&m, &[1.0, 0.0, -1.0], &times, 0.7, &mut rng);
        let mut cells: Vec<(usize, usize)> = (0..6).flat_map(|k| (0..6).map(move |j| (k, j))).collect();
        cells.shuffle(&mut rng);
        let mut prev = f64::INFINITY;
        for keep in [1, 3, 8, 15, 25, 36] {
            let mut slices = vec![vec![None; 6]; 6];
            for &(k, j) in &cells[..keep] {
                slices[k][j] = Some(full[k][j]);
            }
            let s = LongitudinalSample::new("s", times.clone(), slices).unwrap();
            let c = predict_scores(&m, &s).unwrap().covariance_matrix();
            assert!((&c - c.transpose()).norm() < 1e-14);
            let (c_min, gap_min) = loewner_gap(&lam, &c);
            assert!(c_min >= -1e-10 && gap_min >= -1e-10);
            assert!(c.trace() <= prev + 1e-12);
            prev = c.trace();
        }
    }
}

#[test]
fn relabeling_entries_leaves_scores_unchanged() {
    let m = model(&[5], diag(&[3.0, 1.0]), 0.3, 21, vec![0.1, 0.2, 0.3, 0.4, 0.5], 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let times = vec![0.1, 0.35, 0.8];
    let slices: Vec<Vec<Option<f64>>> =
        (0..3).map(|_| (0..5).map(|_| rng.random_bool(0.7).then(|| normal(&mut rng))).collect()).collect();
    let s = LongitudinalSample::new("s", times.clone(), slices.clone()).unwrap();
    let base = predict_scores(&m, &s).unwrap();
    let perm = [3usize, 0, 4, 1, 2];
    let mut mp = m.clone();
    mp.factors[0] = DMatrix::from_fn(5, 2, |i, r| m.factors[0][(perm[i], r)]);
    mp.mean = MeanField::constant(m.grid().to_vec(), perm.iter().map(|&i| 0.1 * (i + 1) as f64).collect());
    let sp = LongitudinalSample::new("s", times, slices.iter().map(|row| perm.iter().map(|&i| row[i]).collect()).collect())
        .unwrap();
    let moved = predict_scores(&mp, &sp).unwrap();
    for r in 0..2 {
        assert!((base.u_hat[r] - moved.u_hat[r]).abs() < 1e-12);
    }
    assert!((base.covariance_matrix() - moved.covariance_matrix()).norm() < 1e-12);
}

#[test]
fn zero_scores_reconstruct_the_mean_and_unit_model_is_scaled_phi() {
    let m = model(&[2, 2], diag(&[1.0, 0.5]), 0.1, 11, vec![1.0, 2.0, 3.0, 4.0], 15);
    let rec = reconstruct(&m, &[0.0, 0.0], &[0.0, 0.33, 1.0]).unwrap();
    for row in rec {
        assert_eq!(row, vec![1.0, 2.0, 3.0, 4.0]);
    }
    let mut one = model(&[1], diag(&[1.0]), 0.1, 11, vec![0.5], 16);
    one.phi.fill(1.0);
    one.factors[0].fill(1.0);
    let rec = reconstruct(&one, &[2.5], &[0.2, 0.9]).unwrap();
    assert!(rec.iter().all(|row| (row[0] - 3.0).abs() < 1e-15));
}

#[test]
fn projection_is_exact_and_optimal() {
    let m = model(&[3, 2], diag(&[2.0, 1.0, 0.5]), 0.1, 41, vec![0.0; 6], 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let a = m.khatri_rao();
    let u = [1.3, -0.7, 0.4];
    let values: Vec<Vec<f64>> = (0..m.grid().len())
        .map(|g| (0..6).map(|j| (0..3).map(|r| u[r] * m.phi[(g, r)] * a[(j, r)]).sum()).collect())
        .collect();
    let est = psi_star(&m, &values).unwrap();
    for r in 0..3 {
        assert!((est[r] - u[r]).abs() < 1e-8);
    }
    let noisy: Vec<Vec<f64>> = values.iter().map(|x| x.iter().map(|v| v + 0.3 * normal(&mut rng)).collect()).collect();
    let best = psi_star(&m, &noisy).unwrap();
    let loss = |w: &[f64]| -> f64 {
        (0..m.grid().len())
            .map(|g| {
                m.weights()[g]
                    * (0..6)
                        .map(|j| (noisy[g][j] - (0..3).map(|r| w[r] * m.phi[(g, r)] * a[(j, r)]).sum::<f64>()).powi(2))
                        .sum::<f64>()
            })
            .sum()
    };
    let l0 = loss(&best);
    for _ in 0..20 {
        let w: Vec<f64> = best.iter().map(|b| b + 0.01 * normal(&mut rng)).collect();
        assert!(loss(&w) > l0);
    }
}

#[test]
fn small_noise_prediction_matches_projection_on_dense_grid_data() {
    let mut m = model(&[3, 2], diag(&[3.0, 1.5, 0.5]), 1e-12, 41, vec![0.2; 6], 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..5 {
        let u: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
        let times = m.grid().to_vec();
        let slices = synth(&m, &u, &times, 0.0, &mut rng);
        let centered: Vec<Vec<f64>> = slices.iter().map(|x| x.iter().map(|v| v - 0.2).collect()).collect();
        let proj = DVector::from_vec(psi_star(&m, &centered).unwrap());
        let s = LongitudinalSample::dense("s", times, slices).unwrap();
        let p = DVector::from_vec(predict_scores(&m, &s).unwrap().u_hat);
        assert!((&p - &proj).norm() / proj.norm() < 1e-4);
    }
    m.sigma2 = 0.0;
    let s = LongitudinalSample::dense("s", vec![0.5], vec![vec![0.0; 6]]).unwrap();
    assert!(predict_scores(&m, &s).is_err());
}

#[test]
fn dense_noiseless_pipeline_reconstructs_each_sample() {
    use lfparafac::simulation::{generate, SimConfig};
    let (d, truth) = generate(&SimConfig { sigma2: 0.0, snr: None, seed: 21, ..SimConfig::default() }).unwrap();
    let (m, _, _) = lfparafac::fit(&d, 3, &lfparafac::CovarianceConfig::default(), &lfparafac::FitConfig::default()).unwrap();
    assert!(m.sigma2 > 0.0);
    let model = m;
    let mut worst: f64 = 0.0;
    for (s, sig) in d.samples().iter().zip(&truth.signal) {
        let p = predict_scores(&model, s).unwrap();
        let rec = reconstruct(&model, &p.u_hat, s.times()).unwrap();
        let rms = (sig.iter().flatten().map(|v| v * v).sum::<f64>() / (sig.len() * sig[0].len()) as f64).sqrt();
        let err = lfparafac::simulation::rmse(&[sig.clone()], &[rec]).unwrap();
        worst = worst.max(err / rms);
    }
    assert!(worst < 0.05, "worst per-sample relative RMSE {worst}");
}
