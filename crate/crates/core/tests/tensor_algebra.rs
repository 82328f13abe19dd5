use lfparafac::tensor::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

/// Every multi-index of `shape`, first index fastest.
fn indices(shape: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &p in shape {
        out = (0..p)
            .flat_map(|i| out.iter().map(move |v| [v.clone(), vec![i]].concat()))
            .collect();
    }
    out.sort_by_key(|v| v.iter().rev().cloned().collect::<Vec<_>>());
    out
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn tensor() -> impl Strategy<Value = DenseTensor> {
    prop::collection::vec(1usize..=4, 1..=4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-5.0..5.0f64, n).prop_map(move |d| DenseTensor::new(shape.clone(), d).unwrap())
    })
}

#[test]
fn mode_one_matricization_of_a_3x4x5_tensor_lists_fibers() {
    let shape = [3, 4, 5];
    let data: Vec<f64> = (0..60).map(|k| (k as f64 * 0.37).sin()).collect();
    let t = DenseTensor::new(shape.to_vec(), data).unwrap();
    let m = matricize(&t, 1).unwrap();
    assert_eq!(m.shape(), (4, 15));
    for i0 in 0..3 {
        for i1 in 0..4 {
            for i2 in 0..5 {
                assert_eq!(m[(i1, i0 + 3 * i2)], t.get(&[i0, i1, i2]));
            }
        }
    }
}

#[test]
fn vectorize_stacks_matricized_columns() {
    let data: Vec<f64> = (0..12).map(|k| k as f64).collect();
    let t = DenseTensor::new(vec![2, 3, 2], data).unwrap();
    let v = vectorize(&t, 1).unwrap();
    let m = matricize(&t, 1).unwrap();
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            assert_eq!(v[c * m.nrows() + r], m[(r, c)]);
        }
    }
    let sq = DenseTensor::new(vec![2, 2], vec![1.0, 3.0, 2.0, 4.0]).unwrap();
    assert_eq!(vectorize(&sq, 0).unwrap(), vec![1.0, 3.0, 2.0, 4.0]);
}

#[test]
fn identity_kronecker_is_block_diagonal() {
    let b = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let k = kronecker(&DMatrix::identity(2, 2), &b);
    assert_eq!(k.shape(), (4, 6));
    assert_eq!(k.view((0, 0), (2, 3)), b);
    assert_eq!(k.view((2, 3), (2, 3)), b);
    assert_eq!(k.view((0, 3), (2, 3)).norm(), 0.0);
    assert_eq!(k.view((2, 0), (2, 3)).norm(), 0.0);
}

#[test]
fn cp_reconstruct_small_rank_two() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
    let b = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, 2.0, -2.0]);
    let c = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 1.0, 1.0]);
    let w = [2.0, -1.0];
    let t = cp_reconstruct(&FactorSet::new(vec![a.clone(), b.clone(), c.clone()]).unwrap(), Some(&w)).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                let mut s = 0.0;
                for r in 0..2 {
                    s += w[r] * a[(i, r)] * b[(j, r)] * c[(k, r)];
                }
                assert!((t.get(&[i, j, k]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn frobenius_matches_sum_of_squares() {
    let data: Vec<f64> = (0..24).map(|k| (k as f64).cos() * 3.0).collect();
    let t = DenseTensor::new(vec![2, 3, 4], data.clone()).unwrap();
    let oracle = data.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((frobenius_norm(&t) - oracle).abs() < 1e-12 * oracle);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matricization_round_trips(t in tensor()) {
        for mode in 0..t.order() {
            let m = matricize(&t, mode).unwrap();
            prop_assert_eq!(m.nrows(), t.shape()[mode]);
            prop_assert_eq!(inverse_matricize(&m, mode, t.shape()).unwrap(), t.clone());
        }
    }

    #[test]
    fn matricization_matches_index_arithmetic(t in tensor()) {
        let shape = t.shape().to_vec();
        for mode in 0..shape.len() {
            let m = matricize(&t, mode).unwrap();
            for idx in indices(&shape) {
                let mut col = 0;
                let mut stride = 1;
                for d in 0..shape.len() {
                    if d != mode {
                        col += idx[d] * stride;
                        stride *= shape[d];
                    }
                }
                prop_assert_eq!(m[(idx[mode], col)], t.get(&idx));
            }
        }
    }

    #[test]
    fn linear_and_multi_index_are_inverse(shape in prop::collection::vec(1usize..=5, 1..=4)) {
        let n: usize = shape.iter().product();
        for k in 0..n {
            prop_assert_eq!(linear_index(&shape, &multi_index(&shape, k)), k);
            for mode in 0..shape.len() {
                let (r, c) = matricized_position(&shape, mode, k);
                prop_assert_eq!(entry_from_matricized(&shape, mode, r, c), k);
            }
        }
    }

    #[test]
    fn khatri_rao_columns_are_kronecker_products(a in matrix(3, 2), b in matrix(4, 2)) {
        let kr = khatri_rao(&a, &b).unwrap();
        for r in 0..2 {
            let col = kronecker(&a.columns(r, 1).into_owned(), &b.columns(r, 1).into_owned());
            prop_assert!(rel(&kr.columns(r, 1).into_owned(), &col) < 1e-15);
        }
    }

    #[test]
    fn mixed_product(a in matrix(2, 3), b in matrix(3, 2), c in matrix(3, 4), d in matrix(2, 4)) {
        let lhs = kronecker(&a, &b) * khatri_rao(&c, &d).unwrap();
        let rhs = khatri_rao(&(&a * &c), &(&b * &d)).unwrap();
        prop_assert!(rel(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn hadamard_gram(a in matrix(4, 3), b in matrix(5, 3)) {
        let kr = khatri_rao(&a, &b).unwrap();
        let lhs = kr.transpose() * &kr;
        let rhs = hadamard(&(a.transpose() * &a), &(b.transpose() * &b)).unwrap();
        prop_assert!(rel(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn hadamard_is_commutative_with_unit(a in matrix(3, 4), b in matrix(3, 4)) {
        prop_assert_eq!(hadamard(&a, &b).unwrap(), hadamard(&b, &a).unwrap());
        prop_assert_eq!(hadamard(&a, &DMatrix::from_element(3, 4, 1.0)).unwrap(), a.clone());
        let h = hadamard(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                prop_assert_eq!(h[(i, j)], a[(i, j)] * b[(i, j)]);
            }
        }
    }

    #[test]
    fn cp_reconstruct_matches_loops(
        shape in prop::collection::vec(1usize..=4, 1..=4),
        rank in 1usize..=5,
        seed in any::<u64>(),
    ) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let factors: Vec<DMatrix<f64>> = shape.iter().map(|&p| DMatrix::from_fn(p, rank, |_, _| next())).collect();
        let w: Vec<f64> = (0..rank).map(|_| next()).collect();
        let t = cp_reconstruct(&FactorSet::new(factors.clone()).unwrap(), Some(&w)).unwrap();
        for idx in indices(&shape) {
            let mut v = 0.0;
            for r in 0..rank {
                v += w[r] * idx.iter().enumerate().map(|(d, &i)| factors[d][(i, r)]).product::<f64>();
            }
            prop_assert!((t.get(&idx) - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
        // vec(X) = (A_D ⊙ … ⊙ A_1) w
        let kr = khatri_rao_reversed(&factors, None, rank);
        let v = kr * nalgebra::DVector::from_vec(w.clone());
        for (x, y) in t.data().iter().zip(v.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}
