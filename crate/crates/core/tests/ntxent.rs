mod common;

use common::{max_relative_error, naive_ntxent, numeric_gradient, random_tensor, rng};
use geoclr::contrastive::{batch_loss, batch_loss_with_grad, pairwise_loss};
use geoclr::nn::Tensor;
use geoclr::Error;
use proptest::prelude::*;
use rand::Rng;

fn rows(z: &Tensor) -> Vec<Vec<f64>> {
    (0..z.dim(0)).map(|i| z.row(i).to_vec()).collect()
}

fn from_rows(r: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![r.len(), r[0].len()], r.concat()).unwrap()
}

#[test]
fn matches_double_loop_on_random_batches() {
    let mut r = rng(11);
    for _ in 0..100 {
        let n2 = 2 * r.random_range(2..=32);
        let d = r.random_range(2..=16);
        let tau = r.random_range(0.05..1.0);
        let z = random_tensor(&[n2, d], &mut r);
        let got = batch_loss(&z, tau).unwrap();
        let want = naive_ntxent(&rows(&z), tau);
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

#[test]
fn two_pair_closed_form() {
    // pairs identical, pairs orthogonal to each other, tau = 1
    let z = from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
    let e = std::f64::consts::E;
    let want = -(e / (e + 2.0)).ln();
    assert!((batch_loss(&z, 1.0).unwrap() - want).abs() <= 1e-12);
    assert!((pairwise_loss(&z, 0, 1, 1.0).unwrap() - want).abs() <= 1e-12);
}

#[test]
fn identical_rows_give_log_of_negatives_plus_one() {
    for n2 in [4usize, 8, 64] {
        let z = Tensor::full(&[n2, 5], 0.3);
        let l = batch_loss(&z, 0.5).unwrap();
        assert!((l - ((n2 - 1) as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut r = rng(5);
    for &(n2, d, tau) in &[(4, 3, 1.0), (8, 6, 0.5), (16, 8, 0.1)] {
        let z = random_tensor(&[n2, d], &mut r);
        let (_, g) = batch_loss_with_grad(&z, tau).unwrap();
        let num = numeric_gradient(z.data(), 1e-6, |x| batch_loss(&Tensor::new(vec![n2, d], x.to_vec()).unwrap(), tau).unwrap());
        assert!(max_relative_error(g.data(), &num, 1e-6) < 1e-3);
    }
}

#[test]
fn bad_shapes_and_zero_rows() {
    assert!(matches!(batch_loss(&Tensor::zeros(&[3, 2]), 1.0), Err(Error::Shape(_))));
    assert!(matches!(batch_loss(&Tensor::zeros(&[2, 2]), 1.0), Err(Error::Shape(_))));
    let mut z = Tensor::full(&[4, 2], 1.0);
    z.data_mut()[0] = 0.0;
    z.data_mut()[1] = 0.0;
    assert!(matches!(batch_loss(&z, 1.0), Err(Error::Numerical(_))));
}

#[test]
fn large_similarities_do_not_overflow() {
    let mut r = rng(2);
    let z = random_tensor(&[8, 4], &mut r);
    let l = batch_loss(&z, 1e-3).unwrap();
    assert!(l.is_finite());
}

proptest! {
    #[test]
    fn invariant_to_row_scaling_and_pair_order(seed in 0u64..1000, scale in 0.01f64..100.0, n in 2usize..8) {
        let mut r = rng(seed);
        let z = random_tensor(&[2 * n, 4], &mut r);
        let base = batch_loss(&z, 0.2).unwrap();

        let scaled: Vec<f64> = z.data().iter().map(|v| v * scale).collect();
        let l1 = batch_loss(&Tensor::new(vec![2 * n, 4], scaled).unwrap(), 0.2).unwrap();
        prop_assert!((l1 - base).abs() < 1e-9);

        // reverse pair order and swap the members of each pair
        let mut rs = rows(&z);
        rs.reverse();
        let l2 = batch_loss(&from_rows(&rs), 0.2).unwrap();
        prop_assert!((l2 - base).abs() < 1e-9);
    }

    #[test]
    fn bounded_below_by_zero(seed in 0u64..1000, tau in 0.05f64..2.0) {
        let mut r = rng(seed);
        let z = random_tensor(&[6, 3], &mut r);
        prop_assert!(batch_loss(&z, tau).unwrap() > 0.0);
    }
}

#[test]
fn single_pair_of_equal_vectors_has_zero_loss() {
    let z = from_rows(&[vec![0.3, -1.2, 2.0], vec![0.3, -1.2, 2.0]]);
    assert_eq!(pairwise_loss(&z, 0, 1, 0.1).unwrap(), 0.0);
}

#[test]
fn scaling_rows_by_five_keeps_pair_loss() {
    let mut r = rng(31);
    let z = random_tensor(&[6, 4], &mut r);
    let z5 = Tensor::new(vec![6, 4], z.data().iter().map(|v| 5.0 * v).collect()).unwrap();
    for (i, j) in [(0, 1), (3, 2), (4, 5)] {
        let a = pairwise_loss(&z, i, j, 0.3).unwrap();
        assert!((a - pairwise_loss(&z5, i, j, 0.3).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn similarity_over_temperature_near_400() {
    let z = from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
    let l = batch_loss(&z, 1.0 / 400.0).unwrap();
    assert!(l.is_finite() && l >= 0.0 && l < 1e-100);
}
