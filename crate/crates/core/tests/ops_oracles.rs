mod common;

use cbhir_core::ops::{self, Padding};
use cbhir_core::Tensor;
use common::{naive_conv, naive_gmp, naive_max_pool};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_naive(
        h in 3usize..10, w in 3usize..10, c in 1usize..4, f in 1usize..4,
        k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, same in any::<bool>(), seed in any::<u64>(),
    ) {
        let padding = if same { Padding::Same } else { Padding::Valid };
        prop_assume!(same || (k <= h && k <= w));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::random_uniform(&[h, w, c], -1.0, 1.0, &mut rng);
        let kern = Tensor::random_uniform(&[k, k, c, f], -1.0, 1.0, &mut rng);
        let b = Tensor::random_uniform(&[f], -1.0, 1.0, &mut rng);
        let got = ops::conv2d(&x, &kern, &b, stride, padding).unwrap();
        let pad = if same { (k - 1) / 2 } else { 0 };
        let (want, oh, ow) = naive_conv(x.data(), (h, w, c), kern.data(), (k, k, f), b.data(), stride, pad);
        prop_assert_eq!(got.shape(), &[oh, ow, f]);
        prop_assert!(close(got.data(), &want, 1e-12));
    }

    #[test]
    fn pool_matches_naive(h in 2usize..10, w in 2usize..10, c in 1usize..4, window in 1usize..3, stride in 1usize..3, seed in any::<u64>()) {
        prop_assume!(window <= h && window <= w);
        let x = Tensor::random_uniform(&[h, w, c], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let got = ops::max_pool2d(&x, window, stride).unwrap();
        let (want, oh, ow) = naive_max_pool(x.data(), (h, w, c), window, stride);
        prop_assert_eq!(got.shape(), &[oh, ow, c]);
        prop_assert!(close(got.data(), &want, 1e-12));
    }

    #[test]
    fn gmp_matches_naive(h in 1usize..8, w in 1usize..8, c in 1usize..6, seed in any::<u64>()) {
        let x = Tensor::random_uniform(&[h, w, c], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let got = ops::global_max_pool(&x).unwrap();
        prop_assert!(close(got.data(), &naive_gmp(x.data(), c), 0.0));
    }

    #[test]
    fn relu_matches_definition(v in prop::collection::vec(-5.0f64..5.0, 1..64)) {
        let n = v.len();
        let got = ops::relu(&Tensor::new(vec![n], v.clone()).unwrap());
        let want: Vec<f64> = v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        prop_assert_eq!(got.data(), &want[..]);
    }

    #[test]
    fn inference_dropout_is_identity(v in prop::collection::vec(-5.0f64..5.0, 1..64), rate in 0.0f64..0.9) {
        let n = v.len();
        let x = Tensor::new(vec![n], v).unwrap();
        let out = ops::dropout(&x, rate, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(out, x);
    }
}

#[test]
fn pool_tie_takes_first_index() {
    let x = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let (_, argmax) = ops::max_pool2d_with_indices(&x, 2, 2).unwrap();
    assert_eq!(argmax, vec![0]);
    let (_, argmax) = ops::global_max_pool_with_indices(&x).unwrap();
    assert_eq!(argmax, vec![0]);
}
