use std::sync::Arc;

use heatlens::heat::hco_apply_tensor;
use heatlens::masking::{split_frequency, MaskSpec, RateSide};
use heatlens::netpbm;
use heatlens::spectral::{SpectralPlan, TransformPath};
use heatlens::tensor::{read_tensor, write_tensor};
use heatlens::{DType, Tensor};
use proptest::prelude::*;

fn image(max_side: usize) -> impl Strategy<Value = Tensor> {
    (1usize..=3, 2usize..=max_side, 2usize..=max_side).prop_flat_map(|(c, m, n)| {
        prop::collection::vec(-4.0f64..4.0, c * m * n)
            .prop_map(move |v| Tensor::new(&[c, m, n], v).unwrap())
    })
}

fn pair(max_side: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    image(max_side).prop_flat_map(|x| {
        let shape = x.shape().to_vec();
        let len = x.data().len();
        (
            Just(x),
            prop::collection::vec(-4.0f64..4.0, len)
                .prop_map(move |v| Tensor::new(&shape, v).unwrap()),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn paths_agree((x, y) in pair(20), a in -3.0f64..3.0) {
        let (m, n) = (x.shape()[1], x.shape()[2]);
        let dense = SpectralPlan::new(m, n, TransformPath::Matmul).unwrap();
        let fast = SpectralPlan::new(m, n, TransformPath::Fft).unwrap();
        prop_assert!(dense.dct2(&x).unwrap().max_abs_diff(&fast.dct2(&x).unwrap()) < 1e-11);
        let combo = x.zip_map(&y, |p, q| a * p + q).unwrap();
        let lhs = dense.dct2(&combo).unwrap();
        let rhs = dense.dct2(&x).unwrap().zip_map(&dense.dct2(&y).unwrap(), |p, q| a * p + q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-11);
    }

    #[test]
    fn heat_is_linear_and_contracting((x, y) in pair(16), k in 0.0f64..3.0, t in 0.0f64..2.0) {
        let plan = Arc::new(SpectralPlan::new(x.shape()[1], x.shape()[2], TransformPath::Matmul).unwrap());
        let hx = hco_apply_tensor(&plan, &x, k, t).unwrap();
        let hy = hco_apply_tensor(&plan, &y, k, t).unwrap();
        let sum = hco_apply_tensor(&plan, &x.zip_map(&y, |p, q| p + q).unwrap(), k, t).unwrap();
        prop_assert!(sum.max_abs_diff(&hx.zip_map(&hy, |p, q| p + q).unwrap()) < 1e-11);
        prop_assert!(hx.norm_l2() <= x.norm_l2() * (1.0 + 1e-12));
        prop_assert!((hx.mean() - x.mean()).abs() < 1e-12);
    }

    #[test]
    fn zero_time_is_identity(x in image(12), k in 0.0f64..5.0) {
        let plan = Arc::new(SpectralPlan::new(x.shape()[1], x.shape()[2], TransformPath::Fft).unwrap());
        prop_assert!(hco_apply_tensor(&plan, &x, k, 0.0).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn mask_split_partitions(x in image(24), rate in 0.0f64..=1.0, low in any::<bool>(), seed in any::<u64>()) {
        let (m, n) = (x.shape()[1], x.shape()[2]);
        let side = if low { RateSide::Low } else { RateSide::High };
        let spec = MaskSpec::for_rate(m, n, rate, side, seed).unwrap();
        let plan = SpectralPlan::new(m, n, TransformPath::Matmul).unwrap();
        let (lo, hi) = split_frequency(&plan, &x, &spec).unwrap();
        prop_assert!(lo.zip_map(&hi, |a, b| a + b).unwrap().max_abs_diff(&x) < 1e-10);
        let lm = spec.low_mask();
        let hm = spec.high_mask();
        prop_assert!(lm.zip_map(&hm, |a, b| a + b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rsvh_round_trip(x in image(8), f32_storage in any::<bool>()) {
        let x = if f32_storage { x.to_dtype(DType::F32) } else { x };
        let mut bytes = Vec::new();
        write_tensor(&mut bytes, &x).unwrap();
        let back = read_tensor(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn netpbm_round_trip_on_grid(c in prop::sample::select(vec![1usize, 3]), m in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let v: Vec<f64> = (0..c * m * n)
            .map(|i| (heatlens::rng::derive_seed(seed, &[i as u64]) % 256) as f64 / 255.0)
            .collect();
        let x = Tensor::new(&[c, m, n], v).unwrap();
        let (bytes, clamped) = netpbm::encode(&x).unwrap();
        prop_assert!(!clamped);
        let back = netpbm::decode(&bytes).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-12);
    }
}
