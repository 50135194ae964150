mod common;

use common::*;
use kags::gradcheck::suite::Widths;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>()) {
        let (sum_err, shift_err) = softmax_errors(seed);
        prop_assert!(sum_err < 1e-6, "row sum off by {sum_err}");
        prop_assert!(shift_err < 1e-6, "shift changed output by {shift_err}");
    }

    #[test]
    fn attention_weights_sum_to_one(seed in any::<u64>()) {
        let e = attention_row_sum_error(seed, &Widths::scaled());
        prop_assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn self_attention_follows_row_order(seed in any::<u64>()) {
        let e = self_attention_equivariance_error(seed, &Widths::scaled());
        prop_assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn cross_attention_ignores_key_order(seed in any::<u64>()) {
        let (kv, q) = cross_attention_errors(seed, &Widths::scaled());
        prop_assert!(kv < 1e-5, "key/value permutation moved output by {kv}");
        prop_assert!(q < 1e-5, "query permutation mismatch {q}");
    }

    #[test]
    fn pooling_ignores_position_order(seed in any::<u64>()) {
        let e = sop_spatial_error(seed, &Widths::scaled());
        prop_assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn group_pooling_ignores_image_order(seed in any::<u64>()) {
        let e = gsm_order_error(seed, &Widths::scaled());
        prop_assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn covariance_is_symmetric_psd(seed in any::<u64>(), h in 1usize..4, w in 1usize..4, c in 1usize..7) {
        let (asym, min_eig) = covariance_checks(seed, h, w, 8, c);
        prop_assert!(asym < 1e-6, "asymmetry {asym}");
        prop_assert!(min_eig >= -1e-6, "min eigenvalue {min_eig}");
    }
}

#[test]
fn covariance_at_scaled_widths() {
    let w = Widths::scaled();
    for seed in 0..5 {
        let (asym, min_eig) = covariance_checks(seed, w.grid.0, w.grid.1, w.d, w.reduced);
        assert!(asym < 1e-6 && min_eig >= -1e-6, "seed {seed}: {asym} {min_eig}");
    }
}
