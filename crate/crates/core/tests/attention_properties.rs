mod common;

use common::{cross_region_mass, locality_violations, neutral_pair_error, zero_offset_error};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn neutral_block_pair_is_identity(seed in 0u64..1000, t in 1usize..3, side in prop::sample::select(vec![4usize, 6, 8])) {
        prop_assert!(neutral_pair_error(seed, t, side) <= 1e-12);
    }

    #[test]
    fn zero_offsets_match_plain_window_cross_attention(seed in 0u64..1000, heads in prop::sample::select(vec![1usize, 2, 4])) {
        prop_assert!(zero_offset_error(seed, heads) <= 1e-6);
    }
}

#[test]
fn shifted_attention_stays_inside_pre_shift_regions() {
    for seed in [3, 4] {
        let m = cross_region_mass(seed);
        assert!(m <= 1e-6, "cross-region mass {m}");
    }
}

#[test]
fn updates_inside_a_window_ignore_other_windows() {
    for seed in [5, 6] {
        assert_eq!(locality_violations(seed), Vec::<usize>::new());
    }
}
