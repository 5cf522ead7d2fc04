mod checks;
mod oracles;

use proptest::prelude::*;
use qfl_core::corpus::tessellate::synthetic_slide;
use qfl_core::corpus::tessellate;
use qfl_core::rng;

#[test]
fn matches_pixel_count_oracle() {
    let c = checks::tessellation_check(500);
    assert_eq!(c.mismatches, 0);
    assert!(c.boundary_kept, "exactly 5% coverage must be kept");
    assert!(c.below_boundary_dropped);
    assert!(c.exclusion_rejects);
}

proptest! {
    #[test]
    fn synthetic_slides_match_the_oracle(seed in any::<u64>()) {
        let s = synthetic_slide(&mut rng::rng_from(seed), 8, 8, 0.05);
        let got: Vec<(usize, usize)> = tessellate(&s).unwrap().iter().map(|c| (c.y, c.x)).collect();
        prop_assert_eq!(got, oracles::tessellation(&s));
    }
}
