mod common;

use common::checks::gradient_suite;

#[test]
fn building_blocks_match_central_differences() {
    let suite = gradient_suite();
    let failing: Vec<String> = suite
        .iter()
        .filter(|(_, r)| !(r.max_rel < 1e-4) || r.checked == 0)
        .map(|(name, r)| format!("{name}: {:.3e} over {} probes", r.max_rel, r.checked))
        .collect();
    assert!(failing.is_empty(), "{failing:#?}");
}
