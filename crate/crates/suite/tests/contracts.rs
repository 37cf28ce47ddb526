use streamconv_suite::contracts::*;

#[test]
fn sessions_match_batched_computation() {
    let (t, worst) = incremental_vs_batch(20, 4);
    assert!(t.passed(), "{}", t.summary());
    assert!(worst < LOGIT_TOL);
}

#[test]
fn fresh_adapters_are_exact_identities() {
    let t = lora_zero_init(8, 5);
    assert!(t.passed(), "{}", t.summary());
}

#[test]
fn merged_adapters_match_the_adapter_pass() {
    let (t, worst) = lora_merge(8, 6);
    assert!(t.passed(), "{}", t.summary());
    assert!(worst < MERGE_TOL);
}

#[test]
fn adapters_cover_exactly_query_key_value() {
    let t = lora_structure();
    assert!(t.passed(), "{}", t.summary());
}
