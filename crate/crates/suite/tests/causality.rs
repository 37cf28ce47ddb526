use streamconv_suite::causality::*;

#[test]
fn encoder_rows_ignore_frames_past_their_window() {
    let t = encoder_delay(200, 1);
    assert!(t.passed(), "{}", t.summary());
}

#[test]
fn backbone_positions_are_causal() {
    let t = lm_positions(12, 2);
    assert!(t.passed(), "{}", t.summary());
}

#[test]
fn chunking_never_changes_greedy_output() {
    let t = chunk_invariance(40, 3);
    assert!(t.passed(), "{}", t.summary());
}
