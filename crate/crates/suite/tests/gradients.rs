use streamconv_suite::gradcheck::*;

fn assert_all(checked: Checked) {
    for (what, o) in checked {
        assert!(o.passed(), "{what}: worst {:.3e} at {} over {} entries", o.worst, o.at, o.checked);
    }
}

#[test]
fn encoder_cross_entropy() {
    assert_all(encoder_semantic_ce());
}

#[test]
fn encoder_intermediate_regression() {
    assert_all(encoder_intermediate_mse());
}

#[test]
fn backbone_acoustic_cross_entropy() {
    assert_all(backbone_term(Term::Acoustic));
}

#[test]
fn backbone_semantic_cross_entropy() {
    assert_all(backbone_term(Term::Semantic));
}

#[test]
fn backbone_teacher_foresight() {
    assert_all(backbone_term(Term::Foresight));
}

#[test]
fn finetune_graph_end_to_end() {
    assert_all(end_to_end());
}
