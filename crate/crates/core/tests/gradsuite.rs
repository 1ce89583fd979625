use ptycho::gradsuite::{all_passed, report_text, run_suite, SuiteConfig};

#[test]
fn every_op_and_loss_term_matches_central_differences() {
    let cases = run_suite(&SuiteConfig { model: false, ..SuiteConfig::default() }).unwrap();
    assert!(cases.len() > 40);
    assert!(all_passed(&cases), "{}", report_text(&cases));
}

#[test]
fn suite_passes_for_other_seeds() {
    for seed in [1, 2] {
        let cases = run_suite(&SuiteConfig { seed, model: false, ..SuiteConfig::default() }).unwrap();
        assert!(all_passed(&cases), "{}", report_text(&cases));
    }
}

#[test]
fn report_lists_every_case() {
    let cases = run_suite(&SuiteConfig { model: false, ..SuiteConfig::default() }).unwrap();
    let text = report_text(&cases);
    assert_eq!(text.lines().count(), cases.len() + 1);
    assert!(text.contains("loss.circular.c_pre"));
    assert!(text.contains("conv2d.s2p2.weight"));
}
