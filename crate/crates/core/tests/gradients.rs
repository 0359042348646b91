//! Every case of the finite-difference suite at 1e-4 (the full-model spot
//! check at 1e-3), 20 random instances each.

use amda_core::gradsuite::{cases, DEFAULT_INSTANCES, DEFAULT_TOL};

fn check(name: &str) {
    let case = cases().into_iter().find(|c| c.name == name).expect("known case");
    let r = case.run(DEFAULT_TOL, DEFAULT_INSTANCES).unwrap();
    assert!(
        r.passed,
        "{name}: max rel err {:e} over {} entries (tol {:e})",
        r.max_rel_err, r.checked, r.tol
    );
}

#[test]
fn primitives() {
    for name in [
        "matmul",
        "add/sub/mul (broadcast)",
        "add_scalar/mul_scalar",
        "relu/sigmoid",
        "softmax (both axes)",
        "masked_mean",
        "cosine_similarity/normalize_rows",
        "conv1d",
        "bce_loss/mse_loss",
        "transpose/slice/concat/gather/mean",
        "dropout (fixed mask)",
    ] {
        check(name);
    }
}

#[test]
fn encoder_and_fusion() {
    check("encoder");
    check("fusion (F, F~)");
}

#[test]
fn supervised_loss() {
    check("L_sup");
    check("L_sup through fusion and head");
}

#[test]
fn adversarial_loss() {
    check("L_adv");
}

#[test]
fn alignment_loss() {
    check("L_align");
}

#[test]
fn reconstruction_loss() {
    check("L_recon");
}

#[test]
fn statistic_baselines() {
    check("mmd/coral");
}

#[test]
fn total_loss() {
    check("total loss (AMDA)");
}

#[test]
fn full_model_spot_check() {
    let case = cases().into_iter().find(|c| c.name == "full-model spot check").unwrap();
    let r = case.run(DEFAULT_TOL, DEFAULT_INSTANCES).unwrap();
    assert_eq!(r.tol, 1e-3);
    assert_eq!(r.checked, 10 * 20);
    assert!(r.passed, "max rel err {:e}", r.max_rel_err);
}

#[test]
fn suite_covers_every_case_once() {
    let names: Vec<_> = cases().iter().map(|c| c.name).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
}
