//! Autodiff against central finite differences, in f64 with h = 1e-5.

mod common;

use common::checks::{self, Worst, TOL};

fn expect(name: &str, (err, at): Worst) {
    assert!(err <= TOL, "{name}: max relative error {err:e} at {at}");
}

#[test]
fn raa_forward_gradients() {
    expect("raa_forward", checks::raa_forward());
}

#[test]
fn afp_stage_gradients_spatial() {
    expect("afp_stage", checks::afp_stage_spatial());
}

#[test]
fn afp_stage_gradients_tokens() {
    expect("afp_stage", checks::afp_stage_tokens());
}

#[test]
fn hcl_gradients() {
    expect("hcl", checks::hcl_loss());
}

#[test]
fn kl_gradients() {
    expect("kl_distill", checks::kl());
}

#[test]
fn reg_gradients() {
    expect("reg_loss", checks::reg());
}

#[test]
fn full_step_loss_gradients() {
    expect("train_step", checks::train_step_loss());
}
