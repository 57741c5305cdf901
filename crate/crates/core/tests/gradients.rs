//! Reverse-mode gradients against central finite differences in f64.
//! Every target runs 20 seeded cases; inputs and parameters are both checked.

mod common;

use common::{collect, Target, CASES};

fn run_group(group: fn(&mut Vec<Target>)) {
    for target in collect(group) {
        match target.check() {
            Ok(worst) => println!("{}: {CASES} cases, max relative error {worst:.2e}", target.name),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn elementwise_binary() {
    run_group(common::elementwise_binary);
}

#[test]
fn elementwise_unary() {
    run_group(common::elementwise_unary);
}

#[test]
fn reductions() {
    run_group(common::reductions);
}

#[test]
fn shape_ops() {
    run_group(common::shape_ops);
}

#[test]
fn matmul() {
    run_group(common::matmul);
}

#[test]
fn convolution_and_pooling() {
    run_group(common::convolution_and_pooling);
}

#[test]
fn batch_norm_primitives() {
    run_group(common::batch_norm_primitives);
}

#[test]
fn conv_layer() {
    run_group(common::conv_layer);
}

#[test]
fn linear_layer() {
    run_group(common::linear_layer);
}

#[test]
fn batch_norm_layer() {
    run_group(common::batch_norm_layer);
}

#[test]
fn dropout_layer() {
    run_group(common::dropout_layer);
}

#[test]
fn residual_blocks() {
    run_group(common::residual_blocks);
}

#[test]
fn networks() {
    run_group(common::networks);
}

#[test]
fn distillation_losses() {
    run_group(common::distillation_losses);
}

#[test]
fn adversarial_losses() {
    run_group(common::adversarial_losses);
}
