//! Tape gradients against central differences on randomly assembled graphs.

mod common;

use std::time::Instant;

use common::{check_graphs, random_graph, HID, IN};
use unlearn_core::numerics::{finite_diff_check_frozen, Tensor};

#[test]
fn hundred_random_graphs_with_detach() {
    let start = Instant::now();
    let (worst, detached) = check_graphs(100, 1e-4).unwrap();
    assert!(detached >= 20, "only {detached} graphs exercised detach");
    assert!(start.elapsed().as_secs() < 60);
    println!("max relative error {worst:.3e}");
}

#[test]
fn detach_without_frozen_copy_is_caught() {
    // Differentiating through a detach of live weights must disagree with
    // finite differences; otherwise the check above proves nothing.
    let (p, _) = random_graph(3);
    let report = finite_diff_check_frozen(
        &p,
        |t, live, _| {
            let x = t.input(Tensor::matrix(2, IN, vec![0.3, -0.2, 0.9, 1.1, 0.4, -0.7]).unwrap())?;
            let w1 = t.param(live, live.id("w1").unwrap())?;
            let b1 = t.param(live, live.id("b1").unwrap())?;
            let h = t.affine(x, w1, b1)?;
            let d = t.detach(h)?;
            let prod = t.mul(h, d)?;
            let zero = t.input(Tensor::zeros(&[2, HID]))?;
            t.mse(prod, zero)
        },
        1e-4,
    )
    .unwrap();
    assert!(!report.passed());
}

