#[path = "support/gradcases.rs"]
mod gradcases;

use gradcases::{check_op, OPS, TOLERANCE};

#[test]
fn every_op_matches_central_differences() {
    let mut failures = Vec::new();
    for op in OPS {
        let rep = check_op(op).unwrap_or_else(|e| panic!("{op}: {e}"));
        if rep.max_rel_error >= TOLERANCE {
            failures.push(format!("{op}: {:.3e} at {:?}", rep.max_rel_error, rep.worst));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn a_wrong_gradient_is_detected() {
    use transfer_core::autodiff::check::check_gradients;
    use transfer_core::Tensor;
    // The tape sees relu but the perturbed function crosses the kink at 0.
    let x = Tensor::new(&[1], vec![1e-6]).unwrap();
    let rep = check_gradients(&[x], |g, v| Ok(g.relu(v[0])), 1e-5).unwrap();
    assert!(rep.max_rel_error > 0.1);
}

