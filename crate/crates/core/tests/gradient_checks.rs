//! Central finite-difference checks for every trainable composite:
//! encoder, decoder, both output heads, the gating network, the appearance
//! loss and the set-prediction loss. The shared harness lives in
//! `common::gradcheck`; the acceptance suite reruns it as criterion 1.

mod common;

use common::gradcheck::{check_with_retry, COMPOSITES, TOL};
use mqt_core::grad::{Tape, Tensor, Var};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run_composite(name: &str) {
    for seed in 0..10 {
        if let Err(report) = check_with_retry(name, seed, TOL) {
            panic!(
                "{}: seed {} max_rel_err {} at coord {} (nan: {:?})",
                name, seed, report.max_rel_err, report.worst_coord, report.nan_coords
            );
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    run_composite("encoder");
}

#[test]
fn decoder_gradients_match_finite_differences() {
    run_composite("decoder");
}

#[test]
fn bbox_head_gradients_match_finite_differences() {
    run_composite("bbox head");
}

#[test]
fn appearance_head_gradients_match_finite_differences() {
    run_composite("appearance head");
}

#[test]
fn gating_network_gradients_match_finite_differences() {
    run_composite("gating network");
}

#[test]
fn appearance_loss_gradients_match_finite_differences() {
    run_composite("appearance loss");
}

#[test]
fn set_prediction_loss_gradients_match_finite_differences() {
    run_composite("set-prediction loss");
}

#[test]
fn every_composite_is_covered() {
    assert_eq!(COMPOSITES.len(), 7);
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad(a·f + b·g) == a·grad(f) + b·grad(g)
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let x0 = Tensor::from_vec((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let a = rng.gen_range(-2.0..2.0);
        let b = rng.gen_range(-2.0..2.0);

        let f = |x: &Var| x.mul(x).sum();
        let g = |x: &Var| x.sigmoid().l2_normalize().sum();

        let grad_of = |h: &dyn Fn(&Var) -> Var| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let loss = h(&x);
            tape.backward(&loss).unwrap().wrt(&x).unwrap().data().to_vec()
        };

        let combined = grad_of(&|x| f(x).scale(a).add(&g(x).scale(b)));
        let gf = grad_of(&|x| f(x));
        let gg = grad_of(&|x| g(x));
        for i in 0..6 {
            let expect = a * gf[i] + b * gg[i];
            assert!(
                (combined[i] - expect).abs() < 1e-10,
                "coord {}: {} vs {}",
                i,
                combined[i],
                expect
            );
        }
    }
}
