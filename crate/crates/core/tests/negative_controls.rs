//! Deliberately broken integrators must be caught by the ensemble tests.

use qndsim::analysis::{born_test, martingale_test, EnsembleSummary, COLLAPSE_THRESHOLD};
use qndsim::ensemble::run_ensemble;
use qndsim::error::Error;
use qndsim::model::{Channel, ChannelKind, QndModel};
use qndsim::qdyn::{simulate_q_diag_mutated, Mutation, SimOptions};
use statrs::distribution::{ContinuousCDF, Normal};

const Q0: [f64; 2] = [0.3, 0.7];
const CHECKPOINTS: [f64; 3] = [5.0, 10.0, 25.0];

struct Outcome {
    born_p: f64,
    martingale_p: f64,
}

fn run(mutation: Mutation, seed: u64) -> Outcome {
    let m = QndModel::with_channels(2, vec![Channel::real(ChannelKind::Counting, &[2.0, 1.0])]).unwrap();
    let trajs = run_ensemble(seed, 2000, |_, s| {
        simulate_q_diag_mutated(&m, &Q0, 25.0, 1e-3, s, &SimOptions::light(1000), mutation)
    })
    .unwrap();
    let s = EnsembleSummary::from_trajectories(&trajs, &CHECKPOINTS, COLLAPSE_THRESHOLD).unwrap();
    let born_p = match born_test(&s, &Q0) {
        Ok(b) => b.p_value,
        Err(Error::TooManyUnresolved { .. }) => 0.0,
        Err(e) => panic!("{e}"),
    };
    let mart = martingale_test(&s, &Q0).unwrap();
    Outcome { born_p, martingale_p: two_sided_p(mart.max_abs_z) }
}

fn two_sided_p(z: f64) -> f64 {
    2.0 * Normal::standard().sf(z.abs())
}

#[test]
fn unmutated_integrator_passes() {
    let o = run(Mutation::None, 8_000_000);
    assert!(o.born_p > 1e-4 && o.martingale_p > 1e-4, "born p {}, martingale p {}", o.born_p, o.martingale_p);
}

#[test]
fn squared_jump_factor_is_detected() {
    let o = run(Mutation::SquaredJumpFactor, 8_100_000);
    assert!(o.born_p < 1e-4 || o.martingale_p < 1e-4, "born p {}, martingale p {}", o.born_p, o.martingale_p);
}

#[test]
fn dropped_compensator_is_detected() {
    let o = run(Mutation::DroppedCompensator, 8_200_000);
    assert!(o.born_p < 1e-4 || o.martingale_p < 1e-4, "born p {}, martingale p {}", o.born_p, o.martingale_p);
}
