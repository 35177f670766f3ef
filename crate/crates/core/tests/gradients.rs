mod common;

use common::*;
use tpf_core::advi::{h_gradient, h_objective, params, set_params};
use tpf_core::corpus::Batch;
use tpf_core::state::{CovStructure, DeltaMode, VariationalState};
use tpf_core::Corpus;

fn max_rel_fd_error(state: &VariationalState, c: &Corpus, batch: &Batch) -> f64 {
    let grad = h_gradient(state, c, batch).unwrap();
    let p0 = params(state);
    let mut s = state.clone();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] += step;
        set_params(&mut s, &p).unwrap();
        let up = h_objective(&s, c, batch).unwrap();
        p[i] -= 2.0 * step;
        set_params(&mut s, &p).unwrap();
        let down = h_objective(&s, c, batch).unwrap();
        let fd = (up - down) / (2.0 * step);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-2);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences_diagonal() {
    let mut r = rng(11);
    let c = random_corpus(&mut r, 20, 15, 4, None);
    for mode in [DeltaMode::Free, DeltaMode::FixedOne, DeltaMode::Truncated] {
        let s = random_state(&mut r, &c, 3, CovStructure::Diagonal, mode);
        let err = max_rel_fd_error(&s, &c, &full_batch(&c));
        assert!(err <= 1e-4, "{mode:?}: {err}");
    }
}

#[test]
fn gradient_matches_finite_differences_general() {
    let mut r = rng(12);
    let c = random_corpus(&mut r, 20, 15, 4, None);
    let s = random_state(&mut r, &c, 3, CovStructure::General, DeltaMode::Free);
    let batch = Batch { doc_ids: vec![3, 7, 1, 18, 11], scale: 4.0 };
    let err = max_rel_fd_error(&s, &c, &batch);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn author_model_gradient_matches_finite_differences() {
    let mut r = rng(13);
    let c = random_corpus(&mut r, 12, 8, 3, Some(4));
    let s = random_dpf_state(&mut r, &c, 2);
    let err = max_rel_fd_error(&s, &c, &full_batch(&c));
    assert!(err <= 1e-4, "{err}");
}
