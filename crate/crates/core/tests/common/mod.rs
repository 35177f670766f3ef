#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpf_core::armath::packed_len;
use tpf_core::corpus::{Batch, Corpus, Triplet};
use tpf_core::state::{ArBlock, CovStructure, DeltaMode, DocParams, HCov, Hyperparams, ModelKind, VariationalState};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random counts with every period populated and every document non-empty.
pub fn random_corpus(r: &mut ChaCha8Rng, d: usize, v: usize, t: usize, authors: Option<usize>) -> Corpus {
    let mut trip = Vec::new();
    for doc in 0..d {
        let forced = r.random_range(0..v);
        for term in 0..v {
            let c: u32 = if term == forced { r.random_range(1..5) } else if r.random_bool(0.4) { r.random_range(1..4) } else { 0 };
            if c > 0 {
                trip.push(Triplet { doc, term, count: c });
            }
        }
    }
    let periods = (0..d).map(|i| i % t).collect();
    let auth = authors.map(|_| (0..d).map(|i| i / t).collect());
    Corpus::from_parts(&trip, periods, auth, (0..v).map(|i| format!("w{i}")).collect()).unwrap()
}

pub fn random_block(r: &mut ChaCha8Rng, n: usize, t: usize, cov: CovStructure, mode: DeltaMode) -> ArBlock {
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * r.random::<f64>();
    let loc = (0..n * t).map(|_| u(-1.5, 0.5)).collect();
    let cov = match cov {
        CovStructure::Diagonal => HCov::Diagonal { var: (0..n * t).map(|_| u(0.05, 0.6)).collect() },
        CovStructure::General => HCov::General {
            log_diag: (0..n * t).map(|_| u(-1.5, -0.3)).collect(),
            lower: (0..n * packed_len(t)).map(|_| u(-0.3, 0.3)).collect(),
        },
    };
    let (delta_loc, delta_var) = match mode {
        DeltaMode::FixedOne => (vec![1.0; n], vec![0.0; n]),
        _ => ((0..n).map(|_| u(-0.8, 0.9)).collect(), (0..n).map(|_| u(0.01, 0.2)).collect()),
    };
    ArBlock {
        n,
        t,
        loc,
        cov,
        mu_loc: (0..n).map(|_| u(-1.0, 0.2)).collect(),
        mu_var: (0..n).map(|_| u(0.01, 0.3)).collect(),
        tau_shp: (0..n).map(|_| u(0.5, 4.0)).collect(),
        tau_rte: (0..n).map(|_| u(0.3, 3.0)).collect(),
        delta_loc,
        delta_var,
        delta_mode: mode,
    }
}

pub fn random_state(r: &mut ChaCha8Rng, c: &Corpus, k: usize, cov: CovStructure, mode: DeltaMode) -> VariationalState {
    let (d, v, t) = (c.num_docs(), c.vocab_size(), c.num_periods());
    let terms = random_block(r, k * v, t, cov, mode);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * r.random::<f64>();
    VariationalState {
        kind: ModelKind::Tpf,
        d,
        v,
        k,
        t,
        a: 0,
        docs: DocParams::Gamma {
            theta_shp: (0..d * k).map(|_| u(0.3, 3.0)).collect(),
            theta_rte: (0..d * k).map(|_| u(0.5, 3.0)).collect(),
            xi_shp: (0..d).map(|_| u(0.5, 3.0)).collect(),
            xi_rte: (0..d).map(|_| u(0.5, 3.0)).collect(),
        },
        terms,
    }
}

pub fn random_dpf_state(r: &mut ChaCha8Rng, c: &Corpus, k: usize) -> VariationalState {
    let (d, v, t, a) = (c.num_docs(), c.vocab_size(), c.num_periods(), c.num_authors());
    let terms = random_block(r, k * v, t, CovStructure::Diagonal, DeltaMode::FixedOne);
    let g = random_block(r, a * k, t, CovStructure::Diagonal, DeltaMode::FixedOne);
    VariationalState { kind: ModelKind::Dpf, d, v, k, t, a, docs: DocParams::Author(g), terms }
}

pub fn hyper(k: usize, mode: DeltaMode, cov: CovStructure) -> Hyperparams {
    let mut hp = Hyperparams::new(k);
    hp.delta_mode = mode;
    hp.cov_structure = cov;
    hp
}

pub fn full_batch(c: &Corpus) -> Batch {
    Batch { doc_ids: (0..c.num_docs()).collect(), scale: 1.0 }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

/// Maximise a unimodal function on `[lo, hi]` by golden-section search.
pub fn golden_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iters {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}
