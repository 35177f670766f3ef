//! Gradient ascent on the AR sequences.
//!
//! The objective is the part of the ELBO that depends on the Gaussian
//! sequence parameters, with the data term of a batch scaled to the full
//! corpus. Gradients are analytic. Variances are optimised on the log scale
//! and general covariances through a Cholesky factor with log-diagonal, so
//! every step keeps the covariance positive definite.

use rayon::prelude::*;

use crate::armath::{packed_index, packed_len, quadratic_form_parts};
use crate::cavi::{doc_softmax, rate_sums};
use crate::corpus::{Batch, Corpus};
use crate::elbo::pairwise_sum;
use crate::error::{Result, TpfError};
use crate::state::{ArBlock, DocParams, FitConfig, HCov, VariationalState};

/// First and second moment accumulators of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step in the ascent direction.
pub fn adam_step(params: &mut [f64], grads: &[f64], adam: &mut AdamState, cfg: &FitConfig) -> Result<()> {
    if params.len() != grads.len() || adam.m.len() != params.len() {
        return Err(TpfError::arg(format!(
            "Adam shapes differ: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            adam.m.len()
        )));
    }
    adam.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(adam.step as i32);
    let c2 = 1.0 - b2.powi(adam.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * g;
        adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * g * g;
        let m_hat = adam.m[i] / c1;
        let v_hat = adam.v[i] / c2;
        params[i] += cfg.adam_alpha * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

fn block_param_len(b: &ArBlock) -> usize {
    let nt = b.n * b.t;
    match b.cov {
        HCov::Diagonal { .. } => 2 * nt,
        HCov::General { .. } => 2 * nt + b.n * packed_len(b.t),
    }
}

fn read_block(b: &ArBlock, out: &mut Vec<f64>) {
    out.extend_from_slice(&b.loc);
    match &b.cov {
        HCov::Diagonal { var } => out.extend(var.iter().map(|v| v.ln())),
        HCov::General { log_diag, lower } => {
            out.extend_from_slice(log_diag);
            out.extend_from_slice(lower);
        }
    }
}

fn write_block(b: &mut ArBlock, p: &[f64]) -> usize {
    let nt = b.n * b.t;
    b.loc.copy_from_slice(&p[..nt]);
    match &mut b.cov {
        HCov::Diagonal { var } => {
            for (v, s) in var.iter_mut().zip(&p[nt..2 * nt]) {
                *v = s.exp();
            }
            2 * nt
        }
        HCov::General { log_diag, lower } => {
            log_diag.copy_from_slice(&p[nt..2 * nt]);
            let np = lower.len();
            lower.copy_from_slice(&p[2 * nt..2 * nt + np]);
            2 * nt + np
        }
    }
}

/// Number of unconstrained sequence parameters: `h`, then `g` for the
/// author model.
pub fn param_len(state: &VariationalState) -> usize {
    let g = match &state.docs {
        DocParams::Author(g) => block_param_len(g),
        DocParams::Gamma { .. } => 0,
    };
    block_param_len(&state.terms) + g
}

/// Flattened unconstrained parameters: per block, locations, then log
/// variances (diagonal) or log-diagonal and packed lower factor entries.
pub fn params(state: &VariationalState) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_len(state));
    read_block(&state.terms, &mut out);
    if let DocParams::Author(g) = &state.docs {
        read_block(g, &mut out);
    }
    out
}

pub fn set_params(state: &mut VariationalState, p: &[f64]) -> Result<()> {
    if p.len() != param_len(state) {
        return Err(TpfError::arg("parameter vector has the wrong length"));
    }
    let used = write_block(&mut state.terms, p);
    if let DocParams::Author(g) = &mut state.docs {
        write_block(g, &p[used..]);
    }
    Ok(())
}

/// Batch statistics the data term depends on.
struct DataStats {
    objective: f64,
    /// Count-weighted proportions per `h` entry.
    n_h: Vec<f64>,
    /// Expected rate per `h` entry.
    m_h: Vec<f64>,
    n_g: Vec<f64>,
    m_g: Vec<f64>,
}

fn data_stats(state: &VariationalState, corpus: &Corpus, batch: &Batch) -> Result<DataStats> {
    let (k_n, v_n, t_n) = (state.k, state.v, state.t);
    let rates = rate_sums(&state.terms, k_n, v_n);
    struct DocOut {
        phi: Vec<f64>,
        lse_term: f64,
        rate_term: f64,
        mean: Vec<f64>,
    }
    let rows: Vec<DocOut> = batch
        .doc_ids
        .par_iter()
        .map(|&d| {
            let t = corpus.period_of(d);
            let (elog, mean) = state.doc_moments(corpus, d);
            let (ts, cs) = corpus.doc(d);
            let mut phi = Vec::with_capacity(ts.len() * k_n);
            let lse = doc_softmax(&elog, &state.terms.loc, v_n, t_n, t, ts, &mut phi);
            let lse_term = cs.iter().zip(&lse).map(|(&y, l)| y as f64 * l).sum();
            let rate_term = (0..k_n).map(|k| mean[k] * rates[k * t_n + t]).sum();
            DocOut {
                phi,
                lse_term,
                rate_term,
                mean,
            }
        })
        .collect();

    let mut n_h = vec![0.0; k_n * v_n * t_n];
    let mut theta_sums = vec![0.0; k_n * t_n];
    let author = matches!(state.docs, DocParams::Author(_));
    let (mut n_g, mut m_g) = if author {
        (vec![0.0; state.a * k_n * t_n], vec![0.0; state.a * k_n * t_n])
    } else {
        (Vec::new(), Vec::new())
    };
    let mut doc_vals = Vec::with_capacity(rows.len());
    for (&d, row) in batch.doc_ids.iter().zip(&rows) {
        let t = corpus.period_of(d);
        let (ts, cs) = corpus.doc(d);
        for (j, (&v, &y)) in ts.iter().zip(cs).enumerate() {
            for k in 0..k_n {
                let w = y as f64 * row.phi[j * k_n + k];
                n_h[(k * v_n + v as usize) * t_n + t] += w;
                if author {
                    let a = corpus.authors().expect("author ids")[d];
                    n_g[(a * k_n + k) * t_n + t] += w;
                }
            }
        }
        for k in 0..k_n {
            theta_sums[k * t_n + t] += row.mean[k];
            if author {
                let a = corpus.authors().expect("author ids")[d];
                m_g[(a * k_n + k) * t_n + t] += row.mean[k] * rates[k * t_n + t];
            }
        }
        doc_vals.push(row.lse_term - row.rate_term);
    }
    let beta = state.terms.exp_means();
    let mut m_h = vec![0.0; k_n * v_n * t_n];
    for k in 0..k_n {
        for v in 0..v_n {
            for t in 0..t_n {
                let idx = (k * v_n + v) * t_n + t;
                m_h[idx] = theta_sums[k * t_n + t] * beta[idx];
            }
        }
    }
    let objective = batch.scale * pairwise_sum(&doc_vals);
    if !objective.is_finite() {
        return Err(TpfError::numeric("non-finite data term in the sequence objective"));
    }
    Ok(DataStats {
        objective,
        n_h,
        m_h,
        n_g,
        m_g,
    })
}

/// `-1/2 sum E tau * E quad + 1/2 sum log|Sigma|` over all sequences of a block.
fn block_prior_objective(b: &ArBlock, name: &str) -> Result<f64> {
    let vals: Vec<Result<f64>> = (0..b.n)
        .into_par_iter()
        .map(|i| {
            let view = b.cov_view(i);
            let quad = quadratic_form_parts(b.seq(i), view, b.mu_loc[i], b.mu_var[i], b.delta_moments(i));
            let val = -0.5 * b.e_tau(i) * quad + 0.5 * view.log_det()?;
            if !val.is_finite() {
                return Err(TpfError::numeric(format!("non-finite prior term for {name} sequence {i}")));
            }
            Ok(val)
        })
        .collect();
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    Ok(pairwise_sum(&vals))
}

/// Sequence-dependent part of the ELBO with the batch data term scaled by
/// `D / |B|`.
pub fn h_objective(state: &VariationalState, corpus: &Corpus, batch: &Batch) -> Result<f64> {
    let stats = data_stats(state, corpus, batch)?;
    let mut total = stats.objective + block_prior_objective(&state.terms, "h")?;
    if let DocParams::Author(g) = &state.docs {
        total += block_prior_objective(g, "g")?;
    }
    Ok(total)
}

/// Gradient for one block given per-entry data statistics.
fn block_gradient(b: &ArBlock, n: &[f64], m: &[f64], scale: f64) -> Vec<f64> {
    let t_n = b.t;
    let p = packed_len(t_n);
    let per_seq: Vec<(Vec<f64>, Vec<f64>)> = (0..b.n)
        .into_par_iter()
        .map(|i| {
            let dm = b.delta_moments(i);
            let e_tau = b.e_tau(i);
            let diag = |t: usize| if t + 1 < t_n { 1.0 + dm.second } else { 1.0 };
            let x: Vec<f64> = b.seq(i).iter().map(|h| h - b.mu_loc[i]).collect();
            let base = i * t_n;
            let mut g_loc = Vec::with_capacity(t_n);
            for t in 0..t_n {
                let mut px = diag(t) * x[t];
                if t > 0 {
                    px -= dm.mean * x[t - 1];
                }
                if t + 1 < t_n {
                    px -= dm.mean * x[t + 1];
                }
                g_loc.push(scale * (n[base + t] - m[base + t]) - e_tau * px);
            }
            let g_cov = match &b.cov {
                HCov::Diagonal { var } => (0..t_n)
                    .map(|t| {
                        let s = var[base + t];
                        -0.5 * scale * m[base + t] * s - 0.5 * e_tau * diag(t) * s + 0.5
                    })
                    .collect(),
                HCov::General { .. } => {
                    let crate::armath::CovView::Factor(f) = b.cov_view(i) else {
                        unreachable!()
                    };
                    let l = |r: usize, c: usize| if r < t_n { f.entry(r, c) } else { 0.0 };
                    let mut out = vec![0.0; t_n + p];
                    for t in 0..t_n {
                        for j in 0..=t {
                            let mut pl = diag(t) * l(t, j);
                            if t > 0 {
                                pl -= dm.mean * l(t - 1, j);
                            }
                            pl -= dm.mean * l(t + 1, j);
                            let mut g = -scale * m[base + t] * l(t, j) - e_tau * pl;
                            if j == t {
                                g = g * l(t, t) + 1.0;
                                out[t] = g;
                            } else {
                                out[t_n + packed_index(t, j)] = g;
                            }
                        }
                    }
                    out
                }
            };
            (g_loc, g_cov)
        })
        .collect();
    let mut out = Vec::with_capacity(block_param_len(b));
    for (g, _) in &per_seq {
        out.extend_from_slice(g);
    }
    match b.cov {
        HCov::Diagonal { .. } => {
            for (_, c) in &per_seq {
                out.extend_from_slice(c);
            }
        }
        HCov::General { .. } => {
            for (_, c) in &per_seq {
                out.extend_from_slice(&c[..t_n]);
            }
            for (_, c) in &per_seq {
                out.extend_from_slice(&c[t_n..]);
            }
        }
    }
    out
}

/// Analytic gradient of [`h_objective`] in the layout of [`params`].
pub fn h_gradient(state: &VariationalState, corpus: &Corpus, batch: &Batch) -> Result<Vec<f64>> {
    let stats = data_stats(state, corpus, batch)?;
    let mut grad = block_gradient(&state.terms, &stats.n_h, &stats.m_h, batch.scale);
    if let DocParams::Author(g) = &state.docs {
        grad.extend(block_gradient(g, &stats.n_g, &stats.m_g, batch.scale));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TpfError::numeric(format!("non-finite gradient at parameter {i}")));
    }
    Ok(grad)
}
