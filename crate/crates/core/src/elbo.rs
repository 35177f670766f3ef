//! Exact ELBO with all normalising constants, and the variational criteria.
//!
//! `ELBO = reconstruction + log_prior + entropy`, where the reconstruction
//! inserts the optimal topic proportions of every count, so it reduces to a
//! log-sum-exp over topics per stored cell minus the total expected rate.

use std::f64::consts::PI;
use std::time::Instant;

use rayon::prelude::*;

use crate::armath::{entropy, gamma_entropy, normal_entropy, quadratic_form_parts, EntropyBlock};
use crate::cavi::{doc_softmax, rate_sums};
use crate::corpus::{Batch, Corpus};
use crate::error::{Result, TpfError};
use crate::special::{digamma, ln_factorial, ln_gamma, std_normal_mass, truncated_normal};
use crate::state::{ArBlock, DeltaMode, DocParams, Hyperparams, VariationalState};

/// One evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboReport {
    pub reconstruction: f64,
    pub log_prior: f64,
    pub entropy: f64,
    pub elbo: f64,
    pub vaic: Option<f64>,
    pub vbic: Option<f64>,
    pub wall_seconds: f64,
}

/// Finer split of the ELBO, used for cross-checks and diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboParts {
    /// `sum y * logsumexp_k(E log theta + h_loc)` over stored cells.
    pub count_term: f64,
    /// `sum log y!` over stored cells.
    pub log_factorials: f64,
    /// `sum_{d,k} E theta_dk * R[k, t_d]`, the total expected rate.
    pub rate_term: f64,
    pub doc_prior: f64,
    pub doc_entropy: f64,
    pub seq_prior: f64,
    pub seq_entropy: f64,
}

impl ElboParts {
    pub fn reconstruction(&self) -> f64 {
        self.count_term - self.log_factorials - self.rate_term
    }

    pub fn log_prior(&self) -> f64 {
        self.doc_prior + self.seq_prior
    }

    pub fn entropy(&self) -> f64 {
        self.doc_entropy + self.seq_entropy
    }
}

/// Contributions of one AR sequence and its hyper blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SeqTerms {
    pub h_prior: f64,
    pub tau_prior: f64,
    pub mu_prior: f64,
    pub delta_prior: f64,
    pub h_entropy: f64,
    pub tau_entropy: f64,
    pub mu_entropy: f64,
    pub delta_entropy: f64,
}

impl SeqTerms {
    pub fn prior(&self) -> f64 {
        self.h_prior + self.tau_prior + self.mu_prior + self.delta_prior
    }

    pub fn entropy(&self) -> f64 {
        self.h_entropy + self.tau_entropy + self.mu_entropy + self.delta_entropy
    }
}

/// Sum with pairwise splitting; the order depends only on the length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn normal_log_prior(loc: f64, var: f64, mean: f64, sd: f64) -> f64 {
    -0.5 * (2.0 * PI * sd * sd).ln() - ((loc - mean).powi(2) + var) / (2.0 * sd * sd)
}

fn gamma_log_prior(a: f64, b: f64, elog: f64, mean: f64) -> f64 {
    a * b.ln() - ln_gamma(a) + (a - 1.0) * elog - b * mean
}

pub fn seq_terms(b: &ArBlock, hp: &Hyperparams, i: usize) -> Result<SeqTerms> {
    let t = b.t as f64;
    let dm = b.delta_moments(i);
    let (e_tau, elog_tau) = (b.e_tau(i), b.elog_tau(i));
    let quad = quadratic_form_parts(b.seq(i), b.cov_view(i), b.mu_loc[i], b.mu_var[i], dm);
    let (delta_prior, delta_entropy) = match b.delta_mode {
        DeltaMode::FixedOne => (0.0, 0.0),
        DeltaMode::Free => (
            normal_log_prior(b.delta_loc[i], b.delta_var[i], hp.mu_delta, hp.sigma_delta),
            normal_entropy(b.delta_var[i]),
        ),
        DeltaMode::Truncated => {
            let tm = truncated_normal(b.delta_loc[i], b.delta_var[i], -1.0, 1.0);
            let s = hp.sigma_delta;
            let prior_mass = std_normal_mass((-1.0 - hp.mu_delta) / s, (1.0 - hp.mu_delta) / s);
            let sq = tm.second - 2.0 * hp.mu_delta * tm.mean + hp.mu_delta * hp.mu_delta;
            (
                -0.5 * (2.0 * PI * s * s).ln() - prior_mass.ln() - sq / (2.0 * s * s),
                tm.entropy,
            )
        }
    };
    let terms = SeqTerms {
        h_prior: -0.5 * t * (2.0 * PI).ln() + 0.5 * t * elog_tau - 0.5 * e_tau * quad,
        tau_prior: gamma_log_prior(hp.a_tau, hp.b_tau, elog_tau, e_tau),
        mu_prior: normal_log_prior(b.mu_loc[i], b.mu_var[i], hp.mu_mu, hp.sigma_mu),
        delta_prior,
        h_entropy: entropy(EntropyBlock::MvNormal(b.cov_view(i)))?,
        tau_entropy: gamma_entropy(b.tau_shp[i], b.tau_rte[i]),
        mu_entropy: normal_entropy(b.mu_var[i]),
        delta_entropy,
    };
    if !(terms.prior().is_finite() && terms.entropy().is_finite()) {
        return Err(TpfError::numeric(format!("non-finite prior or entropy for sequence {i}: {terms:?}")));
    }
    Ok(terms)
}

fn block_terms(b: &ArBlock, hp: &Hyperparams) -> Result<(f64, f64)> {
    let rows: Vec<Result<SeqTerms>> = (0..b.n).into_par_iter().map(|i| seq_terms(b, hp, i)).collect();
    let mut prior = Vec::with_capacity(b.n);
    let mut ent = Vec::with_capacity(b.n);
    for r in rows {
        let r = r?;
        prior.push(r.prior());
        ent.push(r.entropy());
    }
    Ok((pairwise_sum(&prior), pairwise_sum(&ent)))
}

#[derive(Debug, Clone, Copy, Default)]
struct DocTerms {
    count_term: f64,
    log_factorials: f64,
    rate_term: f64,
    prior: f64,
    entropy: f64,
}

fn doc_terms(state: &VariationalState, corpus: &Corpus, hp: &Hyperparams, rates: &[f64], d: usize) -> Result<DocTerms> {
    let (k_n, t) = (state.k, corpus.period_of(d));
    let (elog, mean) = state.doc_moments(corpus, d);
    let (ts, cs) = corpus.doc(d);
    let mut phi = Vec::with_capacity(ts.len() * k_n);
    let lse = doc_softmax(&elog, &state.terms.loc, state.v, state.t, t, ts, &mut phi);
    let mut out = DocTerms::default();
    for (&y, l) in cs.iter().zip(&lse) {
        out.count_term += y as f64 * l;
        out.log_factorials += ln_factorial(y);
    }
    out.rate_term = (0..k_n).map(|k| mean[k] * rates[k * state.t + t]).sum();
    if let DocParams::Gamma {
        theta_shp,
        theta_rte,
        xi_shp,
        xi_rte,
    } = &state.docs
    {
        let e_xi = xi_shp[d] / xi_rte[d];
        let elog_xi = digamma(xi_shp[d]) - xi_rte[d].ln();
        let lg = ln_gamma(hp.a_theta);
        for k in 0..k_n {
            out.prior += hp.a_theta * elog_xi - lg + (hp.a_theta - 1.0) * elog[k] - e_xi * mean[k];
            out.entropy += gamma_entropy(theta_shp[d * k_n + k], theta_rte[d * k_n + k]);
        }
        out.prior += gamma_log_prior(hp.a_xi, hp.b_xi, elog_xi, e_xi);
        out.entropy += gamma_entropy(xi_shp[d], xi_rte[d]);
    }
    let total = out.count_term - out.rate_term + out.prior + out.entropy;
    if !total.is_finite() {
        return Err(TpfError::numeric(format!("non-finite ELBO contribution from document {d}: {out:?}")));
    }
    Ok(out)
}

fn docs_sum(state: &VariationalState, corpus: &Corpus, hp: &Hyperparams, doc_ids: &[usize]) -> Result<DocTerms> {
    let rates = rate_sums(&state.terms, state.k, state.v);
    let rows: Vec<Result<DocTerms>> = doc_ids
        .par_iter()
        .map(|&d| doc_terms(state, corpus, hp, &rates, d))
        .collect();
    let rows: Vec<DocTerms> = rows.into_iter().collect::<Result<_>>()?;
    let col = |f: fn(&DocTerms) -> f64| pairwise_sum(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(DocTerms {
        count_term: col(|r| r.count_term),
        log_factorials: col(|r| r.log_factorials),
        rate_term: col(|r| r.rate_term),
        prior: col(|r| r.prior),
        entropy: col(|r| r.entropy),
    })
}

fn seq_sum(state: &VariationalState, hp: &Hyperparams) -> Result<(f64, f64)> {
    let (mut prior, mut ent) = block_terms(&state.terms, hp)?;
    if let DocParams::Author(g) = &state.docs {
        let (p, e) = block_terms(g, hp)?;
        prior += p;
        ent += e;
    }
    Ok((prior, ent))
}

pub fn elbo_parts(state: &VariationalState, corpus: &Corpus, hp: &Hyperparams) -> Result<ElboParts> {
    state.check_dims(corpus)?;
    let all: Vec<usize> = (0..corpus.num_docs()).collect();
    let docs = docs_sum(state, corpus, hp, &all)?;
    let (seq_prior, seq_entropy) = seq_sum(state, hp)?;
    Ok(ElboParts {
        count_term: docs.count_term,
        log_factorials: docs.log_factorials,
        rate_term: docs.rate_term,
        doc_prior: docs.prior,
        doc_entropy: docs.entropy,
        seq_prior,
        seq_entropy,
    })
}

/// Reconstruction, log-prior, entropy and their sum on the full corpus.
pub fn elbo_components(state: &VariationalState, corpus: &Corpus, hp: &Hyperparams) -> Result<ElboReport> {
    let start = Instant::now();
    let p = elbo_parts(state, corpus, hp)?;
    let (reconstruction, log_prior, entropy) = (p.reconstruction(), p.log_prior(), p.entropy());
    Ok(ElboReport {
        reconstruction,
        log_prior,
        entropy,
        elbo: reconstruction + log_prior + entropy,
        vaic: None,
        vbic: None,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Poisson log-likelihood of all cells, zeros included, at the point rate
/// `sum_k theta*_dk exp(h_loc)`.
pub fn log_lik_at_mean(state: &VariationalState, corpus: &Corpus) -> Result<f64> {
    state.check_dims(corpus)?;
    let (k_n, v_n, t_n) = (state.k, state.v, state.t);
    let h = &state.terms.loc;
    let point_sums: Vec<f64> = (0..k_n * t_n)
        .map(|kt| {
            let (k, t) = (kt / t_n, kt % t_n);
            (0..v_n).map(|v| h[(k * v_n + v) * t_n + t].exp()).sum()
        })
        .collect();
    let rows: Vec<Result<f64>> = (0..corpus.num_docs())
        .into_par_iter()
        .map(|d| {
            let t = corpus.period_of(d);
            let theta = state.doc_point(corpus, d);
            let mut acc = -(0..k_n).map(|k| theta[k] * point_sums[k * t_n + t]).sum::<f64>();
            let (ts, cs) = corpus.doc(d);
            for (&v, &y) in ts.iter().zip(cs) {
                let lambda: f64 = (0..k_n).map(|k| theta[k] * h[(k * v_n + v as usize) * t_n + t].exp()).sum();
                if !(lambda > 0.0) {
                    return Err(TpfError::numeric(format!(
                        "point rate {lambda} for doc {d}, term {v} with count {y}"
                    )));
                }
                acc += y as f64 * lambda.ln() - ln_factorial(y);
            }
            Ok(acc)
        })
        .collect();
    let rows: Vec<f64> = rows.into_iter().collect::<Result<_>>()?;
    let total = pairwise_sum(&rows);
    if !total.is_finite() {
        return Err(TpfError::numeric("non-finite log-likelihood at the variational mean"));
    }
    Ok(total)
}

/// `VAIC = 2 log p(Y | mean) - 4 reconstruction`, `VBIC = -2 (reconstruction + entropy)`.
pub fn criteria_from(report: &ElboReport, loglik_at_mean: f64) -> (f64, f64) {
    (
        2.0 * loglik_at_mean - 4.0 * report.reconstruction,
        -2.0 * report.reconstruction - 2.0 * report.entropy,
    )
}

pub fn criteria(state: &VariationalState, corpus: &Corpus, hp: &Hyperparams) -> Result<(f64, f64)> {
    let r = elbo_components(state, corpus, hp)?;
    Ok(criteria_from(&r, log_lik_at_mean(state, corpus)?))
}

/// Full evaluation: ELBO decomposition plus both criteria.
pub fn evaluate(state: &VariationalState, corpus: &Corpus, hp: &Hyperparams) -> Result<ElboReport> {
    let start = Instant::now();
    let mut r = elbo_components(state, corpus, hp)?;
    let (vaic, vbic) = criteria_from(&r, log_lik_at_mean(state, corpus)?);
    r.vaic = Some(vaic);
    r.vbic = Some(vbic);
    r.wall_seconds = start.elapsed().as_secs_f64();
    Ok(r)
}

/// ELBO estimate from one batch: document terms scaled by `D / |B|`, global
/// terms exact. Equals the exact ELBO for a full batch.
pub fn approx_elbo(state: &VariationalState, corpus: &Corpus, hp: &Hyperparams, batch: &Batch) -> Result<f64> {
    let docs = docs_sum(state, corpus, hp, &batch.doc_ids)?;
    let (prior, ent) = seq_sum(state, hp)?;
    let local = docs.count_term - docs.log_factorials - docs.rate_term + docs.prior + docs.entropy;
    Ok(batch.scale * local + prior + ent)
}
