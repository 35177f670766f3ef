//! Interpretation of a fitted state: prevalence, FREX rankings and
//! dissimilarity of topical content (DTC).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::json;

use crate::armath::{spd_inverse, CovView};
use crate::corpus::Corpus;
use crate::error::{Result, TpfError};
use crate::state::VariationalState;

/// `psi[k * T + t]`: share of period `t`'s expected counts due to topic `k`.
pub fn topic_prevalence(state: &VariationalState, corpus: &Corpus) -> Vec<f64> {
    let (k_n, t_n) = (state.k, state.t);
    let beta = state.terms.exp_means();
    let mut doc_sums = vec![0.0; k_n * t_n];
    for d in 0..corpus.num_docs() {
        let t = corpus.period_of(d);
        let (_, mean) = state.doc_moments(corpus, d);
        for k in 0..k_n {
            doc_sums[k * t_n + t] += mean[k];
        }
    }
    let mut psi = vec![0.0; k_n * t_n];
    for t in 0..t_n {
        let mut total = 0.0;
        for k in 0..k_n {
            let term_sum: f64 = (0..state.v).map(|v| beta[(k * state.v + v) * t_n + t]).sum();
            psi[k * t_n + t] = doc_sums[k * t_n + t] * term_sum;
            total += psi[k * t_n + t];
        }
        for k in 0..k_n {
            psi[k * t_n + t] /= total;
        }
    }
    psi
}

/// Frequency, exclusivity and their weighted harmonic combination, all
/// indexed `(k * V + v) * T + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frex {
    pub fr: Vec<f64>,
    pub ex: Vec<f64>,
    pub frex: Vec<f64>,
}

/// Empirical distribution function with weak inequality: share of entries
/// `<= x` for every `x` in `xs`.
pub fn ecdf(xs: &[f64]) -> Vec<f64> {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    xs.iter()
        .map(|x| sorted.partition_point(|y| y <= x) as f64 / n)
        .collect()
}

/// Weighted harmonic mean `1 / ((1 - w) / fr + w / ex)`, exact at the ends.
pub fn frex_combine(fr: f64, ex: f64, w: f64) -> f64 {
    if w == 0.0 {
        return fr;
    }
    if w == 1.0 {
        return ex;
    }
    1.0 / ((1.0 - w) / fr + w / ex)
}

pub fn frex_scores(state: &VariationalState, w: f64) -> Result<Frex> {
    if !(0.0..=1.0).contains(&w) {
        return Err(TpfError::arg(format!("FREX weight must lie in [0, 1], got {w}")));
    }
    let (k_n, v_n, t_n) = (state.k, state.v, state.t);
    let beta = state.terms.exp_means();
    let idx = |k: usize, v: usize, t: usize| (k * v_n + v) * t_n + t;
    let mut excl = vec![0.0; beta.len()];
    for t in 0..t_n {
        for v in 0..v_n {
            let total: f64 = (0..k_n).map(|k| beta[idx(k, v, t)]).sum();
            for k in 0..k_n {
                excl[idx(k, v, t)] = beta[idx(k, v, t)] / total;
            }
        }
    }
    let cells: Vec<(Vec<f64>, Vec<f64>)> = (0..k_n * t_n)
        .into_par_iter()
        .map(|kt| {
            let (k, t) = (kt / t_n, kt % t_n);
            let b: Vec<f64> = (0..v_n).map(|v| beta[idx(k, v, t)]).collect();
            let e: Vec<f64> = (0..v_n).map(|v| excl[idx(k, v, t)]).collect();
            (ecdf(&b), ecdf(&e))
        })
        .collect();
    let mut fr = vec![0.0; beta.len()];
    let mut ex = vec![0.0; beta.len()];
    for (kt, (f, e)) in cells.into_iter().enumerate() {
        let (k, t) = (kt / t_n, kt % t_n);
        for v in 0..v_n {
            fr[idx(k, v, t)] = f[v];
            ex[idx(k, v, t)] = e[v];
        }
    }
    let frex = fr.iter().zip(&ex).map(|(&f, &e)| frex_combine(f, e, w)).collect();
    Ok(Frex { fr, ex, frex })
}

/// Terms of `(k, t)` ranked by decreasing FREX, ties by term id.
pub fn top_terms(frex: &[f64], v_n: usize, t_n: usize, k: usize, t: usize, n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..v_n).collect();
    let score = |v: usize| frex[(k * v_n + v) * t_n + t];
    ids.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    ids.truncate(n);
    ids
}

/// Symmetrised KL divergence between two univariate normals.
pub fn sym_kl(mx: f64, vx: f64, my: f64, vy: f64) -> f64 {
    0.25 * ((vx - vy).powi(2) + (vx + vy) * (mx - my).powi(2)) / (vx * vy)
}

/// DTC between topic `k1` at period `t1` and topic `k2` at `t2`, from the
/// marginal distributions of every term.
pub fn dtc_pair(state: &VariationalState, k1: usize, t1: usize, k2: usize, t2: usize) -> Result<f64> {
    let (k_n, v_n, t_n) = (state.k, state.v, state.t);
    if k1 >= k_n || k2 >= k_n || t1 >= t_n || t2 >= t_n {
        return Err(TpfError::arg("topic or period index out of range"));
    }
    let b = &state.terms;
    let mut acc = 0.0;
    for v in 0..v_n {
        let (i, j) = (k1 * v_n + v, k2 * v_n + v);
        let (vi, vj) = (b.marginal_vars(i)[t1], b.marginal_vars(j)[t2]);
        acc += sym_kl(b.seq(i)[t1], vi, b.seq(j)[t2], vj);
    }
    Ok(acc)
}

fn dense_cov(view: CovView<'_>) -> DMatrix<f64> {
    match view {
        CovView::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
        CovView::Factor(f) => f.to_dense(),
        CovView::Dense(m) => m.clone(),
    }
}

/// Symmetrised KL divergence between two multivariate normals.
pub fn sym_kl_mv(mx: &[f64], sx: &DMatrix<f64>, my: &[f64], sy: &DMatrix<f64>) -> Result<f64> {
    let n = mx.len();
    let ix = spd_inverse(sx)?;
    let iy = spd_inverse(sy)?;
    let diff = DVector::from_iterator(n, mx.iter().zip(my).map(|(a, b)| a - b));
    let tr = (&iy * sx).trace() + (&ix * sy).trace();
    let quad = (diff.transpose() * (&ix + &iy) * &diff)[(0, 0)];
    // Rounding in the traces can leave a tiny negative value for equal inputs.
    Ok((0.25 * (tr - 2.0 * n as f64 + quad)).max(0.0))
}

/// DTC between two topics over the whole time span, divided by `T`.
pub fn dtc_topics(state: &VariationalState, k1: usize, k2: usize) -> Result<f64> {
    let (k_n, v_n, t_n) = (state.k, state.v, state.t);
    if k1 >= k_n || k2 >= k_n {
        return Err(TpfError::arg("topic index out of range"));
    }
    let b = &state.terms;
    let parts: Vec<Result<f64>> = (0..v_n)
        .into_par_iter()
        .map(|v| {
            let (i, j) = (k1 * v_n + v, k2 * v_n + v);
            sym_kl_mv(b.seq(i), &dense_cov(b.cov_view(i)), b.seq(j), &dense_cov(b.cov_view(j)))
        })
        .collect();
    let parts: Vec<f64> = parts.into_iter().collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() / t_n as f64)
}

/// Write `prevalence.csv`, `topics.json`, `dtc_time.csv` and `dtc_topics.csv`.
pub fn write_summary(dir: &Path, state: &VariationalState, corpus: &Corpus, w: f64, top: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (k_n, v_n, t_n) = (state.k, state.v, state.t);

    let psi = topic_prevalence(state, corpus);
    let mut s = String::from("t");
    for k in 0..k_n {
        let _ = write!(s, ",topic_{k}");
    }
    s.push('\n');
    for t in 0..t_n {
        let _ = write!(s, "{t}");
        for k in 0..k_n {
            let _ = write!(s, ",{:?}", psi[k * t_n + t]);
        }
        s.push('\n');
    }
    std::fs::write(dir.join("prevalence.csv"), s)?;

    let fx = frex_scores(state, w)?;
    let vocab = corpus.vocabulary();
    let mut topics = Vec::new();
    for k in 0..k_n {
        let mut periods = Vec::new();
        for t in 0..t_n {
            let terms: Vec<_> = top_terms(&fx.frex, v_n, t_n, k, t, top)
                .into_iter()
                .map(|v| {
                    let i = (k * v_n + v) * t_n + t;
                    json!({"term": vocab[v], "term_id": v, "frex": fx.frex[i], "fr": fx.fr[i], "ex": fx.ex[i]})
                })
                .collect();
            periods.push(json!({"t": t, "terms": terms}));
        }
        topics.push(json!({"topic": k, "periods": periods}));
    }
    let doc = json!({"frex_weight": w, "top": top, "topics": topics});
    std::fs::write(dir.join("topics.json"), serde_json::to_string_pretty(&doc)?)?;

    let mut s = String::from("topic");
    for t in 1..t_n {
        let _ = write!(s, ",t{}_t{}", t - 1, t);
    }
    s.push('\n');
    for k in 0..k_n {
        let _ = write!(s, "{k}");
        for t in 1..t_n {
            let _ = write!(s, ",{:?}", dtc_pair(state, k, t - 1, k, t)?);
        }
        s.push('\n');
    }
    std::fs::write(dir.join("dtc_time.csv"), s)?;

    let mut s = String::from("topic");
    for k in 0..k_n {
        let _ = write!(s, ",topic_{k}");
    }
    s.push('\n');
    for k1 in 0..k_n {
        let _ = write!(s, "{k1}");
        for k2 in 0..k_n {
            let _ = write!(s, ",{:?}", dtc_topics(state, k1, k2)?);
        }
        s.push('\n');
    }
    std::fs::write(dir.join("dtc_topics.csv"), s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ecdf_ties_and_order() {
        assert_eq!(ecdf(&[1.0, 2.0, 3.0]), vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(ecdf(&[2.0, 2.0, 1.0]), vec![1.0, 1.0, 1.0 / 3.0]);
    }

    #[test]
    fn frex_arithmetic() {
        assert!((frex_combine(0.5, 1.0, 0.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(frex_combine(0.25, 0.9, 0.0), 0.25);
    }

    #[test]
    fn univariate_sym_kl() {
        assert_eq!(sym_kl(0.3, 2.0, 0.3, 2.0), 0.0);
        assert!((sym_kl(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn multivariate_sym_kl_gap() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let d = sym_kl_mv(&[1.0, 0.0], &i2, &[0.0, 0.0], &i2).unwrap();
        assert!((d / 2.0 - 0.25).abs() < 1e-15);
        let sing = DMatrix::zeros(2, 2);
        assert!(sym_kl_mv(&[0.0, 0.0], &sing, &[0.0, 0.0], &i2).is_err());
    }
}
