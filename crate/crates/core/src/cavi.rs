//! Closed-form coordinate ascent updates.
//!
//! Document intensities (`theta`, `xi`) are replaced outright for the docs of
//! a batch. The per-sequence hyper blocks (`tau`, `delta`, `mu`) are moved
//! toward their optimum by a convex blend with step size `rho`.

use rayon::prelude::*;

use crate::corpus::Corpus;
use crate::error::{Result, TpfError};
use crate::special::digamma;
use crate::state::{ArBlock, DeltaMode, DocParams, Hyperparams, VariationalState};

/// Topic proportions of every stored count of a set of documents.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxProportions {
    pub k: usize,
    /// Start of each document's rows in `phi`, counted in stored entries.
    pub offsets: Vec<usize>,
    /// `K` proportions per stored `(d, v)`, in document then term order.
    pub phi: Vec<f64>,
}

impl AuxProportions {
    pub fn row(&self, entry: usize) -> &[f64] {
        &self.phi[entry * self.k..(entry + 1) * self.k]
    }
}

/// Softmax over topics of `elog[k] + h_loc[k, v, t]` for each term of a
/// document. Fills `phi` and returns the log-sum-exp of every row.
pub(crate) fn doc_softmax(
    elog: &[f64],
    h_loc: &[f64],
    v_n: usize,
    t_n: usize,
    t: usize,
    terms: &[u32],
    phi: &mut Vec<f64>,
) -> Vec<f64> {
    let k_n = elog.len();
    let mut lse = Vec::with_capacity(terms.len());
    let mut logits = vec![0.0; k_n];
    for &v in terms {
        let v = v as usize;
        let mut c = f64::NEG_INFINITY;
        for k in 0..k_n {
            logits[k] = elog[k] + h_loc[(k * v_n + v) * t_n + t];
            c = c.max(logits[k]);
        }
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - c).exp();
            z += *l;
        }
        phi.extend(logits.iter().map(|l| l / z));
        lse.push(c + z.ln());
    }
    lse
}

pub fn aux_proportions(state: &VariationalState, corpus: &Corpus, doc_ids: &[usize]) -> AuxProportions {
    let rows: Vec<Vec<f64>> = doc_ids
        .par_iter()
        .map(|&d| {
            let (elog, _) = state.doc_moments(corpus, d);
            let mut phi = Vec::new();
            doc_softmax(
                &elog,
                &state.terms.loc,
                state.v,
                state.t,
                corpus.period_of(d),
                corpus.doc(d).0,
                &mut phi,
            );
            phi
        })
        .collect();
    let mut offsets = Vec::with_capacity(doc_ids.len());
    let mut phi = Vec::new();
    for r in rows {
        offsets.push(phi.len() / state.k);
        phi.extend(r);
    }
    AuxProportions { k: state.k, offsets, phi }
}

/// `R[k, t] = sum_v E exp(h_kv,t)`, stored `k * T + t`.
pub fn rate_sums(terms: &ArBlock, k_n: usize, v_n: usize) -> Vec<f64> {
    let t_n = terms.t;
    let per_k: Vec<Vec<f64>> = (0..k_n)
        .into_par_iter()
        .map(|k| {
            let mut acc = vec![0.0; t_n];
            for v in 0..v_n {
                let i = k * v_n + v;
                let vars = terms.marginal_vars(i);
                for (t, (m, s)) in terms.seq(i).iter().zip(&vars).enumerate() {
                    acc[t] += (m + 0.5 * s).exp();
                }
            }
            acc
        })
        .collect();
    per_k.concat()
}

/// Replace `theta` and `xi` of the given documents by their coordinate optima,
/// `theta` first, then `xi` from the fresh `theta`.
pub fn update_theta_xi(
    state: &mut VariationalState,
    corpus: &Corpus,
    hp: &Hyperparams,
    doc_ids: &[usize],
) -> Result<()> {
    let k_n = state.k;
    let rates = rate_sums(&state.terms, k_n, state.v);
    let DocParams::Gamma {
        theta_shp,
        theta_rte,
        xi_shp,
        xi_rte,
    } = &state.docs
    else {
        return Err(TpfError::Contract("theta updates need gamma document parameters".into()));
    };
    let terms = &state.terms;
    let updates: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = doc_ids
        .par_iter()
        .map(|&d| {
            let t = corpus.period_of(d);
            let (ts, cs) = corpus.doc(d);
            let elog: Vec<f64> = (0..k_n)
                .map(|k| digamma(theta_shp[d * k_n + k]) - theta_rte[d * k_n + k].ln())
                .collect();
            let mut phi = Vec::with_capacity(ts.len() * k_n);
            doc_softmax(&elog, &terms.loc, state.v, state.t, t, ts, &mut phi);
            let mut shp = vec![hp.a_theta; k_n];
            for (j, &y) in cs.iter().enumerate() {
                for k in 0..k_n {
                    shp[k] += y as f64 * phi[j * k_n + k];
                }
            }
            let e_xi = xi_shp[d] / xi_rte[d];
            let rte: Vec<f64> = (0..k_n).map(|k| e_xi + rates[k * state.t + t]).collect();
            let mut new_xi_rte = hp.b_xi;
            for k in 0..k_n {
                if !(shp[k].is_finite() && rte[k] > 0.0 && rte[k].is_finite()) {
                    return Err(TpfError::numeric(format!(
                        "theta update for doc {d}, topic {k} gave shape {} rate {}",
                        shp[k], rte[k]
                    )));
                }
                new_xi_rte += shp[k] / rte[k];
            }
            Ok((shp, rte, new_xi_rte))
        })
        .collect();
    let xi_shape = hp.a_xi + k_n as f64 * hp.a_theta;
    let DocParams::Gamma {
        theta_shp,
        theta_rte,
        xi_shp,
        xi_rte,
    } = &mut state.docs
    else {
        unreachable!()
    };
    for (&d, up) in doc_ids.iter().zip(updates) {
        let (shp, rte, xr) = up?;
        theta_shp[d * k_n..(d + 1) * k_n].copy_from_slice(&shp);
        theta_rte[d * k_n..(d + 1) * k_n].copy_from_slice(&rte);
        xi_shp[d] = xi_shape;
        xi_rte[d] = xr;
    }
    Ok(())
}

/// Second-moment sums of one sequence around its mean level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LagSums {
    /// `sum_{t < T-1} E (h_t - mu)^2`
    pub head_sq: f64,
    /// `E (h_{T-1} - mu)^2`
    pub last_sq: f64,
    /// `sum_{t >= 1} E (h_t - mu)(h_{t-1} - mu)`
    pub cross: f64,
}

pub(crate) fn lag_sums(b: &ArBlock, i: usize) -> LagSums {
    let loc = b.seq(i);
    let vars = b.marginal_vars(i);
    let lags = b.lag_covs(i);
    let (m, mv) = (b.mu_loc[i], b.mu_var[i]);
    let sq = |t: usize| vars[t] + (loc[t] - m).powi(2) + mv;
    let n = loc.len();
    LagSums {
        head_sq: (0..n - 1).map(sq).sum(),
        last_sq: sq(n - 1),
        cross: (1..n).map(|t| lags[t - 1] + (loc[t] - m) * (loc[t - 1] - m) + mv).sum(),
    }
}

fn per_seq<F>(b: &ArBlock, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    (0..b.n).into_par_iter().map(f).collect()
}

/// Optimal `tau` rates: `b_tau + E[quadratic form] / 2`.
pub fn update_tau_rate(b: &ArBlock, hp: &Hyperparams) -> Result<Vec<f64>> {
    let out = per_seq(b, |i| {
        let s = lag_sums(b, i);
        let dm = b.delta_moments(i);
        hp.b_tau + 0.5 * ((1.0 + dm.second) * s.head_sq + s.last_sq - 2.0 * dm.mean * s.cross)
    });
    if let Some(i) = out.iter().position(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(TpfError::numeric(format!("tau rate target {} for sequence {i}", out[i])));
    }
    Ok(out)
}

/// Optimal `(loc, var)` of the AR coefficient's (underlying) normal family.
pub fn update_delta(b: &ArBlock, hp: &Hyperparams) -> Result<(Vec<f64>, Vec<f64>)> {
    if b.delta_mode == DeltaMode::FixedOne {
        return Err(TpfError::Contract("delta update requested while delta is fixed at one".into()));
    }
    let prec0 = 1.0 / (hp.sigma_delta * hp.sigma_delta);
    let pairs: Vec<(f64, f64)> = (0..b.n)
        .into_par_iter()
        .map(|i| {
            let s = lag_sums(b, i);
            let et = b.e_tau(i);
            let var = 1.0 / (prec0 + et * s.head_sq);
            (var * (hp.mu_delta * prec0 + et * s.cross), var)
        })
        .collect();
    Ok(pairs.into_iter().unzip())
}

/// Optimal `(loc, var)` of the mean levels.
pub fn update_mu(b: &ArBlock, hp: &Hyperparams) -> (Vec<f64>, Vec<f64>) {
    let prec0 = 1.0 / (hp.sigma_mu * hp.sigma_mu);
    let tm1 = (b.t - 1) as f64;
    let pairs: Vec<(f64, f64)> = (0..b.n)
        .into_par_iter()
        .map(|i| {
            let dm = b.delta_moments(i);
            let et = b.e_tau(i);
            let h = b.seq(i);
            let n = h.len();
            let head: f64 = h[..n - 1].iter().sum();
            let pairs: f64 = (1..n).map(|t| h[t - 1] + h[t]).sum();
            let tilde = (1.0 + dm.second) * head + h[n - 1] - dm.mean * pairs;
            let var = 1.0 / (prec0 + et * (1.0 + tm1 * (1.0 - 2.0 * dm.mean + dm.second)));
            (var * (hp.mu_mu * prec0 + et * tilde), var)
        })
        .collect();
    pairs.into_iter().unzip()
}

/// `rho * target + (1 - rho) * old`, in place.
pub fn blend_global(old: &mut [f64], target: &[f64], rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(TpfError::arg(format!("step size must lie in (0, 1], got {rho}")));
    }
    if old.len() != target.len() {
        return Err(TpfError::arg("blend shapes differ"));
    }
    for (o, &t) in old.iter_mut().zip(target) {
        *o = if rho == 1.0 { t } else { rho * t + (1.0 - rho) * *o };
    }
    Ok(())
}

/// `tau`, then `delta` (unless fixed), then `mu`, each from the latest values.
pub fn global_step(b: &mut ArBlock, hp: &Hyperparams, rho: f64) -> Result<()> {
    let tau = update_tau_rate(b, hp)?;
    blend_global(&mut b.tau_rte, &tau, rho)?;
    if b.delta_mode != DeltaMode::FixedOne {
        let (loc, var) = update_delta(b, hp)?;
        blend_global(&mut b.delta_loc, &loc, rho)?;
        blend_global(&mut b.delta_var, &var, rho)?;
    }
    let (loc, var) = update_mu(b, hp);
    blend_global(&mut b.mu_loc, &loc, rho)?;
    blend_global(&mut b.mu_var, &var, rho)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{CovStructure, HCov};

    fn block(t: usize) -> ArBlock {
        ArBlock {
            n: 1,
            t,
            loc: vec![0.0; t],
            cov: HCov::Diagonal { var: vec![1e-300; t] },
            mu_loc: vec![0.0],
            mu_var: vec![0.0],
            tau_shp: vec![1.0],
            tau_rte: vec![1.0],
            delta_loc: vec![0.0],
            delta_var: vec![0.0],
            delta_mode: DeltaMode::Free,
        }
    }

    #[test]
    fn softmax_examples() {
        let mut phi = Vec::new();
        doc_softmax(&[0.3, 0.3], &[1.0, 1.0], 1, 1, 0, &[0], &mut phi);
        assert_eq!(phi, vec![0.5, 0.5]);
        phi.clear();
        doc_softmax(&[2f64.ln(), 0.0], &[0.0, 0.0], 1, 1, 0, &[0], &mut phi);
        assert!((phi[0] - 2.0 / 3.0).abs() < 1e-15 && (phi[1] - 1.0 / 3.0).abs() < 1e-15);
        phi.clear();
        doc_softmax(&[-800.0], &[5.0], 1, 1, 0, &[0], &mut phi);
        assert_eq!(phi, vec![1.0]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        doc_softmax(&[0.1, -2.0, 1.5], &[0.0; 3], 1, 1, 0, &[0], &mut a);
        doc_softmax(&[700.1, 698.0, 701.5], &[0.0; 3], 1, 1, 0, &[0], &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tau_examples() {
        let hp = Hyperparams::new(1);
        let mut b = block(3);
        b.loc = vec![0.0; 3];
        let zero_var = |b: &mut ArBlock| b.cov = HCov::Diagonal { var: vec![0.0; b.t] };
        zero_var(&mut b);
        assert_eq!(update_tau_rate(&b, &hp).unwrap(), vec![hp.b_tau]);
        let mut b = block(2);
        zero_var(&mut b);
        b.loc = vec![1.0, 0.0];
        assert!((update_tau_rate(&b, &hp).unwrap()[0] - (hp.b_tau + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn delta_examples() {
        let mut hp = Hyperparams::new(1);
        hp.mu_delta = 0.0;
        hp.sigma_delta = 1.0;
        let mut b = block(2);
        b.cov = HCov::Diagonal { var: vec![0.0, 0.0] };
        let (loc, var) = update_delta(&b, &hp).unwrap();
        assert_eq!((loc[0], var[0]), (0.0, 1.0));
        // E(h1-mu)^2 = 1 and E(h1-mu)(h2-mu) = 0.5 through variances and locations.
        b.loc = vec![1.0, 0.5];
        let (loc, var) = update_delta(&b, &hp).unwrap();
        assert!((var[0] - 0.5).abs() < 1e-15 && (loc[0] - 0.25).abs() < 1e-15);
        b.delta_mode = DeltaMode::FixedOne;
        assert!(matches!(update_delta(&b, &hp), Err(TpfError::Contract(_))));
    }

    #[test]
    fn mu_examples() {
        let hp = Hyperparams::new(1);
        let mut b = block(2);
        b.delta_mode = DeltaMode::FixedOne;
        b.delta_loc = vec![1.0];
        b.loc = vec![3.0, 7.0];
        let (loc, var) = update_mu(&b, &hp);
        let prec = 1e-4 + 1.0;
        assert!((var[0] - 1.0 / prec).abs() < 1e-12);
        assert!((loc[0] - 3.0 / prec).abs() < 1e-12);
        assert!((loc[0] - 2.9997).abs() < 1e-4 && (var[0] - 0.9999).abs() < 1e-4);
        b.tau_rte = vec![1e300];
        let (loc, var) = update_mu(&b, &hp);
        assert!((loc[0] - hp.mu_mu).abs() < 1e-12 && (var[0] - 1e4).abs() < 1e-6);
    }

    #[test]
    fn blending() {
        let mut x = vec![2.0];
        blend_global(&mut x, &[4.0], 0.5).unwrap();
        assert_eq!(x, vec![3.0]);
        blend_global(&mut x, &[7.0], 1.0).unwrap();
        assert_eq!(x, vec![7.0]);
        assert!(blend_global(&mut x, &[1.0], 0.0).is_err());
        assert!(blend_global(&mut x, &[1.0], 1.5).is_err());
    }

    #[test]
    fn general_block_lag_sums_use_covariances() {
        let mut b = block(2);
        b.cov = HCov::General {
            log_diag: vec![0.0, 0.0],
            lower: vec![0.5],
        };
        assert_eq!(b.structure(), CovStructure::General);
        let s = lag_sums(&b, 0);
        assert!((s.head_sq - 1.0).abs() < 1e-15);
        assert!((s.last_sq - 1.25).abs() < 1e-15);
        assert!((s.cross - 0.5).abs() < 1e-15);
    }
}
