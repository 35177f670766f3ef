//! Synthetic corpora with known topic structure.
//!
//! Every word gets `T` vowels, one of which is favoured (probability 5/9),
//! and topic `k < 5` is tied to the `k`-th vowel through the mean level
//! `mu_kv = -3 + 4 * (#k-th vowel) / T`. A sixth topic is aligned with
//! nothing. The time evolution `h~_v` is a shifted AR(1) draw shared by all
//! topics and is spelled out by the consonants of the word.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde_json::json;

use crate::corpus::{Corpus, Triplet};
use crate::error::{Result, TpfError};
use crate::rng::{substream, Stream};

pub const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
pub const CONSONANTS: &str = "bcdfghjklmnpqrstvwxyz";
const GRID_HALF_WIDTH: f64 = 3.15;
const GRID_STEP: f64 = 0.3;
const THETA_LEVELS: [f64; 5] = [0.8, 0.9, 1.0, 1.1, 1.2];

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Documents (authors) per period.
    pub a: usize,
    pub v: usize,
    pub k: usize,
    pub t: usize,
    pub delta: f64,
    pub tau: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// `D * K`.
    pub theta: Vec<f64>,
    /// `K * V`.
    pub mu: Vec<f64>,
    /// `K * V * T`, equal to `mu_kv + h_tilde_v,t`.
    pub h: Vec<f64>,
    /// `V * T`.
    pub h_tilde: Vec<f64>,
    pub delta: f64,
    pub tau: f64,
    pub words: Vec<String>,
    /// Index of the favoured vowel of each word.
    pub favoured: Vec<usize>,
}

/// Draw `h_0 - mu ~ N(0, 1/tau)`, `h_t - mu | h_{t-1} ~ N(delta (h_{t-1} - mu), 1/tau)`.
pub fn sample_ar<R: Rng + ?Sized>(t: usize, mu: f64, delta: f64, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(TpfError::arg(format!("tau must be positive, got {tau}")));
    }
    let noise = Normal::new(0.0, tau.sqrt().recip()).map_err(|e| TpfError::arg(e.to_string()))?;
    let mut out = Vec::with_capacity(t);
    let mut prev = 0.0;
    for s in 0..t {
        let dev = if s == 0 { 0.0 } else { delta * prev } + noise.sample(rng);
        out.push(mu + dev);
        prev = dev;
    }
    Ok(out)
}

/// Consonant for a value of the shared sequence: 21 equal intervals on
/// `[-3.15, 3.15]`, outer ones open-ended, middle one `n`.
pub fn consonant_for(x: f64) -> char {
    let idx = ((x + GRID_HALF_WIDTH) / GRID_STEP).floor().clamp(0.0, 20.0) as usize;
    CONSONANTS.as_bytes()[idx] as char
}

pub fn simulate(cfg: &SimConfig) -> Result<(Corpus, SyntheticTruth)> {
    if cfg.a == 0 || cfg.v == 0 || cfg.t == 0 || cfg.k == 0 {
        return Err(TpfError::arg("A, V, K and T must all be positive"));
    }
    if cfg.k > VOWELS.len() + 1 {
        return Err(TpfError::arg(format!("K = {} exceeds five vowel topics plus one redundant topic", cfg.k)));
    }
    if !cfg.delta.is_finite() {
        return Err(TpfError::arg("delta must be finite"));
    }
    let (a_n, v_n, k_n, t_n) = (cfg.a, cfg.v, cfg.k, cfg.t);
    let mut rng = substream(cfg.seed, Stream::Simulation);

    let mut favoured = Vec::with_capacity(v_n);
    let mut vowel_seq = Vec::with_capacity(v_n);
    for _ in 0..v_n {
        let f = rng.random_range(0..VOWELS.len());
        favoured.push(f);
        let seq: Vec<usize> = (0..t_n)
            .map(|_| {
                // Nine equal slots: five for the favoured vowel, one for each other.
                let u = rng.random_range(0..9);
                if u < 5 {
                    f
                } else {
                    let others: Vec<usize> = (0..5).filter(|&j| j != f).collect();
                    others[u - 5]
                }
            })
            .collect();
        vowel_seq.push(seq);
    }

    let mut mu = vec![-3.0; k_n * v_n];
    for k in 0..k_n.min(VOWELS.len()) {
        for v in 0..v_n {
            let count = vowel_seq[v].iter().filter(|&&j| j == k).count();
            mu[k * v_n + v] = -3.0 + 4.0 * count as f64 / t_n as f64;
        }
    }

    let mut h_tilde = Vec::with_capacity(v_n * t_n);
    let mut words = Vec::with_capacity(v_n);
    for v in 0..v_n {
        let seq = sample_ar(t_n, 0.0, cfg.delta, cfg.tau, &mut rng)?;
        let mut w = String::with_capacity(2 * t_n);
        for (s, &x) in seq.iter().enumerate() {
            w.push(consonant_for(x));
            w.push(VOWELS[vowel_seq[v][s]]);
        }
        words.push(w);
        h_tilde.extend(seq);
    }

    let mut h = Vec::with_capacity(k_n * v_n * t_n);
    for k in 0..k_n {
        for v in 0..v_n {
            for s in 0..t_n {
                h.push(mu[k * v_n + v] + h_tilde[v * t_n + s]);
            }
        }
    }

    let d_n = a_n * t_n;
    let theta: Vec<f64> = (0..d_n * k_n)
        .map(|_| THETA_LEVELS[rng.random_range(0..THETA_LEVELS.len())])
        .collect();

    let exp_h: Vec<f64> = h.iter().map(|x| x.exp()).collect();
    let mut triplets = Vec::new();
    let mut periods = Vec::with_capacity(d_n);
    let mut authors = Vec::with_capacity(d_n);
    for d in 0..d_n {
        let (t, a) = (d / a_n, d % a_n);
        periods.push(t);
        authors.push(a);
        for v in 0..v_n {
            let lambda: f64 = (0..k_n).map(|k| theta[d * k_n + k] * exp_h[(k * v_n + v) * t_n + t]).sum();
            let y = Poisson::new(lambda)
                .map_err(|e| TpfError::numeric(format!("Poisson rate {lambda}: {e}")))?
                .sample(&mut rng);
            if y > 0.0 {
                let count = if y >= u32::MAX as f64 { u32::MAX } else { y as u32 };
                triplets.push(Triplet { doc: d, term: v, count });
            }
        }
    }
    let corpus = Corpus::from_parts(&triplets, periods, Some(authors), words.clone())?;
    let truth = SyntheticTruth {
        theta,
        mu,
        h,
        h_tilde,
        delta: cfg.delta,
        tau: cfg.tau,
        words,
        favoured,
    };
    Ok((corpus, truth))
}

/// Write the corpus files and `truth.json` into `dir`.
pub fn write_simulation(dir: &Path, cfg: &SimConfig, corpus: &Corpus, truth: &SyntheticTruth) -> Result<()> {
    corpus.write_dir(dir)?;
    let k_n = cfg.k;
    let d_n = truth.theta.len() / k_n;
    let theta_mean: Vec<f64> = (0..k_n)
        .map(|k| (0..d_n).map(|d| truth.theta[d * k_n + k]).sum::<f64>() / d_n as f64)
        .collect();
    let mu: Vec<&[f64]> = truth.mu.chunks(cfg.v).collect();
    let h_tilde: Vec<&[f64]> = truth.h_tilde.chunks(cfg.t).collect();
    let doc = json!({
        "A": cfg.a,
        "V": cfg.v,
        "K": cfg.k,
        "T": cfg.t,
        "seed": cfg.seed,
        "delta": truth.delta,
        "tau": truth.tau,
        "theta_levels": THETA_LEVELS,
        "theta_mean_by_topic": theta_mean,
        "mu": mu,
        "h_tilde": h_tilde,
        "favoured_vowel": truth.favoured.iter().map(|&j| VOWELS[j].to_string()).collect::<Vec<_>>(),
    });
    std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}
