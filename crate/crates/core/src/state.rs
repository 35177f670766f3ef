//! Variational parameters, hyperparameters, fit settings and checkpoints.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::armath::{packed_len, CovView, DeltaMoments, FactorView};
use crate::corpus::Corpus;
use crate::error::{Result, TpfError};
use crate::special::{digamma, truncated_normal};

/// How the AR coefficient of each term sequence is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaMode {
    /// Normal variational family, unrestricted.
    Free,
    /// Pinned to one (random-walk prior).
    FixedOne,
    /// Normal family truncated to `[-1, 1]`.
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovStructure {
    Diagonal,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Static gamma document intensities.
    Tpf,
    /// Author intensities that evolve over time.
    Dpf,
}

impl std::str::FromStr for DeltaMode {
    type Err = TpfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(DeltaMode::Free),
            "fixed_one" | "fixed-one" | "one" => Ok(DeltaMode::FixedOne),
            "truncated" => Ok(DeltaMode::Truncated),
            _ => Err(TpfError::arg(format!("unknown delta mode {s:?}"))),
        }
    }
}

impl std::str::FromStr for CovStructure {
    type Err = TpfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" | "diag" => Ok(CovStructure::Diagonal),
            "general" | "full" => Ok(CovStructure::General),
            _ => Err(TpfError::arg(format!("unknown covariance structure {s:?}"))),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = TpfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tpf" => Ok(ModelKind::Tpf),
            "dpf" => Ok(ModelKind::Dpf),
            _ => Err(TpfError::arg(format!("unknown model kind {s:?}"))),
        }
    }
}

/// Fixed prior constants and structural choices.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub a_theta: f64,
    pub a_xi: f64,
    pub b_xi: f64,
    pub a_tau: f64,
    pub b_tau: f64,
    pub mu_mu: f64,
    pub sigma_mu: f64,
    pub mu_delta: f64,
    pub sigma_delta: f64,
    pub k: usize,
    pub delta_mode: DeltaMode,
    pub cov_structure: CovStructure,
}

impl Hyperparams {
    pub fn new(k: usize) -> Self {
        Hyperparams {
            a_theta: 0.3,
            a_xi: 0.3,
            b_xi: 1.0,
            a_tau: 0.3,
            b_tau: 0.3,
            mu_mu: 0.0,
            sigma_mu: 100.0,
            mu_delta: 0.5,
            sigma_delta: 1.0,
            k,
            delta_mode: DeltaMode::Free,
            cov_structure: CovStructure::Diagonal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a_theta", self.a_theta),
            ("a_xi", self.a_xi),
            ("b_xi", self.b_xi),
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("sigma_mu", self.sigma_mu),
            ("sigma_delta", self.sigma_delta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TpfError::arg(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.mu_mu.is_finite() || !self.mu_delta.is_finite() {
            return Err(TpfError::arg("prior means must be finite"));
        }
        if self.k == 0 {
            return Err(TpfError::arg("K must be at least 1"));
        }
        Ok(())
    }
}

/// Settings of the stochastic optimisation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub kappa: f64,
    pub tau0: f64,
    pub adam_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Epochs between exact evaluations; 0 disables them.
    pub eval_every: usize,
    pub seed: u64,
    pub warm_start_epochs: usize,
    /// When false the AR sequences are left at their initial values.
    pub update_h: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 30,
            batch_size: 512,
            kappa: 0.51,
            tau0: 0.0,
            adam_alpha: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 10,
            seed: 0,
            warm_start_epochs: 0,
            update_h: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.5 && self.kappa <= 1.0) {
            return Err(TpfError::arg(format!("kappa must lie in (0.5, 1], got {}", self.kappa)));
        }
        if self.batch_size == 0 {
            return Err(TpfError::arg("batch size must be at least 1"));
        }
        if !(self.tau0 >= 0.0) {
            return Err(TpfError::arg("tau0 must be nonnegative"));
        }
        for (name, v) in [
            ("adam_alpha", self.adam_alpha),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TpfError::arg(format!("{name} must be positive, got {v}")));
            }
        }
        if self.adam_beta1 >= 1.0 || self.adam_beta2 >= 1.0 {
            return Err(TpfError::arg("Adam decay rates must be below 1"));
        }
        Ok(())
    }
}

/// Covariance parameters of a family of Gaussian sequences.
#[derive(Debug, Clone, PartialEq)]
pub enum HCov {
    /// Marginal variances, `n * T`.
    Diagonal { var: Vec<f64> },
    /// Cholesky factors: log-diagonal `n * T` and packed strict lower
    /// triangle `n * T(T-1)/2`.
    General { log_diag: Vec<f64>, lower: Vec<f64> },
}

/// `n` AR sequences of length `T` with their hyper-level blocks
/// (`mu`, `tau`, `delta`), one of each per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ArBlock {
    pub n: usize,
    pub t: usize,
    pub loc: Vec<f64>,
    pub cov: HCov,
    pub mu_loc: Vec<f64>,
    pub mu_var: Vec<f64>,
    pub tau_shp: Vec<f64>,
    pub tau_rte: Vec<f64>,
    pub delta_loc: Vec<f64>,
    pub delta_var: Vec<f64>,
    pub delta_mode: DeltaMode,
}

impl ArBlock {
    pub fn seq(&self, i: usize) -> &[f64] {
        &self.loc[i * self.t..(i + 1) * self.t]
    }

    pub fn structure(&self) -> CovStructure {
        match self.cov {
            HCov::Diagonal { .. } => CovStructure::Diagonal,
            HCov::General { .. } => CovStructure::General,
        }
    }

    pub fn cov_view(&self, i: usize) -> CovView<'_> {
        let t = self.t;
        match &self.cov {
            HCov::Diagonal { var } => CovView::Diagonal(&var[i * t..(i + 1) * t]),
            HCov::General { log_diag, lower } => {
                let p = packed_len(t);
                CovView::Factor(FactorView {
                    log_diag: &log_diag[i * t..(i + 1) * t],
                    lower: &lower[i * p..(i + 1) * p],
                })
            }
        }
    }

    /// Marginal variances of sequence `i`.
    pub fn marginal_vars(&self, i: usize) -> Vec<f64> {
        match self.cov_view(i) {
            CovView::Diagonal(v) => v.to_vec(),
            CovView::Factor(f) => (0..self.t).map(|s| f.marginal_var(s)).collect(),
            CovView::Dense(m) => m.diagonal().iter().copied().collect(),
        }
    }

    /// `Cov(h_s, h_{s-1})` for `s = 1..T`; zero under a diagonal family.
    pub fn lag_covs(&self, i: usize) -> Vec<f64> {
        match self.cov_view(i) {
            CovView::Diagonal(_) => vec![0.0; self.t.saturating_sub(1)],
            CovView::Factor(f) => (1..self.t).map(|s| f.cov(s, s - 1)).collect(),
            CovView::Dense(m) => (1..self.t).map(|s| m[(s, s - 1)]).collect(),
        }
    }

    pub fn delta_moments(&self, i: usize) -> DeltaMoments {
        match self.delta_mode {
            DeltaMode::FixedOne => DeltaMoments::fixed(1.0),
            DeltaMode::Free => DeltaMoments::normal(self.delta_loc[i], self.delta_var[i]),
            DeltaMode::Truncated => {
                let m = truncated_normal(self.delta_loc[i], self.delta_var[i], -1.0, 1.0);
                DeltaMoments {
                    mean: m.mean,
                    second: m.second,
                }
            }
        }
    }

    pub fn e_tau(&self, i: usize) -> f64 {
        self.tau_shp[i] / self.tau_rte[i]
    }

    pub fn elog_tau(&self, i: usize) -> f64 {
        digamma(self.tau_shp[i]) - self.tau_rte[i].ln()
    }

    /// `E exp(h)` for every entry: `exp(loc + var / 2)`.
    pub fn exp_means(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.loc.len());
        for i in 0..self.n {
            let vars = self.marginal_vars(i);
            let seq = self.seq(i);
            out.extend(seq.iter().zip(&vars).map(|(m, v)| (m + 0.5 * v).exp()));
        }
        out
    }

    fn new(n: usize, t: usize, cov: CovStructure, delta_mode: DeltaMode) -> Self {
        let cov = match cov {
            CovStructure::Diagonal => HCov::Diagonal {
                var: vec![1.0; n * t],
            },
            CovStructure::General => HCov::General {
                log_diag: vec![0.0; n * t],
                lower: vec![0.0; n * packed_len(t)],
            },
        };
        ArBlock {
            n,
            t,
            loc: vec![0.0; n * t],
            cov,
            mu_loc: vec![0.0; n],
            mu_var: vec![1.0; n],
            tau_shp: vec![1.0; n],
            tau_rte: vec![1.0; n],
            delta_loc: vec![0.0; n],
            delta_var: vec![0.0; n],
            delta_mode,
        }
    }

    /// Prior-anchored starting values: `mu_loc` given, `h = mu + N(0, noise^2)`.
    pub(crate) fn initialised<R: Rng + ?Sized>(
        n: usize,
        t: usize,
        cov: CovStructure,
        delta_mode: DeltaMode,
        hp: &Hyperparams,
        mu_loc: Vec<f64>,
        noise: f64,
        rng: &mut R,
    ) -> Self {
        let mut b = ArBlock::new(n, t, cov, delta_mode);
        let jitter = Normal::new(0.0, noise).expect("positive sd");
        for i in 0..n {
            for s in 0..t {
                b.loc[i * t + s] = mu_loc[i] + jitter.sample(rng);
            }
        }
        b.mu_loc = mu_loc;
        b.tau_shp = vec![hp.a_tau + t as f64 / 2.0; n];
        b.tau_rte = vec![hp.b_tau; n];
        if delta_mode == DeltaMode::FixedOne {
            b.delta_loc = vec![1.0; n];
            b.delta_var = vec![0.0; n];
        } else {
            b.delta_loc = vec![hp.mu_delta; n];
            b.delta_var = vec![0.01; n];
        }
        b
    }

    fn check(&self, name: &str) -> Result<()> {
        let bad = |what: &str| Err(TpfError::numeric(format!("{name}: {what}")));
        if self.loc.iter().any(|x| !x.is_finite()) || self.mu_loc.iter().any(|x| !x.is_finite()) {
            return bad("non-finite location");
        }
        if self.mu_var.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return bad("non-positive mu variance");
        }
        if self
            .tau_shp
            .iter()
            .chain(&self.tau_rte)
            .any(|&x| !(x > 0.0 && x.is_finite()))
        {
            return bad("non-positive tau parameter");
        }
        match self.delta_mode {
            DeltaMode::FixedOne => {
                if self.delta_loc.iter().any(|&x| x != 1.0) || self.delta_var.iter().any(|&x| x != 0.0) {
                    return bad("delta must be pinned at 1");
                }
            }
            _ => {
                if self.delta_var.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                    return bad("non-positive delta variance");
                }
            }
        }
        match &self.cov {
            HCov::Diagonal { var } => {
                if var.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                    return bad("non-positive variance");
                }
            }
            HCov::General { log_diag, lower } => {
                if log_diag.iter().chain(lower).any(|x| !x.is_finite()) {
                    return bad("non-finite covariance factor");
                }
            }
        }
        Ok(())
    }
}

/// Document-side parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum DocParams {
    /// Gamma `theta` (`D * K`, doc-major) and `xi` (`D`).
    Gamma {
        theta_shp: Vec<f64>,
        theta_rte: Vec<f64>,
        xi_shp: Vec<f64>,
        xi_rte: Vec<f64>,
    },
    /// Author sequences `g`, one per `(a, k)` at index `a * K + k`.
    Author(ArBlock),
}

/// Complete variational state.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub kind: ModelKind,
    pub d: usize,
    pub v: usize,
    pub k: usize,
    pub t: usize,
    /// Number of authors; zero for the static model.
    pub a: usize,
    pub docs: DocParams,
    /// Term sequences `h`, one per `(k, v)` at index `k * V + v`.
    pub terms: ArBlock,
}

/// Document and term blocks taken from a static fit.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub theta_shp: Vec<f64>,
    pub theta_rte: Vec<f64>,
    pub mu_loc: Vec<f64>,
}

impl VariationalState {
    pub fn theta(&self) -> Option<(&[f64], &[f64])> {
        match &self.docs {
            DocParams::Gamma {
                theta_shp, theta_rte, ..
            } => Some((theta_shp, theta_rte)),
            DocParams::Author(_) => None,
        }
    }

    /// `(E log theta_dk, E theta_dk)` for every `k` of document `d`.
    pub fn doc_moments(&self, corpus: &Corpus, d: usize) -> (Vec<f64>, Vec<f64>) {
        let k = self.k;
        match &self.docs {
            DocParams::Gamma {
                theta_shp, theta_rte, ..
            } => {
                let shp = &theta_shp[d * k..(d + 1) * k];
                let rte = &theta_rte[d * k..(d + 1) * k];
                let elog = shp.iter().zip(rte).map(|(s, r)| digamma(*s) - r.ln()).collect();
                let mean = shp.iter().zip(rte).map(|(s, r)| s / r).collect();
                (elog, mean)
            }
            DocParams::Author(g) => {
                let a = corpus.authors().expect("author ids")[d];
                let t = corpus.period_of(d);
                let mut elog = Vec::with_capacity(k);
                let mut mean = Vec::with_capacity(k);
                for kk in 0..k {
                    let i = a * k + kk;
                    let m = g.loc[i * g.t + t];
                    let var = match &g.cov {
                        HCov::Diagonal { var } => var[i * g.t + t],
                        HCov::General { .. } => g.marginal_vars(i)[t],
                    };
                    elog.push(m);
                    mean.push((m + 0.5 * var).exp());
                }
                (elog, mean)
            }
        }
    }

    /// Point estimates of theta used for criteria: `shp / rte` or `exp(g_loc)`.
    pub fn doc_point(&self, corpus: &Corpus, d: usize) -> Vec<f64> {
        let k = self.k;
        match &self.docs {
            DocParams::Gamma {
                theta_shp, theta_rte, ..
            } => (0..k).map(|kk| theta_shp[d * k + kk] / theta_rte[d * k + kk]).collect(),
            DocParams::Author(g) => {
                let a = corpus.authors().expect("author ids")[d];
                let t = corpus.period_of(d);
                (0..k).map(|kk| g.loc[(a * k + kk) * g.t + t].exp()).collect()
            }
        }
    }

    /// Check every positivity and mode invariant.
    pub fn validate(&self) -> Result<()> {
        if self.terms.n != self.k * self.v || self.terms.t != self.t {
            return Err(TpfError::Contract("term block dimensions disagree with state".into()));
        }
        self.terms.check("h")?;
        match &self.docs {
            DocParams::Gamma {
                theta_shp,
                theta_rte,
                xi_shp,
                xi_rte,
            } => {
                if theta_shp.len() != self.d * self.k || xi_shp.len() != self.d {
                    return Err(TpfError::Contract("document block dimensions disagree with state".into()));
                }
                if theta_shp
                    .iter()
                    .chain(theta_rte)
                    .chain(xi_shp)
                    .chain(xi_rte)
                    .any(|&x| !(x > 0.0 && x.is_finite()))
                {
                    return Err(TpfError::numeric("non-positive gamma parameter in theta or xi"));
                }
            }
            DocParams::Author(g) => {
                if g.n != self.a * self.k || g.t != self.t {
                    return Err(TpfError::Contract("author block dimensions disagree with state".into()));
                }
                g.check("g")?;
            }
        }
        Ok(())
    }

    pub fn check_dims(&self, corpus: &Corpus) -> Result<()> {
        if self.d != corpus.num_docs() || self.v != corpus.vocab_size() || self.t != corpus.num_periods() {
            return Err(TpfError::Validation(format!(
                "state dimensions D={}, V={}, T={} do not match corpus D={}, V={}, T={}",
                self.d,
                self.v,
                self.t,
                corpus.num_docs(),
                corpus.vocab_size(),
                corpus.num_periods()
            )));
        }
        if self.kind == ModelKind::Dpf && self.a != corpus.num_authors() {
            return Err(TpfError::Validation("author count does not match corpus".into()));
        }
        Ok(())
    }
}

/// Starting point for the static model.
pub fn init_state<R: Rng + ?Sized>(
    corpus: &Corpus,
    hp: &Hyperparams,
    rng: &mut R,
    warm: Option<&WarmStart>,
) -> Result<VariationalState> {
    hp.validate()?;
    let (d, v, k, t) = (corpus.num_docs(), corpus.vocab_size(), hp.k, corpus.num_periods());
    if let Some(w) = warm {
        if w.theta_shp.len() != d * k || w.theta_rte.len() != d * k || w.mu_loc.len() != k * v {
            return Err(TpfError::arg(format!(
                "warm start blocks have sizes ({}, {}, {}), expected ({}, {}, {})",
                w.theta_shp.len(),
                w.theta_rte.len(),
                w.mu_loc.len(),
                d * k,
                d * k,
                k * v
            )));
        }
    }
    let (theta_shp, theta_rte) = match warm {
        Some(w) => (w.theta_shp.clone(), w.theta_rte.clone()),
        None => (
            (0..d * k).map(|_| hp.a_theta + 0.1 * rng.random::<f64>()).collect(),
            vec![1.0; d * k],
        ),
    };
    let mu_loc = match warm {
        Some(w) => w.mu_loc.clone(),
        None => {
            let n01 = Normal::new(0.0, 0.1).expect("positive sd");
            (0..k * v).map(|_| n01.sample(rng)).collect()
        }
    };
    let terms = ArBlock::initialised(k * v, t, hp.cov_structure, hp.delta_mode, hp, mu_loc, 0.01, rng);
    Ok(VariationalState {
        kind: ModelKind::Tpf,
        d,
        v,
        k,
        t,
        a: 0,
        docs: DocParams::Gamma {
            theta_shp,
            theta_rte,
            xi_shp: vec![hp.a_xi + k as f64 * hp.a_theta; d],
            xi_rte: vec![hp.b_xi; d],
        },
        terms,
    })
}

const MAGIC: &[u8; 8] = b"TPFCKPT\0";
const VERSION: u32 = 1;

fn mode_code(m: DeltaMode) -> u8 {
    match m {
        DeltaMode::Free => 0,
        DeltaMode::FixedOne => 1,
        DeltaMode::Truncated => 2,
    }
}

fn mode_from(c: u8) -> Result<DeltaMode> {
    match c {
        0 => Ok(DeltaMode::Free),
        1 => Ok(DeltaMode::FixedOne),
        2 => Ok(DeltaMode::Truncated),
        _ => Err(TpfError::Checkpoint(format!("unknown delta mode flag {c}"))),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn slice(&mut self, xs: &[f64]) {
        for &x in xs {
            self.f64(x);
        }
    }
    fn block(&mut self, b: &ArBlock) {
        self.u8(mode_code(b.delta_mode));
        self.u8(matches!(b.cov, HCov::General { .. }) as u8);
        self.u64(b.n as u64);
        self.u64(b.t as u64);
        self.slice(&b.loc);
        match &b.cov {
            HCov::Diagonal { var } => self.slice(var),
            HCov::General { log_diag, lower } => {
                self.slice(log_diag);
                self.slice(lower);
            }
        }
        for xs in [&b.mu_loc, &b.mu_var, &b.tau_shp, &b.tau_rte, &b.delta_loc, &b.delta_var] {
            self.slice(xs);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TpfError::Checkpoint(format!(
                "file truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn size(&mut self) -> Result<usize> {
        let x = self.u64()?;
        usize::try_from(x)
            .ok()
            .filter(|&x| x <= self.buf.len())
            .ok_or_else(|| TpfError::Checkpoint(format!("implausible dimension {x}")))
    }
    fn vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| TpfError::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn block(&mut self, n_expect: usize, t_expect: usize) -> Result<ArBlock> {
        let delta_mode = mode_from(self.u8()?)?;
        let general = self.u8()? == 1;
        let (n, t) = (self.size()?, self.size()?);
        if n != n_expect || t != t_expect {
            return Err(TpfError::Checkpoint(format!(
                "block of {n} sequences of length {t}, header implies {n_expect} of length {t_expect}"
            )));
        }
        let loc = self.vec(n * t)?;
        let cov = if general {
            let log_diag = self.vec(n * t)?;
            let lower = self.vec(n * packed_len(t))?;
            HCov::General { log_diag, lower }
        } else {
            HCov::Diagonal { var: self.vec(n * t)? }
        };
        Ok(ArBlock {
            n,
            t,
            loc,
            cov,
            mu_loc: self.vec(n)?,
            mu_var: self.vec(n)?,
            tau_shp: self.vec(n)?,
            tau_rte: self.vec(n)?,
            delta_loc: self.vec(n)?,
            delta_var: self.vec(n)?,
            delta_mode,
        })
    }
}

/// Serialise state and hyperparameters to a versioned little-endian file.
pub fn save_checkpoint(path: &Path, state: &VariationalState, hp: &Hyperparams) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u8(match state.kind {
        ModelKind::Tpf => 0,
        ModelKind::Dpf => 1,
    });
    w.u8(mode_code(hp.delta_mode));
    w.u8(match hp.cov_structure {
        CovStructure::Diagonal => 0,
        CovStructure::General => 1,
    });
    for x in [state.d, state.v, state.k, state.t, state.a] {
        w.u64(x as u64);
    }
    w.slice(&[
        hp.a_theta,
        hp.a_xi,
        hp.b_xi,
        hp.a_tau,
        hp.b_tau,
        hp.mu_mu,
        hp.sigma_mu,
        hp.mu_delta,
        hp.sigma_delta,
    ]);
    w.block(&state.terms);
    match &state.docs {
        DocParams::Gamma {
            theta_shp,
            theta_rte,
            xi_shp,
            xi_rte,
        } => {
            w.slice(theta_shp);
            w.slice(theta_rte);
            w.slice(xi_shp);
            w.slice(xi_rte);
        }
        DocParams::Author(g) => w.block(g),
    }
    fs::write(path, &w.0)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(VariationalState, Hyperparams)> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8).map_err(|_| TpfError::Checkpoint("not a checkpoint file".into()))? != MAGIC {
        return Err(TpfError::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TpfError::Checkpoint(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    let kind = match r.u8()? {
        0 => ModelKind::Tpf,
        1 => ModelKind::Dpf,
        c => return Err(TpfError::Checkpoint(format!("unknown model flag {c}"))),
    };
    let delta_mode = mode_from(r.u8()?)?;
    let cov_structure = match r.u8()? {
        0 => CovStructure::Diagonal,
        1 => CovStructure::General,
        c => return Err(TpfError::Checkpoint(format!("unknown covariance flag {c}"))),
    };
    let (d, v, k, t, a) = (r.size()?, r.size()?, r.size()?, r.size()?, r.size()?);
    let h = r.vec(9)?;
    let hp = Hyperparams {
        a_theta: h[0],
        a_xi: h[1],
        b_xi: h[2],
        a_tau: h[3],
        b_tau: h[4],
        mu_mu: h[5],
        sigma_mu: h[6],
        mu_delta: h[7],
        sigma_delta: h[8],
        k,
        delta_mode,
        cov_structure,
    };
    let terms = r.block(k * v, t)?;
    if terms.delta_mode != delta_mode || terms.structure() != cov_structure {
        return Err(TpfError::Checkpoint("term block flags disagree with header".into()));
    }
    let docs = match kind {
        ModelKind::Tpf => DocParams::Gamma {
            theta_shp: r.vec(d * k)?,
            theta_rte: r.vec(d * k)?,
            xi_shp: r.vec(d)?,
            xi_rte: r.vec(d)?,
        },
        ModelKind::Dpf => DocParams::Author(r.block(a * k, t)?),
    };
    if r.pos != buf.len() {
        return Err(TpfError::Checkpoint(format!(
            "{} trailing bytes after the last block",
            buf.len() - r.pos
        )));
    }
    let state = VariationalState {
        kind,
        d,
        v,
        k,
        t,
        a,
        docs,
        terms,
    };
    Ok((state, hp))
}

/// Refuse to continue a run whose structural settings differ from the file.
pub fn check_compatible(loaded: &Hyperparams, wanted: &Hyperparams) -> Result<()> {
    if loaded.cov_structure != wanted.cov_structure {
        return Err(TpfError::Checkpoint(format!(
            "checkpoint has {:?} covariance, run asks for {:?}",
            loaded.cov_structure, wanted.cov_structure
        )));
    }
    if loaded.delta_mode != wanted.delta_mode {
        return Err(TpfError::Checkpoint(format!(
            "checkpoint has delta mode {:?}, run asks for {:?}",
            loaded.delta_mode, wanted.delta_mode
        )));
    }
    if loaded.k != wanted.k {
        return Err(TpfError::Checkpoint(format!("checkpoint has K={}, run asks for K={}", loaded.k, wanted.k)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Triplet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(t: usize) -> Corpus {
        let trip: Vec<_> = (0..2 * t)
            .map(|d| Triplet {
                doc: d,
                term: d % 3,
                count: 1,
            })
            .collect();
        let periods = (0..2 * t).map(|d| d / 2).collect();
        Corpus::from_parts(&trip, periods, None, vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn init_constants() {
        let c = corpus(18);
        let mut hp = Hyperparams::new(25);
        hp.delta_mode = DeltaMode::FixedOne;
        let s = init_state(&c, &hp, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        assert!(s.terms.tau_shp.iter().all(|&x| (x - 9.3).abs() < 1e-12));
        assert!(s.terms.delta_loc.iter().all(|&x| x == 1.0));
        assert!(s.terms.delta_var.iter().all(|&x| x == 0.0));
        let DocParams::Gamma { xi_shp, .. } = &s.docs else { panic!() };
        assert!(xi_shp.iter().all(|&x| (x - 7.8).abs() < 1e-12));
        s.validate().unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        let c = corpus(3);
        let hp = Hyperparams::new(2);
        let a = init_state(&c, &hp, &mut ChaCha8Rng::seed_from_u64(5), None).unwrap();
        let b = init_state(&c, &hp, &mut ChaCha8Rng::seed_from_u64(5), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn warm_start_is_copied_and_checked() {
        let c = corpus(2);
        let hp = Hyperparams::new(1);
        let w = WarmStart {
            theta_shp: vec![2.0; 4],
            theta_rte: vec![3.0; 4],
            mu_loc: vec![0.5; 3],
        };
        let s = init_state(&c, &hp, &mut ChaCha8Rng::seed_from_u64(0), Some(&w)).unwrap();
        assert_eq!(s.theta().unwrap().0, &w.theta_shp[..]);
        assert_eq!(s.terms.mu_loc, w.mu_loc);
        let bad = WarmStart {
            mu_loc: vec![0.0; 2],
            ..w
        };
        assert!(init_state(&c, &hp, &mut ChaCha8Rng::seed_from_u64(0), Some(&bad)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = corpus(3);
        let mut hp = Hyperparams::new(2);
        hp.cov_structure = CovStructure::General;
        let mut s = init_state(&c, &hp, &mut ChaCha8Rng::seed_from_u64(1), None).unwrap();
        if let HCov::General { lower, .. } = &mut s.terms.cov {
            lower.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 0.01);
        }
        save_checkpoint(&path, &s, &hp).unwrap();
        let (s2, hp2) = load_checkpoint(&path).unwrap();
        assert_eq!(s, s2);
        assert_eq!(hp, hp2);

        let mut diag = hp.clone();
        diag.cov_structure = CovStructure::Diagonal;
        assert!(check_compatible(&hp2, &diag).is_err());

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(TpfError::Checkpoint(_))));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        fs::write(&path, &wrong).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));
        let mut v2 = bytes;
        v2[8] = 2;
        fs::write(&path, &v2).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("version"));
    }
}
