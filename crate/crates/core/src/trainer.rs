//! The stochastic optimisation loop: per batch, local coordinate updates,
//! blended global updates, then one Adam step on the sequences.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::RngCore;

use crate::advi::{self, AdamState};
use crate::cavi;
use crate::corpus::{split_batches, Corpus};
use crate::elbo::{self, ElboReport};
use crate::error::{Result, TpfError};
use crate::rng::{substream, Stream};
use crate::state::{
    init_state, CovStructure, DeltaMode, DocParams, FitConfig, Hyperparams, VariationalState, WarmStart,
};

/// Per-epoch record of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    /// Mean over the epoch's batches of the batch-scaled ELBO estimate.
    pub approx_elbo: f64,
    pub report: Option<ElboReport>,
    pub seconds_epoch: f64,
    pub seconds_eval: f64,
}

/// A failure during fitting, with where it happened and the state at the
/// start of the failing epoch.
#[derive(Debug)]
pub struct FitError {
    pub error: TpfError,
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
    pub state: Option<Box<VariationalState>>,
}

impl fmt::Display for FitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {} batch {} step {}: {}", self.epoch, self.batch, self.step, self.error)
    }
}

impl std::error::Error for FitError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<TpfError> for FitError {
    fn from(error: TpfError) -> Self {
        FitError {
            error,
            epoch: 0,
            batch: 0,
            step: 0,
            state: None,
        }
    }
}

pub type FitOutput = (VariationalState, Vec<TraceRow>);

/// Robbins-Monro step size `(s + tau0)^(-kappa)`.
pub fn step_size(s: u64, kappa: f64, tau0: f64) -> Result<f64> {
    if !(kappa > 0.5 && kappa <= 1.0) {
        return Err(TpfError::arg(format!("kappa must lie in (0.5, 1], got {kappa}")));
    }
    if s == 0 || !(tau0 >= 0.0) {
        return Err(TpfError::arg("step counter starts at 1 and tau0 must be nonnegative"));
    }
    Ok((s as f64 + tau0).powf(-kappa))
}

/// Static fit on the corpus with all periods merged. Returns its document
/// intensities and term levels.
pub fn warm_start(corpus: &Corpus, hp: &Hyperparams, cfg: &FitConfig) -> Result<WarmStart> {
    if cfg.warm_start_epochs == 0 {
        return Err(TpfError::arg("warm start needs at least one epoch"));
    }
    let flat = corpus.collapse_periods();
    let mut whp = hp.clone();
    // With a single period the AR coefficient never enters the objective.
    whp.delta_mode = DeltaMode::FixedOne;
    whp.cov_structure = CovStructure::Diagonal;
    let wcfg = FitConfig {
        epochs: cfg.warm_start_epochs,
        warm_start_epochs: 0,
        eval_every: 0,
        seed: substream(cfg.seed, Stream::WarmStart).next_u64(),
        ..cfg.clone()
    };
    let (state, _) = fit(&flat, &whp, &wcfg).map_err(|e| e.error)?;
    let DocParams::Gamma {
        theta_shp, theta_rte, ..
    } = state.docs
    else {
        unreachable!("static fit has gamma documents")
    };
    Ok(WarmStart {
        theta_shp,
        theta_rte,
        mu_loc: state.terms.loc,
    })
}

/// Fit the static-document model from a fresh (optionally warm) start.
pub fn fit(corpus: &Corpus, hp: &Hyperparams, cfg: &FitConfig) -> std::result::Result<FitOutput, FitError> {
    hp.validate()?;
    cfg.validate()?;
    if corpus.num_docs() == 0 {
        return Err(TpfError::arg("corpus is empty").into());
    }
    let warm = if cfg.warm_start_epochs > 0 {
        Some(warm_start(corpus, hp, cfg)?)
    } else {
        None
    };
    let state = init_state(corpus, hp, &mut substream(cfg.seed, Stream::Init), warm.as_ref())?;
    run(corpus, hp, cfg, state)
}

/// Continue optimising an existing state for `cfg.epochs` epochs.
pub fn run(
    corpus: &Corpus,
    hp: &Hyperparams,
    cfg: &FitConfig,
    mut state: VariationalState,
) -> std::result::Result<FitOutput, FitError> {
    hp.validate()?;
    cfg.validate()?;
    state.check_dims(corpus)?;
    state.validate()?;
    let mut batch_rng = substream(cfg.seed, Stream::Batching);
    let mut adam = AdamState::new(advi::param_len(&state));
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut s: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let snapshot = state.clone();
        let fail = |error: TpfError, batch: usize, step: u64| FitError {
            error,
            epoch,
            batch,
            step,
            state: Some(Box::new(snapshot.clone())),
        };
        let batches = split_batches(corpus, cfg.batch_size, &mut batch_rng).map_err(|e| fail(e, 0, s))?;
        let mut approx = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            s += 1;
            let mut step = || -> Result<f64> {
                let rho = step_size(s, cfg.kappa, cfg.tau0)?;
                if matches!(state.docs, DocParams::Gamma { .. }) {
                    cavi::update_theta_xi(&mut state, corpus, hp, &batch.doc_ids)?;
                }
                cavi::global_step(&mut state.terms, hp, rho)?;
                if let DocParams::Author(g) = &mut state.docs {
                    cavi::global_step(g, hp, rho)?;
                }
                if cfg.update_h {
                    let grad = advi::h_gradient(&state, corpus, batch)?;
                    let mut p = advi::params(&state);
                    advi::adam_step(&mut p, &grad, &mut adam, cfg)?;
                    advi::set_params(&mut state, &p)?;
                }
                state.validate()?;
                elbo::approx_elbo(&state, corpus, hp, batch)
            };
            approx += step().map_err(|e| fail(e, bi + 1, s))?;
        }
        let seconds_epoch = start.elapsed().as_secs_f64();
        let due = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let (report, seconds_eval) = if due {
            let r = elbo::evaluate(&state, corpus, hp).map_err(|e| fail(e, batches.len(), s))?;
            (Some(r), r.wall_seconds)
        } else {
            (None, 0.0)
        };
        log::info!(
            "epoch {epoch}: approx elbo {:.6e}{}",
            approx / batches.len() as f64,
            report.map_or(String::new(), |r| format!(", elbo {:.6e}", r.elbo))
        );
        trace.push(TraceRow {
            epoch,
            approx_elbo: approx / batches.len() as f64,
            report,
            seconds_epoch,
            seconds_eval,
        });
    }
    Ok((state, trace))
}

pub const TRACE_HEADER: &str = "epoch,approx_elbo,elbo,reconstruction,log_prior,entropy,vaic,vbic,sec_epoch,sec_eval";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:?}"));
    for r in rows {
        let rep = r.report.as_ref();
        let _ = writeln!(
            s,
            "{},{:?},{},{},{},{},{},{},{:.6},{:.6}",
            r.epoch,
            r.approx_elbo,
            opt(rep.map(|x| x.elbo)),
            opt(rep.map(|x| x.reconstruction)),
            opt(rep.map(|x| x.log_prior)),
            opt(rep.map(|x| x.entropy)),
            opt(rep.and_then(|x| x.vaic)),
            opt(rep.and_then(|x| x.vbic)),
            r.seconds_epoch,
            r.seconds_eval
        );
    }
    s
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_csv(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_sizes() {
        assert_eq!(step_size(1, 0.51, 0.0).unwrap(), 1.0);
        assert!((step_size(4, 1.0, 0.0).unwrap() - 0.25).abs() < 1e-15);
        assert!((step_size(100, 0.51, 0.0).unwrap() - 0.0955).abs() < 1e-4);
        assert!(step_size(1, 0.5, 0.0).is_err());
        assert!(step_size(1, 1.2, 0.0).is_err());
        let mut prev = 1.0;
        for s in 2..200 {
            let r = step_size(s, 0.51, 0.0).unwrap();
            assert!(r > 0.0 && r < prev);
            prev = r;
        }
    }
}
