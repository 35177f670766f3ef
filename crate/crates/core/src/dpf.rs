//! Dynamic Poisson factorisation baseline.
//!
//! Document intensities become author sequences: the rate of term `v` for
//! author `a` in period `t` is `sum_k exp(g_ak,t + h_kv,t)`. Both `g` and `h`
//! carry random-walk priors (`delta = 1`) and diagonal variational
//! covariances. Fitting reuses the trainer; only the document block differs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::Corpus;
use crate::error::{Result, TpfError};
use crate::rng::{substream, Stream};
use crate::state::{
    ArBlock, CovStructure, DeltaMode, DocParams, FitConfig, Hyperparams, ModelKind, VariationalState,
};
use crate::trainer::{self, FitError, FitOutput};

/// The hyperparameters actually used for the author model: `delta` pinned
/// at one and diagonal covariances, everything else as given.
pub fn dpf_hyperparams(hp: &Hyperparams) -> Hyperparams {
    Hyperparams {
        delta_mode: DeltaMode::FixedOne,
        cov_structure: CovStructure::Diagonal,
        ..hp.clone()
    }
}

fn check_corpus(corpus: &Corpus) -> Result<()> {
    if corpus.authors().is_none() {
        return Err(TpfError::Validation("the author model needs author ids in docs.csv".into()));
    }
    if !corpus.one_doc_per_author_period() {
        return Err(TpfError::Validation(
            "several documents share an (author, period) pair; aggregate them first".into(),
        ));
    }
    Ok(())
}

/// Starting point: `g ~ N(0, 0.1^2)` with unit variances, `h` around
/// `mu_loc` (random or warm).
pub fn init_state<R: Rng + ?Sized>(
    corpus: &Corpus,
    hp: &Hyperparams,
    rng: &mut R,
    warm_mu: Option<&[f64]>,
) -> Result<VariationalState> {
    check_corpus(corpus)?;
    let hp = dpf_hyperparams(hp);
    hp.validate()?;
    let (d, v, k, t, a) = (
        corpus.num_docs(),
        corpus.vocab_size(),
        hp.k,
        corpus.num_periods(),
        corpus.num_authors(),
    );
    let n01 = Normal::new(0.0, 0.1).expect("positive sd");
    let mu_loc = match warm_mu {
        Some(m) if m.len() == k * v => m.to_vec(),
        Some(m) => {
            return Err(TpfError::arg(format!("warm mean block has {} entries, expected {}", m.len(), k * v)));
        }
        None => (0..k * v).map(|_| n01.sample(rng)).collect(),
    };
    let terms = ArBlock::initialised(k * v, t, CovStructure::Diagonal, DeltaMode::FixedOne, &hp, mu_loc, 0.01, rng);
    let mut g = ArBlock::initialised(a * k, t, CovStructure::Diagonal, DeltaMode::FixedOne, &hp, vec![0.0; a * k], 0.1, rng);
    g.mu_loc = vec![0.0; a * k];
    Ok(VariationalState {
        kind: ModelKind::Dpf,
        d,
        v,
        k,
        t,
        a,
        docs: DocParams::Author(g),
        terms,
    })
}

/// Fit the author model. A static warm start, if requested, seeds the term
/// levels only.
pub fn dpf_fit(corpus: &Corpus, hp: &Hyperparams, cfg: &FitConfig) -> std::result::Result<FitOutput, FitError> {
    check_corpus(corpus)?;
    cfg.validate()?;
    let hp = dpf_hyperparams(hp);
    let warm = if cfg.warm_start_epochs > 0 {
        Some(trainer::warm_start(corpus, &hp, cfg)?)
    } else {
        None
    };
    let state = init_state(
        corpus,
        &hp,
        &mut substream(cfg.seed, Stream::Init),
        warm.as_ref().map(|w| w.mu_loc.as_slice()),
    )?;
    trainer::run(corpus, &hp, cfg, state)
}
