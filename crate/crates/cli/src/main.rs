use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use tpf_core::corpus::load_dir;
use tpf_core::dpf::{dpf_fit, dpf_hyperparams};
use tpf_core::elbo::evaluate;
use tpf_core::postprocess::{frex_scores, top_terms, write_summary};
use tpf_core::state::{load_checkpoint, save_checkpoint, CovStructure, DeltaMode, FitConfig, Hyperparams, ModelKind};
use tpf_core::synthgen::{simulate, write_simulation, SimConfig};
use tpf_core::trainer::{fit, write_trace};
use tpf_core::{Corpus, TpfError};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const TRACE_FILE: &str = "trace.csv";
const EVAL_FILE: &str = "eval.csv";
const EVAL_HEADER: &str = "checkpoint,elbo,reconstruction,log_prior,entropy,vaic,vbic,seconds";

/// Time-varying Poisson factorisation with stochastic variational inference.
#[derive(Debug, Parser)]
#[command(name = "tpf", version)]
struct Cli {
    /// Worker threads for the parallel reductions (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Flat `key=value` file whose keys mirror the long flag names. Flags
    /// given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known topics and write it with its truth.
    Simulate(SimulateArgs),
    /// Fit a model and write `checkpoint.bin` and `trace.csv`.
    Fit(FitArgs),
    /// Evaluate a checkpoint and append the report to a CSV file.
    Eval(EvalArgs),
    /// Write prevalence, FREX rankings and DTC tables for a checkpoint.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Authors, i.e. documents per period.
    #[arg(long = "A", default_value_t = 100)]
    a: usize,
    #[arg(long = "V", default_value_t = 200)]
    v: usize,
    #[arg(long = "K", default_value_t = 6)]
    k: usize,
    #[arg(long = "T", default_value_t = 10)]
    t: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    delta: f64,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Directory with `triplets.csv`, `docs.csv` and `vocab.txt`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "K")]
    k: usize,
    #[arg(long, default_value = "tpf", value_parser = parse_core::<ModelKind>)]
    model: ModelKind,
    #[arg(long, default_value = "free", value_parser = parse_core::<DeltaMode>)]
    delta_mode: DeltaMode,
    #[arg(long, default_value = "diagonal", value_parser = parse_core::<CovStructure>)]
    cov: CovStructure,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.51)]
    kappa: f64,
    #[arg(long, default_value_t = 0.0)]
    tau0: f64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    /// Epochs between exact evaluations; 0 evaluates never.
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    /// Epochs of the static warm-start fit; 0 starts at random.
    #[arg(long, default_value_t = 0)]
    warm_start: usize,
    /// Keep the term sequences at their initial values.
    #[arg(long)]
    freeze_h: bool,
    /// Sum documents of the same author and period (author model only).
    #[arg(long)]
    aggregate: bool,
    #[arg(long, default_value_t = 0.3)]
    a_theta: f64,
    #[arg(long, default_value_t = 0.3)]
    a_xi: f64,
    #[arg(long, default_value_t = 1.0)]
    b_xi: f64,
    #[arg(long, default_value_t = 0.3)]
    a_tau: f64,
    #[arg(long, default_value_t = 0.3)]
    b_tau: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mu_mu: f64,
    #[arg(long, default_value_t = 100.0)]
    sigma_mu: f64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    mu_delta: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_delta: f64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    aggregate: bool,
    /// CSV file to append to (default: `eval.csv` next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    aggregate: bool,
    /// Weight of exclusivity in FREX.
    #[arg(long, default_value_t = 0.5)]
    frex_w: f64,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Output directory (default: the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_core<T: std::str::FromStr<Err = TpfError>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: TpfError| e.to_string())
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(TpfError),
}

impl From<TpfError> for CliError {
    fn from(e: TpfError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(TpfError::Io(e))
    }
}

impl CliError {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            CliError::Usage(_) | CliError::Core(TpfError::Argument(_)) => ("usage", 2),
            CliError::Core(e) if e.is_numeric() => ("numeric", 4),
            CliError::Core(TpfError::Contract(_)) => ("contract", 1),
            CliError::Core(_) => ("io", 3),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = e.kind_and_code();
            let msg = e.message().replace(['\n', '\r'], " ");
            eprintln!("error kind={kind} code={code}: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(argv: Vec<OsString>) -> Result<(), CliError> {
    let argv = merge_config(argv)?;
    let mut cmd = Cli::command().args_override_self(true);
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    let matches = cmd.try_get_matches_from(argv).unwrap_or_else(|e| e.exit());
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());

    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }

    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Summarize(a) => cmd_summarize(a),
    }
}

/// Find `--config` in the raw arguments and splice the file's settings in
/// right after the subcommand name, so later command-line flags override them.
fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    let mut sub_pos = None;
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if a == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if a == "--threads" {
            i += 1;
        } else if !a.starts_with('-') && sub_pos.is_none() {
            sub_pos = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(pos)) = (config, sub_pos) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::Core(TpfError::Parse { path: path.clone(), line: 0, msg: e.to_string() })
    })?;
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(&args[pos])
        .ok_or_else(|| CliError::Usage(format!("unknown subcommand {:?}", args[pos])))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| CliError::Usage(format!("{}:{}: {msg}", path.display(), n + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected key=value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "threads" || key == "config" {
            return Err(parse_err(format!("{key} can only be given on the command line")));
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key))
            .ok_or_else(|| parse_err(format!("unknown key {key:?} for {}", sub.get_name())))?;
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}={value}"));
        } else {
            match value {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                _ => return Err(parse_err(format!("{key} expects true or false"))),
            }
        }
    }
    let mut out = argv;
    for (j, e) in extra.into_iter().enumerate() {
        out.insert(pos + 1 + j, e.into());
    }
    Ok(out)
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let cfg = SimConfig { a: a.a, v: a.v, k: a.k, t: a.t, delta: a.delta, tau: a.tau, seed: a.seed };
    let (corpus, truth) = simulate(&cfg)?;
    write_simulation(&a.out, &cfg, &corpus, &truth)?;
    println!(
        "wrote {} documents, {} terms, {} nonzero counts to {}",
        corpus.num_docs(),
        corpus.vocab_size(),
        corpus.nnz(),
        a.out.display()
    );
    Ok(())
}

fn load_data(dir: &Path, aggregate: bool) -> Result<Corpus, CliError> {
    let corpus = load_dir(dir)?;
    if aggregate {
        Ok(corpus.aggregate_by_author()?)
    } else {
        Ok(corpus)
    }
}

fn cmd_fit(a: FitArgs) -> Result<(), CliError> {
    if a.aggregate && a.model != ModelKind::Dpf {
        return Err(CliError::Usage("--aggregate applies to the author model only".into()));
    }
    let corpus = load_data(&a.data, a.aggregate)?;
    let mut hp = Hyperparams::new(a.k);
    hp.a_theta = a.a_theta;
    hp.a_xi = a.a_xi;
    hp.b_xi = a.b_xi;
    hp.a_tau = a.a_tau;
    hp.b_tau = a.b_tau;
    hp.mu_mu = a.mu_mu;
    hp.sigma_mu = a.sigma_mu;
    hp.mu_delta = a.mu_delta;
    hp.sigma_delta = a.sigma_delta;
    hp.delta_mode = a.delta_mode;
    hp.cov_structure = a.cov;
    let cfg = FitConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        kappa: a.kappa,
        tau0: a.tau0,
        adam_alpha: a.alpha,
        adam_beta1: a.beta1,
        adam_beta2: a.beta2,
        adam_eps: a.adam_eps,
        eval_every: a.eval_every,
        seed: a.seed,
        warm_start_epochs: a.warm_start,
        update_h: !a.freeze_h,
    };
    std::fs::create_dir_all(&a.out)?;
    let checkpoint = a.out.join(CHECKPOINT_FILE);
    let (result, hp) = match a.model {
        ModelKind::Tpf => (fit(&corpus, &hp, &cfg), hp),
        ModelKind::Dpf => (dpf_fit(&corpus, &hp, &cfg), dpf_hyperparams(&hp)),
    };
    match result {
        Ok((state, trace)) => {
            save_checkpoint(&checkpoint, &state, &hp)?;
            write_trace(&a.out.join(TRACE_FILE), &trace)?;
            if let Some(r) = trace.iter().rev().find_map(|r| r.report) {
                println!("elbo {:?} vaic {:?} vbic {:?}", r.elbo, r.vaic.unwrap_or(f64::NAN), r.vbic.unwrap_or(f64::NAN));
            }
            Ok(())
        }
        Err(e) => {
            if let Some(state) = &e.state {
                if let Err(save) = save_checkpoint(&checkpoint, state, &hp) {
                    log::error!("could not write the failure checkpoint: {save}");
                }
            }
            let (epoch, batch, step) = (e.epoch, e.batch, e.step);
            Err(CliError::Core(match e.error {
                TpfError::Numeric(m) => TpfError::Numeric(format!("epoch {epoch} batch {batch} step {step}: {m}")),
                other => other,
            }))
        }
    }
}

fn load_fitted(checkpoint: &Path, data: &Path, aggregate: bool) -> Result<(tpf_core::state::VariationalState, Hyperparams, Corpus), CliError> {
    let (state, hp) = load_checkpoint(checkpoint)?;
    let corpus = load_data(data, aggregate)?;
    state.check_dims(&corpus)?;
    Ok((state, hp, corpus))
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let (state, hp, corpus) = load_fitted(&a.checkpoint, &a.data, a.aggregate)?;
    let r = evaluate(&state, &corpus, &hp)?;
    let (vaic, vbic) = (r.vaic.unwrap_or(f64::NAN), r.vbic.unwrap_or(f64::NAN));
    println!(
        "elbo {:?} reconstruction {:?} log_prior {:?} entropy {:?} vaic {:?} vbic {:?}",
        r.elbo, r.reconstruction, r.log_prior, r.entropy, vaic, vbic
    );
    let out = a.out.unwrap_or_else(|| sibling(&a.checkpoint, EVAL_FILE));
    let fresh = !out.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(&out)?;
    let mut line = String::new();
    if fresh {
        line.push_str(EVAL_HEADER);
        line.push('\n');
    }
    let _ = writeln!(
        line,
        "{},{:?},{:?},{:?},{:?},{:?},{:?},{:.6}",
        a.checkpoint.display(),
        r.elbo,
        r.reconstruction,
        r.log_prior,
        r.entropy,
        vaic,
        vbic,
        r.wall_seconds
    );
    file.write_all(line.as_bytes())?;
    Ok(())
}

fn cmd_summarize(a: SummarizeArgs) -> Result<(), CliError> {
    let (state, _, corpus) = load_fitted(&a.checkpoint, &a.data, a.aggregate)?;
    let out = a.out.unwrap_or_else(|| sibling(&a.checkpoint, ""));
    write_summary(&out, &state, &corpus, a.frex_w, a.top)?;
    let fx = frex_scores(&state, a.frex_w)?;
    let vocab = corpus.vocabulary();
    let mut table = String::new();
    for k in 0..state.k {
        for t in 0..state.t {
            let terms: Vec<&str> = top_terms(&fx.frex, state.v, state.t, k, t, a.top)
                .into_iter()
                .map(|v| vocab[v].as_str())
                .collect();
            let _ = writeln!(table, "topic {k} period {t}: {}", terms.join(" "));
        }
    }
    print!("{table}");
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}
