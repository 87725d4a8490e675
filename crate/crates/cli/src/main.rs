use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use vilora::checkpoint::Checkpoint;
use vilora::data::{make_corpus, parse_speakers, Corpus, CorpusSpec, Split, DEFAULT_SPEAKERS};
use vilora::elbo::KlAggregate;
use vilora::evaluate::evaluate;
use vilora::optim::WdTarget;
use vilora::par::Parallelism;
use vilora::prior::{histogram_csv, DualSigma, FitMethod, PriorKind, PriorSpec};
use vilora::sweep::{results_csv, run_sweep, summarize, summary_csv, SweepConfig};
use vilora::train::{estimate_prior, pretrain, train, Method, PretrainConfig, TrainConfig};
use vilora::Error;

#[derive(Parser)]
#[command(name = "vilora", version, about = "Variational LoRA personalization on synthetic speech")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic corpus.
    GenData(GenData),
    /// Pretrain the base model on the normative split.
    Pretrain(PretrainArgs),
    /// Fit a layer-wise prior from a checkpoint's weights.
    EstimatePriors(EstimatePriors),
    /// Adapt a base checkpoint to one speaker.
    Personalize(Personalize),
    /// Score a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Run a methods x fractions x seeds grid.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated `level[:id]` list, e.g. `very-low,low:s2`.
    #[arg(long, default_value = DEFAULT_SPEAKERS)]
    speakers: String,
    /// JSON corpus spec; `--speakers` still overrides its speaker list.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON pretraining config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EstimatePriors {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "gmm")]
    method: String,
    #[arg(long, default_value = "dual")]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    hist_csv: Option<PathBuf>,
    /// Sigma of the single prior.
    #[arg(long, default_value_t = vilora::prior::DEFAULT_SINGLE_SIGMA)]
    sigma: f64,
    /// Give each layer its own sigma instead of its mode mean.
    #[arg(long)]
    layer_sigma: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Personalize {
    #[arg(long)]
    method: String,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    speaker: Option<String>,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// mu-only or mu-and-rho.
    #[arg(long)]
    wd_applies_to: Option<String>,
    #[arg(long)]
    mc_train_samples: Option<usize>,
    #[arg(long)]
    mc_eval_samples: Option<usize>,
    /// mean or sum.
    #[arg(long)]
    kl_aggregate: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write one objective breakdown per step as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// pretrain, adapt-train, nonnorm-test or norm-test.
    #[arg(long)]
    split: String,
    #[arg(long, default_value_t = 5)]
    mc_samples: usize,
    #[arg(long)]
    out: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Restrict to one speaker.
    #[arg(long)]
    speaker: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Summary table; defaults to `<out stem>.summary.csv`.
    #[arg(long)]
    summary: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) | Error::DegenerateFit(_) => 3,
        _ => 2,
    }
}

/// Tags an error with the flag or file it came from.
fn at(what: impl std::fmt::Display) -> impl FnOnce(Error) -> Failure {
    move |e| Failure {
        code: code_of(&e),
        message: format!("{what}: {e}"),
    }
}

fn usage(message: String) -> Failure {
    Failure { code: 1, message }
}

fn flag<T>(name: &str, r: vilora::Result<T>) -> CliResult<T> {
    r.map_err(|e| usage(format!("--{name}: {e}")))
}

fn read_json<T: DeserializeOwned>(path: &Path, flag: &str) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| Failure {
        code: 2,
        message: format!("--{flag} {}: {e}", path.display()),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Failure {
        code: 2,
        message: format!("--{flag} {}: {e}", path.display()),
    })
}

fn write_file(path: &Path, flag: &str, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure {
            code: 2,
            message: format!("--{flag} {}: {e}", dir.display()),
        })?;
    }
    fs::write(path, bytes).map_err(|e| Failure {
        code: 2,
        message: format!("--{flag} {}: {e}", path.display()),
    })
}

fn load_corpus(dir: &Path) -> CliResult<Corpus> {
    Corpus::load(dir).map_err(at(format!("--data {}", dir.display())))
}

fn load_checkpoint(path: &Path, flag: &str) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(at(format!("--{flag} {}", path.display())))
}

fn gen_data(a: GenData, mode: Parallelism) -> CliResult {
    let mut spec: CorpusSpec = match &a.config {
        Some(p) => read_json(p, "config")?,
        None => CorpusSpec::default(),
    };
    spec.speakers = flag("speakers", parse_speakers(&a.speakers))?;
    flag("config", spec.validate())?;
    let corpus = make_corpus(&spec, a.seed, mode).map_err(at("gen-data"))?;
    corpus.write(&a.out).map_err(at(format!("--out {}", a.out.display())))?;
    log::info!("wrote {} utterances to {}", corpus.utterances.len(), a.out.display());
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs, mode: Parallelism) -> CliResult {
    let mut cfg: PretrainConfig = match &a.config {
        Some(p) => read_json(p, "config")?,
        None => PretrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let corpus = load_corpus(&a.data)?;
    let out = pretrain(&cfg, &corpus, mode).map_err(at("pretrain"))?;
    if let Some(w) = out.control_wer.last() {
        log::info!("pretrained for {} epochs, control WER {w:.4}", out.control_wer.len());
    }
    Checkpoint::new(&out.state, None, out.meta)
        .save(&a.out)
        .map_err(at(format!("--out {}", a.out.display())))
}

fn estimate_cmd(a: EstimatePriors) -> CliResult {
    let method: FitMethod = flag("method", a.method.parse())?;
    let kind: PriorKind = flag("kind", a.kind.parse())?;
    let ckpt = load_checkpoint(&a.checkpoint, "checkpoint")?;
    let dual = if a.layer_sigma { DualSigma::LayerSigma } else { DualSigma::ModeMean };
    let est = estimate_prior(&ckpt.state(), method, kind, a.sigma, dual, a.seed)
        .map_err(at(format!("--checkpoint {}", a.checkpoint.display())))?;
    if let Some(fit) = &est.fit {
        log::info!("mode means {:?}", fit.means);
    }
    let mut json = serde_json::to_vec_pretty(&est.spec).expect("prior serializes");
    json.push(b'\n');
    write_file(&a.out, "out", &json)?;
    if let Some(p) = &a.hist_csv {
        write_file(p, "hist-csv", histogram_csv(&est.profiles, est.fit.as_ref()).as_bytes())?;
    }
    Ok(())
}

fn parse_wd(s: &str) -> CliResult<WdTarget> {
    match s {
        "mu-only" => Ok(WdTarget::MuOnly),
        "mu-and-rho" => Ok(WdTarget::MuAndRho),
        _ => Err(usage(format!("--wd-applies-to: expected mu-only|mu-and-rho, got {s:?}"))),
    }
}

fn parse_kl(s: &str) -> CliResult<KlAggregate> {
    match s {
        "mean" => Ok(KlAggregate::Mean),
        "sum" => Ok(KlAggregate::Sum),
        _ => Err(usage(format!("--kl-aggregate: expected mean|sum, got {s:?}"))),
    }
}

fn personalize_cmd(a: Personalize) -> CliResult {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p, "config")?,
        None => TrainConfig::default(),
    };
    cfg.method = flag("method", a.method.parse::<Method>())?;
    if cfg.method == Method::ViloraDp && a.priors.is_none() {
        return Err(usage("--priors: vilora-dp needs a priors file".into()));
    }
    if let Some(f) = a.fraction {
        if !vilora::data::ALLOWED_FRACTIONS.contains(&f) {
            return Err(usage(format!("--fraction: {f} is not one of 0.25, 0.5, 0.75, 1")));
        }
        cfg.data_fraction = f;
    }
    macro_rules! set {
        ($($field:ident = $v:expr),*) => { $(if let Some(v) = $v { cfg.$field = v; })* };
    }
    set!(
        rank = a.rank,
        alpha = a.alpha,
        beta = a.beta,
        epochs = a.epochs,
        learning_rate = a.lr,
        batch_size = a.batch_size,
        weight_decay = a.weight_decay,
        mc_train_samples = a.mc_train_samples,
        mc_eval_samples = a.mc_eval_samples,
        seed = a.seed,
        speaker = a.speaker
    );
    if let Some(s) = &a.wd_applies_to {
        cfg.wd_applies_to = parse_wd(s)?;
    }
    if let Some(s) = &a.kl_aggregate {
        cfg.kl_aggregate = parse_kl(s)?;
    }
    cfg.validate().map_err(|e| usage(format!("training flags: {e}")))?;
    let prior: Option<PriorSpec> = match &a.priors {
        Some(p) => Some(read_json(p, "priors")?),
        None => None,
    };
    let base = load_checkpoint(&a.base, "base")?;
    let corpus = load_corpus(&a.data)?;
    corpus
        .check_speaker(&cfg.speaker)
        .map_err(|e| usage(format!("--speaker: {e}")))?;
    let out = train(&cfg, &corpus, &base.state(), prior.as_ref()).map_err(|e| {
        let what = match e {
            Error::Config(_) if prior.is_some() => format!("--priors {}", a.priors.as_ref().expect("set").display()),
            _ => format!("personalize {}", cfg.method),
        };
        at(what)(e)
    })?;
    if let Some(path) = &a.log {
        let mut buf = Vec::new();
        for b in &out.log {
            serde_json::to_writer(&mut buf, b).expect("breakdown serializes");
            buf.push(b'\n');
        }
        write_file(path, "log", &buf)?;
    }
    if let Some(last) = out.log.last() {
        log::info!("final task loss {:.4}, combined {:.4}", last.task_loss, last.combined);
    }
    let keep_prior = if cfg.method.is_variational() { prior } else { None };
    Checkpoint::new(&out.state, keep_prior, out.meta)
        .save(&a.out)
        .map_err(at(format!("--out {}", a.out.display())))
}

fn evaluate_cmd(a: EvaluateArgs, mode: Parallelism) -> CliResult {
    let split: Split = flag("split", a.split.parse())?;
    if a.mc_samples == 0 {
        return Err(usage("--mc-samples: must be at least 1".into()));
    }
    let ckpt = load_checkpoint(&a.checkpoint, "checkpoint")?;
    let corpus = load_corpus(&a.data)?;
    if let Some(s) = &a.speaker {
        corpus.check_speaker(s).map_err(|e| usage(format!("--speaker: {e}")))?;
    }
    let utts = corpus.split(split, a.speaker.as_deref());
    if utts.is_empty() {
        return Err(Failure {
            code: 2,
            message: format!("--data {}: split {} is empty", a.data.display(), split.as_str()),
        });
    }
    let state = ckpt.state();
    if state.config.feature_dim != corpus.feature_dim() || state.config.vocab_size != corpus.vocab.len() {
        return Err(Failure {
            code: 2,
            message: format!(
                "--checkpoint {}: model does not match the corpus in --data {}",
                a.checkpoint.display(),
                a.data.display()
            ),
        });
    }
    let report = evaluate(&state, &utts, &corpus.vocab, a.mc_samples, a.seed, mode)
        .map_err(at(format!("--checkpoint {}", a.checkpoint.display())))?;
    log::info!("WER {:.4} CER {:.4}", report.wer, report.cer);
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    write_file(&a.out, "out", &json)
}

fn sweep_cmd(a: SweepArgs, mode: Parallelism) -> CliResult {
    let cfg: SweepConfig = match &a.config {
        Some(p) => read_json(p, "config")?,
        None => SweepConfig::default(),
    };
    cfg.validate().map_err(|e| usage(format!("--config: {e}")))?;
    let out = run_sweep(&cfg, mode).map_err(at("sweep"))?;
    let failed = out.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} runs failed", out.rows.len());
    }
    write_file(&a.out, "out", results_csv(&out.rows).as_bytes())?;
    let summary = a.summary.unwrap_or_else(|| a.out.with_extension("summary.csv"));
    write_file(&summary, "summary", summary_csv(&summarize(&out.rows)).as_bytes())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let mode = if cli.sequential { Parallelism::Sequential } else { Parallelism::available() };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, mode),
        Command::Pretrain(a) => pretrain_cmd(a, mode),
        Command::EstimatePriors(a) => estimate_cmd(a),
        Command::Personalize(a) => personalize_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a, mode),
        Command::Sweep(a) => sweep_cmd(a, mode),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let _ = writeln!(std::io::stderr(), "error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
