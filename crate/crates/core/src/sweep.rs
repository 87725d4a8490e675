//! Methods x fractions x seeds experiment grid.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{make_corpus, Corpus, CorpusSpec, Split};
use crate::elbo::ElboBreakdown;
use crate::error::{Error, Result};
use crate::evaluate::evaluate;
use crate::metrics::ErrorReport;
use crate::model::ModelState;
use crate::par::{self, Parallelism};
use crate::prior::{DualSigma, FitMethod, PriorKind, PriorSpec, DEFAULT_SINGLE_SIGMA};
use crate::rng::mix64;
use crate::train::{estimate_prior, pretrain, train, Method, PretrainConfig, TrainConfig, TrainMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub master_seed: u64,
    pub methods: Vec<Method>,
    /// 0 means "no adaptation" and reports the zero-shot model.
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub speaker: String,
    /// Existing corpus directory; generated from `corpus` when absent.
    pub data: Option<PathBuf>,
    /// Existing base checkpoint; pretrained with `pretrain` when absent.
    pub base: Option<PathBuf>,
    /// Dual prior for vilora-dp; estimated from the base when absent.
    pub priors: Option<PathBuf>,
    pub prior_method: FitMethod,
    pub corpus: CorpusSpec,
    pub pretrain: PretrainConfig,
    /// Template for every run; method, seed, fraction and speaker are
    /// overwritten per run.
    pub train: TrainConfig,
    /// Where to write per-run checkpoints, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            master_seed: 0,
            methods: Method::ALL.to_vec(),
            fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: (0..5).collect(),
            speaker: "very-low".to_string(),
            data: None,
            base: None,
            priors: None,
            prior_method: FitMethod::Gmm,
            corpus: CorpusSpec::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub fraction: f64,
    pub seed: u64,
    pub nonnorm: Option<ErrorReport>,
    pub norm: Option<ErrorReport>,
    /// Hash of the checkpoint both reports were computed from.
    pub checkpoint_hash: String,
    pub wall_time: f64,
    pub final_breakdown: Option<ElboBreakdown>,
    pub error: Option<String>,
}

pub struct SweepOutput {
    pub rows: Vec<RunResult>,
    pub zero_shot_nonnorm: ErrorReport,
    pub zero_shot_norm: ErrorReport,
}

/// Everything a sweep trains from.
pub struct SweepInputs {
    pub corpus: Corpus,
    pub base: Checkpoint,
    pub dual_prior: PriorSpec,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.fractions.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one method, fraction and seed".into()));
        }
        for &f in &self.fractions {
            if f != 0.0 && !crate::data::ALLOWED_FRACTIONS.contains(&f) {
                return Err(Error::Config(format!("sweep fraction {f} must be 0, 0.25, 0.5, 0.75 or 1")));
            }
        }
        self.train.validate()
    }

    /// The RNG seed of one run. Runs that share a seed value share their
    /// random streams across methods and fractions.
    pub fn run_seed(&self, seed: u64) -> u64 {
        mix64(self.master_seed ^ mix64(seed.wrapping_add(0x5EED)))
    }

    /// Loads or builds the corpus, base model and dual prior.
    pub fn prepare(&self, mode: Parallelism) -> Result<SweepInputs> {
        let corpus = match &self.data {
            Some(dir) => Corpus::load(dir)?,
            None => make_corpus(&self.corpus, self.master_seed, mode)?,
        };
        corpus.check_speaker(&self.speaker)?;
        let base = match &self.base {
            Some(path) => Checkpoint::load(path)?,
            None => {
                let cfg = PretrainConfig {
                    seed: self.master_seed,
                    ..self.pretrain.clone()
                };
                let out = pretrain(&cfg, &corpus, mode)?;
                Checkpoint::new(&out.state, None, out.meta)
            }
        };
        let dual_prior = match &self.priors {
            Some(path) => crate::data::read_json(path)?,
            None => {
                estimate_prior(
                    &base.state(),
                    self.prior_method,
                    PriorKind::Dual,
                    DEFAULT_SINGLE_SIGMA,
                    DualSigma::ModeMean,
                    self.master_seed,
                )?
                .spec
            }
        };
        Ok(SweepInputs { corpus, base, dual_prior })
    }
}

struct RunSpec {
    method: Method,
    fraction: f64,
    seed: u64,
}

pub fn run_sweep(config: &SweepConfig, mode: Parallelism) -> Result<SweepOutput> {
    config.validate()?;
    let inputs = config.prepare(mode)?;
    run_sweep_with(config, &inputs, mode)
}

pub fn run_sweep_with(config: &SweepConfig, inputs: &SweepInputs, mode: Parallelism) -> Result<SweepOutput> {
    config.validate()?;
    let corpus = &inputs.corpus;
    let nonnorm = corpus.split(Split::NonnormTest, Some(&config.speaker));
    let norm = corpus.split(Split::NormTest, None);
    if nonnorm.is_empty() || norm.is_empty() {
        return Err(Error::Data(format!("no test utterances for speaker {}", config.speaker)));
    }
    let base_state = inputs.base.state().base_only();
    let base_hash = inputs.base.hash();
    let zero_nonnorm = evaluate(&base_state, &nonnorm, &corpus.vocab, 1, config.master_seed, mode)?;
    let zero_norm = evaluate(&base_state, &norm, &corpus.vocab, 1, config.master_seed, mode)?;

    let mut runs = Vec::new();
    for &method in &config.methods {
        for &fraction in &config.fractions {
            for &seed in &config.seeds {
                runs.push(RunSpec { method, fraction, seed });
            }
        }
    }

    let rows = par::map(mode, &runs, |_, run| {
        let start = Instant::now();
        let mut row = RunResult {
            method: run.method,
            fraction: run.fraction,
            seed: run.seed,
            nonnorm: None,
            norm: None,
            checkpoint_hash: String::new(),
            wall_time: 0.0,
            final_breakdown: None,
            error: None,
        };
        if run.fraction == 0.0 {
            row.nonnorm = Some(zero_nonnorm.clone());
            row.norm = Some(zero_norm.clone());
            row.checkpoint_hash = base_hash.clone();
        } else {
            match one_run(config, inputs, run, &nonnorm, &norm) {
                Ok((ckpt, nn, n, last)) => {
                    row.checkpoint_hash = ckpt.hash();
                    row.nonnorm = Some(nn);
                    row.norm = Some(n);
                    row.final_breakdown = last;
                    if let Some(dir) = &config.checkpoint_dir {
                        let name = format!("{}-f{}-s{}.json", run.method, run.fraction, run.seed);
                        if let Err(e) = ckpt.save(&dir.join(name)) {
                            row.error = Some(e.to_string());
                        }
                    }
                }
                Err(e) => {
                    log::warn!("run {} fraction {} seed {} failed: {e}", run.method, run.fraction, run.seed);
                    row.error = Some(e.to_string());
                }
            }
        }
        row.wall_time = start.elapsed().as_secs_f64();
        row
    });
    Ok(SweepOutput {
        rows,
        zero_shot_nonnorm: zero_nonnorm,
        zero_shot_norm: zero_norm,
    })
}

type RunOutput = (Checkpoint, ErrorReport, ErrorReport, Option<ElboBreakdown>);

fn one_run(
    config: &SweepConfig,
    inputs: &SweepInputs,
    run: &RunSpec,
    nonnorm: &[&crate::data::Utterance],
    norm: &[&crate::data::Utterance],
) -> Result<RunOutput> {
    let seed = config.run_seed(run.seed);
    let tc = TrainConfig {
        method: run.method,
        seed,
        data_fraction: run.fraction,
        speaker: config.speaker.clone(),
        ..config.train.clone()
    };
    let prior = (run.method == Method::ViloraDp).then_some(&inputs.dual_prior);
    let base: ModelState = inputs.base.state();
    let out = train(&tc, &inputs.corpus, &base, prior)?;
    let ckpt = Checkpoint::new(&out.state, prior.cloned(), out.meta.clone());
    // Both reports come from the checkpoint, not the in-memory state.
    let state = ckpt.state();
    let k = tc.mc_eval_samples;
    let vocab = &inputs.corpus.vocab;
    let nn = evaluate(&state, nonnorm, vocab, k, seed, Parallelism::Sequential)?;
    let n = evaluate(&state, norm, vocab, k, seed, Parallelism::Sequential)?;
    Ok((ckpt, nn, n, out.log.last().cloned()))
}

pub const CSV_HEADER: &str =
    "method,fraction,seed,nonnorm-wer,nonnorm-cer,norm-wer,norm-cer,checkpoint-hash,wall-time,error";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn results_csv(rows: &[RunResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.3},{}",
            r.method,
            r.fraction,
            r.seed,
            opt(r.nonnorm.as_ref().map(|e| e.wer)),
            opt(r.nonnorm.as_ref().map(|e| e.cer)),
            opt(r.norm.as_ref().map(|e| e.wer)),
            opt(r.norm.as_ref().map(|e| e.cer)),
            r.checkpoint_hash,
            r.wall_time,
            csv_field(r.error.as_deref().unwrap_or("")),
        );
    }
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub fraction: f64,
    pub runs: usize,
    pub failed: usize,
    /// (mean, std) for nonnorm-wer, nonnorm-cer, norm-wer, norm-cer.
    pub stats: [(f64, f64); 4],
}

/// Per-(method, fraction) mean and std over successful seeds.
pub fn summarize(rows: &[RunResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Method, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(m, f)| m == r.method && f == r.fraction) {
            keys.push((r.method, r.fraction));
        }
    }
    keys.into_iter()
        .map(|(method, fraction)| {
            let group: Vec<&RunResult> = rows.iter().filter(|r| r.method == method && r.fraction == fraction).collect();
            let ok: Vec<&RunResult> = group.iter().copied().filter(|r| r.error.is_none() && r.nonnorm.is_some()).collect();
            let col = |f: &dyn Fn(&RunResult) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                method,
                fraction,
                runs: group.len(),
                failed: group.len() - ok.len(),
                stats: [
                    col(&|r| r.nonnorm.as_ref().expect("ok row").wer),
                    col(&|r| r.nonnorm.as_ref().expect("ok row").cer),
                    col(&|r| r.norm.as_ref().expect("ok row").wer),
                    col(&|r| r.norm.as_ref().expect("ok row").cer),
                ],
            }
        })
        .collect()
}

pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut out = String::from(
        "method,fraction,runs,failed,nonnorm-wer-mean,nonnorm-wer-std,nonnorm-cer-mean,nonnorm-cer-std,\
         norm-wer-mean,norm-wer-std,norm-cer-mean,norm-cer-std\n",
    );
    for s in summary {
        let _ = write!(out, "{},{},{},{}", s.method, s.fraction, s.runs, s.failed);
        for (m, sd) in s.stats {
            let _ = write!(out, ",{m},{sd}");
        }
        out.push('\n');
    }
    out
}

/// Training metadata for checkpoints that were never trained.
pub fn untrained_meta(seed: u64) -> TrainMeta {
    TrainMeta {
        method: None,
        config_hash: String::new(),
        steps: 0,
        rng_state: crate::rng::RngStream::new(seed, 0).state(),
    }
}
