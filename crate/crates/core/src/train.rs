//! Pretraining, personalization and prior estimation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, AdapterKind};
use crate::autodiff::Tape;
use crate::data::{Corpus, Split, Utterance};
use crate::elbo::{assemble_objective, check_beta, ElboBreakdown, GaussianPrior, KlAggregate, KlScale, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::evaluate::evaluate;
use crate::model::{ModelConfig, ModelState};
use crate::optim::{Adam, AdamConfig, WdTarget};
use crate::par::Parallelism;
use crate::prior::{
    build_prior, fit_two_modes, layer_std, DualSigma, FitMethod, LayerStdProfile, ModeFit, PriorKind, PriorSpec,
    DEFAULT_SINGLE_SIGMA,
};
use crate::rng::{RngState, RngStream};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FullFt,
    Lora,
    ViloraSp,
    ViloraDp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FullFt, Method::Lora, Method::ViloraSp, Method::ViloraDp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FullFt => "full-ft",
            Method::Lora => "lora",
            Method::ViloraSp => "vilora-sp",
            Method::ViloraDp => "vilora-dp",
        }
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Method::ViloraSp | Method::ViloraDp)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected full-ft|lora|vilora-sp|vilora-dp)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub rank: usize,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub wd_applies_to: WdTarget,
    pub mc_train_samples: usize,
    pub mc_eval_samples: usize,
    pub seed: u64,
    pub data_fraction: f64,
    pub kl_aggregate: KlAggregate,
    pub kl_scale: KlScale,
    pub speaker: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Lora,
            rank: 32,
            alpha: 32.0,
            beta: DEFAULT_BETA,
            learning_rate: 3e-3,
            epochs: 15,
            batch_size: 8,
            weight_decay: 0.0,
            wd_applies_to: WdTarget::MuOnly,
            mc_train_samples: 1,
            mc_eval_samples: 5,
            seed: 0,
            data_fraction: 1.0,
            kl_aggregate: KlAggregate::Mean,
            kl_scale: KlScale::Total,
            speaker: "very-low".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if self.batch_size == 0 || self.mc_train_samples == 0 || self.mc_eval_samples == 0 {
            return Err(Error::Config(
                "batch size and Monte Carlo sample counts must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// The adapter configuration for `model`, with the rank capped at the
    /// smallest target dimension.
    pub fn adapter_config(&self, model: &ModelConfig) -> Result<AdapterConfig> {
        let shapes: BTreeMap<String, (usize, usize)> = model.layer_shapes().into_iter().collect();
        let mut cap = usize::MAX;
        for t in &model.adapter_targets {
            let (r, c) = shapes
                .get(t)
                .ok_or_else(|| Error::Config(format!("adapter target {t} is not a model layer")))?;
            cap = cap.min(*r).min(*c);
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        let rank = if self.rank > cap {
            log::warn!("rank {} exceeds target layer size; using rank {cap}", self.rank);
            cap
        } else {
            self.rank
        };
        Ok(AdapterConfig {
            rank,
            alpha: self.alpha,
            targets: model.adapter_targets.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub method: Option<Method>,
    pub config_hash: String,
    pub steps: usize,
    pub rng_state: RngState,
}

pub struct TrainOutcome {
    pub state: ModelState,
    /// One entry per optimizer step.
    pub log: Vec<ElboBreakdown>,
    /// Mean combined loss per epoch.
    pub epoch_means: Vec<f64>,
    pub meta: TrainMeta,
}

fn initial_state(config: &TrainConfig, base: &ModelState, rng: &RngStream) -> Result<ModelState> {
    let base = base.base_only();
    match config.method {
        Method::FullFt => Ok(base.for_full_finetune()),
        Method::Lora => base.with_adapters(
            AdapterKind::Deterministic,
            config.adapter_config(&base.config)?,
            &mut rng.derive_label("init"),
        ),
        Method::ViloraSp | Method::ViloraDp => base.with_adapters(
            AdapterKind::Variational,
            config.adapter_config(&base.config)?,
            &mut rng.derive_label("init"),
        ),
    }
}

/// Resolves the prior a method trains against.
pub fn resolve_prior(method: Method, prior: Option<&PriorSpec>, targets: &[String]) -> Result<Option<GaussianPrior>> {
    match (method, prior) {
        (Method::ViloraDp, None) => Err(Error::Config("vilora-dp requires a priors file".into())),
        (Method::ViloraSp, None) => Ok(Some(GaussianPrior::uniform(targets, 0.0, DEFAULT_SINGLE_SIGMA)?)),
        (m, Some(p)) if m.is_variational() => {
            let want = if m == Method::ViloraDp { PriorKind::Dual } else { PriorKind::Single };
            if p.kind != want {
                log::warn!("{m} is training against a {:?} prior", p.kind);
            }
            let g = p.to_gaussian()?;
            for t in targets {
                g.sigma_for(t)?;
            }
            Ok(Some(g))
        }
        _ => Ok(None),
    }
}

/// Loss and gradients for one batch.
struct StepResult {
    grads: Vec<(String, Matrix)>,
    breakdown: ElboBreakdown,
}

fn batch_step(
    state: &ModelState,
    batch: &[&Utterance],
    prior: Option<&GaussianPrior>,
    config: &TrainConfig,
    noise: &RngStream,
    step: usize,
    epoch: usize,
) -> Result<StepResult> {
    let samples = if state.mode == crate::model::Mode::Vilora { config.mc_train_samples } else { 1 };
    let mut grads: Option<Vec<(String, Matrix)>> = None;
    let mut breakdowns = Vec::with_capacity(samples);
    for s in 0..samples {
        let mut tape = Tape::new();
        let draw = state.draw_samples(&mut noise.derive(s as u64));
        let binding = state.bind(&mut tape, true, Some(&draw))?;
        let mut losses = Vec::with_capacity(batch.len());
        for u in batch {
            losses.push(state.task_loss(&mut tape, &binding, &u.features, &u.frame_labels)?);
        }
        let total = tape.add_n(&losses)?;
        let task = tape.scale(total, 1.0 / batch.len() as f64);
        if !tape.scalar(task).is_finite() {
            let ids: Vec<&str> = batch.iter().map(|u| u.id.as_str()).collect();
            return Err(Error::Numerical(format!(
                "non-finite task loss at epoch {epoch}, step {step}, batch [{}]",
                ids.join(", ")
            )));
        }
        let (loss, breakdown) = match prior {
            Some(prior) => {
                let kls = state.layer_kl_nodes(&mut tape, &binding, prior, config.kl_scale)?;
                assemble_objective(&mut tape, task, &kls, config.beta, config.kl_aggregate, step, epoch)?
            }
            None => (task, ElboBreakdown::task_only(step, epoch, tape.scalar(task))),
        };
        if !breakdown.combined.is_finite() {
            return Err(Error::Numerical(format!("non-finite objective at epoch {epoch}, step {step}")));
        }
        breakdowns.push(breakdown);
        let g = tape.backward(loss)?;
        let this: Vec<(String, Matrix)> = binding
            .trainables
            .iter()
            .map(|(n, v)| (n.clone(), g.get(*v).cloned().expect("trainable leaf has a gradient")))
            .collect();
        match &mut grads {
            None => grads = Some(this),
            Some(acc) => {
                for ((_, a), (_, b)) in acc.iter_mut().zip(&this) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    let inv = 1.0 / samples as f64;
    let grads = grads
        .expect("at least one sample")
        .into_iter()
        .map(|(n, g)| (n, g.scale(inv)))
        .collect();
    let mut breakdown = breakdowns[0].clone();
    if samples > 1 {
        breakdown.task_loss = breakdowns.iter().map(|b| b.task_loss).sum::<f64>() * inv;
        breakdown.combined = breakdowns.iter().map(|b| b.combined).sum::<f64>() * inv;
    }
    Ok(StepResult { grads, breakdown })
}

fn check_no_nonfinite_params(state: &ModelState) -> Result<()> {
    for name in state.trainable_names() {
        if !state.param(&name).is_some_and(Matrix::is_finite) {
            return Err(Error::Numerical(format!("parameter {name} became non-finite")));
        }
    }
    Ok(())
}

/// Shared optimization loop.
fn optimize(
    mut state: ModelState,
    data: &[&Utterance],
    prior: Option<&GaussianPrior>,
    config: &TrainConfig,
    rng: &RngStream,
    mut after_epoch: impl FnMut(usize, &ModelState) -> Result<bool>,
) -> Result<TrainOutcome> {
    let mut adam = Adam::new(AdamConfig::new(config.learning_rate, config.weight_decay, config.wd_applies_to))?;
    let mut order_rng = rng.derive_label("order");
    let noise_root = rng.derive_label("noise");
    let mut log = Vec::new();
    let mut epoch_means = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        if data.is_empty() {
            break;
        }
        order_rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| data[i]).collect();
            let r = batch_step(&state, &batch, prior, config, &noise_root.derive(step as u64), step, epoch)?;
            adam.step(&mut state, &r.grads)?;
            sum += r.breakdown.combined;
            batches += 1;
            log.push(r.breakdown);
            step += 1;
        }
        check_no_nonfinite_params(&state)?;
        epoch_means.push(sum / batches as f64);
        log::debug!("epoch {epoch}: mean objective {:.5}", sum / batches as f64);
        if !after_epoch(epoch, &state)? {
            break;
        }
    }
    Ok(TrainOutcome {
        state,
        log,
        epoch_means,
        meta: TrainMeta {
            method: Some(config.method),
            config_hash: config.hash(),
            steps: step,
            rng_state: order_rng.state(),
        },
    })
}

/// Personalizes `base` on the configured speaker's adapt-train subset.
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    base: &ModelState,
    prior: Option<&PriorSpec>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let rng = RngStream::new(config.seed, 0);
    let state = initial_state(config, base, &rng)?;
    let prior = resolve_prior(config.method, prior, &state.config.adapter_targets)?;
    let data = corpus.adapt_subset(&config.speaker, config.data_fraction)?;
    if state.mode == crate::model::Mode::Vilora {
        let lora = state.trainable_count() / 2;
        log::info!("{}: {} trainable values (2 x {lora} for mean and scale)", config.method, state.trainable_count());
    }
    optimize(state, &data, prior.as_ref(), config, &rng, |_, _| Ok(true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the control test WER drops below this.
    pub target_wer: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: ModelConfig::default(),
            epochs: 30,
            learning_rate: 5e-3,
            batch_size: 8,
            seed: 0,
            target_wer: 0.05,
        }
    }
}

pub struct PretrainOutcome {
    pub state: ModelState,
    pub epoch_means: Vec<f64>,
    pub control_wer: Vec<f64>,
    pub meta: TrainMeta,
}

/// Trains every base weight on the normative pretraining split.
pub fn pretrain(config: &PretrainConfig, corpus: &Corpus, mode: Parallelism) -> Result<PretrainOutcome> {
    let mut model = config.model.clone();
    if model.feature_dim != corpus.feature_dim() || model.vocab_size != corpus.vocab.len() {
        log::info!(
            "model sized to corpus: {} features, {} tokens",
            corpus.feature_dim(),
            corpus.vocab.len()
        );
        model.feature_dim = corpus.feature_dim();
        model.vocab_size = corpus.vocab.len();
    }
    let rng = RngStream::new(config.seed, 1);
    let state = ModelState::init(model, &mut rng.derive_label("base"))?.for_full_finetune();
    let train_cfg = TrainConfig {
        method: Method::FullFt,
        learning_rate: config.learning_rate,
        epochs: config.epochs,
        batch_size: config.batch_size,
        seed: config.seed,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let data = corpus.split(Split::Pretrain, None);
    let test = corpus.split(Split::NormTest, None);
    if data.is_empty() || test.is_empty() {
        return Err(Error::Data("pretraining needs non-empty pretrain and norm-test splits".into()));
    }
    let mut control_wer = Vec::new();
    let mut out = optimize(state, &data, None, &train_cfg, &rng, |epoch, state| {
        let report = evaluate(state, &test, &corpus.vocab, 1, config.seed, mode)?;
        log::info!("pretrain epoch {epoch}: control WER {:.4}", report.wer);
        control_wer.push(report.wer);
        Ok(report.wer >= config.target_wer)
    })?;
    out.meta.method = None;
    out.meta.config_hash = hex::encode(Sha256::digest(serde_json::to_vec(config).expect("config serializes")));
    Ok(PretrainOutcome {
        state: out.state.base_only(),
        epoch_means: out.epoch_means,
        control_wer,
        meta: out.meta,
    })
}

/// Empirical sigma profile of every adapter target layer.
pub fn target_profiles(state: &ModelState) -> Result<Vec<LayerStdProfile>> {
    state
        .config
        .adapter_targets
        .iter()
        .map(|t| {
            let w = state
                .base
                .get(t)
                .ok_or_else(|| Error::Config(format!("adapter target {t} missing from checkpoint")))?;
            layer_std(t, w)
        })
        .collect()
}

pub struct PriorEstimate {
    pub spec: PriorSpec,
    pub profiles: Vec<LayerStdProfile>,
    pub fit: Option<ModeFit>,
}

/// Profiles the target layers of `state` and builds a prior from them.
pub fn estimate_prior(
    state: &ModelState,
    method: FitMethod,
    kind: PriorKind,
    single_sigma: f64,
    dual_sigma: DualSigma,
    seed: u64,
) -> Result<PriorEstimate> {
    let profiles = target_profiles(state)?;
    let fit = match kind {
        PriorKind::Dual => Some(fit_two_modes(&profiles, method, &mut RngStream::new(seed, 2))?),
        PriorKind::Single => None,
    };
    let mut spec = build_prior(
        &state.config.adapter_targets,
        fit.as_ref(),
        kind,
        single_sigma,
        dual_sigma,
        &profiles,
    )?;
    if spec.method.is_none() {
        spec.method = Some(method);
    }
    Ok(PriorEstimate { spec, profiles, fit })
}
