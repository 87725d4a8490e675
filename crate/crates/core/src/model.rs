//! A small frame-level sequence transducer.
//!
//! Features (`frames x d`) are projected into a hidden space, passed through
//! single-head self-attention blocks with residual connections, and
//! classified per frame. Query, key and value projections can carry
//! adapters. Decoding is CTC-style: per-frame argmax, collapse repeats, drop
//! blanks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{adapted_weight, reparameterize, Adapter, AdapterConfig, AdapterKind, AdapterSample};
use crate::autodiff::{Tape, Var};
use crate::elbo::{GaussianPrior, KlScale};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Matrix;
use crate::vocab::BLANK;

pub const INPUT: &str = "input";
pub const CLASSIFIER: &str = "classifier";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

pub fn query(block: usize) -> String {
    format!("block{block}.query")
}
pub fn key(block: usize) -> String {
    format!("block{block}.key")
}
pub fn value(block: usize) -> String {
    format!("block{block}.value")
}
pub fn output(block: usize) -> String {
    format!("block{block}.output")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub num_blocks: usize,
    pub adapter_targets: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let num_blocks = 2;
        ModelConfig {
            feature_dim: 16,
            hidden_dim: 16,
            vocab_size: 12,
            num_blocks,
            adapter_targets: qkv_targets(num_blocks),
        }
    }
}

/// Query, key and value projections of every block.
pub fn qkv_targets(num_blocks: usize) -> Vec<String> {
    (0..num_blocks).flat_map(|b| [query(b), key(b), value(b)]).collect()
}

impl ModelConfig {
    /// Every base layer with its `(rows, cols)` shape.
    pub fn layer_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, h, v) = (self.feature_dim, self.hidden_dim, self.vocab_size);
        let mut out = vec![(INPUT.to_string(), (h, d))];
        for b in 0..self.num_blocks {
            for name in [query(b), key(b), value(b), output(b)] {
                out.push((name, (h, h)));
            }
        }
        out.push((CLASSIFIER.to_string(), (v, h)));
        out.push((CLASSIFIER_BIAS.to_string(), (v, 1)));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 || self.hidden_dim < 2 || self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "feature, hidden and vocabulary sizes must be >= 2 (got {}, {}, {})",
                self.feature_dim, self.hidden_dim, self.vocab_size
            )));
        }
        let shapes = self.layer_shapes();
        for t in &self.adapter_targets {
            if !shapes.iter().any(|(n, _)| n == t) || t == CLASSIFIER_BIAS {
                return Err(Error::Config(format!("adapter target {t} is not a weight layer")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ZeroShot,
    FullFt,
    Lora,
    Vilora,
}

/// Model weights plus whatever is trainable in the current mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub mode: Mode,
    pub base: BTreeMap<String, Matrix>,
    pub adapter_config: Option<AdapterConfig>,
    pub adapters: BTreeMap<String, Adapter>,
}

/// One adapter draw per variational layer.
pub type SampleSet = BTreeMap<String, AdapterSample>;

/// Tape handles for one forward pass.
pub struct Binding {
    weights: BTreeMap<String, Var>,
    /// Trainable leaves, in [`ModelState::trainable_names`] order.
    pub trainables: Vec<(String, Var)>,
    vi_layers: Vec<ViNodes>,
}

struct ViNodes {
    layer: String,
    mu_a: Var,
    sigma_a: Var,
    mu_b: Var,
    sigma_b: Var,
}

impl ModelState {
    /// Randomly initialized base weights, zero-shot mode.
    pub fn init(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut base = BTreeMap::new();
        for (name, (rows, cols)) in config.layer_shapes() {
            let w = if name == CLASSIFIER_BIAS {
                Matrix::zeros(rows, cols)
            } else {
                let gain = if name.ends_with(".query") || name.ends_with(".key") {
                    2.0
                } else if name.ends_with(".output") {
                    0.5
                } else {
                    1.0
                };
                rng.derive_label(&name).normal_matrix(rows, cols, gain / (cols as f64).sqrt())
            };
            base.insert(name, w);
        }
        Ok(ModelState {
            config,
            mode: Mode::ZeroShot,
            base,
            adapter_config: None,
            adapters: BTreeMap::new(),
        })
    }

    /// A copy with every base weight trainable.
    pub fn for_full_finetune(&self) -> Self {
        ModelState {
            config: self.config.clone(),
            mode: Mode::FullFt,
            base: self.base.clone(),
            adapter_config: None,
            adapters: BTreeMap::new(),
        }
    }

    /// A copy with fresh adapters on the configured targets and a frozen base.
    pub fn with_adapters(&self, kind: AdapterKind, config: AdapterConfig, rng: &mut RngStream) -> Result<Self> {
        let mut adapters = BTreeMap::new();
        for t in &config.targets {
            let w = self
                .base
                .get(t)
                .ok_or_else(|| Error::Config(format!("adapter target {t} is not a model layer")))?;
            let (d_out, d_in) = w.shape();
            config.validate_for(t, d_out, d_in)?;
            let mut layer_rng = rng.derive_label(t);
            adapters.insert(t.clone(), Adapter::init(kind, config.rank, d_out, d_in, &mut layer_rng));
        }
        Ok(ModelState {
            config: self.config.clone(),
            mode: match kind {
                AdapterKind::Deterministic => Mode::Lora,
                AdapterKind::Variational => Mode::Vilora,
            },
            base: self.base.clone(),
            adapter_config: Some(config),
            adapters,
        })
    }

    /// Drops adapters and returns the frozen base in zero-shot mode.
    pub fn base_only(&self) -> Self {
        ModelState {
            config: self.config.clone(),
            mode: Mode::ZeroShot,
            base: self.base.clone(),
            adapter_config: None,
            adapters: BTreeMap::new(),
        }
    }

    /// Checks every stored matrix against the model configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.layer_shapes();
        if self.base.len() != shapes.len() {
            return Err(Error::Data(format!(
                "expected {} base layers, found {}",
                shapes.len(),
                self.base.len()
            )));
        }
        for (name, shape) in &shapes {
            let w = self
                .base
                .get(name)
                .ok_or_else(|| Error::Data(format!("missing base layer {name}")))?;
            if w.shape() != *shape {
                return Err(Error::Data(format!(
                    "base layer {name} has shape {:?}, expected {shape:?}",
                    w.shape()
                )));
            }
        }
        match (self.mode, &self.adapter_config) {
            (Mode::Lora | Mode::Vilora, Some(cfg)) => {
                let want = if self.mode == Mode::Lora {
                    AdapterKind::Deterministic
                } else {
                    AdapterKind::Variational
                };
                if self.adapters.len() != cfg.targets.len() {
                    return Err(Error::Data("adapter set does not match its target list".into()));
                }
                for t in &cfg.targets {
                    let ad = self
                        .adapters
                        .get(t)
                        .ok_or_else(|| Error::Data(format!("missing adapter for {t}")))?;
                    if ad.kind() != want {
                        return Err(Error::Data(format!("adapter {t} has the wrong kind for {:?}", self.mode)));
                    }
                    let (d_out, d_in) = self.base[t].shape();
                    ad.check_shapes(t, cfg.rank, d_out, d_in)?;
                }
                Ok(())
            }
            (Mode::Lora | Mode::Vilora, None) => Err(Error::Data("adapter mode without adapter config".into())),
            (_, _) if !self.adapters.is_empty() => Err(Error::Data(format!("{:?} mode carries adapters", self.mode))),
            _ => Ok(()),
        }
    }

    /// Names of the trainable matrices in this mode, in a fixed order.
    pub fn trainable_names(&self) -> Vec<String> {
        match self.mode {
            Mode::ZeroShot => vec![],
            Mode::FullFt => self.base.keys().map(|k| format!("base.{k}")).collect(),
            Mode::Lora | Mode::Vilora => self
                .adapters
                .iter()
                .flat_map(|(layer, ad)| ad.params().into_iter().map(move |(p, _)| format!("adapter.{layer}.{p}")))
                .collect(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_names()
            .iter()
            .map(|n| self.param(n).map_or(0, Matrix::len))
            .sum()
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        if let Some(layer) = name.strip_prefix("base.") {
            return self.base.get(layer);
        }
        let rest = name.strip_prefix("adapter.")?;
        let (layer, p) = rest.rsplit_once('.')?;
        self.adapters
            .get(layer)?
            .params()
            .into_iter()
            .find(|(n, _)| *n == p)
            .map(|(_, m)| m)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        if let Some(layer) = name.strip_prefix("base.") {
            return self.base.get_mut(layer);
        }
        let rest = name.strip_prefix("adapter.")?;
        let (layer, p) = rest.rsplit_once('.')?;
        self.adapters.get_mut(layer)?.param_mut(p)
    }

    /// One reparameterized draw per variational adapter.
    pub fn draw_samples(&self, rng: &mut RngStream) -> SampleSet {
        self.adapters
            .iter()
            .filter_map(|(layer, ad)| match ad {
                Adapter::Variational(v) => Some((layer.clone(), v.sample(rng))),
                Adapter::Deterministic(_) => None,
            })
            .collect()
    }

    /// Puts the model on `tape`. With `train`, trainables become leaves;
    /// otherwise everything is constant.
    pub fn bind(&self, tape: &mut Tape, train: bool, samples: Option<&SampleSet>) -> Result<Binding> {
        let trainable_base = train && self.mode == Mode::FullFt;
        let trainable_adapters = train && matches!(self.mode, Mode::Lora | Mode::Vilora);
        let mut trainables = Vec::new();
        let mut base_vars = BTreeMap::new();
        for (name, w) in &self.base {
            let v = if trainable_base {
                let v = tape.leaf(w.clone());
                trainables.push((format!("base.{name}"), v));
                v
            } else {
                tape.constant(w.clone())
            };
            base_vars.insert(name.clone(), v);
        }

        let mut weights = base_vars.clone();
        let mut vi_layers = Vec::new();
        if matches!(self.mode, Mode::Lora | Mode::Vilora) {
            let cfg = self
                .adapter_config
                .as_ref()
                .ok_or_else(|| Error::Config("adapter mode without adapter config".into()))?;
            for (layer, ad) in &self.adapters {
                let mut vars = Vec::new();
                for (p, m) in ad.params() {
                    let v = if trainable_adapters {
                        let v = tape.leaf(m.clone());
                        trainables.push((format!("adapter.{layer}.{p}"), v));
                        v
                    } else {
                        tape.constant(m.clone())
                    };
                    vars.push(v);
                }
                let base = base_vars[layer];
                let w = match ad {
                    Adapter::Deterministic(_) => adapted_weight(tape, base, vars[1], vars[0], cfg.scaling())?,
                    Adapter::Variational(_) => {
                        let sample = samples.and_then(|s| s.get(layer)).ok_or_else(|| {
                            Error::Config(format!("no adapter sample supplied for variational layer {layer}"))
                        })?;
                        let (mu_a, rho_a, mu_b, rho_b) = (vars[0], vars[1], vars[2], vars[3]);
                        let a = reparameterize(tape, mu_a, rho_a, &sample.eps_a)?;
                        let b = reparameterize(tape, mu_b, rho_b, &sample.eps_b)?;
                        let sigma_a = tape.softplus(rho_a);
                        let sigma_b = tape.softplus(rho_b);
                        vi_layers.push(ViNodes {
                            layer: layer.clone(),
                            mu_a,
                            sigma_a,
                            mu_b,
                            sigma_b,
                        });
                        adapted_weight(tape, base, b, a, cfg.scaling())?
                    }
                };
                weights.insert(layer.clone(), w);
            }
        }
        Ok(Binding {
            weights,
            trainables,
            vi_layers,
        })
    }

    /// Per-layer KL nodes of the variational adapters against `prior`.
    pub fn layer_kl_nodes(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        prior: &GaussianPrior,
        scale: KlScale,
    ) -> Result<Vec<(String, Var)>> {
        binding
            .vi_layers
            .iter()
            .map(|n| {
                let sigma_p = prior.sigma_for(&n.layer)?;
                let ka = tape.kl_diag_gaussian(n.mu_a, n.sigma_a, prior.mu_p, sigma_p)?;
                let kb = tape.kl_diag_gaussian(n.mu_b, n.sigma_b, prior.mu_p, sigma_p)?;
                let mut kl = tape.add(ka, kb)?;
                if scale == KlScale::PerElement {
                    let count = tape.value(n.mu_a).len() + tape.value(n.mu_b).len();
                    kl = tape.scale(kl, 1.0 / count as f64);
                }
                Ok((n.layer.clone(), kl))
            })
            .collect()
    }

    /// Per-frame logits (`frames x vocab`) on the tape.
    pub fn forward_bound(&self, tape: &mut Tape, binding: &Binding, features: &Matrix) -> Result<Var> {
        let cfg = &self.config;
        if features.cols() != cfg.feature_dim {
            return Err(Error::shape("model input", (features.rows(), cfg.feature_dim), features.shape()));
        }
        let w = |name: &str| binding.weights[name];
        let x = tape.constant(features.transpose());
        let projected = tape.matmul(w(INPUT), x)?;
        let mut hidden = tape.tanh(projected);
        let inv_sqrt_h = 1.0 / (cfg.hidden_dim as f64).sqrt();
        for b in 0..cfg.num_blocks {
            let q = tape.matmul(w(&query(b)), hidden)?;
            let k = tape.matmul(w(&key(b)), hidden)?;
            let v = tape.matmul(w(&value(b)), hidden)?;
            let qt = tape.transpose(q);
            let scores = tape.matmul(qt, k)?;
            let scores = tape.scale(scores, inv_sqrt_h);
            let attn = tape.softmax_rows(scores);
            let attn_t = tape.transpose(attn);
            let mixed = tape.matmul(v, attn_t)?;
            let out = tape.matmul(w(&output(b)), mixed)?;
            hidden = tape.add(hidden, out)?;
        }
        let logits = tape.matmul(w(CLASSIFIER), hidden)?;
        let logits = tape.add_column(logits, w(CLASSIFIER_BIAS))?;
        Ok(tape.transpose(logits))
    }

    /// Per-frame logits. Variational models need one sample per adapter.
    pub fn forward(&self, features: &Matrix, samples: Option<&SampleSet>) -> Result<Matrix> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false, samples)?;
        let logits = self.forward_bound(&mut tape, &binding, features)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean frame cross-entropy against frame-aligned labels.
    pub fn task_loss(&self, tape: &mut Tape, binding: &Binding, features: &Matrix, frame_labels: &[usize]) -> Result<Var> {
        if features.rows() != frame_labels.len() {
            return Err(Error::Data(format!(
                "{} frames but {} frame labels",
                features.rows(),
                frame_labels.len()
            )));
        }
        let logits = self.forward_bound(tape, binding, features)?;
        tape.mean_cross_entropy(logits, frame_labels)
    }

    /// Deterministic transcript. Variational models use the posterior mean.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        match self.mode {
            Mode::Vilora => self.posterior_mean().predict(features),
            _ => Ok(decode_greedy(&self.forward(features, None)?)),
        }
    }

    /// The variational model with every adapter collapsed to its mean.
    pub fn posterior_mean(&self) -> ModelState {
        let mut out = self.clone();
        if self.mode == Mode::Vilora {
            out.mode = Mode::Lora;
            out.adapters = self
                .adapters
                .iter()
                .map(|(k, a)| match a {
                    Adapter::Variational(v) => (k.clone(), Adapter::Deterministic(v.mean())),
                    other => (k.clone(), other.clone()),
                })
                .collect();
        }
        out
    }

    /// Averages the frame posteriors of `k` sampled passes and decodes.
    pub fn predict_marginalized(&self, features: &Matrix, k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
        if k == 0 {
            return Err(Error::Config("marginalized prediction needs at least one sample".into()));
        }
        if self.mode != Mode::Vilora {
            return Err(Error::Config(format!("marginalized prediction needs a variational model, got {:?}", self.mode)));
        }
        let mut mean: Option<Matrix> = None;
        for _ in 0..k {
            let samples = self.draw_samples(rng);
            let probs = self.forward(features, Some(&samples))?.softmax_rows();
            match &mut mean {
                Some(m) => m.add_assign(&probs)?,
                None => mean = Some(probs),
            }
        }
        let mean = mean.expect("k >= 1").scale(1.0 / k as f64);
        Ok(decode_greedy(&mean))
    }
}

/// Per-frame argmax (lowest id on ties), collapse repeats, drop blanks.
pub fn decode_greedy(scores: &Matrix) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if prev != Some(best) && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Collapses a frame-label sequence the same way [`decode_greedy`] does.
pub fn collapse(frame_labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in frame_labels {
        if prev != Some(l) && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_rows(ids: &[usize], v: usize) -> Matrix {
        Matrix::from_fn(ids.len(), v, |r, c| if ids[r] == c { 1.0 } else { 0.0 })
    }

    #[test]
    fn decode_collapse_rule() {
        assert_eq!(decode_greedy(&one_hot_rows(&[1, 1, 0, 2], 4)), vec![1, 2]);
        assert_eq!(decode_greedy(&one_hot_rows(&[0, 0, 0], 4)), Vec::<usize>::new());
        assert_eq!(decode_greedy(&one_hot_rows(&[1, 0, 1], 4)), vec![1, 1]);
        let mut tie = Matrix::zeros(1, 6);
        tie.set(0, 2, 3.0);
        tie.set(0, 5, 3.0);
        assert_eq!(decode_greedy(&tie), vec![2]);
    }

    fn model(seed: u64) -> ModelState {
        ModelState::init(ModelConfig::default(), &mut RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn zero_frames_give_zero_rows() {
        let m = model(1);
        let logits = m.forward(&Matrix::zeros(0, 16), None).unwrap();
        assert_eq!(logits.shape(), (0, 12));
    }

    #[test]
    fn fresh_lora_is_bitwise_zero_shot() {
        let m = model(2);
        let x = RngStream::new(3, 0).normal_matrix(7, 16, 1.0);
        let cfg = AdapterConfig {
            rank: 4,
            alpha: 8.0,
            targets: qkv_targets(2),
        };
        let lora = m.with_adapters(AdapterKind::Deterministic, cfg, &mut RngStream::new(4, 0)).unwrap();
        assert_eq!(lora.forward(&x, None).unwrap(), m.forward(&x, None).unwrap());
    }

    #[test]
    fn variational_forward_needs_samples() {
        let m = model(2);
        let cfg = AdapterConfig {
            rank: 2,
            alpha: 2.0,
            targets: qkv_targets(2),
        };
        let vi = m.with_adapters(AdapterKind::Variational, cfg, &mut RngStream::new(4, 0)).unwrap();
        let x = Matrix::zeros(3, 16);
        assert!(matches!(vi.forward(&x, None), Err(Error::Config(_))));
        assert_eq!(vi.trainable_count(), 2 * 6 * (2 * 16 + 16 * 2));
    }

    #[test]
    fn identical_frames_permute_identically() {
        let m = model(5);
        let mut rng = RngStream::new(6, 0);
        let mut x = rng.normal_matrix(6, 16, 1.0);
        let dup = x.row(1).to_vec();
        x.row_mut(4).copy_from_slice(&dup);
        let y = m.forward(&x, None).unwrap();
        // Swap two different frames and check the rows follow.
        let mut xp = x.clone();
        let (r0, r3) = (x.row(0).to_vec(), x.row(3).to_vec());
        xp.row_mut(0).copy_from_slice(&r3);
        xp.row_mut(3).copy_from_slice(&r0);
        let yp = m.forward(&xp, None).unwrap();
        for c in 0..12 {
            assert!((y.get(0, c) - yp.get(3, c)).abs() < 1e-12);
            assert!((y.get(3, c) - yp.get(0, c)).abs() < 1e-12);
            assert!((y.get(1, c) - y.get(4, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn task_loss_reference_values() {
        let m = model(7);
        let mut tape = Tape::new();
        let logits = tape.leaf(Matrix::zeros(5, 8));
        let ce = tape.mean_cross_entropy(logits, &[0, 1, 2, 3, 4]).unwrap();
        assert!((tape.scalar(ce) - 8f64.ln()).abs() < 1e-12);

        let sharp = tape.leaf(one_hot_rows(&[3, 1, 0], 8).scale(30.0));
        let ce = tape.mean_cross_entropy(sharp, &[3, 1, 0]).unwrap();
        assert!(tape.scalar(ce) < 1e-6);

        let b = m.bind(&mut tape, false, None).unwrap();
        let x = Matrix::zeros(4, 16);
        assert!(matches!(m.task_loss(&mut tape, &b, &x, &[0, 1]), Err(Error::Data(_))));
        let l = m.task_loss(&mut tape, &b, &x, &[0, 1, 2, 3]).unwrap();
        assert!(tape.scalar(l) >= 0.0);
    }

    #[test]
    fn marginalized_edge_cases() {
        let m = model(8);
        let cfg = AdapterConfig {
            rank: 2,
            alpha: 2.0,
            targets: qkv_targets(2),
        };
        let mut vi = m.with_adapters(AdapterKind::Variational, cfg, &mut RngStream::new(9, 0)).unwrap();
        let x = RngStream::new(10, 0).normal_matrix(9, 16, 1.0);
        assert!(vi.predict_marginalized(&x, 0, &mut RngStream::new(0, 0)).is_err());

        for ad in vi.adapters.values_mut() {
            if let Adapter::Variational(v) = ad {
                v.mu_b = RngStream::new(11, 0).normal_matrix(16, 2, 0.3);
                v.rho_a = v.rho_a.map(|_| -1e4);
                v.rho_b = v.rho_b.map(|_| -1e4);
            }
        }
        let mean_pred = vi.posterior_mean().predict(&x).unwrap();
        for k in [1, 3, 5] {
            assert_eq!(vi.predict_marginalized(&x, k, &mut RngStream::new(k as u64, 0)).unwrap(), mean_pred);
        }
    }

    #[test]
    fn param_lookup_round_trip() {
        let m = model(1).for_full_finetune();
        for name in m.trainable_names() {
            assert!(m.param(&name).is_some(), "{name}");
        }
        assert_eq!(m.trainable_names().len(), m.config.layer_shapes().len());
    }

    #[test]
    fn validate_catches_bad_shapes() {
        let mut m = model(1);
        m.validate().unwrap();
        m.base.insert(INPUT.into(), Matrix::zeros(3, 3));
        assert!(matches!(m.validate(), Err(Error::Data(_))));
    }
}
