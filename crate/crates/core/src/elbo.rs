//! The variational objective.
//!
//! `L_VI = (1 - beta) * task + beta * KL_bar`, where `KL_bar` aggregates the
//! per-layer KL terms of the layers whose KL is finite at this step. Layers
//! whose KL overflowed are masked out of both the value and the gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::VariationalAdapter;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Default KL weight: a 90/10 split between task loss and KL.
pub const DEFAULT_BETA: f64 = 0.1;

/// Elementwise Gaussian prior shared by both factors of each layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mu_p: f64,
    pub sigma: BTreeMap<String, f64>,
}

impl GaussianPrior {
    pub fn uniform<S: AsRef<str>>(layers: &[S], mu_p: f64, sigma: f64) -> Result<Self> {
        let prior = GaussianPrior {
            mu_p,
            sigma: layers.iter().map(|l| (l.as_ref().to_string(), sigma)).collect(),
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        for (layer, &s) in &self.sigma {
            if !(s > 0.0) {
                return Err(Error::Domain(format!("prior sigma for {layer} must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn sigma_for(&self, layer: &str) -> Result<f64> {
        self.sigma
            .get(layer)
            .copied()
            .ok_or_else(|| Error::Config(format!("no prior entry for layer {layer}")))
    }
}

/// How per-layer KL terms are combined into `KL_bar`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlAggregate {
    #[default]
    Mean,
    Sum,
}

/// Whether a layer's KL is left as an elementwise sum or divided by the
/// number of variational elements in the layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlScale {
    #[default]
    Total,
    PerElement,
}

/// `sum_i KL(N(mu_i, sigma_i^2) || N(mu_p, sigma_p^2))` in closed form.
///
/// A zero `sigma_q` entry or an underflowing `sigma_p^2` produces a
/// non-finite value, which is returned rather than raised.
pub fn kl_diag_gaussian(mu_q: &Matrix, sigma_q: &Matrix, mu_p: f64, sigma_p: f64) -> Result<f64> {
    if mu_q.shape() != sigma_q.shape() {
        return Err(Error::shape("kl_diag_gaussian", mu_q.shape(), sigma_q.shape()));
    }
    if !(sigma_p > 0.0) {
        return Err(Error::Domain(format!("prior sigma must be positive, got {sigma_p}")));
    }
    if let Some(s) = sigma_q.data().iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain(format!("posterior sigma must be positive, got {s}")));
    }
    let var_p = sigma_p * sigma_p;
    let mut total = 0.0;
    for (&m, &s) in mu_q.data().iter().zip(sigma_q.data()) {
        let d = m - mu_p;
        total += (sigma_p / s).ln() + (s * s + d * d) / (2.0 * var_p) - 0.5;
    }
    Ok(total)
}

/// KL of one variational adapter against its layer prior (A and B terms).
pub fn layer_kl(adapter: &VariationalAdapter, prior: &GaussianPrior, layer: &str) -> Result<f64> {
    let sigma_p = prior.sigma_for(layer)?;
    let a = kl_diag_gaussian(&adapter.mu_a, &adapter.sigma_a(), prior.mu_p, sigma_p)?;
    let b = kl_diag_gaussian(&adapter.mu_b, &adapter.sigma_b(), prior.mu_p, sigma_p)?;
    Ok(a + b)
}

/// Result of filtering per-layer KL values.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteKl {
    pub value: f64,
    pub mask: BTreeMap<String, bool>,
    /// Set when no layer had a finite KL.
    pub all_non_finite: bool,
}

pub fn aggregate_finite_kl(kl_per_layer: &BTreeMap<String, f64>, mode: KlAggregate) -> Result<FiniteKl> {
    if kl_per_layer.is_empty() {
        return Err(Error::Config("KL aggregation over an empty layer set".into()));
    }
    let mask: BTreeMap<String, bool> = kl_per_layer
        .iter()
        .map(|(k, v)| (k.clone(), v.is_finite()))
        .collect();
    let finite: Vec<f64> = kl_per_layer.values().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        log::warn!("every layer KL is non-finite; KL term dropped for this step");
        return Ok(FiniteKl {
            value: 0.0,
            mask,
            all_non_finite: true,
        });
    }
    let sum: f64 = finite.iter().sum();
    let value = match mode {
        KlAggregate::Sum => sum,
        KlAggregate::Mean => sum / finite.len() as f64,
    };
    Ok(FiniteKl {
        value,
        mask,
        all_non_finite: false,
    })
}

pub fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
    }
    Ok(())
}

/// `(1 - beta) * task + beta * kl`.
pub fn combine_loss(task_loss: f64, kl: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok((1.0 - beta) * task_loss + beta * kl)
}

/// One logged evaluation of the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub step: usize,
    pub epoch: usize,
    pub task_loss: f64,
    /// Non-finite entries serialize as `null`.
    #[serde(with = "nullable_map")]
    pub kl_per_layer: BTreeMap<String, f64>,
    pub finite_mask: BTreeMap<String, bool>,
    pub kl_aggregate: f64,
    pub combined: f64,
    pub beta: f64,
    pub all_kl_non_finite: bool,
}

impl ElboBreakdown {
    /// Breakdown for a non-variational step: no KL, combined equals task.
    pub fn task_only(step: usize, epoch: usize, task_loss: f64) -> Self {
        ElboBreakdown {
            step,
            epoch,
            task_loss,
            kl_per_layer: BTreeMap::new(),
            finite_mask: BTreeMap::new(),
            kl_aggregate: 0.0,
            combined: task_loss,
            beta: 0.0,
            all_kl_non_finite: false,
        }
    }
}

mod nullable_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        let m: BTreeMap<&String, Option<f64>> = map
            .iter()
            .map(|(k, v)| (k, v.is_finite().then_some(*v)))
            .collect();
        m.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let m = BTreeMap::<String, Option<f64>>::deserialize(d)?;
        Ok(m.into_iter().map(|(k, v)| (k, v.unwrap_or(f64::NAN))).collect())
    }
}

/// Assembles `L_VI` on the tape from a task-loss node and one KL node per
/// layer. Only finite KL nodes are connected to the result, so a layer that
/// overflowed contributes neither value nor gradient.
pub fn assemble_objective(
    tape: &mut Tape,
    task: Var,
    layer_kls: &[(String, Var)],
    beta: f64,
    mode: KlAggregate,
    step: usize,
    epoch: usize,
) -> Result<(Var, ElboBreakdown)> {
    check_beta(beta)?;
    let kl_per_layer: BTreeMap<String, f64> = layer_kls
        .iter()
        .map(|(name, v)| (name.clone(), tape.scalar(*v)))
        .collect();
    let filtered = aggregate_finite_kl(&kl_per_layer, mode)?;

    let finite_vars: Vec<Var> = layer_kls
        .iter()
        .filter(|(name, _)| filtered.mask[name])
        .map(|(_, v)| *v)
        .collect();

    let weighted_task = tape.scale(task, 1.0 - beta);
    let loss = if finite_vars.is_empty() {
        weighted_task
    } else {
        let total = tape.add_n(&finite_vars)?;
        let kl_bar = match mode {
            KlAggregate::Sum => total,
            KlAggregate::Mean => tape.scale(total, 1.0 / finite_vars.len() as f64),
        };
        let weighted_kl = tape.scale(kl_bar, beta);
        tape.add(weighted_task, weighted_kl)?
    };

    let task_loss = tape.scalar(task);
    let breakdown = ElboBreakdown {
        step,
        epoch,
        task_loss,
        kl_per_layer,
        finite_mask: filtered.mask,
        kl_aggregate: filtered.value,
        combined: tape.scalar(loss),
        beta,
        all_kl_non_finite: filtered.all_non_finite,
    };
    Ok((loss, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_rows(&[v]).unwrap()
    }

    #[test]
    fn identical_distributions_have_zero_kl() {
        let mu = row(&[0.3, -1.0, 2.0]);
        let sigma = row(&[0.7, 0.7, 0.7]);
        for &m in mu.data() {
            let kl = kl_diag_gaussian(&row(&[m]), &row(&[0.7]), m, 0.7).unwrap();
            assert!(kl.abs() < 1e-12);
        }
        assert!(kl_diag_gaussian(&Matrix::zeros(1, 3), &sigma, 0.0, 0.7).unwrap().abs() < 1e-12);
    }

    #[test]
    fn unit_shift_against_standard_normal() {
        let kl = kl_diag_gaussian(&row(&[1.0]), &row(&[1.0]), 0.0, 1.0).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_sigma_gives_infinity() {
        let kl = kl_diag_gaussian(&row(&[0.0, 0.0]), &row(&[1.0, 0.0]), 0.0, 1.0).unwrap();
        assert_eq!(kl, f64::INFINITY);
    }

    #[test]
    fn tiny_prior_sigma_overflows() {
        let kl = kl_diag_gaussian(&row(&[0.01]), &row(&[1e-3]), 0.0, 1e-300).unwrap();
        assert!(!kl.is_finite());
    }

    #[test]
    fn non_positive_prior_sigma_is_domain_error() {
        assert!(matches!(
            kl_diag_gaussian(&row(&[0.0]), &row(&[1.0]), 0.0, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kl_is_increasing_in_mean_offset() {
        let mut last = -1.0;
        for i in 0..20 {
            let kl = kl_diag_gaussian(&row(&[0.1 * i as f64]), &row(&[0.5]), 0.0, 0.8).unwrap();
            assert!(kl > last);
            last = kl;
        }
    }

    #[test]
    fn aggregate_examples() {
        let m = |pairs: &[(&str, f64)]| -> BTreeMap<String, f64> {
            pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
        };
        let r = aggregate_finite_kl(&m(&[("L1", 2.0), ("L2", 4.0)]), KlAggregate::Mean).unwrap();
        assert_eq!(r.value, 3.0);
        assert!(r.mask.values().all(|&b| b));

        let r = aggregate_finite_kl(&m(&[("L1", 2.0), ("L2", f64::INFINITY)]), KlAggregate::Mean).unwrap();
        assert_eq!(r.value, 2.0);
        assert!(r.mask["L1"]);
        assert!(!r.mask["L2"]);

        let r = aggregate_finite_kl(&m(&[("L1", f64::NAN)]), KlAggregate::Mean).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.all_non_finite);
        assert!(!r.mask["L1"]);

        let r = aggregate_finite_kl(&m(&[("L1", 2.0), ("L2", 4.0)]), KlAggregate::Sum).unwrap();
        assert_eq!(r.value, 6.0);

        assert!(matches!(
            aggregate_finite_kl(&BTreeMap::new(), KlAggregate::Mean),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn combine_examples() {
        assert!((combine_loss(1.0, 1.0, 0.1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(combine_loss(0.37, 12.0, 0.0).unwrap(), 0.37);
        assert!((combine_loss(2.0, 0.0, 0.1).unwrap() - 1.8).abs() < 1e-15);
        assert!(combine_loss(1.0, 1.0, 1.0).is_err());
        assert!(combine_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn layer_kl_is_sum_of_factor_terms() {
        let mut rng = RngStream::new(3, 0);
        let adapter = VariationalAdapter {
            mu_a: rng.normal_matrix(3, 5, 0.5),
            rho_a: rng.normal_matrix(3, 5, 1.0),
            mu_b: rng.normal_matrix(4, 3, 0.5),
            rho_b: rng.normal_matrix(4, 3, 1.0),
        };
        let prior = GaussianPrior::uniform(&["q"], 0.0, 0.4).unwrap();
        let got = layer_kl(&adapter, &prior, "q").unwrap();

        let mut brute = 0.0;
        for (mu, rho) in [(&adapter.mu_a, &adapter.rho_a), (&adapter.mu_b, &adapter.rho_b)] {
            for i in 0..mu.len() {
                let s = crate::tensor::softplus(rho.data()[i]);
                let m = mu.data()[i];
                brute += (0.4f64 / s).ln() + (s * s + m * m) / (2.0 * 0.16) - 0.5;
            }
        }
        assert!((got - brute).abs() < 1e-10 * brute.abs().max(1.0));
        assert!(matches!(layer_kl(&adapter, &prior, "k"), Err(Error::Config(_))));
    }

    #[test]
    fn layer_kl_at_prior_is_zero() {
        let sigma = 0.3;
        let rho = Matrix::filled(2, 4, crate::tensor::inverse_softplus(sigma));
        let adapter = VariationalAdapter {
            mu_a: Matrix::zeros(2, 4),
            rho_a: rho.clone(),
            mu_b: Matrix::zeros(4, 2),
            rho_b: rho.transpose(),
        };
        let prior = GaussianPrior::uniform(&["v"], 0.0, crate::tensor::softplus(rho.data()[0])).unwrap();
        assert!(layer_kl(&adapter, &prior, "v").unwrap().abs() < 1e-12);
    }

    #[test]
    fn filtered_layer_has_no_gradient_path() {
        let mut tape = Tape::new();
        let task = tape.leaf(Matrix::scalar(2.0));
        let mu_ok = tape.leaf(row(&[0.5]));
        let s_ok = tape.leaf(row(&[0.5]));
        let mu_bad = tape.leaf(row(&[0.5]));
        let s_bad = tape.leaf(row(&[0.5]));
        let kl_ok = tape.kl_diag_gaussian(mu_ok, s_ok, 0.0, 1.0).unwrap();
        let kl_bad = tape.kl_diag_gaussian(mu_bad, s_bad, 0.0, 1e-300).unwrap();
        let (loss, bd) = assemble_objective(
            &mut tape,
            task,
            &[("a".into(), kl_ok), ("b".into(), kl_bad)],
            0.1,
            KlAggregate::Mean,
            0,
            0,
        )
        .unwrap();
        assert!(tape.scalar(loss).is_finite());
        assert_eq!(bd.kl_aggregate, tape.scalar(kl_ok));
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(mu_bad).unwrap(), &Matrix::zeros(1, 1));
        assert!(g.get(mu_ok).unwrap().data()[0] != 0.0);

        let json = serde_json::to_string(&bd).unwrap();
        assert!(json.contains("\"b\":null"), "{json}");
        let back: ElboBreakdown = serde_json::from_str(&json).unwrap();
        assert!(back.kl_per_layer["b"].is_nan());
    }
}
