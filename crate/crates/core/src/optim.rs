//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::Matrix;

/// Which variational parameters weight decay touches. Deterministic
/// parameters are always decayed when decay is on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WdTarget {
    #[default]
    MuOnly,
    MuAndRho,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub wd_target: WdTarget,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64, wd_target: WdTarget) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            wd_target,
        }
    }

    fn decays(&self, name: &str) -> bool {
        if self.weight_decay == 0.0 {
            return false;
        }
        let is_rho = name.ends_with(".rho_a") || name.ends_with(".rho_b");
        !is_rho || self.wd_target == WdTarget::MuAndRho
    }
}

pub struct Adam {
    config: AdamConfig,
    t: i32,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !(config.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive and weight decay non-negative (got {}, {})",
                config.lr, config.weight_decay
            )));
        }
        Ok(Adam {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every named parameter in `state`.
    pub fn step(&mut self, state: &mut ModelState, grads: &[(String, Matrix)]) -> Result<()> {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, g) in grads {
            let p = state
                .param_mut(name)
                .ok_or_else(|| Error::Config(format!("optimizer got gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Config(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let decay = if c.decays(name) { c.lr * c.weight_decay } else { 0.0 };
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= decay * pd[i] + c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
