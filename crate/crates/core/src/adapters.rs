//! Low-rank adapters on frozen weight matrices.
//!
//! A deterministic adapter replaces `W0` by `W0 + (alpha / r) * B * A`. The
//! variational adapter keeps a mean-field Gaussian over every element of
//! `A` and `B`, with `sigma = softplus(rho)`, and forward passes use draws
//! `mu + sigma * eps` so gradients reach both `mu` and `rho`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{inverse_softplus, softplus, Matrix};

/// Posterior scale of a freshly initialized variational adapter.
pub const INIT_SIGMA: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl AdapterConfig {
    /// The `alpha / r` factor applied to `B * A`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Checks rank and alpha against one target layer of shape `d_out x d_in`.
    pub fn validate_for(&self, layer: &str, d_out: usize, d_in: usize) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.rank == 0 || self.rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "rank {} invalid for {layer} ({d_out}x{d_in}); need 1 <= r <= {}",
                self.rank,
                d_in.min(d_out)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    Deterministic,
    Variational,
}

/// Plain LoRA factors: `A` is `r x d_in`, `B` is `d_out x r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
}

/// Mean-field Gaussian posterior over LoRA factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalAdapter {
    pub mu_a: Matrix,
    pub rho_a: Matrix,
    pub mu_b: Matrix,
    pub rho_b: Matrix,
}

/// One reparameterized draw, with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSample {
    pub a: Matrix,
    pub b: Matrix,
    pub eps_a: Matrix,
    pub eps_b: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Adapter {
    Deterministic(LoraAdapter),
    Variational(VariationalAdapter),
}

impl LoraAdapter {
    /// `A ~ N(0, 1/d_in)`, `B = 0`.
    pub fn init(rank: usize, d_out: usize, d_in: usize, rng: &mut RngStream) -> Self {
        LoraAdapter {
            a: rng.normal_matrix(rank, d_in, (1.0 / d_in as f64).sqrt()),
            b: Matrix::zeros(d_out, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

impl VariationalAdapter {
    /// `mu_A ~ N(0, 1/d_in)`, `mu_B = 0`, `sigma = INIT_SIGMA` everywhere.
    pub fn init(rank: usize, d_out: usize, d_in: usize, rng: &mut RngStream) -> Self {
        let rho0 = inverse_softplus(INIT_SIGMA);
        VariationalAdapter {
            mu_a: rng.normal_matrix(rank, d_in, (1.0 / d_in as f64).sqrt()),
            rho_a: Matrix::filled(rank, d_in, rho0),
            mu_b: Matrix::zeros(d_out, rank),
            rho_b: Matrix::filled(d_out, rank, rho0),
        }
    }

    pub fn rank(&self) -> usize {
        self.mu_a.rows()
    }

    pub fn sigma_a(&self) -> Matrix {
        self.rho_a.map(softplus)
    }

    pub fn sigma_b(&self) -> Matrix {
        self.rho_b.map(softplus)
    }

    pub fn parameter_count(&self) -> usize {
        self.mu_a.len() + self.rho_a.len() + self.mu_b.len() + self.rho_b.len()
    }

    /// The posterior mean as a deterministic adapter.
    pub fn mean(&self) -> LoraAdapter {
        LoraAdapter {
            a: self.mu_a.clone(),
            b: self.mu_b.clone(),
        }
    }

    /// Draws `eps ~ N(0, 1)` per element and returns `mu + sigma * eps`.
    pub fn sample(&self, rng: &mut RngStream) -> AdapterSample {
        let eps_a = rng.normal_matrix(self.mu_a.rows(), self.mu_a.cols(), 1.0);
        let eps_b = rng.normal_matrix(self.mu_b.rows(), self.mu_b.cols(), 1.0);
        self.sample_with(eps_a, eps_b)
            .expect("noise drawn with adapter shapes")
    }

    /// Reparameterized draw from recorded noise.
    pub fn sample_with(&self, eps_a: Matrix, eps_b: Matrix) -> Result<AdapterSample> {
        let a = reparameterize_plain(&self.mu_a, &self.rho_a, &eps_a)?;
        let b = reparameterize_plain(&self.mu_b, &self.rho_b, &eps_b)?;
        Ok(AdapterSample { a, b, eps_a, eps_b })
    }
}

fn reparameterize_plain(mu: &Matrix, rho: &Matrix, eps: &Matrix) -> Result<Matrix> {
    if mu.shape() != eps.shape() || mu.shape() != rho.shape() {
        return Err(Error::shape("reparameterize", mu.shape(), eps.shape()));
    }
    let mut out = mu.clone();
    for ((o, &r), &e) in out.data_mut().iter_mut().zip(rho.data()).zip(eps.data()) {
        *o += softplus(r) * e;
    }
    Ok(out)
}

impl Adapter {
    pub fn init(kind: AdapterKind, rank: usize, d_out: usize, d_in: usize, rng: &mut RngStream) -> Self {
        match kind {
            AdapterKind::Deterministic => Adapter::Deterministic(LoraAdapter::init(rank, d_out, d_in, rng)),
            AdapterKind::Variational => Adapter::Variational(VariationalAdapter::init(rank, d_out, d_in, rng)),
        }
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Deterministic(_) => AdapterKind::Deterministic,
            Adapter::Variational(_) => AdapterKind::Variational,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Adapter::Deterministic(a) => a.parameter_count(),
            Adapter::Variational(v) => v.parameter_count(),
        }
    }

    /// Named parameter matrices, in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Adapter::Deterministic(l) => vec![("a", &l.a), ("b", &l.b)],
            Adapter::Variational(v) => vec![
                ("mu_a", &v.mu_a),
                ("rho_a", &v.rho_a),
                ("mu_b", &v.mu_b),
                ("rho_b", &v.rho_b),
            ],
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        match (self, name) {
            (Adapter::Deterministic(l), "a") => Some(&mut l.a),
            (Adapter::Deterministic(l), "b") => Some(&mut l.b),
            (Adapter::Variational(v), "mu_a") => Some(&mut v.mu_a),
            (Adapter::Variational(v), "rho_a") => Some(&mut v.rho_a),
            (Adapter::Variational(v), "mu_b") => Some(&mut v.mu_b),
            (Adapter::Variational(v), "rho_b") => Some(&mut v.rho_b),
            _ => None,
        }
    }

    /// Checks factor shapes against a `d_out x d_in` base and `rank`.
    pub fn check_shapes(&self, layer: &str, rank: usize, d_out: usize, d_in: usize) -> Result<()> {
        let expect = |name: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                Err(Error::Data(format!(
                    "adapter {layer}.{name} has shape {:?}, expected {:?}",
                    m.shape(),
                    shape
                )))
            } else {
                Ok(())
            }
        };
        let a_shape = (rank, d_in);
        let b_shape = (d_out, rank);
        match self {
            Adapter::Deterministic(l) => {
                expect("a", &l.a, a_shape)?;
                expect("b", &l.b, b_shape)
            }
            Adapter::Variational(v) => {
                expect("mu_a", &v.mu_a, a_shape)?;
                expect("rho_a", &v.rho_a, a_shape)?;
                expect("mu_b", &v.mu_b, b_shape)?;
                expect("rho_b", &v.rho_b, b_shape)
            }
        }
    }
}

/// `base + scaling * B * A` on the tape.
pub fn adapted_weight(tape: &mut Tape, base: Var, b: Var, a: Var, scaling: f64) -> Result<Var> {
    let ba = tape.matmul(b, a)?;
    let delta = tape.scale(ba, scaling);
    tape.add(base, delta)
}

/// `mu + softplus(rho) * eps` on the tape, with `eps` held constant.
pub fn reparameterize(tape: &mut Tape, mu: Var, rho: Var, eps: &Matrix) -> Result<Var> {
    let sigma = tape.softplus(rho);
    let noise = tape.constant(eps.clone());
    let spread = tape.mul(sigma, noise)?;
    tape.add(mu, spread)
}

fn check_input(base: &Matrix, x: &Matrix) -> Result<()> {
    if x.rows() != base.cols() {
        return Err(Error::shape("adapter input", base.shape(), x.shape()));
    }
    Ok(())
}

/// `(W0 + (alpha/r) B A) x` for a column batch `x` of shape `d_in x n`.
pub fn lora_forward(adapter: &LoraAdapter, base: &Matrix, x: &Matrix, config: &AdapterConfig) -> Result<Matrix> {
    check_input(base, x)?;
    let mut tape = Tape::new();
    let w0 = tape.constant(base.clone());
    let a = tape.constant(adapter.a.clone());
    let b = tape.constant(adapter.b.clone());
    let w = adapted_weight(&mut tape, w0, b, a, config.scaling())?;
    let xv = tape.constant(x.clone());
    let y = tape.matmul(w, xv)?;
    Ok(tape.value(y).clone())
}

/// Forward pass with a recorded draw from the variational adapter.
pub fn vi_forward(
    adapter: &VariationalAdapter,
    base: &Matrix,
    x: &Matrix,
    sample: &AdapterSample,
    config: &AdapterConfig,
) -> Result<Matrix> {
    if sample.a.shape() != adapter.mu_a.shape() || sample.b.shape() != adapter.mu_b.shape() {
        return Err(Error::shape("vi_forward sample", adapter.mu_a.shape(), sample.a.shape()));
    }
    let drawn = LoraAdapter {
        a: sample.a.clone(),
        b: sample.b.clone(),
    };
    lora_forward(&drawn, base, x, config)
}
