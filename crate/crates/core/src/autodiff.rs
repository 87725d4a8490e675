//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its value and the
//! indices of its inputs. Nodes are appended in evaluation order, so the
//! tape is a topological order of the graph and can never contain a cycle.
//! [`Tape::backward`] walks it once from the loss back to the first node.
//!
//! Leaves come in two flavours: [`Tape::leaf`] marks a trainable input that
//! receives a gradient, [`Tape::constant`] marks a frozen one. Nodes whose
//! inputs are all constant are skipped during the backward pass, so frozen
//! weights never have a gradient computed for them.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softmax_in_place, softplus, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Transpose(usize),
    SoftmaxRows(usize),
    AddColumn(usize, usize),
    Sum(usize),
    AddN(Vec<usize>),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Matrix,
    },
    KlDiag {
        mu: usize,
        sigma: usize,
        mu_p: f64,
        sigma_p: f64,
    },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddColumn(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a) => vec![*a],
            Op::AddN(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiag { mu, sigma, .. } => vec![*mu, *sigma],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `var`. Trainable leaves the loss does not depend on
    /// report zeros; constants report `None`.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let idx = self.nodes.len();
        let parents = op.parents();
        debug_assert!(parents.iter().all(|&p| p < idx), "tape parents must precede their child");
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => parents.iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A frozen input; no gradient is ever computed for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a.0, b.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a.0, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let input = self.value(a);
        if let Some(bad) = input.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("logarithm of non-positive value {bad}")));
        }
        let value = input.map(f64::ln);
        Ok(self.push(value, Op::Ln(a.0)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        self.push(value, Op::SoftmaxRows(a.0))
    }

    /// Adds the `rows x 1` column `bias` to every column of `a`.
    pub fn add_column(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, b) = (self.value(a), self.value(bias));
        if b.cols() != 1 || b.rows() != m.rows() {
            return Err(Error::shape("add_column", m.shape(), b.shape()));
        }
        let mut value = m.clone();
        for r in 0..m.rows() {
            let bv = b.get(r, 0);
            for v in value.row_mut(r) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddColumn(a.0, bias.0)))
    }

    /// Sum of all elements, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a.0))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Config("add_n needs at least one input".into()))?;
        let mut value = self.value(*first).clone();
        for x in &xs[1..] {
            value.add_assign(self.value(*x))?;
        }
        Ok(self.push(value, Op::AddN(xs.iter().map(|v| v.0).collect())))
    }

    /// Negative log-softmax of one `1 x V` row at `target`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        if self.value(logits).rows() != 1 {
            return Err(Error::shape("softmax_cross_entropy", self.shape(logits), (1, 0)));
        }
        self.mean_cross_entropy(logits, &[target])
    }

    /// Mean over rows of the negative log-softmax at each row's target.
    pub fn mean_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let m = self.value(logits);
        if m.rows() != targets.len() {
            return Err(Error::Data(format!(
                "{} logit rows but {} targets",
                m.rows(),
                targets.len()
            )));
        }
        if targets.is_empty() {
            return Err(Error::Data("cross entropy over zero rows".into()));
        }
        let mut probs = m.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= m.cols() {
                return Err(Error::Index(format!("target {t} outside vocabulary of {}", m.cols())));
            }
            let row = m.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        let value = Matrix::scalar(total / targets.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Closed-form `KL(N(mu, sigma^2) || N(mu_p, sigma_p^2))` summed over
    /// elements. A non-finite value is returned as-is.
    pub fn kl_diag_gaussian(&mut self, mu: Var, sigma: Var, mu_p: f64, sigma_p: f64) -> Result<Var> {
        let kl = crate::elbo::kl_diag_gaussian(self.value(mu), self.value(sigma), mu_p, sigma_p)?;
        Ok(self.push(
            Matrix::scalar(kl),
            Op::KlDiag {
                mu: mu.0,
                sigma: sigma.0,
                mu_p,
                sigma_p,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf if grads[idx].is_none() => {
                    let (r, c) = node.value.shape();
                    grads[idx] = Some(Matrix::zeros(r, c));
                }
                Op::Constant => grads[idx] = None,
                _ => {}
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let mut acc = |i: usize, m: Matrix| -> Result<()> {
            if !self.nodes[i].requires_grad {
                return Ok(());
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => {
                    *slot = Some(m);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(*a, g.matmul(&val(*b).transpose())?)?;
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, val(*a).transpose().matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.hadamard(val(*b))?)?;
                acc(*b, g.hadamard(val(*a))?)?;
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::Softplus(a) => acc(*a, g.hadamard(&val(*a).map(sigmoid))?)?,
            Op::Exp(a) => acc(*a, g.hadamard(&node.value)?)?,
            Op::Ln(a) => acc(*a, g.hadamard(&val(*a).map(|x| 1.0 / x))?)?,
            Op::Tanh(a) => acc(*a, g.hadamard(&node.value.map(|y| 1.0 - y * y))?)?,
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (&yv, &gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, d)?;
            }
            Op::AddColumn(a, b) => {
                acc(*a, g.clone())?;
                let col = Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().sum());
                acc(*b, col)?;
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.data()[0]))?;
            }
            Op::AddN(xs) => {
                for x in xs {
                    acc(*x, g.clone())?;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0] / targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, d)?;
            }
            Op::KlDiag {
                mu,
                sigma,
                mu_p,
                sigma_p,
            } => {
                let gs = g.data()[0];
                let var_p = sigma_p * sigma_p;
                acc(*mu, val(*mu).map(|m| gs * (m - mu_p) / var_p))?;
                acc(*sigma, val(*sigma).map(|s| gs * (s / var_p - 1.0 / s)))?;
            }
        }
        Ok(())
    }
}
