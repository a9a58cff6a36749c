//! Cross-stream connection block.
//!
//! Position features of the two streams are correlated through an embedded
//! Gaussian `exp(φ(xf_i)·κ(xo_j))`. The similarities are normalised into
//! attention rows, each stream attends over the other, and the attended
//! features come back through a residual output map:
//!
//! ```text
//! A   = row_softmax(φ(xf)·κ(xo)ᵀ)          T×T
//! B   = row_softmax(Aᵀ)                     rows of Aᵀ renormalised
//! xf' = xf + (A·xo)·W_f
//! xo' = xo + (B·xf)·W_o
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcsError, Result};
use crate::numeric::{Graph, Tensor, Var};

/// How the similarity matrix enters the residual term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionMode {
    /// Softmax attention over positions of the other stream.
    #[default]
    Attention,
    /// The mean similarity as one scalar gate: `x' = x + ȳ·(x·W)`.
    ScalarGate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionParams {
    /// `D×E`.
    pub w_phi: Tensor,
    /// `D×E`.
    pub w_kappa: Tensor,
    /// `D×D`.
    pub w_f: Tensor,
    /// `D×D`.
    pub w_o: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundConnection {
    pub w_phi: Var,
    pub w_kappa: Var,
    pub w_f: Var,
    pub w_o: Var,
}

impl ConnectionParams {
    /// Output maps start at zero, so the block starts as the identity.
    pub fn init<R: Rng + ?Sized>(d: usize, e: usize, rng: &mut R) -> Result<Self> {
        if e == 0 || e > d {
            return Err(CcsError::Config(format!(
                "embedding width must be in 1..={d}, got {e}"
            )));
        }
        Ok(ConnectionParams {
            w_phi: Tensor::uniform(&[d, e], 0.05, rng),
            w_kappa: Tensor::uniform(&[d, e], 0.05, rng),
            w_f: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
        })
    }

    pub fn bind(&self, g: &mut Graph) -> BoundConnection {
        BoundConnection {
            w_phi: g.param(self.w_phi.clone()),
            w_kappa: g.param(self.w_kappa.clone()),
            w_f: g.param(self.w_f.clone()),
            w_o: g.param(self.w_o.clone()),
        }
    }

    fn constants(&self, g: &mut Graph) -> BoundConnection {
        BoundConnection {
            w_phi: g.constant(self.w_phi.clone()),
            w_kappa: g.constant(self.w_kappa.clone()),
            w_f: g.constant(self.w_f.clone()),
            w_o: g.constant(self.w_o.clone()),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w_phi, &self.w_kappa, &self.w_f, &self.w_o]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.w_phi,
            &mut self.w_kappa,
            &mut self.w_f,
            &mut self.w_o,
        ]
    }
}

impl BoundConnection {
    pub fn vars(&self) -> [Var; 4] {
        [self.w_phi, self.w_kappa, self.w_f, self.w_o]
    }

    /// `log S = φ(xf)·κ(xo)ᵀ`, `T×T`.
    pub fn log_similarity(&self, g: &mut Graph, xf: Var, xo: Var) -> Result<Var> {
        let phi = g.matmul(xf, self.w_phi)?;
        let kappa = g.matmul(xo, self.w_kappa)?;
        let kappa_t = g.transpose(kappa)?;
        g.matmul(phi, kappa_t)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        xf: Var,
        xo: Var,
        mode: ConnectionMode,
    ) -> Result<(Var, Var)> {
        let (tf, to) = (g.value(xf).shape().to_vec(), g.value(xo).shape().to_vec());
        if tf != to {
            return Err(CcsError::dim("connect", &tf, &to));
        }
        let log_s = self.log_similarity(g, xf, xo)?;
        match mode {
            ConnectionMode::Attention => {
                let a = g.row_softmax(log_s)?;
                let attended_f = g.matmul(a, xo)?;
                // Aᵀ with rows renormalised: log A is a valid logit table for
                // the column-wise normalisation.
                let log_a = g.log_softmax(log_s)?;
                let log_a_t = g.transpose(log_a)?;
                let b = g.row_softmax(log_a_t)?;
                let attended_o = g.matmul(b, xf)?;
                let rf = g.matmul(attended_f, self.w_f)?;
                let ro = g.matmul(attended_o, self.w_o)?;
                Ok((g.add(xf, rf)?, g.add(xo, ro)?))
            }
            ConnectionMode::ScalarGate => {
                let s = g.exp(log_s);
                let y = g.mean(s);
                let shape = g.value(xf).shape().to_vec();
                let y = g.expand(y, &shape)?;
                let hf = g.matmul(xf, self.w_f)?;
                let ho = g.matmul(xo, self.w_o)?;
                let rf = g.mul(hf, y)?;
                let ro = g.mul(ho, y)?;
                Ok((g.add(xf, rf)?, g.add(xo, ro)?))
            }
        }
    }
}

/// `S[i][j] = exp(φ(xf_i)·κ(xo_j))`.
pub fn similarity(xf: &Tensor, xo: &Tensor, params: &ConnectionParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.constants(&mut g);
    let (f, o) = (g.constant(xf.clone()), g.constant(xo.clone()));
    let log_s = b.log_similarity(&mut g, f, o)?;
    let s = g.exp(log_s);
    Ok(g.value(s).clone())
}

/// Attention matrix `A`, rows summing to one.
pub fn attention(xf: &Tensor, xo: &Tensor, params: &ConnectionParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = params.constants(&mut g);
    let (f, o) = (g.constant(xf.clone()), g.constant(xo.clone()));
    let log_s = b.log_similarity(&mut g, f, o)?;
    let a = g.row_softmax(log_s)?;
    Ok(g.value(a).clone())
}

/// Applies the block outside any training graph.
pub fn connect(
    xf: &Tensor,
    xo: &Tensor,
    params: &ConnectionParams,
    mode: ConnectionMode,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let b = params.constants(&mut g);
    let (f, o) = (g.constant(xf.clone()), g.constant(xo.clone()));
    let (f2, o2) = b.forward(&mut g, f, o, mode)?;
    Ok((g.value(f2).clone(), g.value(o2).clone()))
}

/// The ablated block: both streams pass through untouched.
pub fn connect_disabled<T>(xf: T, xo: T) -> (T, T) {
    (xf, xo)
}
