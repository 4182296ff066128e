//! Gated attention pooling for multiple-instance learning.
//!
//! For a bag `h_1..h_n`:
//!
//! ```text
//! e_k = wᵀ (tanh(V h_k) ⊙ sigmoid(U h_k))
//! a   = softmax(e)
//! z   = Σ_k a_k h_k
//! logits = W_c z + b_c
//! ```

use super::linear::argmax;
use super::matrix::{axpy, dot};
use super::{softmax, softmax_xent, uniform_init, Differentiable, Matrix, Parameters};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMil {
    /// `hidden × dim`, tanh branch.
    pub v: Matrix,
    /// `hidden × dim`, sigmoid gate.
    pub u: Matrix,
    /// `hidden`
    pub w: Vec<f64>,
    /// `n_classes × dim`
    pub wc: Matrix,
    pub bc: Vec<f64>,
}

/// Intermediates kept from the forward pass.
#[derive(Debug, Clone)]
pub struct MilCache {
    pub instances: Matrix,
    /// `tanh(V h_k)`, `n × hidden`
    pub tanh: Matrix,
    /// `sigmoid(U h_k)`, `n × hidden`
    pub gate: Matrix,
    pub scores: Vec<f64>,
    pub attention: Vec<f64>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilGrads {
    pub v: Matrix,
    pub u: Matrix,
    pub w: Vec<f64>,
    pub wc: Matrix,
    pub bc: Vec<f64>,
}

impl MilGrads {
    pub fn into_tensors(self) -> Vec<Vec<f64>> {
        vec![self.v.into_vec(), self.u.into_vec(), self.w, self.wc.into_vec(), self.bc]
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl AttentionMil {
    pub fn init(dim: usize, hidden: usize, n_classes: usize, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 || dim == 0 || n_classes == 0 {
            return Err(Error::invalid("attention MIL needs dim, hidden and n_classes >= 1"));
        }
        let v = Matrix::from_vec(hidden, dim, uniform_init(hidden * dim, dim, rng))?;
        let u = Matrix::from_vec(hidden, dim, uniform_init(hidden * dim, dim, rng))?;
        let w = uniform_init(hidden, hidden, rng);
        let wc = Matrix::from_vec(n_classes, dim, uniform_init(n_classes * dim, dim, rng))?;
        Ok(Self {
            v,
            u,
            w,
            wc,
            bc: vec![0.0; n_classes],
        })
    }

    pub fn dim(&self) -> usize {
        self.v.cols()
    }

    pub fn hidden(&self) -> usize {
        self.v.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.wc.rows()
    }

    pub fn forward(&self, bag: &Matrix) -> Result<MilCache> {
        let (n, d) = (bag.rows(), bag.cols());
        if n == 0 {
            return Err(Error::invalid("empty bag"));
        }
        if d != self.dim() {
            return Err(Error::Shape(format!("bag dim {d} != model dim {}", self.dim())));
        }
        let h = self.hidden();
        let mut tanh = Matrix::zeros(n, h);
        let mut gate = Matrix::zeros(n, h);
        let mut scores = vec![0.0; n];
        for k in 0..n {
            let x = bag.row(k);
            let mut score = 0.0;
            for j in 0..h {
                let t = dot(self.v.row(j), x).tanh();
                let g = sigmoid(dot(self.u.row(j), x));
                tanh.set(k, j, t);
                gate.set(k, j, g);
                score += self.w[j] * t * g;
            }
            scores[k] = score;
        }
        let attention = softmax(&scores);
        let mut pooled = vec![0.0; d];
        for (k, &a) in attention.iter().enumerate() {
            axpy(a, bag.row(k), &mut pooled);
        }
        let logits: Vec<f64> = self
            .wc
            .matvec(&pooled)
            .iter()
            .zip(&self.bc)
            .map(|(z, b)| z + b)
            .collect();
        Ok(MilCache {
            instances: bag.clone(),
            tanh,
            gate,
            scores,
            attention,
            pooled,
            logits,
        })
    }

    /// Gradients of the loss given `dlogits = ∂loss/∂logits`.
    pub fn backward(&self, cache: &MilCache, dlogits: &[f64]) -> MilGrads {
        let (n, d, h, c) = (cache.instances.rows(), self.dim(), self.hidden(), self.n_classes());
        let mut wc = Matrix::zeros(c, d);
        for (k, &g) in dlogits.iter().enumerate() {
            axpy(g, &cache.pooled, wc.row_mut(k));
        }
        let bc = dlogits.to_vec();
        let dz = self.wc.matvec_t(dlogits);

        // Through the attention softmax: de_k = a_k (da_k - Σ_j a_j da_j).
        let da: Vec<f64> = (0..n).map(|k| dot(&dz, cache.instances.row(k))).collect();
        let mean_da: f64 = cache.attention.iter().zip(&da).map(|(a, g)| a * g).sum();
        let de: Vec<f64> = cache.attention.iter().zip(&da).map(|(a, g)| a * (g - mean_da)).collect();

        let mut w = vec![0.0; h];
        let mut v = Matrix::zeros(h, d);
        let mut u = Matrix::zeros(h, d);
        for k in 0..n {
            if de[k] == 0.0 {
                continue;
            }
            let (t, g, x) = (cache.tanh.row(k), cache.gate.row(k), cache.instances.row(k));
            for j in 0..h {
                w[j] += de[k] * t[j] * g[j];
                let dgated = de[k] * self.w[j];
                let dpre_v = dgated * g[j] * (1.0 - t[j] * t[j]);
                let dpre_u = dgated * t[j] * g[j] * (1.0 - g[j]);
                axpy(dpre_v, x, v.row_mut(j));
                axpy(dpre_u, x, u.row_mut(j));
            }
        }
        MilGrads { v, u, w, wc, bc }
    }

    pub fn predict_proba(&self, bag: &Matrix) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(bag)?.logits))
    }

    pub fn predict(&self, bag: &Matrix) -> Result<usize> {
        Ok(argmax(&self.forward(bag)?.logits))
    }
}

impl Parameters for AttentionMil {
    fn params(&self) -> Vec<&[f64]> {
        vec![self.v.as_slice(), self.u.as_slice(), &self.w, self.wc.as_slice(), &self.bc]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.v.as_mut_slice(),
            self.u.as_mut_slice(),
            &mut self.w,
            self.wc.as_mut_slice(),
            &mut self.bc,
        ]
    }
}

fn single_label(labels: &[usize]) -> Result<usize> {
    match labels {
        [y] => Ok(*y),
        _ => Err(Error::Shape(format!("a bag takes exactly one label, got {}", labels.len()))),
    }
}

impl Differentiable for AttentionMil {
    fn loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let y = single_label(labels)?;
        let cache = self.forward(x)?;
        let logits = Matrix::from_vec(1, cache.logits.len(), cache.logits)?;
        Ok(softmax_xent(&logits, &[y])?.0)
    }

    fn loss_and_grads(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let y = single_label(labels)?;
        let cache = self.forward(x)?;
        let logits = Matrix::from_vec(1, cache.logits.len(), cache.logits.clone())?;
        let (loss, dlogits) = softmax_xent(&logits, &[y])?;
        Ok((loss, self.backward(&cache, dlogits.row(0)).into_tensors()))
    }
}
