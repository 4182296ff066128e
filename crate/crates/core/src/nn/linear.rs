use super::matrix::{axpy, dot};
use super::{softmax, softmax_xent, uniform_init, Differentiable, Matrix, Parameters};
use crate::{Error, Result, Rng};

/// Linear classifier `logits = x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `n_classes × dim`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearGrads {
    pub fn into_tensors(self) -> Vec<Vec<f64>> {
        vec![self.weight.into_vec(), self.bias]
    }
}

impl LinearProbe {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(n_classes, dim),
            bias: vec![0.0; n_classes],
        }
    }

    /// Uniform `±1/sqrt(dim)` weights, zero bias.
    pub fn init(n_classes: usize, dim: usize, rng: &mut Rng) -> Self {
        let w = uniform_init(n_classes * dim, dim, rng);
        Self {
            weight: Matrix::from_vec(n_classes, dim, w).expect("shape"),
            bias: vec![0.0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::Shape(format!("input dim {} != probe dim {}", x.cols(), self.dim())));
        }
        let c = self.n_classes();
        let mut out = Matrix::zeros(x.rows(), c);
        for i in 0..x.rows() {
            let xi = x.row(i);
            let o = out.row_mut(i);
            for k in 0..c {
                o[k] = dot(self.weight.row(k), xi) + self.bias[k];
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Matrix, dlogits: &Matrix) -> LinearGrads {
        let mut weight = Matrix::zeros(self.n_classes(), self.dim());
        let mut bias = vec![0.0; self.n_classes()];
        for i in 0..x.rows() {
            let g = dlogits.row(i);
            for (k, &gk) in g.iter().enumerate() {
                axpy(gk, x.row(i), weight.row_mut(k));
                bias[k] += gk;
            }
        }
        LinearGrads { weight, bias }
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let logits = self.forward(x)?;
        let mut out = Matrix::zeros(logits.rows(), logits.cols());
        for i in 0..logits.rows() {
            out.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
        }
        Ok(out)
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Parameters for LinearProbe {
    fn params(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

impl Differentiable for LinearProbe {
    fn loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        Ok(softmax_xent(&self.forward(x)?, labels)?.0)
    }

    fn loss_and_grads(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (loss, dlogits) = softmax_xent(&self.forward(x)?, labels)?;
        Ok((loss, self.backward(x, &dlogits).into_tensors()))
    }
}
