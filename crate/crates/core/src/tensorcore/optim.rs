use super::Tensor;
use crate::error::{Error, Result};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut p, &[Some(&g)]).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-15);
        opt.step(&mut p, &[Some(&g)]).unwrap();
        // v = 0.9 + 1 = 1.9
        assert!((p[0].data()[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let mut p = vec![Tensor::full(vec![2], 3.0)];
        Sgd::new(0.1, 0.9).step(&mut p, &[None]).unwrap();
        assert_eq!(p[0].data(), &[3.0, 3.0]);
    }
}
