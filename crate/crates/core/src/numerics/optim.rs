use super::{Matrix, NumericsError, Scalar};

/// First-order update rule over an ordered list of parameter tensors.
pub trait Optimizer<T: Scalar> {
    /// Applies one update. `params[i]` pairs with `grads[i]`; `names[i]` is used
    /// in the non-finite diagnostic.
    fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], names: &[&str]) -> Result<(), NumericsError>;

    fn learning_rate(&self) -> f64;

    fn set_learning_rate(&mut self, lr: f64);
}

fn check_finite<T: Scalar>(params: &[&mut Matrix<T>], names: &[&str]) -> Result<(), NumericsError> {
    for (i, p) in params.iter().enumerate() {
        if !p.is_finite() {
            let name = names.get(i).copied().unwrap_or("?");
            return Err(NumericsError::NonFinite(name.to_string()));
        }
    }
    Ok(())
}

/// SGD with classical momentum: `v = mu * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Matrix<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for SgdMomentum<T> {
    fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], names: &[&str]) -> Result<(), NumericsError> {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        }
        let mu = T::lit(self.momentum);
        let lr = T::lit(self.lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            p.same_shape(g, "sgd")?;
            for ((pv, &gv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(v.as_mut_slice()) {
                *vv = mu * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
        check_finite(params, names)
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], names: &[&str]) -> Result<(), NumericsError> {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            p.same_shape(g, "adam")?;
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice());
            for (((pv, &gv), mv), vv) in it {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        check_finite(params, names)
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}
