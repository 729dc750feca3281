use super::{Real, Tensor};
use crate::error::{ensure, Result};

/// SGD with classical momentum: `v <- m*v + g`, `p <- p - lr*v`.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    /// Zero velocities shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// Applies one momentum step to every parameter in place.
pub fn sgd_step<T: Real>(params: &mut [Tensor<T>], grads: &[&Tensor<T>], state: &mut OptimState<T>) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.velocity.len(),
        Dimension,
        "sgd_step: {} params, {} grads, {} velocity buffers",
        params.len(),
        grads.len(),
        state.velocity.len()
    );
    let lr = T::from_f64(state.learning_rate);
    let m = T::from_f64(state.momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        ensure!(
            p.same_shape(g) && p.same_shape(v),
            Dimension,
            "sgd_step shapes {:?} / {:?} / {:?}",
            p.shape(),
            g.shape(),
            v.shape()
        );
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn plain_step_without_momentum() {
        let mut p = vec![one(5.0)];
        let mut st = OptimState::new(&p, 1.0, 0.0);
        sgd_step(&mut p, &[&one(1.0)], &mut st).unwrap();
        assert_eq!(p[0].data()[0], 4.0);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![one(0.0)];
        let mut st = OptimState::new(&p, 1.0, 0.9);
        sgd_step(&mut p, &[&one(1.0)], &mut st).unwrap();
        sgd_step(&mut p, &[&one(1.0)], &mut st).unwrap();
        assert!((p[0].data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![one(1.25)];
        let mut st = OptimState::new(&p, 0.3, 0.9);
        sgd_step(&mut p, &[&one(0.0)], &mut st).unwrap();
        assert_eq!(p[0].data()[0], 1.25);
    }
}
