use crate::error::{Error, Result};
use crate::trainer::model::{Gradients, MlpModel};

/// SGD with classical momentum: `v ← μ·v − η·g`, `w ← w + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    learning_rate: f64,
    momentum: f64,
    velocity: Gradients,
    iteration: u64,
}

impl SgdState {
    pub fn new(model: &MlpModel, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Gradients::zeros_like(model),
            iteration: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
        self.velocity.check_shape(grads)?;
        let (mu, lr) = (self.momentum, self.learning_rate);
        for (v, g) in self.velocity.layers.iter_mut().zip(&grads.layers) {
            for (vi, gi) in v.weights.iter_mut().chain(v.bias.iter_mut()).zip(g.weights.iter().chain(&g.bias)) {
                *vi = mu * *vi - lr * gi;
            }
        }
        model.apply_update(&self.velocity)?;
        self.iteration += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::model::Dense;

    fn scalar_model(w: f64) -> MlpModel {
        let mut l = Dense::zeros(1, 1);
        l.weights[0] = w;
        MlpModel::from_layers(vec![l], false).unwrap()
    }

    fn grad(g: f64, model: &MlpModel) -> Gradients {
        let mut gr = Gradients::zeros_like(model);
        gr.layers[0].weights[0] = g;
        gr
    }

    #[test]
    fn plain_step() {
        let mut m = scalar_model(0.0);
        let mut s = SgdState::new(&m, 1.0, 0.0).unwrap();
        let g = grad(1.0, &m);
        s.step(&mut m, &g).unwrap();
        assert_eq!(m.param(0), -1.0);
        assert_eq!(s.iteration(), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut m = scalar_model(0.37);
        let mut s = SgdState::new(&m, 0.1, 0.9).unwrap();
        for _ in 0..25 {
            let g = grad(0.0, &m);
        s.step(&mut m, &g).unwrap();
        }
        assert_eq!(m.param(0), 0.37);
        assert_eq!(s.iteration(), 25);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = −0.1, w1 = −0.1; v2 = 0.9·(−0.1) − 0.1 = −0.19, w2 = −0.29.
        let mut m = scalar_model(0.0);
        let mut s = SgdState::new(&m, 0.1, 0.9).unwrap();
        let g = grad(1.0, &m);
        s.step(&mut m, &g).unwrap();
        let g = grad(1.0, &m);
        s.step(&mut m, &g).unwrap();
        assert!((m.param(0) + 0.29).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_settings_and_shapes() {
        let m = scalar_model(0.0);
        assert!(SgdState::new(&m, 0.0, 0.9).is_err());
        assert!(SgdState::new(&m, 0.1, 1.0).is_err());
        let mut s = SgdState::new(&m, 0.1, 0.9).unwrap();
        let other = MlpModel::from_layers(vec![Dense::zeros(2, 1)], false).unwrap();
        let mut m = m;
        assert!(s.step(&mut m, &Gradients::zeros_like(&other)).is_err());
    }
}
