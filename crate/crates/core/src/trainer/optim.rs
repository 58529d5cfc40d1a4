use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::config::OptimizerConfig;
use crate::autograd::Tensor;
use crate::params::{ParamId, ParamStore};

/// Adam with the weight-decay term folded into the gradient. Parameters
/// without a gradient in a step are left untouched, moments included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    cfg: OptimizerConfig,
    steps: Vec<u64>,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, num_params: usize) -> Self {
        Self {
            cfg,
            steps: vec![0; num_params],
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), self.steps.len(), "one gradient slot per parameter");
        let OptimizerConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1: b1,
            beta2: b2,
            eps,
            ..
        } = self.cfg;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(ParamId(i));
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.raw_dim()));
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g + wd * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.add("w", arr1(&[1.0, -2.0]).into_dyn());
        store.add("frozen", arr1(&[5.0]).into_dyn());
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        let mut adam = Adam::new(cfg, 2);
        adam.step(&mut store, &[Some(arr1(&[0.5, -3.0]).into_dyn()), None]);
        let w = store.get(ParamId(0));
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(store.get(ParamId(1))[IxDyn(&[0])], 5.0);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut store = ParamStore::new();
        store.add("w", arr1(&[3.0]).into_dyn());
        let cfg = OptimizerConfig { weight_decay: 0.1, ..Default::default() };
        let mut adam = Adam::new(cfg, 1);
        adam.step(&mut store, &[Some(arr1(&[0.0]).into_dyn())]);
        assert!(store.get(ParamId(0))[IxDyn(&[0])] < 3.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", arr1(&[4.0]).into_dyn());
        let cfg = OptimizerConfig { learning_rate: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut adam = Adam::new(cfg, 1);
        for _ in 0..500 {
            let x = store.get(ParamId(0))[IxDyn(&[0])];
            adam.step(&mut store, &[Some(arr1(&[2.0 * (x - 1.0)]).into_dyn())]);
        }
        assert!((store.get(ParamId(0))[IxDyn(&[0])] - 1.0).abs() < 1e-2);
    }
}
