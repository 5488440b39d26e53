use super::{ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied { updated: usize },
    /// Nothing changed because a gradient was not finite.
    Skipped { param: String },
}

/// Per-parameter running moments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub updates: u64,
}

/// Everything an optimizer carries between steps, apart from its config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<Option<Moments>>,
}

/// Adaptive moment estimation. Only parameters that carry a gradient are
/// touched; bias correction uses each parameter's own update count.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: Vec::new() }
    }

    pub fn from_state(config: AdamConfig, state: AdamState) -> Self {
        Adam { config, step: state.step, moments: state.moments }
    }

    pub fn state(&self) -> AdamState {
        AdamState { step: self.step, moments: self.moments.clone() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Number of applied steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// How many times `id` has been updated.
    pub fn updates(&self, id: ParamId) -> u64 {
        self.moments.get(id.0).and_then(Option::as_ref).map_or(0, |m| m.updates)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> StepOutcome {
        if let Some(bad) = grads.touched().find(|&id| grads.get(id).is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            log::warn!("skipping optimizer step: non-finite gradient for {}", store.name(bad));
            return StepOutcome::Skipped { param: store.name(bad).to_string() };
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let mut updated = 0;
        for id in grads.touched() {
            let grad = grads.get(id).expect("touched ids carry gradients");
            let param = store.get_mut(id).data_mut();
            let m = self.moments[id.0].get_or_insert_with(|| Moments {
                first: vec![0.0; grad.len()],
                second: vec![0.0; grad.len()],
                updates: 0,
            });
            m.updates += 1;
            let c1 = 1.0 - beta1.powi(m.updates as i32);
            let c2 = 1.0 - beta2.powi(m.updates as i32);
            for i in 0..grad.len() {
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * grad[i];
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * grad[i] * grad[i];
                let mh = m.first[i] / c1;
                let vh = m.second[i] / c2;
                param[i] -= lr * mh / (vh.sqrt() + eps);
            }
            updated += 1;
        }
        StepOutcome::Applied { updated }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn quadratic_grads(store: &ParamStore, id: ParamId, target: f64) -> (f64, ParamGrads) {
        let mut g = Graph::new(store);
        let w = g.param(id);
        let d = g.add_scalar(w, -target);
        let sq = g.mul(d, d).unwrap();
        let l = g.sum(sq);
        let loss = g.scalar(l);
        (loss, g.backward(l).unwrap().into_params())
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[1.5, -2.0]));
        let before = store.clone();
        let mut grads = ParamGrads::new(1);
        grads.accumulate(id, &[0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut store, &grads);
        assert!(store.bitwise_eq(&before));

        let mut grads = ParamGrads::new(1);
        grads.accumulate(id, &[0.3, -1.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.0));
        adam.step(&mut store, &grads);
        assert!(store.bitwise_eq(&before));
    }

    #[test]
    fn converges_on_one_dimensional_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[0.0]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        for _ in 0..500 {
            let (_, grads) = quadratic_grads(&store, id, 3.0);
            adam.step(&mut store, &grads);
        }
        assert!((store.get(id).data()[0] - 3.0).abs() < 1e-3, "{:?}", store.get(id).data());
    }

    #[test]
    fn loss_strictly_decreases_on_convex_probe() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[4.0, -3.0, 0.5]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let (loss, grads) = quadratic_grads(&store, id, 0.25);
            assert!(loss < last);
            last = loss;
            adam.step(&mut store, &grads);
        }
    }

    #[test]
    fn nan_gradient_skips_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[1.0]));
        let before = store.clone();
        let mut grads = ParamGrads::new(1);
        grads.accumulate(id, &[f64::NAN]);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut store, &grads), StepOutcome::Skipped { .. }));
        assert!(store.bitwise_eq(&before));
        assert_eq!(adam.steps(), 0);
    }
}
