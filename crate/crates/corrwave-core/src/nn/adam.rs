//! Adam optimizer with per-group learning rates and L2 weight decay.
//!
//! Decay is coupled (added to the gradient) and moments are tracked per
//! parameter with individual step counters, so a parameter that sits out
//! some steps (frozen head, inactive task) keeps unbiased corrections.

use ndarray::ArrayD;

use crate::nn::params::{ParamGroup, ParamStore, VarMap};
use crate::nn::tape::Gradients;

#[derive(Debug, Clone, Copy)]
pub struct GroupSetting {
    pub learning_rate: f64,
    pub weight_decay: f64,
}

/// Learning-rate schedule by parameter group; `None` freezes the group.
#[derive(Debug, Clone, Default)]
pub struct GroupSettings {
    settings: Vec<(ParamGroup, GroupSetting)>,
}

impl GroupSettings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, group: ParamGroup, learning_rate: f64, weight_decay: f64) -> Self {
        self.settings.push((
            group,
            GroupSetting {
                learning_rate,
                weight_decay,
            },
        ));
        self
    }

    /// Same setting for every group.
    pub fn uniform(learning_rate: f64, weight_decay: f64) -> Self {
        let mut s = Self::new();
        for g in ParamGroup::ALL {
            s = s.with(g, learning_rate, weight_decay);
        }
        s
    }

    pub fn get(&self, group: ParamGroup) -> Option<GroupSetting> {
        self.settings
            .iter()
            .find(|(g, _)| *g == group)
            .map(|(_, s)| *s)
    }
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let first = store
            .entries()
            .iter()
            .map(|e| ArrayD::zeros(e.value.raw_dim()))
            .collect::<Vec<_>>();
        let second = first.clone();
        let steps = vec![0; store.len()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first,
            second,
            steps,
        }
    }

    /// Apply one update. Parameters whose group is frozen or whose gradient
    /// is absent from the tape are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        vars: &VarMap,
        grads: &Gradients,
        settings: &GroupSettings,
    ) {
        let names: Vec<(String, ParamGroup)> = store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.group))
            .collect();
        for (idx, (name, group)) in names.iter().enumerate() {
            let Some(setting) = settings.get(*group) else { continue };
            let Some(grad) = grads.get(vars.get(name)) else { continue };
            let value = store.get_mut(name);
            self.steps[idx] += 1;
            let t = self.steps[idx] as i32;
            let bias1 = 1.0 - self.beta1.powi(t);
            let bias2 = 1.0 - self.beta2.powi(t);
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g + setting.weight_decay * *p;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p -= setting.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use ndarray::arr1;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.register("x", ParamGroup::Trunk, arr1(&[4.0, -3.0]).into_dyn());
        let mut adam = Adam::new(&store);
        let settings = GroupSettings::uniform(0.05, 0.0);
        for _ in 0..600 {
            let mut tape = Tape::new();
            let vars = store.inject(&mut tape);
            let x = vars.get("x");
            let sq = tape.mul(x, x);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            adam.step(&mut store, &vars, &grads, &settings);
        }
        for &v in store.get("x").iter() {
            assert!(v.abs() < 1e-2, "did not converge: {v}");
        }
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut store = ParamStore::new();
        store.register("x", ParamGroup::Trunk, arr1(&[1.0]).into_dyn());
        store.register("y", ParamGroup::DetectHead, arr1(&[1.0]).into_dyn());
        let mut adam = Adam::new(&store);
        let settings = GroupSettings::new().with(ParamGroup::Trunk, 0.1, 0.0);
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape);
        let x = vars.get("x");
        let y = vars.get("y");
        let s = tape.add(x, y);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss);
        adam.step(&mut store, &vars, &grads, &settings);
        assert_ne!(store.get("x")[[0]], 1.0);
        assert_eq!(store.get("y")[[0]], 1.0);
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = crate::rng::stream(5, "adam-det", 0);
            store.register(
                "w",
                ParamGroup::Trunk,
                crate::nn::init::fan_in_uniform(&[4, 4], 4, &mut rng),
            );
            let mut adam = Adam::new(&store);
            let settings = GroupSettings::uniform(2e-4, 1e-6);
            for _ in 0..5 {
                let mut tape = Tape::new();
                let vars = store.inject(&mut tape);
                let w = vars.get("w");
                let sq = tape.mul(w, w);
                let loss = tape.mean_all(sq);
                let grads = tape.backward(loss);
                adam.step(&mut store, &vars, &grads, &settings);
            }
            store.get("w").clone()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
