use serde::{Deserialize, Serialize};

use super::params::{Group, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaDeltaConfig {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdaDeltaConfig {
    fn default() -> Self {
        Self { rho: 0.95, eps: 1e-6 }
    }
}

#[derive(Debug, Clone, Default)]
struct Accumulators {
    sq_grad: Vec<f64>,
    sq_update: Vec<f64>,
}

/// AdaDelta with per-step learning-rate multiplier.
///
/// Per element:
/// `E[g²] ← ρE[g²] + (1-ρ)g²`,
/// `Δ = -√(E[Δ²]+ε) / √(E[g²]+ε) · g`,
/// `E[Δ²] ← ρE[Δ²] + (1-ρ)Δ²`,
/// `θ ← θ + lr·Δ`.
#[derive(Debug, Clone)]
pub struct AdaDelta {
    config: AdaDeltaConfig,
    state: Vec<Accumulators>,
}

impl AdaDelta {
    pub fn new(config: AdaDeltaConfig, store: &ParamStore) -> Self {
        let state = store
            .iter()
            .map(|(_, p)| Accumulators {
                sq_grad: vec![0.0; p.value.len()],
                sq_update: vec![0.0; p.value.len()],
            })
            .collect();
        Self { config, state }
    }

    pub fn config(&self) -> AdaDeltaConfig {
        self.config
    }

    /// Accumulators for one parameter: `(E[g²], E[Δ²])`.
    pub fn accumulators(&self, index: usize) -> (&[f64], &[f64]) {
        let a = &self.state[index];
        (&a.sq_grad, &a.sq_update)
    }

    /// Applies one update to every parameter in `groups` and zeroes their
    /// gradients. Fails without touching anything if a gradient is not
    /// finite.
    pub fn step(&mut self, store: &mut ParamStore, groups: &[Group], lr: f64) -> Result<()> {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect();
        for &id in &ids {
            let p = store.get(id);
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(p.name.clone()));
            }
        }
        let AdaDeltaConfig { rho, eps } = self.config;
        for id in ids {
            let p = store.get_mut(id);
            let acc = &mut self.state[id.index()];
            let (_, cols) = p.value.rows_cols();
            let ranges: Vec<(usize, usize)> = if p.sparse_rows {
                p.touched.iter().map(|&r| (r * cols, (r + 1) * cols)).collect()
            } else {
                vec![(0, p.value.len())]
            };
            let values = p.value.data_mut();
            for (lo, hi) in ranges {
                for i in lo..hi {
                    let g = p.grad[i];
                    let eg = rho * acc.sq_grad[i] + (1.0 - rho) * g * g;
                    let delta = -((acc.sq_update[i] + eps).sqrt() / (eg + eps).sqrt()) * g;
                    acc.sq_grad[i] = eg;
                    acc.sq_update[i] = rho * acc.sq_update[i] + (1.0 - rho) * delta * delta;
                    values[i] += lr * delta;
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Group::Shared, Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_gives_zero_update_and_decays() {
        let mut store = scalar_store(1.5);
        let mut opt = AdaDelta::new(AdaDeltaConfig::default(), &store);
        let id = store.find("x").unwrap();
        store.get_mut(id).grad[0] = 2.0;
        opt.step(&mut store, &[Group::Shared], 1.0).unwrap();
        let before = store.get(id).value.item();
        let (g1, u1) = opt.accumulators(0);
        let (g1, u1) = (g1[0], u1[0]);
        opt.step(&mut store, &[Group::Shared], 1.0).unwrap();
        assert_eq!(store.get(id).value.item(), before);
        let (g2, u2) = opt.accumulators(0);
        assert_eq!(g2[0], 0.95 * g1);
        assert_eq!(u2[0], 0.95 * u1);
    }

    #[test]
    fn two_unit_gradient_steps_follow_the_recurrence() {
        // Hand-executed recurrence with rho = 0.95, eps = 1e-6, g = 1, lr = 1.
        let expected = [
            (-0.0044720912343108364, 0.050000000000000044, 9.999800003999919e-07),
            (-0.00900115349984404, 0.09750000000000009, 1.9756012506338312e-06),
        ];
        let mut store = scalar_store(0.0);
        let mut opt = AdaDelta::new(AdaDeltaConfig::default(), &store);
        let id = store.find("x").unwrap();
        for (x, eg, eu) in expected {
            store.get_mut(id).grad[0] = 1.0;
            opt.step(&mut store, &[Group::Shared], 1.0).unwrap();
            assert!((store.get(id).value.item() - x).abs() < 1e-15);
            let (g, u) = opt.accumulators(0);
            assert!((g[0] - eg).abs() < 1e-15);
            assert!((u[0] - eu).abs() < 1e-18);
            assert_eq!(store.get(id).grad[0], 0.0);
        }
    }

    #[test]
    fn update_scales_linearly_with_multiplier() {
        let run = |lr: f64| {
            let mut store = scalar_store(0.0);
            let mut opt = AdaDelta::new(AdaDeltaConfig::default(), &store);
            store.get_mut(store.find("x").unwrap()).grad[0] = 0.3;
            opt.step(&mut store, &[Group::Shared], lr).unwrap();
            store.get(store.find("x").unwrap()).value.item()
        };
        let base = run(1.0);
        assert!((run(0.1) - 0.1 * base).abs() < 1e-18);
        assert!((run(2.5) - 2.5 * base).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_is_reported_by_name() {
        let mut store = scalar_store(0.0);
        let mut opt = AdaDelta::new(AdaDeltaConfig::default(), &store);
        store.get_mut(store.find("x").unwrap()).grad[0] = f64::NAN;
        match opt.step(&mut store, &[Group::Shared], 1.0) {
            Err(Error::Numeric(name)) => assert_eq!(name, "x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn only_requested_groups_move() {
        let mut store = ParamStore::new();
        let a = store.add("a", Group::Shared, Tensor::scalar(0.0));
        let b = store.add("b", Group::Domain, Tensor::scalar(0.0));
        let mut opt = AdaDelta::new(AdaDeltaConfig::default(), &store);
        store.get_mut(a).grad[0] = 1.0;
        store.get_mut(b).grad[0] = 1.0;
        opt.step(&mut store, &[Group::Shared], 1.0).unwrap();
        assert!(store.get(a).value.item() < 0.0);
        assert_eq!(store.get(b).value.item(), 0.0);
        assert_eq!(store.get(b).grad[0], 1.0);
    }

    #[test]
    fn accumulators_stay_non_negative() {
        let mut store = scalar_store(0.0);
        let mut opt = AdaDelta::new(AdaDeltaConfig::default(), &store);
        let id = store.find("x").unwrap();
        for i in 0..50 {
            store.get_mut(id).grad[0] = ((i * 37 % 11) as f64 - 5.0) * 0.7;
            opt.step(&mut store, &[Group::Shared], 0.5).unwrap();
            let (g, u) = opt.accumulators(0);
            assert!(g[0] >= 0.0 && u[0] >= 0.0);
        }
    }
}
