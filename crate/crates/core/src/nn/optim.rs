//! First-order optimizers with per-group learning rates.

use std::collections::{BTreeMap, HashMap};

use super::params::{ParamGrads, ParamStore};

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    /// Overrides `lr` for named parameter groups.
    pub group_lr: BTreeMap<String, f64>,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            group_lr: BTreeMap::new(),
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn with_group_lr(mut self, group: &str, lr: f64) -> Self {
        self.group_lr.insert(group.to_string(), lr);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn lr_for(&self, ps: &ParamStore, name: &str) -> f64 {
        ps.group_of(name)
            .and_then(|g| self.group_lr.get(g))
            .copied()
            .unwrap_or(self.lr)
    }

    /// Update every non-frozen parameter that has a gradient.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let names: Vec<String> = ps.names().map(str::to_string).collect();
        for name in names {
            if ps.is_frozen(&name) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            let lr = self.lr_for(ps, &name);
            if lr == 0.0 {
                continue;
            }
            let p = ps.get_mut(&name).expect("registered");
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *x);
            }
        }
    }
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub group_lr: BTreeMap<String, f64>,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            group_lr: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore, grads: &ParamGrads) {
        let names: Vec<String> = ps.names().map(str::to_string).collect();
        for name in names {
            if ps.is_frozen(&name) {
                continue;
            }
            let Some(g) = grads.get(&name) else { continue };
            let lr = ps
                .group_of(&name)
                .and_then(|gr| self.group_lr.get(gr))
                .copied()
                .unwrap_or(self.lr);
            for (x, d) in ps.get_mut(&name).expect("registered").data_mut().iter_mut().zip(g) {
                *x -= lr * d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Tape, Tensor};

    fn quadratic_grads(ps: &ParamStore) -> (f64, ParamGrads) {
        let mut tape = Tape::new();
        let x = tape.param(ps, "x").unwrap();
        let sq = tape.mul(x, x).unwrap();
        let f = tape.sum(sq).unwrap();
        let g = tape.backward(f).unwrap();
        let mut pg = ParamGrads::new();
        pg.accumulate(&tape, &g);
        (tape.value(f).item(), pg)
    }

    #[test]
    fn adamw_step_decreases_square() {
        let mut ps = ParamStore::new();
        ps.insert("x", "main", Tensor::scalar(1.0)).unwrap();
        let (f0, g) = quadratic_grads(&ps);
        let mut opt = AdamW::new(0.1);
        opt.step(&mut ps, &g);
        let (f1, _) = quadratic_grads(&ps);
        assert_eq!(f0, 1.0);
        assert!(f1 < f0, "{f1} >= {f0}");
    }

    #[test]
    fn frozen_group_and_zero_lr_leave_params_untouched() {
        let mut ps = ParamStore::new();
        ps.insert("x", "frozen", Tensor::scalar(0.7)).unwrap();
        ps.insert("y", "main", Tensor::scalar(0.3)).unwrap();
        ps.freeze_group("frozen");
        let mut pg = ParamGrads::new();
        pg.insert("x", vec![1.0]);
        let before = ps.clone();
        AdamW::new(0.5).step(&mut ps, &pg);
        assert_eq!(ps, before);

        let (_, g) = {
            let mut t = Tape::new();
            let y = t.param(&ps, "y").unwrap();
            let f = t.sum(y).unwrap();
            let gr = t.backward(f).unwrap();
            let mut pg = ParamGrads::new();
            pg.accumulate(&t, &gr);
            (0.0, pg)
        };
        AdamW::new(0.0).step(&mut ps, &g);
        Sgd::new(0.0).step(&mut ps, &g);
        assert_eq!(ps, before);
    }
}
