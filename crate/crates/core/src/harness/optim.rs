use crate::tensor::{GradBuffer, ParamStore};

/// Adam with decoupled weight decay. A parameter's step size is the base
/// learning rate times its learning-rate scale; scale 0 freezes it.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradBuffer) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let lr = self.lr * params.lr_scale(id);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let p = params.get_mut(id).data_mut();
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                *pi -= lr * self.weight_decay * *pi;
                *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_steps_match_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::matrix(1, 2, vec![1.0, -2.0]));
        let mut opt = AdamW::new(&store, 0.1, (0.9, 0.999), 1e-8, 0.01);
        let mut g = GradBuffer::zeros_like(&store);
        g.add(id, &[0.5, -4.0]);
        opt.step(&mut store, &g);
        // first step: m_hat = g, v_hat = g^2, so the update is lr * sign(g)
        let w = store.get(id).data();
        let expect0 = 1.0 - 0.1 * 0.01 * 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        let expect1 = -2.0 + 0.1 * 0.01 * 2.0 + 0.1 * 4.0 / (4.0 + 1e-8);
        assert!((w[0] - expect0).abs() < 1e-15 && (w[1] - expect1).abs() < 1e-15);

        opt.step(&mut store, &g);
        let m = 0.9 * 0.05 + 0.1 * 0.5;
        let v = 0.999 * 0.000_25 + 0.001 * 0.25;
        let upd = (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expect = expect0 - 0.1 * 0.01 * expect0 - 0.1 * upd;
        assert!((store.get(id).data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_lr_and_frozen_groups_leave_parameters_alone() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = store.add("b", Tensor::matrix(1, 1, vec![3.0]));
        store.set_lr_scale(b, 0.0);
        let mut g = GradBuffer::zeros_like(&store);
        g.add(a, &[1.0, 1.0]);
        g.add(b, &[1.0]);
        let before = store.clone();
        AdamW::new(&store, 0.0, (0.9, 0.999), 1e-8, 0.01).step(&mut store, &g);
        assert_eq!(store.get(a).data(), before.get(a).data());
        AdamW::new(&store, 0.5, (0.9, 0.999), 1e-8, 0.01).step(&mut store, &g);
        assert_eq!(store.get(b).data(), &[3.0]);
        assert_ne!(store.get(a).data(), before.get(a).data());
    }
}
