use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::Tensor;

/// SGD with classical momentum and L2 weight decay:
///
/// ```text
/// g' = g + wd * w
/// b  = momentum * b + g'
/// w  = w - lr * b
/// ```
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// Parameters absent from `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: impl Fn(ParamGroup) -> f64) {
        if self.buffers.len() < store.len() {
            self.buffers.resize(store.len(), None);
        }
        for (id, grad) in grads {
            let group = store.entry(*id).group;
            if group == ParamGroup::Buffer {
                continue;
            }
            let rate = lr(group);
            let w = store.get_mut(*id);
            let buf = self.buffers[id.index()].get_or_insert_with(|| vec![0.0; w.numel()]);
            for ((wi, gi), bi) in w.data.iter_mut().zip(&grad.data).zip(buf.iter_mut()) {
                let g = gi + self.weight_decay * *wi;
                *bi = self.momentum * *bi + g;
                *wi -= rate * *bi;
            }
        }
    }

    /// Momentum buffers keyed by parameter index, for checkpointing.
    pub fn buffers(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.buffers
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_deref().map(|b| (i, b)))
    }

    pub fn set_buffer(&mut self, index: usize, data: Vec<f64>) {
        if self.buffers.len() <= index {
            self.buffers.resize(index + 1, None);
        }
        self.buffers[index] = Some(data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_closed_form_on_two_parameters() {
        // f(w) = 0.5 * (a w0^2 + b w1^2), gradient (a w0, b w1)
        let (a, b) = (2.0, 0.5);
        let (lr, mu, wd) = (0.1, 0.9, 0.0005);
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec([1, 2, 1, 1], vec![1.0, -2.0]), ParamGroup::Head);
        let mut opt = Sgd::new(mu, wd);
        // hand recurrence
        let mut w = [1.0f64, -2.0];
        let mut m = [0.0f64, 0.0];
        for _ in 0..3 {
            let cur = store.get(id).data.clone();
            let grad = Tensor::from_vec([1, 2, 1, 1], vec![a * cur[0], b * cur[1]]);
            opt.step(&mut store, &[(id, grad)], |_| lr);
            let g = [a * w[0] + wd * w[0], b * w[1] + wd * w[1]];
            for i in 0..2 {
                m[i] = mu * m[i] + g[i];
                w[i] -= lr * m[i];
            }
        }
        // closed form of the three steps for coordinate 0 with k = a + wd:
        // w1 = w0 (1 - lr k), m1 = k w0
        // m2 = mu m1 + k w1, w2 = w1 - lr m2, m3 = mu m2 + k w2, w3 = w2 - lr m3
        let k = a + wd;
        let w0 = 1.0;
        let m1 = k * w0;
        let w1 = w0 - lr * m1;
        let m2 = mu * m1 + k * w1;
        let w2 = w1 - lr * m2;
        let m3 = mu * m2 + k * w2;
        let w3 = w2 - lr * m3;
        assert!((store.get(id).data[0] - w3).abs() < 1e-15);
        assert!((store.get(id).data[1] - w[1]).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_weights() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec([1, 1, 1, 2], vec![0.3, 0.4]), ParamGroup::Backbone);
        let mut opt = Sgd::new(0.9, 0.0005);
        opt.step(&mut store, &[(id, Tensor::full([1, 1, 1, 2], 5.0))], |_| 0.0);
        assert_eq!(store.get(id).data, vec![0.3, 0.4]);
    }
}
