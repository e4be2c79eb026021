//! Parameterized building blocks. Each layer registers its tensors in a
//! [`ParamStore`] at construction and records its forward pass on a
//! [`Graph`].

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{normal_tensor, unit_vector, ParamGroup, ParamId, ParamStore};
use super::tensor::Tensor;

/// Convolution with "same" padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: (usize, usize),
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        group: ParamGroup,
    ) -> Self {
        let fan_in = (cin * kernel.0 * kernel.1) as f64;
        let w = normal_tensor(rng, [cout, cin, kernel.0, kernel.1], (2.0 / fan_in).sqrt());
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]), group);
        Self {
            weight,
            bias,
            stride,
            pad: (kernel.0 / 2, kernel.1 / 2),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(self.weight, store.get(self.weight).clone());
        let b = g.param(self.bias, store.get(self.bias).clone());
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape[0]
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, group: ParamGroup) -> Self {
        let groups = if channels % groups == 0 { groups } else { 1 };
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([1, channels, 1, 1], 1.0), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1]), group),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(self.gamma, store.get(self.gamma).clone());
        let beta = g.param(self.beta, store.get(self.beta).clone());
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Batch normalization with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(shape, 1.0), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(shape), group),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(shape), ParamGroup::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(shape, 1.0), ParamGroup::Buffer),
        }
    }

    /// Normalizes with the batch statistics when `trace` is given (and logs
    /// the node there), otherwise with the running ones.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, trace: Option<&mut NormTrace>) -> Var {
        let gamma = g.param(self.gamma, store.get(self.gamma).clone());
        let beta = g.param(self.beta, store.get(self.beta).clone());
        match trace {
            Some(t) => {
                let y = g.batch_norm(x, gamma, beta, None);
                t.0.push((self.clone(), y));
                y
            }
            None => {
                let (m, v) = (&store.get(self.running_mean).data, &store.get(self.running_var).data);
                g.batch_norm(x, gamma, beta, Some((m, v)))
            }
        }
    }
}

/// Batch-statistics normalization nodes of one training forward pass.
#[derive(Debug, Default)]
pub struct NormTrace(Vec<(BatchNorm, Var)>);

impl NormTrace {
    /// Moves every running statistic towards the batch's:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&self, g: &Graph, store: &mut ParamStore, momentum: f64) {
        for (layer, var) in &self.0 {
            let Some((mean, var)) = g.batch_statistics(*var) else {
                continue;
            };
            for (id, batch) in [(layer.running_mean, mean), (layer.running_var, var)] {
                for (r, b) in store.get_mut(id).data.iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

/// Convolution, group normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: GroupNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        norm_groups: usize,
        group: ParamGroup,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), cin, cout, kernel, stride, group),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout, norm_groups, group),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(g, store, x);
        let y = self.norm.forward(g, store, y);
        g.relu(y)
    }
}

/// Convolution whose kernel is divided by its estimated spectral norm on
/// every forward pass. The left singular vector estimate is persisted as a
/// buffer next to the weight.
#[derive(Debug, Clone)]
pub struct SnConv {
    pub conv: Conv,
    pub u: ParamId,
}

impl SnConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
    ) -> Self {
        let conv = Conv::new(store, rng, name, cin, cout, kernel, stride, ParamGroup::Head);
        let u = unit_vector(rng, cout);
        let u = store.add(format!("{name}.sn_u"), Tensor::from_vec([1, cout, 1, 1], u), ParamGroup::Buffer);
        Self { conv, u }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(self.conv.weight, store.get(self.conv.weight).clone());
        let wn = g.spectral_norm(w, &store.get(self.u).data);
        let b = g.param(self.conv.bias, store.get(self.conv.bias).clone());
        g.conv2d(x, wn, Some(b), self.conv.stride, self.conv.pad)
    }

    /// Advances the power iteration `iterations` times, updating the
    /// stored `u`.
    pub fn power_iterate(&self, store: &mut ParamStore, iterations: usize) {
        let w = store.get(self.conv.weight).clone();
        let u = store.get_mut(self.u);
        let mut state = super::spectral::SpectralState::from_u(u.data.clone());
        let m = super::spectral::MatrixView::of(&w);
        for _ in 0..iterations {
            state.step(&m);
        }
        u.data.copy_from_slice(state.u());
    }
}
