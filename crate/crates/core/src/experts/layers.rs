use rand::Rng;

use crate::diff::{DiffError, Graph, NormStats, ObservedStats, ParamId, ParamStore, Tensor, Var};

/// Whether batch norm uses batch statistics or the tracked running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Momentum for the exponential running-statistic update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &[fan_in, out], fan_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[out], fan_in, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

/// Batch norm with affine parameters and running statistics kept as
/// non-trainable store entries named `{key}.running_mean` / `.running_var`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub key: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, key: &str, channels: usize) -> Self {
        Self {
            key: key.to_string(),
            gamma: store.add(format!("{key}.gamma"), Tensor::filled(&[channels], 1.0), true),
            beta: store.add(format!("{key}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{key}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{key}.running_var"), Tensor::filled(&[channels], 1.0), false),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var, DiffError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(x, gamma, beta, self.stats(store, mode), &self.key)
    }

    /// `conv1d → BN → ReLU → mean over time` through the fused graph op.
    pub fn conv_relu_mean(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        k: Var,
        b: Var,
        mode: Mode,
    ) -> Result<Var, DiffError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.conv_bn_relu_mean(x, k, b, gamma, beta, self.stats(store, mode), &self.key)
    }

    fn stats<'a>(&self, store: &'a ParamStore, mode: Mode) -> NormStats<'a> {
        match mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Running {
                mean: store.get(self.running_mean).value.data(),
                var: store.get(self.running_var).value.data(),
            },
        }
    }
}

/// Folds the batch statistics recorded on a training graph into the running
/// buffers: `running = (1 − m)·running + m·batch`.
pub fn update_running_stats(store: &mut ParamStore, observed: &[(String, ObservedStats)], momentum: f64) {
    for (key, stats) in observed {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            if let Some(id) = store.find(&format!("{key}.{suffix}")) {
                for (r, b) in store.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
}
