use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Linear, Mode};
use crate::diff::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MslkcConfig {
    pub branch_kernels: Vec<usize>,
    pub branch_channels: usize,
    pub mlp_out_dim: usize,
}

impl Default for MslkcConfig {
    fn default() -> Self {
        Self {
            branch_kernels: vec![15, 11],
            branch_channels: 16,
            mlp_out_dim: 32,
        }
    }
}

impl MslkcConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.branch_kernels.is_empty() || self.branch_channels == 0 || self.mlp_out_dim == 0 {
            return Err("peripheral encoder needs at least one branch and positive widths".into());
        }
        if let Some(k) = self.branch_kernels.iter().find(|k| *k % 2 == 0) {
            return Err(format!("branch kernel {k} must be odd"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub bn: BatchNorm,
}

/// Parallel large-kernel convolution branches over all peripheral channels,
/// each followed by BN, ReLU and temporal mean pooling, then an MLP head.
#[derive(Clone, Debug)]
pub struct Mslkc {
    pub channels: usize,
    pub branches: Vec<Branch>,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
}

impl Mslkc {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, cfg: &MslkcConfig, rng: &mut R) -> Self {
        let width = cfg.branch_channels;
        let branches = cfg
            .branch_kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let fan_in = channels * k;
                Branch {
                    kernel: store.add_uniform(format!("{name}.branch{i}.weight"), &[width, channels, k], fan_in, rng),
                    bias: store.add_uniform(format!("{name}.branch{i}.bias"), &[width], fan_in, rng),
                    bn: BatchNorm::new(store, &format!("{name}.branch{i}.bn"), width),
                }
            })
            .collect::<Vec<_>>();
        let concat = width * branches.len();
        let mlp_hidden = Linear::new(store, &format!("{name}.mlp.0"), concat, cfg.mlp_out_dim, rng);
        let mlp_out = Linear::new(store, &format!("{name}.mlp.1"), cfg.mlp_out_dim, 2, rng);
        Self {
            channels,
            branches,
            mlp_hidden,
            mlp_out,
        }
    }

    /// `x` is `[B, C_p, T]`; returns `[B, 2]` logits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Var, DiffError> {
        let x = g.constant(x.clone());
        let mut pooled = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let k = g.param(store, br.kernel);
            let b = g.param(store, br.bias);
            pooled.push(br.bn.conv_relu_mean(g, store, x, k, b, mode)?);
        }
        let feat = g.concat(&pooled, 1)?;
        let h = self.mlp_hidden.apply(g, store, feat)?;
        let h = g.relu(h);
        self.mlp_out.apply(g, store, h)
    }
}
