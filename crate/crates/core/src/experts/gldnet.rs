use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Linear, Mode};
use crate::connectivity::WpliAdjacency;
use crate::diff::{matmul_raw, DiffError, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlDnetConfig {
    pub gcn_out_dim: usize,
    pub gcn_layers: usize,
    pub residual_hidden: usize,
    pub residual_mlp_dim: usize,
    pub attention_heads: usize,
    pub local_conv_channels: usize,
    pub local_conv_kernel: usize,
}

impl Default for GlDnetConfig {
    fn default() -> Self {
        Self {
            gcn_out_dim: 32,
            gcn_layers: 1,
            residual_hidden: 64,
            residual_mlp_dim: 32,
            attention_heads: 4,
            local_conv_channels: 16,
            local_conv_kernel: 7,
        }
    }
}

impl GlDnetConfig {
    pub fn attention_model_dim(&self) -> usize {
        self.gcn_out_dim + self.residual_mlp_dim
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            self.gcn_out_dim,
            self.gcn_layers,
            self.residual_hidden,
            self.residual_mlp_dim,
            self.attention_heads,
            self.local_conv_channels,
            self.local_conv_kernel,
        ];
        if dims.contains(&0) {
            return Err("all dimensions must be positive".into());
        }
        if !self.attention_model_dim().is_multiple_of(self.attention_heads) {
            return Err(format!(
                "attention dim {} not divisible by {} heads",
                self.attention_model_dim(),
                self.attention_heads
            ));
        }
        if self.local_conv_kernel.is_multiple_of(2) {
            return Err("local conv kernel must be odd".into());
        }
        Ok(())
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalized_adjacency(a: &WpliAdjacency) -> Vec<f64> {
    let c = a.channels;
    let mut m = a.values.clone();
    for i in 0..c {
        m[i * c + i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = m.chunks(c).map(|r| 1.0 / r.iter().sum::<f64>().sqrt()).collect();
    for i in 0..c {
        for j in 0..c {
            m[i * c + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    m
}

/// One region's batch: `x` is `[B, C_e, T]`, `adjacency` holds B normalized
/// `C_e × C_e` matrices back to back.
#[derive(Clone, Debug)]
pub struct RegionBatch {
    pub x: Tensor,
    pub adjacency: Vec<f64>,
}

impl RegionBatch {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.x.shape();
        (s[0], s[1], s[2])
    }

    fn check(&self) -> Result<(), DiffError> {
        let s = self.x.shape();
        if s.len() != 3 || self.adjacency.len() != s[0] * s[1] * s[1] {
            return Err(DiffError::InvalidArgument {
                op: "gldnet",
                msg: format!(
                    "expected x [B, C, T] with B·C² adjacency entries, got {:?} and {}",
                    s,
                    self.adjacency.len()
                ),
            });
        }
        Ok(())
    }
}

/// Global–local dual-stream encoder for one EEG region.
#[derive(Clone, Debug)]
pub struct GlDnet {
    pub channels: usize,
    pub time: usize,
    pub cfg: GlDnetConfig,
    gcn: Vec<(ParamId, BatchNorm)>,
    mlp_hidden: Linear,
    mlp_out: Linear,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    conv_k: ParamId,
    conv_b: ParamId,
    conv_bn: BatchNorm,
    ffn: Linear,
    head: Linear,
}

impl GlDnet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        time: usize,
        cfg: &GlDnetConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.attention_model_dim();
        let mut gcn = Vec::with_capacity(cfg.gcn_layers);
        for l in 0..cfg.gcn_layers {
            let fan_in = if l == 0 { time } else { cfg.gcn_out_dim };
            let w = store.add_uniform(format!("{name}.gcn{l}.weight"), &[fan_in, cfg.gcn_out_dim], fan_in, rng);
            let bn = BatchNorm::new(store, &format!("{name}.gcn{l}.bn"), cfg.gcn_out_dim);
            gcn.push((w, bn));
        }
        let mlp_hidden = Linear::new(store, &format!("{name}.mlp.0"), time, cfg.residual_hidden, rng);
        let mlp_out = Linear::new(
            store,
            &format!("{name}.mlp.1"),
            cfg.residual_hidden,
            cfg.residual_mlp_dim,
            rng,
        );
        let mut proj = |p: &str| store.add_uniform(format!("{name}.attn.{p}"), &[d, d], d, rng);
        let (wq, wk, wv, wo) = (proj("wq"), proj("wk"), proj("wv"), proj("wo"));
        let (lc, lk) = (cfg.local_conv_channels, cfg.local_conv_kernel);
        let conv_k = store.add_uniform(format!("{name}.local.conv.weight"), &[lc, 1, lk], lk, rng);
        let conv_b = store.add_uniform(format!("{name}.local.conv.bias"), &[lc], lk, rng);
        let conv_bn = BatchNorm::new(store, &format!("{name}.local.bn"), lc);
        let ffn = Linear::new(store, &format!("{name}.local.ffn"), lc, lc, rng);
        let head = Linear::new(store, &format!("{name}.head"), d + lc, 2, rng);
        Self {
            channels,
            time,
            cfg: cfg.clone(),
            gcn,
            mlp_hidden,
            mlp_out,
            wq,
            wk,
            wv,
            wo,
            conv_k,
            conv_b,
            conv_bn,
            ffn,
            head,
        }
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn attention_params(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }

    pub fn residual_mlp_params(&self) -> (&Linear, &Linear) {
        (&self.mlp_hidden, &self.mlp_out)
    }

    pub fn gcn_params(&self) -> &[(ParamId, BatchNorm)] {
        &self.gcn
    }

    pub fn local_params(&self) -> (ParamId, ParamId, &BatchNorm, &Linear) {
        (self.conv_k, self.conv_b, &self.conv_bn, &self.ffn)
    }

    /// `[B, 2]` logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &RegionBatch,
        mode: Mode,
    ) -> Result<Var, DiffError> {
        let (b, c, _) = batch.dims();
        let h1 = self.gcn_layer(g, store, batch, mode)?;
        let h2 = self.residual_concat(g, store, batch, h1)?;
        let hg = self.attention(g, store, h2, b)?;
        let global = g.group_mean_rows(hg, c)?;
        let local = self.local_branch(g, store, batch, mode)?;
        let rep = g.concat(&[global, local], 1)?;
        self.head.apply(g, store, rep)
    }

    /// `ReLU(BN(Â X W))` over all `B·C_e` node rows, repeated for every
    /// configured layer.
    pub fn gcn_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &RegionBatch,
        mode: Mode,
    ) -> Result<Var, DiffError> {
        batch.check()?;
        let (b, c, t) = batch.dims();
        let mut ax = vec![0.0; b * c * t];
        for s in 0..b {
            let a = &batch.adjacency[s * c * c..(s + 1) * c * c];
            let x = &batch.x.data()[s * c * t..(s + 1) * c * t];
            ax[s * c * t..(s + 1) * c * t].copy_from_slice(&matmul_raw(a, x, c, c, t));
        }
        let mut h = g.constant(Tensor::new(vec![b * c, t], ax)?);
        for (l, (w, bn)) in self.gcn.iter().enumerate() {
            if l > 0 {
                let mut parts = Vec::with_capacity(b);
                for s in 0..b {
                    let a = Tensor::new(vec![c, c], batch.adjacency[s * c * c..(s + 1) * c * c].to_vec())?;
                    let a = g.constant(a);
                    let rows = g.slice(h, s * c, c, 0, self.cfg.gcn_out_dim)?;
                    parts.push(g.matmul(a, rows)?);
                }
                h = g.concat(&parts, 0)?;
            }
            let w = g.param(store, *w);
            let hw = g.matmul(h, w)?;
            let hn = bn.apply(g, store, hw, mode)?;
            h = g.relu(hn);
        }
        Ok(h)
    }

    /// Concatenates `h1` with the per-node perceptron `T → hidden → out`.
    pub fn residual_concat(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &RegionBatch,
        h1: Var,
    ) -> Result<Var, DiffError> {
        let (b, c, t) = batch.dims();
        let x = g.constant(batch.x.clone().reshaped(vec![b * c, t])?);
        let hidden = self.mlp_hidden.apply(g, store, x)?;
        let hidden = g.relu(hidden);
        let m = self.mlp_out.apply(g, store, hidden)?;
        g.concat(&[h1, m], 1)
    }

    /// Multi-head self-attention over the channel tokens of each sample, with
    /// residual: `Hg = MHA(H2) + H2`. `h2` is `[B·C_e, d]`.
    pub fn attention(&self, g: &mut Graph, store: &ParamStore, h2: Var, batch: usize) -> Result<Var, DiffError> {
        let [wq, wk, wv, wo] = self.attention_params().map(|id| g.param(store, id));
        let q = g.matmul(h2, wq)?;
        let k = g.matmul(h2, wk)?;
        let v = g.matmul(h2, wv)?;
        let heads_out = g.block_attention(q, k, v, batch, self.cfg.attention_heads)?;
        let projected = g.matmul(heads_out, wo)?;
        g.add(projected, h2)
    }

    /// Shared-kernel temporal convolution applied to every channel, then BN,
    /// ReLU, mean over time and channels, and a ReLU feed-forward layer.
    /// Returns `[B, local_conv_channels]`.
    pub fn local_branch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &RegionBatch,
        mode: Mode,
    ) -> Result<Var, DiffError> {
        let (b, c, t) = batch.dims();
        let x = g.constant(batch.x.clone().reshaped(vec![b * c, 1, t])?);
        let k = g.param(store, self.conv_k);
        let bias = g.param(store, self.conv_b);
        let pooled = self.conv_bn.conv_relu_mean(g, store, x, k, bias, mode)?;
        let pooled = g.group_mean_rows(pooled, c)?;
        let out = self.ffn.apply(g, store, pooled)?;
        Ok(g.relu(out))
    }
}
