//! Joint objective: focal classification loss, router load balancing and
//! expert disagreement.
//!
//! The disagreement term is *subtracted*: minimizing the total pushes the
//! experts' predictive distributions apart. Its mean is capped so the
//! negative term stays bounded below.

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Graph, Tensor, Var};

pub const PROB_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub xi1: f64,
    pub xi2: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub kl_cap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            xi1: 100.0,
            xi2: 0.05,
            gamma: 2.0,
            alpha: 1.0,
            kl_cap: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub el: f64,
    #[serde(rename = "edr_meanKL")]
    pub edr_mean_kl: f64,
    pub total: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn recombine(cls: f64, el: f64, mean_kl: f64, cfg: &LossConfig) -> f64 {
        cls + cfg.xi1 * el - cfg.xi2 * mean_kl.min(cfg.kl_cap)
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> DiffError {
    DiffError::InvalidArgument { op, msg: msg.into() }
}

/// Mean over the batch of `−α (1 − p_t)^γ log p_t` for `[B, 2]` logits.
pub fn focal_loss(g: &mut Graph, logits: Var, labels: &[usize], gamma: f64, alpha: f64) -> Result<Var, DiffError> {
    let shape = g.shape(logits).to_vec();
    if labels.is_empty() {
        return Err(invalid("focal_loss", "empty batch"));
    }
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(invalid(
            "focal_loss",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    let p = g.softmax(logits, 1)?;
    let p = g.clamp(p, PROB_FLOOR, 1.0);
    let pt = g.gather(p, labels)?;
    let log_pt = g.log(pt);
    let per = if gamma == 0.0 {
        log_pt
    } else {
        let miss = g.scale(pt, -1.0);
        let miss = g.add_scalar(miss, 1.0);
        let w = g.pow(miss, gamma);
        g.mul(w, log_pt)?
    };
    let m = g.mean_all(per);
    Ok(g.scale(m, -alpha))
}

/// Load-balance loss on `[B, E, 2]` router weights: variance of the
/// utilization vector plus its mean squared distance from uniform.
pub fn expert_load_loss(g: &mut Graph, weights: Var) -> Result<Var, DiffError> {
    let shape = g.shape(weights).to_vec();
    let [b, e, 2] = shape[..] else {
        return Err(invalid(
            "expert_load_loss",
            format!("[B, E, 2] weights required, got {shape:?}"),
        ));
    };
    if b == 0 || e == 0 {
        return Err(invalid("expert_load_loss", "empty batch"));
    }
    let per_sample = g.mean(weights, 2)?;
    let u = g.mean(per_sample, 0)?;
    let u = g.reshape(u, vec![1, e])?;
    // Subtracting the mean as a centering matrix keeps the variance term
    // exactly non-negative.
    let mut centering = vec![-1.0 / e as f64; e * e];
    for i in 0..e {
        centering[i * e + i] += 1.0;
    }
    let centering = g.constant(Tensor::new(vec![e, e], centering)?);
    let centered = g.matmul(u, centering)?;
    let sq = g.mul(centered, centered)?;
    let variance = g.mean_all(sq);
    let off = g.add_scalar(u, -1.0 / e as f64);
    let off = g.mul(off, off)?;
    let deviation = g.mean_all(off);
    g.add(variance, deviation)
}

/// Mean pairwise symmetric KL between the experts' class distributions for
/// `[B, E, 2]` logits, averaged over samples and unordered pairs.
///
/// Each pair contributes `½ Σ_c (P_i − P_j)(log P_i − log P_j)`; the
/// differences come from one matmul with a constant `±1` pair matrix, so
/// every term is non-negative and identical experts give exactly zero.
pub fn expert_disagreement(g: &mut Graph, logits: Var) -> Result<Var, DiffError> {
    let shape = g.shape(logits).to_vec();
    let [b, e, 2] = shape[..] else {
        return Err(invalid(
            "expert_disagreement",
            format!("[B, E, 2] logits required, got {shape:?}"),
        ));
    };
    if e < 2 {
        return Err(invalid("expert_disagreement", "at least 2 experts required"));
    }
    if b == 0 {
        return Err(invalid("expert_disagreement", "empty batch"));
    }
    let pairs = e * (e - 1) / 2;
    let mut diff = vec![0.0; 2 * e * 2 * pairs];
    let mut col = 0;
    for i in 0..e {
        for j in i + 1..e {
            for c in 0..2 {
                diff[(2 * i + c) * 2 * pairs + col] = 1.0;
                diff[(2 * j + c) * 2 * pairs + col] = -1.0;
                col += 1;
            }
        }
    }
    let diff = g.constant(Tensor::new(vec![2 * e, 2 * pairs], diff)?);
    let p = g.softmax(logits, 2)?;
    let p = g.clamp(p, PROB_FLOOR, 1.0);
    let p = g.normalize(p, 2)?;
    let lp = g.log(p);
    let p = g.reshape(p, vec![b, 2 * e])?;
    let lp = g.reshape(lp, vec![b, 2 * e])?;
    let dp = g.matmul(p, diff)?;
    let dl = g.matmul(lp, diff)?;
    let prod = g.mul(dp, dl)?;
    let total = g.sum_all(prod);
    Ok(g.scale(total, 0.5 / (b * pairs) as f64))
}

/// Graph handles of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub el: Var,
    pub mean_kl: Var,
    pub total: Var,
}

pub fn joint_loss(
    g: &mut Graph,
    fused: Var,
    expert_logits: Var,
    router_weights: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossVars, DiffError> {
    let cls = focal_loss(g, fused, labels, cfg.gamma, cfg.alpha)?;
    let el = expert_load_loss(g, router_weights)?;
    let mean_kl = expert_disagreement(g, expert_logits)?;
    let capped = g.clamp(mean_kl, f64::NEG_INFINITY, cfg.kl_cap);
    let el_term = g.scale(el, cfg.xi1);
    let kl_term = g.scale(capped, -cfg.xi2);
    let total = g.add(cls, el_term)?;
    let total = g.add(total, kl_term)?;
    Ok(LossVars {
        cls,
        el,
        mean_kl,
        total,
    })
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, cfg: &LossConfig) -> LossBreakdown {
        LossBreakdown {
            cls: g.item(self.cls),
            el: g.item(self.el),
            edr_mean_kl: g.item(self.mean_kl),
            total: g.item(self.total),
            xi1: cfg.xi1,
            xi2: cfg.xi2,
            gamma: cfg.gamma,
            alpha: cfg.alpha,
        }
    }
}
