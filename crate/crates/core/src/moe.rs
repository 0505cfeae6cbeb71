//! Expert assembly, routing and fusion.
//!
//! Experts run in the fixed [`Region`] order. Their logits are concatenated,
//! fed to a two-layer router whose `E × 2` output is softmax-normalized over
//! the expert axis (one mixture per class), and the fused logit of each
//! class is the router-weighted sum of that class's expert logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{wpli_adjacency_lenient, ConnectivityError, WpliAdjacency};
use crate::diff::{softmax_raw, DiffError, Graph, ParamStore, Tensor, Var};
use crate::experts::{normalized_adjacency, GlDnet, GlDnetConfig, Linear, Mode, Mslkc, MslkcConfig, RegionBatch};
use crate::topology::{Region, RegionPartition};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Connectivity(#[from] ConnectivityError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input does not fit the model: {0}")]
    Input(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    EegOnly,
    Multimodal,
}

impl std::str::FromStr for ModalityMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eeg_only" => Ok(Self::EegOnly),
            "multimodal" => Ok(Self::Multimodal),
            _ => Err(format!("unknown mode `{s}` (expected eeg_only or multimodal)")),
        }
    }
}

/// Whether each sample uses its own connectivity graph or the batch mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyScope {
    Sample,
    BatchMean,
}

impl std::str::FromStr for AdjacencyScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sample" => Ok(Self::Sample),
            "batch_mean" => Ok(Self::BatchMean),
            _ => Err(format!("unknown adjacency scope `{s}` (expected sample or batch_mean)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ModalityMode,
    pub gldnet: GlDnetConfig,
    pub mslkc: MslkcConfig,
    pub router_hidden: usize,
    pub detach_router_input: bool,
    pub adjacency_scope: AdjacencyScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ModalityMode::Multimodal,
            gldnet: GlDnetConfig::default(),
            mslkc: MslkcConfig::default(),
            router_hidden: 32,
            detach_router_input: false,
            adjacency_scope: AdjacencyScope::Sample,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.gldnet.validate().map_err(ModelError::Config)?;
        self.mslkc.validate().map_err(ModelError::Config)?;
        if self.router_hidden == 0 {
            return Err(ModelError::Config("router hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Router mixture weights `W_o`, `E × 2` row-major; every class column is a
/// probability vector over experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterWeights {
    pub experts: usize,
    pub values: Vec<f64>,
}

impl RouterWeights {
    pub fn get(&self, expert: usize, class: usize) -> f64 {
        self.values[expert * 2 + class]
    }

    pub fn column_sum(&self, class: usize) -> f64 {
        (0..self.experts).map(|i| self.get(i, class)).sum()
    }

    /// Mean over both classes, per expert.
    pub fn utilization(&self) -> Vec<f64> {
        (0..self.experts)
            .map(|i| 0.5 * (self.get(i, 0) + self.get(i, 1)))
            .collect()
    }
}

/// Everything the model produces for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertBundle {
    pub expert_logits: Vec<[f64; 2]>,
    pub router_weights: RouterWeights,
    pub fused: [f64; 2],
    pub contributions: Vec<[f64; 2]>,
}

impl ExpertBundle {
    pub fn predicted_class(&self) -> usize {
        usize::from(self.fused[1] > self.fused[0])
    }

    /// High-minus-low fused margin.
    pub fn margin(&self) -> f64 {
        self.fused[1] - self.fused[0]
    }
}

pub fn concat_expert_logits(logits: &[[f64; 2]]) -> Result<Vec<f64>, ModelError> {
    if logits.len() < 2 {
        return Err(ModelError::Input(format!(
            "at least 2 experts required, got {}",
            logits.len()
        )));
    }
    Ok(logits.iter().flatten().copied().collect())
}

/// Plain evaluation of the router MLP: `W2·ReLU(W1·O_f + b1) + b2`, softmax
/// over experts per class. Weights are stored input-major (`in × out`).
pub fn route(o_f: &[f64], w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> RouterWeights {
    let (n_in, hidden) = (o_f.len(), b1.len());
    let h: Vec<f64> = (0..hidden)
        .map(|j| {
            let z = b1[j] + (0..n_in).map(|i| o_f[i] * w1[i * hidden + j]).sum::<f64>();
            z.max(0.0)
        })
        .collect();
    let raw: Vec<f64> = (0..n_in)
        .map(|k| b2[k] + (0..hidden).map(|j| h[j] * w2[j * n_in + k]).sum::<f64>())
        .collect();
    RouterWeights {
        experts: n_in / 2,
        values: softmax_raw(&raw, &[n_in / 2, 2], 0),
    }
}

pub fn fuse(weights: &RouterWeights, logits: &[[f64; 2]]) -> [f64; 2] {
    let mut y = [0.0; 2];
    for (i, l) in logits.iter().enumerate() {
        for c in 0..2 {
            y[c] += weights.get(i, c) * l[c];
        }
    }
    y
}

#[derive(Clone, Debug)]
pub enum ExpertNet {
    Regional(GlDnet),
    Peripheral(Mslkc),
}

#[derive(Clone, Debug)]
pub struct ExpertSlot {
    pub region: Region,
    pub channels: Vec<usize>,
    pub net: ExpertNet,
}

/// One region of a preprocessed window: `C_e × T` row-major samples plus
/// the wPLI graph for EEG regions.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionInput {
    pub data: Vec<f64>,
    pub channels: usize,
    pub wpli: Option<WpliAdjacency>,
}

/// A window split into expert inputs, in expert order.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub regions: Vec<RegionInput>,
    pub time: usize,
}

#[derive(Clone, Debug)]
pub enum ExpertInput {
    Region(RegionBatch),
    Peripheral(Tensor),
}

#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub experts: Vec<ExpertInput>,
    pub batch: usize,
}

/// Graph handles of one forward pass; expert axis is 1 in the rank-3 ones.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub expert_logits: Var,
    pub router_weights: Var,
    pub fused: Var,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct BiMoe {
    pub config: ModelConfig,
    pub time: usize,
    pub experts: Vec<ExpertSlot>,
    pub router_in: Linear,
    pub router_out: Linear,
}

impl BiMoe {
    /// Builds the architecture and registers its parameters in `store`,
    /// initialized from `seed`.
    pub fn new(
        partition: &RegionPartition,
        time: usize,
        config: &ModelConfig,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let multimodal = config.mode == ModalityMode::Multimodal;
        if multimodal && !partition.contains(Region::Peripheral) {
            return Err(ModelError::Config(
                "multimodal mode needs peripheral channels in the layout".into(),
            ));
        }
        let regions = partition.expert_regions(multimodal);
        if regions.len() < 2 {
            return Err(ModelError::Config(format!(
                "at least 2 experts required, partition yields {}",
                regions.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut experts = Vec::with_capacity(regions.len());
        for region in regions {
            let channels = partition.get(region).expect("listed region").to_vec();
            let net = match region {
                Region::Peripheral => ExpertNet::Peripheral(Mslkc::new(
                    store,
                    region.name(),
                    channels.len(),
                    &config.mslkc,
                    &mut rng,
                )),
                _ => ExpertNet::Regional(GlDnet::new(
                    store,
                    region.name(),
                    channels.len(),
                    time,
                    &config.gldnet,
                    &mut rng,
                )),
            };
            experts.push(ExpertSlot { region, channels, net });
        }
        let width = 2 * experts.len();
        let router_in = Linear::new(store, "router.0", width, config.router_hidden, &mut rng);
        let router_out = Linear::new(store, "router.1", config.router_hidden, width, &mut rng);
        Ok(Self {
            config: config.clone(),
            time,
            experts,
            router_in,
            router_out,
        })
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn expert_names(&self) -> Vec<&'static str> {
        self.experts.iter().map(|e| e.region.name()).collect()
    }

    /// Slices a preprocessed `C × T` window into expert inputs and computes
    /// each EEG region's wPLI graph.
    pub fn prepare(&self, window: &[Vec<f64>]) -> Result<PreparedSample, ModelError> {
        let t = window.first().map_or(0, Vec::len);
        if t != self.time {
            return Err(ModelError::Input(format!(
                "window length {t}, model expects {}",
                self.time
            )));
        }
        let mut regions = Vec::with_capacity(self.experts.len());
        for slot in &self.experts {
            let mut rows = Vec::with_capacity(slot.channels.len());
            for &i in &slot.channels {
                let row = window.get(i).ok_or_else(|| {
                    ModelError::Input(format!("channel {i} missing from a {}-row window", window.len()))
                })?;
                if row.len() != t {
                    return Err(ModelError::Input("ragged window".into()));
                }
                rows.push(row.clone());
            }
            let wpli = match slot.net {
                ExpertNet::Regional(_) => Some(wpli_adjacency_lenient(&rows)?),
                ExpertNet::Peripheral(_) => None,
            };
            regions.push(RegionInput {
                data: rows.concat(),
                channels: rows.len(),
                wpli,
            });
        }
        Ok(PreparedSample { regions, time: t })
    }

    pub fn assemble(&self, samples: &[&PreparedSample]) -> Result<BatchInputs, ModelError> {
        let b = samples.len();
        if b == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        let t = self.time;
        let mut experts = Vec::with_capacity(self.experts.len());
        for (e, slot) in self.experts.iter().enumerate() {
            let c = slot.channels.len();
            let mut x = Vec::with_capacity(b * c * t);
            for s in samples {
                let r = s.regions.get(e).filter(|r| r.channels == c && r.data.len() == c * t);
                let r =
                    r.ok_or_else(|| ModelError::Input(format!("sample does not match expert `{}`", slot.region)))?;
                x.extend_from_slice(&r.data);
            }
            let x = Tensor::new(vec![b, c, t], x)?;
            experts.push(match slot.net {
                ExpertNet::Peripheral(_) => ExpertInput::Peripheral(x),
                ExpertNet::Regional(_) => {
                    let graphs: Vec<&WpliAdjacency> = samples
                        .iter()
                        .map(|s| {
                            s.regions[e]
                                .wpli
                                .as_ref()
                                .ok_or_else(|| ModelError::Input("missing wPLI graph".into()))
                        })
                        .collect::<Result<_, _>>()?;
                    let adjacency = match self.config.adjacency_scope {
                        AdjacencyScope::Sample => graphs.iter().flat_map(|a| normalized_adjacency(a)).collect(),
                        AdjacencyScope::BatchMean => {
                            let mut mean = WpliAdjacency::zeros(c);
                            for a in &graphs {
                                for (m, v) in mean.values.iter_mut().zip(&a.values) {
                                    *m += v / b as f64;
                                }
                            }
                            normalized_adjacency(&mean).repeat(b)
                        }
                    };
                    ExpertInput::Region(RegionBatch { x, adjacency })
                }
            });
        }
        Ok(BatchInputs { experts, batch: b })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &BatchInputs,
        mode: Mode,
    ) -> Result<ForwardOutput, ModelError> {
        if inputs.experts.len() != self.experts.len() {
            return Err(ModelError::Input("expert input count mismatch".into()));
        }
        let b = inputs.batch;
        let e = self.experts.len();
        let mut logits = Vec::with_capacity(e);
        for (slot, input) in self.experts.iter().zip(&inputs.experts) {
            logits.push(match (&slot.net, input) {
                (ExpertNet::Regional(net), ExpertInput::Region(batch)) => net.forward(g, store, batch, mode)?,
                (ExpertNet::Peripheral(net), ExpertInput::Peripheral(x)) => net.forward(g, store, x, mode)?,
                _ => return Err(ModelError::Input(format!("wrong input kind for `{}`", slot.region))),
            });
        }
        let o_f = g.concat(&logits, 1)?;
        let router_in = if self.config.detach_router_input {
            g.detach(o_f)
        } else {
            o_f
        };
        let h = self.router_in.apply(g, store, router_in)?;
        let h = g.relu(h);
        let raw = self.router_out.apply(g, store, h)?;
        let raw = g.reshape(raw, vec![b, e, 2])?;
        let weights = g.softmax(raw, 1)?;
        let stacked = g.reshape(o_f, vec![b, e, 2])?;
        let weighted = g.mul(weights, stacked)?;
        let fused = g.sum(weighted, 1)?;
        Ok(ForwardOutput {
            expert_logits: stacked,
            router_weights: weights,
            fused,
            batch: b,
        })
    }

    /// Reads per-sample bundles out of a finished forward pass.
    pub fn bundles(&self, g: &Graph, out: &ForwardOutput) -> Vec<ExpertBundle> {
        let e = self.experts.len();
        let logits = g.value(out.expert_logits).data();
        let weights = g.value(out.router_weights).data();
        let fused = g.value(out.fused).data();
        (0..out.batch)
            .map(|s| {
                let base = s * e * 2;
                let expert_logits: Vec<[f64; 2]> = (0..e)
                    .map(|i| [logits[base + 2 * i], logits[base + 2 * i + 1]])
                    .collect();
                let router_weights = RouterWeights {
                    experts: e,
                    values: weights[base..base + 2 * e].to_vec(),
                };
                let contributions = expert_logits
                    .iter()
                    .enumerate()
                    .map(|(i, l)| [router_weights.get(i, 0) * l[0], router_weights.get(i, 1) * l[1]])
                    .collect();
                ExpertBundle {
                    expert_logits,
                    router_weights,
                    fused: [fused[2 * s], fused[2 * s + 1]],
                    contributions,
                }
            })
            .collect()
    }

    /// Evaluation-mode inference in fixed-size chunks. Results do not depend
    /// on the chunk size because batch norm uses running statistics.
    pub fn infer<S: std::borrow::Borrow<PreparedSample>>(
        &self,
        store: &ParamStore,
        samples: &[S],
    ) -> Result<Vec<ExpertBundle>, ModelError> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let refs: Vec<&PreparedSample> = chunk.iter().map(|s| s.borrow()).collect();
            let inputs = self.assemble(&refs)?;
            let mut g = Graph::new();
            let fwd = self.forward(&mut g, store, &inputs, Mode::Eval)?;
            out.extend(self.bundles(&g, &fwd));
        }
        Ok(out)
    }

    /// Router weights for given expert logits, evaluated without a graph.
    pub fn route_logits(&self, store: &ParamStore, logits: &[[f64; 2]]) -> Result<RouterWeights, ModelError> {
        let o_f = concat_expert_logits(logits)?;
        if o_f.len() != 2 * self.experts.len() {
            return Err(ModelError::Input("logit count does not match expert count".into()));
        }
        let v = |id| store.get(id).value.data();
        Ok(route(
            &o_f,
            v(self.router_in.weight),
            v(self.router_in.bias),
            v(self.router_out.weight),
            v(self.router_out.bias),
        ))
    }

    /// Fused output as a function of the expert logits alone.
    pub fn fusion_head(&self, store: &ParamStore, logits: &[[f64; 2]]) -> Result<[f64; 2], ModelError> {
        Ok(fuse(&self.route_logits(store, logits)?, logits))
    }
}
