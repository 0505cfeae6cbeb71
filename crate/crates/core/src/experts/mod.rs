//! Expert encoders: the regional graph/attention/convolution network for EEG
//! regions and the multi-scale large-kernel network for peripheral signals.
//! Both end in a two-logit head.

mod gldnet;
mod layers;
mod mslkc;

pub use gldnet::{normalized_adjacency, GlDnet, GlDnetConfig, RegionBatch};
pub use layers::{update_running_stats, BatchNorm, Linear, Mode, BN_MOMENTUM};
pub use mslkc::{Branch, Mslkc, MslkcConfig};

#[cfg(test)]
mod tests;
