//! Brain-region mixture of experts for EEG and peripheral-signal affect
//! classification.

pub mod config;
pub mod connectivity;
pub mod dataio;
pub mod diff;
pub mod experts;
pub mod explain;
pub mod losses;
pub mod moe;
pub mod pipeline;
pub mod sigproc;
pub mod topology;
pub mod train;
