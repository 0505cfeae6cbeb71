//! Raw trials to model-ready windows: EEG band-pass, 2:1 decimation of
//! double-rate groups, baseline skip, 1-second windows, per-window z-score.

use serde::{Deserialize, Serialize};

use crate::dataio::{binarize_labels, Class, DataError, Dataset, Dimension};
use crate::sigproc::{apply_filter, design_bandpass, resample_half, segment_windows, zscore, SignalError};
use crate::topology::Modality;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub band_low: f64,
    pub band_high: f64,
    pub filter_order: usize,
    pub sample_rate: f64,
    pub window_seconds: f64,
    /// Overrides the dataset's baseline length when set.
    pub skip_seconds: Option<f64>,
    pub filter_peripheral: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_low: 4.0,
            band_high: 45.0,
            filter_order: 3,
            sample_rate: 128.0,
            window_seconds: 1.0,
            skip_seconds: None,
            filter_peripheral: false,
        }
    }
}

/// One z-scored `C × T` window with its provenance and raw ratings.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub subject: u32,
    pub trial: u32,
    pub index: usize,
    pub ratings: Vec<f64>,
    pub data: Vec<Vec<f64>>,
}

pub fn preprocess(ds: &Dataset, cfg: &PreprocessConfig) -> Result<Vec<Window>, PipelineError> {
    ds.validate()?;
    let fs = cfg.sample_rate;
    let band = design_bandpass(cfg.filter_order, cfg.band_low, cfg.band_high, fs)?;
    let skip = cfg.skip_seconds.unwrap_or(ds.meta.baseline_seconds);
    let mut out = Vec::new();
    for t in &ds.trials {
        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); ds.meta.channels.len()];
        for (block, group) in t.blocks.iter().zip(&ds.meta.channel_groups) {
            let members = ds.group_channels(&group.name);
            for (r, &ch) in members.iter().enumerate() {
                let mut x: Vec<f64> = block.row(r).iter().map(|&v| f64::from(v)).collect();
                if group.sample_rate == 2.0 * fs {
                    if x.len() % 2 == 1 {
                        x.pop();
                    }
                    x = resample_half(&x, fs)?;
                } else if group.sample_rate != fs {
                    return Err(PipelineError::Invalid(format!(
                        "group `{}` at {} Hz cannot be brought to {fs} Hz",
                        group.name, group.sample_rate
                    )));
                }
                let modality = ds.meta.channels[ch].modality;
                if modality == Modality::Eeg || cfg.filter_peripheral {
                    x = apply_filter(&x, &band);
                }
                rows[ch] = x;
            }
        }
        let len = rows.iter().map(Vec::len).min().unwrap_or(0);
        if rows.iter().any(|r| r.len() != len) {
            return Err(PipelineError::Invalid(format!(
                "trial {}/{}: channel groups cover different durations",
                t.subject, t.trial
            )));
        }
        let windows = segment_windows(&rows, fs, cfg.window_seconds, skip)?;
        for (index, w) in windows.into_iter().enumerate() {
            out.push(Window {
                subject: t.subject,
                trial: t.trial,
                index,
                ratings: t.ratings.clone(),
                data: zscore(&w),
            });
        }
    }
    Ok(out)
}

/// Binary class of every window for one rating dimension.
pub fn window_labels(ds: &Dataset, windows: &[Window], dim: Dimension) -> Result<Vec<Class>, PipelineError> {
    let col = ds
        .meta
        .label_names
        .iter()
        .position(|n| n == dim.name())
        .ok_or_else(|| PipelineError::Invalid(format!("dataset has no `{dim}` ratings")))?;
    windows
        .iter()
        .map(|w| Ok(binarize_labels(w.ratings[col], ds.meta.dataset)?))
        .collect()
}
