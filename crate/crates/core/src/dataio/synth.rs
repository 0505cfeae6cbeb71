//! Seeded class-conditional test data.
//!
//! Every channel carries unit-variance pink noise. In "high" trials the
//! channels of one region additionally carry a shared 10 Hz oscillation,
//! alternating between cosine and sine so neighbouring channels sit 90° apart
//! and show strong phase-lag connectivity. The oscillation amplitude scales
//! with `separability`. Per-subject channel gains and offsets make subjects
//! differ. All random draws happen regardless of class, so separability 0
//! produces identically distributed classes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Block, ChannelInfo, DataError, Dataset, DatasetKind, DatasetMeta, GroupInfo, TrialRecord};
use crate::topology::{
    build_partition, ChannelLayout, Modality, Region, Scheme, DEAP_EEG, DEAP_PPS, DREAMER_EEG, DREAMER_PPS,
};

/// Oscillation amplitude at separability 1, relative to the unit noise std.
pub const SIGNAL_GAIN: f64 = 1.5;
pub const SIGNAL_HZ: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthScheme {
    Deap32,
    Dreamer14,
}

impl std::str::FromStr for SynthScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deap32" => Ok(Self::Deap32),
            "dreamer14" => Ok(Self::Dreamer14),
            _ => Err(format!("unknown scheme `{s}` (expected deap32 or dreamer14)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub subjects: u32,
    pub trials_per_subject: u32,
    pub scheme: SynthScheme,
    pub separability: f64,
    /// Stimulus seconds per trial, after the baseline.
    pub seconds: usize,
    pub baseline_seconds: usize,
    pub region: Region,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            subjects: 4,
            trials_per_subject: 10,
            scheme: SynthScheme::Deap32,
            separability: 0.8,
            seconds: 6,
            baseline_seconds: 1,
            region: Region::Temporal,
        }
    }
}

struct GroupSpec {
    name: &'static str,
    rate: f64,
    modality: Modality,
    channels: Vec<&'static str>,
}

fn groups(scheme: SynthScheme) -> (DatasetKind, Vec<GroupSpec>, Vec<String>) {
    let names = |d: &[&str]| d.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match scheme {
        SynthScheme::Deap32 => (
            DatasetKind::Deap,
            vec![
                GroupSpec {
                    name: "eeg",
                    rate: 128.0,
                    modality: Modality::Eeg,
                    channels: DEAP_EEG.to_vec(),
                },
                GroupSpec {
                    name: "pps",
                    rate: 128.0,
                    modality: Modality::Pps,
                    channels: DEAP_PPS.to_vec(),
                },
            ],
            names(&["valence", "arousal", "dominance", "liking"]),
        ),
        SynthScheme::Dreamer14 => (
            DatasetKind::Dreamer,
            vec![
                GroupSpec {
                    name: "eeg",
                    rate: 128.0,
                    modality: Modality::Eeg,
                    channels: DREAMER_EEG.to_vec(),
                },
                GroupSpec {
                    name: "ecg",
                    rate: 256.0,
                    modality: Modality::Pps,
                    channels: DREAMER_PPS.to_vec(),
                },
            ],
            names(&["valence", "arousal"]),
        ),
    }
}

/// Unit-variance pink noise from white noise through a three-pole
/// approximation of a 1/f filter.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    for v in &mut out {
        *v = (*v - mean) / std;
    }
    out
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    if !(0.0..=1.0).contains(&cfg.separability) {
        return Err(DataError::Invalid(format!(
            "separability {} outside [0, 1]",
            cfg.separability
        )));
    }
    if cfg.subjects == 0 || cfg.trials_per_subject == 0 || cfg.seconds == 0 {
        return Err(DataError::Invalid(
            "subjects, trials and seconds must be positive".into(),
        ));
    }
    let (kind, groups, label_names) = groups(cfg.scheme);
    let channels: Vec<ChannelInfo> = groups
        .iter()
        .flat_map(|g| {
            g.channels.iter().map(|n| ChannelInfo {
                name: n.to_string(),
                modality: g.modality,
                group: g.name.to_string(),
            })
        })
        .collect();
    let layout = ChannelLayout::new(
        channels
            .iter()
            .map(|c| crate::topology::Channel {
                name: c.name.clone(),
                modality: c.modality,
            })
            .collect(),
        128.0,
    )?;
    let scheme = match cfg.scheme {
        SynthScheme::Deap32 => Scheme::Deap32,
        SynthScheme::Dreamer14 => Scheme::Dreamer14,
    };
    let partition = build_partition(&layout, &scheme)?;
    let region = partition
        .get(cfg.region)
        .ok_or_else(|| DataError::Invalid(format!("region `{}` not in the layout", cfg.region)))?
        .to_vec();
    let (lo, hi) = kind.rating_range();
    let mid = match kind {
        DatasetKind::Deap => 5.0,
        DatasetKind::Dreamer => 3.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_seconds = (cfg.baseline_seconds + cfg.seconds) as f64;
    let mut trials = Vec::new();
    for subject in 1..=cfg.subjects {
        let gains: Vec<f64> = (0..channels.len()).map(|_| rng.random_range(0.6..1.4)).collect();
        let offsets: Vec<f64> = (0..channels.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        for trial in 1..=cfg.trials_per_subject {
            let high = trial % 2 == 1;
            let phase = rng.random_range(0.0..2.0 * PI);
            let ratings: Vec<f64> = label_names
                .iter()
                .map(|_| {
                    let u: f64 = rng.random_range(0.05..0.95);
                    if high {
                        mid + 0.5 + u * (hi - mid - 0.5)
                    } else {
                        lo + u * (mid - 0.5 - lo)
                    }
                })
                .collect();
            let amplitude = if high { cfg.separability * SIGNAL_GAIN } else { 0.0 };
            let mut blocks = Vec::with_capacity(groups.len());
            let mut ch = 0;
            for g in &groups {
                let n = (total_seconds * g.rate).round() as usize;
                let mut data = Vec::with_capacity(g.channels.len() * n);
                for _ in &g.channels {
                    let noise = pink_noise(&mut rng, n);
                    let pos = region.iter().position(|&i| i == ch);
                    for (s, v) in noise.iter().enumerate() {
                        let mut x = *v;
                        if let Some(k) = pos {
                            let arg = 2.0 * PI * SIGNAL_HZ * s as f64 / g.rate + phase;
                            x += amplitude * if k % 2 == 0 { arg.cos() } else { arg.sin() };
                        }
                        data.push((gains[ch] * x + offsets[ch]) as f32);
                    }
                    ch += 1;
                }
                blocks.push(Block {
                    group: g.name.to_string(),
                    rows: g.channels.len(),
                    cols: n,
                    data,
                });
            }
            trials.push(TrialRecord {
                subject,
                trial,
                ratings,
                blocks,
            });
        }
    }
    Ok(Dataset {
        meta: DatasetMeta {
            dataset: kind,
            source: "synthetic".into(),
            channels,
            channel_groups: groups
                .iter()
                .map(|g| GroupInfo {
                    name: g.name.to_string(),
                    sample_rate: g.rate,
                })
                .collect(),
            label_names,
            baseline_seconds: cfg.baseline_seconds as f64,
        },
        trials,
    })
}
