//! Channel layouts and the brain-region expert partition.
//!
//! Built-in schemes follow a 10–20 prefix heuristic: `Fp*/AF*/F*` are
//! prefrontal, `FC*/C*` central, `CP*/P*` parietal, `PO*/O*` occipital, and
//! the temporal region takes `T7/T8` with their lateral neighbours, which it
//! shares with the adjacent regions.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TopologyError {
    #[error("unknown electrode `{0}`")]
    UnknownElectrode(String),
    #[error("region `{0}` has no channels")]
    EmptyRegion(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("region `{0}` is not in the partition")]
    MissingRegion(String),
    #[error("EEG channel `{0}` is not assigned to any region")]
    Uncovered(String),
    #[error("channel `{0}` is not an EEG channel")]
    NotEeg(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("partition file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("channel index {index} outside a {rows}-row sample")]
    IndexOutOfRange { index: usize, rows: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Pps,
}

/// Expert regions in their fixed order. This order indexes router columns,
/// checkpoint names and attribution features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Prefrontal,
    Central,
    Parietal,
    Occipital,
    Temporal,
    Eeg,
    Peripheral,
}

impl Region {
    pub const ALL: [Region; 7] = [
        Region::Prefrontal,
        Region::Central,
        Region::Parietal,
        Region::Occipital,
        Region::Temporal,
        Region::Eeg,
        Region::Peripheral,
    ];

    pub const CORTICAL: [Region; 5] = [
        Region::Prefrontal,
        Region::Central,
        Region::Parietal,
        Region::Occipital,
        Region::Temporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Prefrontal => "prefrontal",
            Region::Central => "central",
            Region::Parietal => "parietal",
            Region::Occipital => "occipital",
            Region::Temporal => "temporal",
            Region::Eeg => "eeg",
            Region::Peripheral => "peripheral",
        }
    }

    pub fn is_cortical(self) -> bool {
        !matches!(self, Region::Eeg | Region::Peripheral)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Region::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| TopologyError::UnknownRegion(s.trim().to_string()))
    }
}

pub const DEAP_EEG: [&str; 32] = [
    "Fp1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7", "CP5", "CP1", "P3", "P7", "PO3", "O1", "Oz", "Pz", "Fp2",
    "AF4", "Fz", "F4", "F8", "FC6", "FC2", "Cz", "C4", "T8", "CP6", "CP2", "P4", "P8", "PO4", "O2",
];
pub const DEAP_PPS: [&str; 8] = ["hEOG", "vEOG", "zEMG", "tEMG", "GSR", "Resp", "Plet", "Temp"];
pub const DREAMER_EEG: [&str; 14] = [
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8", "AF4",
];
pub const DREAMER_PPS: [&str; 2] = ["ECG1", "ECG2"];

const DEAP_REGIONS: [(Region, &[&str]); 5] = [
    (
        Region::Prefrontal,
        &["Fp1", "AF3", "F3", "F7", "Fz", "Fp2", "AF4", "F4", "F8"],
    ),
    (
        Region::Central,
        &["FC5", "FC1", "C3", "Cz", "C4", "FC2", "FC6", "CP1", "CP2"],
    ),
    (
        Region::Parietal,
        &["CP5", "CP1", "CP2", "CP6", "P3", "Pz", "P4", "P7", "P8"],
    ),
    (Region::Occipital, &["PO3", "O1", "Oz", "O2", "PO4"]),
    (Region::Temporal, &["FC5", "T7", "CP5", "P7", "FC6", "T8", "CP6", "P8"]),
];

const DREAMER_REGIONS: [(Region, &[&str]); 5] = [
    (Region::Prefrontal, &["AF3", "F7", "F3", "F4", "F8", "AF4"]),
    (Region::Central, &["FC5", "FC6"]),
    (Region::Parietal, &["P7", "P8"]),
    (Region::Occipital, &["O1", "O2"]),
    (Region::Temporal, &["T7", "T8", "FC5", "FC6", "P7", "P8"]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub modality: Modality,
}

/// Ordered channel labels; PPS channels follow all EEG channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub channels: Vec<Channel>,
    pub sample_rate: f64,
}

impl ChannelLayout {
    pub fn new(channels: Vec<Channel>, sample_rate: f64) -> Result<Self, TopologyError> {
        let layout = Self { channels, sample_rate };
        layout.validate()?;
        Ok(layout)
    }

    fn from_names(eeg: &[&str], pps: &[&str], sample_rate: f64) -> Self {
        let mk = |n: &&str, m| Channel {
            name: n.to_string(),
            modality: m,
        };
        let channels = eeg
            .iter()
            .map(|n| mk(n, Modality::Eeg))
            .chain(pps.iter().map(|n| mk(n, Modality::Pps)))
            .collect();
        Self { channels, sample_rate }
    }

    /// 32 EEG + 8 peripheral channels at 128 Hz.
    pub fn deap32() -> Self {
        Self::from_names(&DEAP_EEG, &DEAP_PPS, 128.0)
    }

    /// 14 EEG + 2 ECG channels at 128 Hz (ECG after 2:1 decimation).
    pub fn dreamer14() -> Self {
        Self::from_names(&DREAMER_EEG, &DREAMER_PPS, 128.0)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let mut seen = BTreeSet::new();
        for c in &self.channels {
            if !seen.insert(c.name.as_str()) {
                return Err(TopologyError::InvalidLayout(format!("duplicate channel `{}`", c.name)));
            }
        }
        if self.eeg_count() == 0 {
            return Err(TopologyError::InvalidLayout("no EEG channels".into()));
        }
        if self.channels[..self.eeg_count()]
            .iter()
            .any(|c| c.modality != Modality::Eeg)
        {
            return Err(TopologyError::InvalidLayout(
                "peripheral channels must follow all EEG channels".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn eeg_count(&self) -> usize {
        self.channels.iter().filter(|c| c.modality == Modality::Eeg).count()
    }

    pub fn pps_count(&self) -> usize {
        self.len() - self.eeg_count()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scheme {
    Deap32,
    Dreamer14,
    /// Contents of a `region: name1,name2,...` mapping file.
    Custom(String),
}

impl FromStr for Scheme {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deap32" => Ok(Scheme::Deap32),
            "dreamer14" => Ok(Scheme::Dreamer14),
            other => Err(TopologyError::InvalidLayout(format!(
                "unknown scheme `{other}` (expected deap32 or dreamer14)"
            ))),
        }
    }
}

/// Region → sorted channel indices, in [`Region`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    regions: Vec<(Region, Vec<usize>)>,
}

impl RegionPartition {
    /// Rebuilds a stored partition. Regions must be non-empty, unique and in
    /// canonical order, and every index must fall inside the layout.
    pub fn from_regions(regions: Vec<(Region, Vec<usize>)>, layout: &ChannelLayout) -> Result<Self, TopologyError> {
        for w in regions.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(TopologyError::InvalidLayout(format!(
                    "regions `{}` and `{}` out of order or duplicated",
                    w[0].0, w[1].0
                )));
            }
        }
        for (region, idx) in &regions {
            if idx.is_empty() {
                return Err(TopologyError::EmptyRegion(region.to_string()));
            }
            if let Some(&i) = idx.iter().find(|&&i| i >= layout.len()) {
                return Err(TopologyError::IndexOutOfRange {
                    index: i,
                    rows: layout.len(),
                });
            }
        }
        Ok(Self { regions })
    }

    pub fn get(&self, region: Region) -> Option<&[usize]> {
        self.regions
            .iter()
            .find(|(r, _)| *r == region)
            .map(|(_, idx)| idx.as_slice())
    }

    pub fn regions(&self) -> impl Iterator<Item = (Region, &[usize])> {
        self.regions.iter().map(|(r, idx)| (*r, idx.as_slice()))
    }

    pub fn contains(&self, region: Region) -> bool {
        self.get(region).is_some()
    }

    /// Regions that get an expert: cortical regions and the full-EEG
    /// expert, plus the peripheral expert when `multimodal` and available.
    pub fn expert_regions(&self, multimodal: bool) -> Vec<Region> {
        self.regions
            .iter()
            .map(|(r, _)| *r)
            .filter(|r| multimodal || *r != Region::Peripheral)
            .collect()
    }
}

fn parse_custom(text: &str) -> Result<Vec<(Region, Vec<String>)>, TopologyError> {
    let mut out: Vec<(Region, Vec<String>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (region, names) = line.split_once(':').ok_or_else(|| TopologyError::Parse {
            line: i + 1,
            msg: "expected `region: name1,name2,...`".into(),
        })?;
        let region: Region = region.parse()?;
        if !region.is_cortical() {
            return Err(TopologyError::Parse {
                line: i + 1,
                msg: format!("`{region}` is derived from channel modality and cannot be mapped"),
            });
        }
        if out.iter().any(|(r, _)| *r == region) {
            return Err(TopologyError::Parse {
                line: i + 1,
                msg: format!("region `{region}` listed twice"),
            });
        }
        let names: Vec<String> = names
            .split(',')
            .map(str::trim)
            .filter(|n| !n.is_empty())
            .map(String::from)
            .collect();
        out.push((region, names));
    }
    Ok(out)
}

pub fn build_partition(layout: &ChannelLayout, scheme: &Scheme) -> Result<RegionPartition, TopologyError> {
    layout.validate()?;
    let named: Vec<(Region, Vec<String>)> = match scheme {
        Scheme::Deap32 => builtin(&DEAP_REGIONS),
        Scheme::Dreamer14 => builtin(&DREAMER_REGIONS),
        Scheme::Custom(text) => parse_custom(text)?,
    };
    let eeg = layout.eeg_count();
    let mut regions = Vec::new();
    let mut covered = vec![false; eeg];
    for (region, names) in named {
        if names.is_empty() {
            return Err(TopologyError::EmptyRegion(region.name().into()));
        }
        let mut idx = Vec::with_capacity(names.len());
        for n in &names {
            let i = layout
                .index_of(n)
                .ok_or_else(|| TopologyError::UnknownElectrode(n.clone()))?;
            if i >= eeg {
                return Err(TopologyError::NotEeg(n.clone()));
            }
            covered[i] = true;
            idx.push(i);
        }
        idx.sort_unstable();
        idx.dedup();
        regions.push((region, idx));
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(TopologyError::Uncovered(layout.channels[i].name.clone()));
    }
    regions.sort_by_key(|(r, _)| *r);
    regions.push((Region::Eeg, (0..eeg).collect()));
    if layout.pps_count() > 0 {
        regions.push((Region::Peripheral, (eeg..layout.len()).collect()));
    }
    Ok(RegionPartition { regions })
}

fn builtin(table: &[(Region, &[&str])]) -> Vec<(Region, Vec<String>)> {
    table
        .iter()
        .map(|(r, names)| (*r, names.iter().map(|s| s.to_string()).collect()))
        .collect()
}

/// Rows of `sample` belonging to `region`, in index order.
pub fn slice_region<T: Clone>(
    sample: &[Vec<T>],
    partition: &RegionPartition,
    region: Region,
) -> Result<Vec<Vec<T>>, TopologyError> {
    let idx = partition
        .get(region)
        .ok_or_else(|| TopologyError::MissingRegion(region.name().into()))?;
    idx.iter()
        .map(|&i| {
            sample.get(i).cloned().ok_or(TopologyError::IndexOutOfRange {
                index: i,
                rows: sample.len(),
            })
        })
        .collect()
}
