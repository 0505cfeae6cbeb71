use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Low = 0,
    High = 1,
}

impl Class {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Affective rating dimension; one binary model is trained per dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Valence,
    Arousal,
    Dominance,
    Liking,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [Self::Valence, Self::Arousal, Self::Dominance, Self::Liking];

    pub fn name(self) -> &'static str {
        match self {
            Self::Valence => "valence",
            Self::Arousal => "arousal",
            Self::Dominance => "dominance",
            Self::Liking => "liking",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dimension {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown dimension `{s}` (expected valence, arousal, dominance or liking)"))
    }
}

/// DEAP ratings above 5 are high; DREAMER ratings of 3 or more are high.
pub fn binarize_labels(rating: f64, dataset: DatasetKind) -> Result<Class, DataError> {
    let (lo, hi) = dataset.rating_range();
    if !(lo..=hi).contains(&rating) {
        return Err(DataError::RatingOutOfRange {
            value: rating,
            dataset,
            lo,
            hi,
        });
    }
    let high = match dataset {
        DatasetKind::Deap => rating > 5.0,
        DatasetKind::Dreamer => rating >= 3.0,
    };
    Ok(if high { Class::High } else { Class::Low })
}
