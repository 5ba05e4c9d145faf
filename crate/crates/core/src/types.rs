//! Identifiers and labels shared by every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Cognitive condition. `Mci` is the positive class (output index 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "MCI")]
    Mci,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Nc => 0,
            Label::Mci => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Self {
        if i == 1 {
            Label::Mci
        } else {
            Label::Nc
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Mci
    }

    pub fn target(self) -> f64 {
        self.class_index() as f64
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Nc => "NC",
            Label::Mci => "MCI",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_uppercase().as_str() {
            "NC" => Ok(Label::Nc),
            "MCI" => Ok(Label::Mci),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

/// Stable 64-bit key of a video id, as stored in latent files.
pub fn video_key(video_id: &str) -> u64 {
    crate::seed::fnv1a(video_id.as_bytes())
}
