use std::fmt;

use serde::{Deserialize, Serialize};

/// One of the two input streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Appearance (frame-derived).
    #[serde(rename = "f")]
    F,
    /// Motion (flow-derived).
    #[serde(rename = "o")]
    O,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::F, Modality::O];

    pub fn other(self) -> Modality {
        match self {
            Modality::F => Modality::O,
            Modality::O => Modality::F,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::F => "f",
            Modality::O => "o",
        })
    }
}
