use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Image-level weak label. Index 0 of every two-channel output is `Crack`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrackLabel {
    Crack,
    NonCrack,
}

impl CrackLabel {
    pub fn index(self) -> usize {
        match self {
            CrackLabel::Crack => 0,
            CrackLabel::NonCrack => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            CrackLabel::Crack
        } else {
            CrackLabel::NonCrack
        }
    }

    pub fn is_crack(self) -> bool {
        self == CrackLabel::Crack
    }
}

impl fmt::Display for CrackLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrackLabel::Crack => "crack",
            CrackLabel::NonCrack => "non-crack",
        })
    }
}

impl FromStr for CrackLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "crack" | "1" | "true" | "yes" => Ok(CrackLabel::Crack),
            "non-crack" | "noncrack" | "non_crack" | "no-crack" | "0" | "false" | "no" => {
                Ok(CrackLabel::NonCrack)
            }
            other => Err(format!("unknown crack label `{other}`")),
        }
    }
}
