// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Degree of importance of one multiply-and-accumulate step as it shows up in
/// a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ImportanceLabel {
    /// Important MAC, always executed.
    #[serde(rename = "I")]
    Important,
    /// Non-important MAC that was executed.
    #[serde(rename = "E")]
    Executed,
    /// Non-important MAC that was skipped.
    #[serde(rename = "S")]
    Skipped,
}

impl ImportanceLabel {
    /// Matching preference used to break score ties: I before E before S.
    pub const PREFERENCE: [ImportanceLabel; 3] = [Self::Important, Self::Executed, Self::Skipped];

    pub fn code(self) -> u8 {
        match self {
            Self::Important => 0,
            Self::Executed => 1,
            Self::Skipped => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Important),
            1 => Some(Self::Executed),
            2 => Some(Self::Skipped),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Self::Important => 'I',
            Self::Executed => 'E',
            Self::Skipped => 'S',
        }
    }

    /// Whether the MAC contributed to the accumulator.
    pub fn is_processed(self) -> bool {
        !matches!(self, Self::Skipped)
    }
}

impl fmt::Display for ImportanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for ImportanceLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "I" | "i" => Ok(Self::Important),
            "E" | "e" => Ok(Self::Executed),
            "S" | "s" => Ok(Self::Skipped),
            other => Err(format!("unknown importance label {other:?}")),
        }
    }
}

/// Parses a compact label string such as `"SEIESSIIS"`.
pub fn parse_labels(s: &str) -> Result<Vec<ImportanceLabel>, String> {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| c.to_string().parse())
        .collect()
}

pub fn format_labels(labels: &[ImportanceLabel]) -> String {
    labels.iter().map(|l| l.as_char()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for label in ImportanceLabel::PREFERENCE {
            assert_eq!(ImportanceLabel::from_code(label.code()), Some(label));
        }
        assert_eq!(ImportanceLabel::from_code(3), None);
    }

    #[test]
    fn parses_compact_sequences() {
        let labels = parse_labels("S,E,I,E,S,S,I,I,S").unwrap();
        assert_eq!(format_labels(&labels), "SEIESSIIS");
        assert!(parse_labels("SX").is_err());
    }
}
