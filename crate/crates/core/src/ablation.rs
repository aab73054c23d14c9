//! Component switches for ablation runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which components are disabled. `Default` is the full model.
///
/// Replacement wiring keeps every variant end-to-end differentiable:
///
/// | flag         | effect                                                     |
/// |--------------|------------------------------------------------------------|
/// | `no_ca`      | co-attention skipped, projections feed the gates directly  |
/// | `no_ff`      | dimension-wise gates skipped, attention outputs pass ungated |
/// | `no_mf`      | both dual-path encoders are the identity                   |
/// | `no_xa`      | cross-attention terms are zero                             |
/// | `no_ef`      | expert fusion replaced by concat + linear to `D`           |
/// | `two_heads`  | refinement attention runs with half the heads (4 → 2)      |
/// | `text_only`  | image features zeroed before projection                    |
/// | `image_only` | text features zeroed before projection                     |
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_ef: bool,
    pub no_ca: bool,
    pub no_xa: bool,
    pub no_mf: bool,
    pub no_ff: bool,
    pub two_heads: bool,
    pub text_only: bool,
    pub image_only: bool,
}

const NAMES: [&str; 8] = [
    "no_EF",
    "no_CA",
    "no_XA",
    "no_MF",
    "no_FF",
    "two_heads",
    "text_only",
    "image_only",
];

impl AblationFlags {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }

    fn slots(&mut self) -> [&mut bool; 8] {
        [
            &mut self.no_ef,
            &mut self.no_ca,
            &mut self.no_xa,
            &mut self.no_mf,
            &mut self.no_ff,
            &mut self.two_heads,
            &mut self.text_only,
            &mut self.image_only,
        ]
    }

    fn values(&self) -> [bool; 8] {
        [
            self.no_ef,
            self.no_ca,
            self.no_xa,
            self.no_mf,
            self.no_ff,
            self.two_heads,
            self.text_only,
            self.image_only,
        ]
    }

    /// Sets one flag by name (`no_EF`, `no_ca`, `two_heads`, `2heads`, ...).
    pub fn enable(&mut self, name: &str) -> Result<()> {
        let key = name.trim().to_ascii_lowercase();
        let key = match key.as_str() {
            "2heads" => "two_heads",
            other => other,
        };
        let idx = NAMES
            .iter()
            .position(|n| n.to_ascii_lowercase() == key)
            .ok_or_else(|| Error::Config(format!("unknown ablation flag {name:?}")))?;
        *self.slots()[idx] = true;
        Ok(())
    }

    /// Comma-separated flag names; `full` or empty means no flags.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut flags = Self::default();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            if part.eq_ignore_ascii_case("full") {
                continue;
            }
            flags.enable(part)?;
        }
        if flags.text_only && flags.image_only {
            return Err(Error::Config(
                "text_only and image_only are mutually exclusive".into(),
            ));
        }
        Ok(flags)
    }

    /// Machine form, e.g. `no_EF,no_MF`; `full` when nothing is disabled.
    pub fn to_list(&self) -> String {
        let names: Vec<&str> = NAMES
            .iter()
            .zip(self.values())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        if names.is_empty() {
            "full".into()
        } else {
            names.join(",")
        }
    }

    /// Row label in ablation tables, e.g. `w/o EF+MF`, `2Heads`, `Full`.
    pub fn label(&self) -> String {
        if self.is_full() {
            return "Full".into();
        }
        let removed: Vec<&str> = [
            (self.no_ef, "EF"),
            (self.no_ca, "CA"),
            (self.no_xa, "XA"),
            (self.no_mf, "MF"),
            (self.no_ff, "FF"),
        ]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| n)
        .collect();
        let mut parts = Vec::new();
        if !removed.is_empty() {
            parts.push(format!("w/o {}", removed.join("+")));
        }
        if self.two_heads {
            parts.push("2Heads".into());
        }
        if self.text_only {
            parts.push("Text only".into());
        }
        if self.image_only {
            parts.push("Image only".into());
        }
        parts.join(" ")
    }

    /// Number of components switched off; halving the heads counts as one.
    pub fn removed_count(&self) -> usize {
        self.values()[..6].iter().filter(|v| **v).count()
    }
}

impl FromStr for AblationFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_list(s)
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn flags(list: &str) -> AblationFlags {
    AblationFlags::parse_list(list).expect("static variant list")
}

/// The ablation matrix: every single and combined variant plus the full model.
pub fn ablation_variants() -> Vec<AblationFlags> {
    [
        "no_EF",
        "no_CA",
        "no_XA",
        "no_MF",
        "no_FF",
        "no_EF,no_MF",
        "no_CA,no_XA",
        "no_EF,no_CA,no_MF",
        "two_heads",
        "no_MF,no_FF",
        "full",
    ]
    .into_iter()
    .map(flags)
    .collect()
}

/// Variants that each switch off exactly one component.
pub fn single_ablations() -> Vec<AblationFlags> {
    ablation_variants()
        .into_iter()
        .filter(|f| f.removed_count() == 1)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_match_table_rows() {
        let labels: Vec<String> = ablation_variants().iter().map(|f| f.label()).collect();
        assert_eq!(
            labels,
            [
                "w/o EF",
                "w/o CA",
                "w/o XA",
                "w/o MF",
                "w/o FF",
                "w/o EF+MF",
                "w/o CA+XA",
                "w/o EF+CA+MF",
                "2Heads",
                "w/o MF+FF",
                "Full"
            ]
        );
    }

    #[test]
    fn single_ablations_are_six() {
        assert_eq!(single_ablations().len(), 6);
    }

    #[test]
    fn parse_round_trip() {
        for f in ablation_variants() {
            assert_eq!(AblationFlags::parse_list(&f.to_list()).unwrap(), f);
        }
    }

    #[test]
    fn unknown_flag_is_rejected() {
        assert!(AblationFlags::parse_list("no_EF,no_QQ").is_err());
        assert!(AblationFlags::parse_list("text_only,image_only").is_err());
    }

    #[test]
    fn accepts_loose_spellings() {
        let f = AblationFlags::parse_list(" NO_ef + 2Heads ").unwrap();
        assert!(f.no_ef && f.two_heads);
    }
}
