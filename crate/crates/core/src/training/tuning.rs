use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::Component;

/// Which components are updated during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuningMode {
    /// Everything trains.
    FT,
    /// Only the two poolers (and the temperature) train.
    Frozen,
    /// `Frozen` before `switch_step`, `FT` from then on.
    FrozenThenFT { switch_step: usize },
    /// Everything except the image encoder trains.
    LiT,
}

impl TuningMode {
    pub fn name(&self) -> &'static str {
        match self {
            TuningMode::FT => "FT",
            TuningMode::Frozen => "Frozen",
            TuningMode::FrozenThenFT { .. } => "FrozenThenFT",
            TuningMode::LiT => "LiT",
        }
    }

    /// Parses a mode name; `switch_step` is only used by `FrozenThenFT`.
    pub fn parse(name: &str, switch_step: usize) -> Result<Self> {
        Ok(match name {
            "FT" => TuningMode::FT,
            "Frozen" => TuningMode::Frozen,
            "FrozenThenFT" => TuningMode::FrozenThenFT { switch_step },
            "LiT" => TuningMode::LiT,
            _ => return Err(Error::Config(format!("unknown tuning mode `{name}`"))),
        })
    }

    pub fn switch_step(&self) -> Option<usize> {
        match self {
            TuningMode::FrozenThenFT { switch_step } => Some(*switch_step),
            _ => None,
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TuningMode::parse(s, 0)
    }
}

/// Trainable components for `mode` at training step `step` (0-based).
pub fn freeze_mask(mode: TuningMode, step: usize) -> BTreeSet<Component> {
    let all: BTreeSet<Component> = Component::ALL.into_iter().collect();
    let mut set = match mode {
        TuningMode::FT => all,
        TuningMode::Frozen => [Component::GenPooler, Component::ConPooler, Component::Loss]
            .into_iter()
            .collect(),
        TuningMode::FrozenThenFT { switch_step } => {
            if step < switch_step {
                return freeze_mask(TuningMode::Frozen, step);
            }
            all
        }
        TuningMode::LiT => all.into_iter().filter(|c| *c != Component::Encoder).collect(),
    };
    set.insert(Component::TaskHead);
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_match_regime_definitions() {
        let frozen = freeze_mask(TuningMode::Frozen, 0);
        assert!(!frozen.contains(&Component::Encoder));
        assert!(!frozen.contains(&Component::Decoder));
        assert!(frozen.contains(&Component::GenPooler));
        let lit = freeze_mask(TuningMode::LiT, 0);
        assert!(lit.contains(&Component::Decoder));
        assert!(!lit.contains(&Component::Encoder));
        assert_eq!(freeze_mask(TuningMode::FT, 0).len(), Component::ALL.len());
    }

    #[test]
    fn frozen_then_ft_switches() {
        let m = TuningMode::FrozenThenFT { switch_step: 10 };
        assert_eq!(freeze_mask(m, 9), freeze_mask(TuningMode::Frozen, 9));
        assert_eq!(freeze_mask(m, 10), freeze_mask(TuningMode::FT, 10));
    }

    #[test]
    fn task_head_always_trains() {
        for m in [
            TuningMode::FT,
            TuningMode::Frozen,
            TuningMode::FrozenThenFT { switch_step: 3 },
            TuningMode::LiT,
        ] {
            assert!(freeze_mask(m, 0).contains(&Component::TaskHead));
            assert_eq!(TuningMode::parse(m.name(), 3).unwrap(), m);
        }
        assert!("Bogus".parse::<TuningMode>().is_err());
    }
}
