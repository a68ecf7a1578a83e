//! Named model configurations.
//!
//! | preset      | M  | N | S1 | S2 | adapters          |
//! |-------------|----|---|----|----|-------------------|
//! | baseline    | 12 | 6 | 1  | 1  | none              |
//! | BR          | 1  | 1 | 12 | 6  | none              |
//! | BRA-E       | 1  | 1 | 12 | 6  | encoder           |
//! | BRA-D       | 1  | 1 | 12 | 6  | decoder           |
//! | BRA-ED      | 1  | 1 | 12 | 6  | encoder, decoder  |
//! | BRA-E-S18   | 1  | 1 | 18 | 6  | encoder           |
//!
//! The `toy-` variants keep the same structure at d=64, ff=256 with depths
//! scaled by 1/3 and a 30-unit vocabulary.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Baseline,
    Br,
    BraE,
    BraD,
    BraEd,
    BraES18,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::Baseline,
        Architecture::Br,
        Architecture::BraE,
        Architecture::BraD,
        Architecture::BraEd,
        Architecture::BraES18,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Baseline => "baseline",
            Architecture::Br => "BR",
            Architecture::BraE => "BRA-E",
            Architecture::BraD => "BRA-D",
            Architecture::BraEd => "BRA-ED",
            Architecture::BraES18 => "BRA-E-S18",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scale {
    Full,
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExperimentPreset {
    pub arch: Architecture,
    pub scale: Scale,
}

impl ExperimentPreset {
    pub const fn full(arch: Architecture) -> Self {
        Self { arch, scale: Scale::Full }
    }

    pub const fn toy(arch: Architecture) -> Self {
        Self { arch, scale: Scale::Toy }
    }

    pub fn all() -> impl Iterator<Item = ExperimentPreset> {
        Architecture::ALL
            .into_iter()
            .map(Self::full)
            .chain(Architecture::ALL.into_iter().map(Self::toy))
    }

    pub fn names() -> Vec<String> {
        Self::all().map(|p| p.to_string()).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        let (depth, mut cfg) = match self.scale {
            Scale::Full => (12, ModelConfig::default()),
            Scale::Toy => (
                4,
                ModelConfig {
                    d_model: 64,
                    heads: 4,
                    ff_dim: 256,
                    vocab_size: 30,
                    ..ModelConfig::default()
                },
            ),
        };
        let dec_depth = depth / 2;
        if self.arch == Architecture::Baseline {
            cfg.enc_blocks = depth;
            cfg.dec_blocks = dec_depth;
            cfg.enc_repeats = 1;
            cfg.dec_repeats = 1;
            return cfg;
        }
        cfg.enc_blocks = 1;
        cfg.dec_blocks = 1;
        cfg.enc_repeats = if self.arch == Architecture::BraES18 { depth * 3 / 2 } else { depth };
        cfg.dec_repeats = dec_depth;
        cfg.enc_adapters = matches!(
            self.arch,
            Architecture::BraE | Architecture::BraEd | Architecture::BraES18
        );
        cfg.dec_adapters = matches!(self.arch, Architecture::BraD | Architecture::BraEd);
        cfg
    }

    /// Training defaults; toy presets shorten warm-up and SpecAugment.
    pub fn train_config(&self) -> TrainConfig {
        match self.scale {
            Scale::Full => TrainConfig::default(),
            Scale::Toy => TrainConfig {
                warmup_steps: 400,
                batch_size: 8,
                max_steps: 3000,
                specaug_freq_width: 8,
                specaug_time_masks: 1,
                specaug_time_width: 4,
                ..TrainConfig::default()
            },
        }
    }
}

impl fmt::Display for ExperimentPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.scale {
            Scale::Full => f.write_str(self.arch.name()),
            Scale::Toy => write!(f, "toy-{}", self.arch.name()),
        }
    }
}

impl FromStr for ExperimentPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::all().find(|p| p.to_string() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset {s:?}; valid presets: {}",
                Self::names().join(", ")
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{adapter_params, ParamReport};

    fn tuple(c: &ModelConfig) -> (usize, usize, usize, usize) {
        (c.enc_blocks, c.dec_blocks, c.enc_repeats, c.dec_repeats)
    }

    #[test]
    fn full_presets_expand_to_table() {
        let get = |a| ExperimentPreset::full(a).model_config();
        assert_eq!(tuple(&get(Architecture::Baseline)), (12, 6, 1, 1));
        for a in [Architecture::Br, Architecture::BraE, Architecture::BraD, Architecture::BraEd] {
            assert_eq!(tuple(&get(a)), (1, 1, 12, 6), "{}", a.name());
        }
        assert_eq!(tuple(&get(Architecture::BraES18)), (1, 1, 18, 6));
        let bra_ed = get(Architecture::BraEd);
        assert!(bra_ed.enc_adapters && bra_ed.dec_adapters);
        assert!(!get(Architecture::BraD).enc_adapters);
    }

    #[test]
    fn names_round_trip() {
        for p in ExperimentPreset::all() {
            assert_eq!(p.to_string().parse::<ExperimentPreset>().unwrap(), p);
        }
        let err = "BRX".parse::<ExperimentPreset>().unwrap_err().to_string();
        assert!(err.contains("BRA-E-S18") && err.contains("toy-BR"));
    }

    #[test]
    fn adapter_deltas_are_exact() {
        let total = |a| ParamReport::from_config(&ExperimentPreset::full(a).model_config()).total();
        let unit = adapter_params(256);
        assert_eq!(unit, 65_792);
        assert_eq!(total(Architecture::BraE) - total(Architecture::Br), 12 * unit);
        assert_eq!(total(Architecture::BraEd) - total(Architecture::BraE), 6 * unit);
        assert_eq!(total(Architecture::BraES18) - total(Architecture::BraE), 6 * unit);
    }

    #[test]
    fn toy_presets_validate() {
        for p in ExperimentPreset::all().filter(|p| p.scale == Scale::Toy) {
            p.model_config().validate().unwrap();
            p.train_config().validate().unwrap();
        }
    }
}
