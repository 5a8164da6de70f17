//! Experiment presets shipped with the binary.

use crate::config::{parse_config, ConfigError, ExperimentConfig};

pub struct Preset {
    pub name: &'static str,
    pub source: &'static str,
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "sec6_quantile",
        source: include_str!("../presets/sec6_quantile.toml"),
    },
    Preset {
        name: "smoke",
        source: include_str!("../presets/smoke.toml"),
    },
    Preset {
        name: "exponential_quantile_mt",
        source: include_str!("../presets/exponential_quantile_mt.toml"),
    },
    Preset {
        name: "quadratic",
        source: include_str!("../presets/quadratic.toml"),
    },
];

/// Trajectory count of the full-scale quantile study; the preset ships 200.
pub const FULL_TRAJECTORIES: usize = 1000;

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn preset_config(name: &str) -> Option<Result<ExperimentConfig, ConfigError>> {
    find(name).map(|p| parse_config(p.source))
}
