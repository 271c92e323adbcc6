//! Configurations shipped with the crate, addressed as `family/teacher-mode`.

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Every shipped preset. SiD runs come before the SiD²A runs that start
/// from them.
pub const PRESETS: &[(&str, &str)] = &[
    ("gauss-linear-exact/exact-sid", include_str!("../presets/gauss-linear-exact/exact-sid.toml")),
    ("gauss-linear-exact/exact-sida", include_str!("../presets/gauss-linear-exact/exact-sida.toml")),
    ("gauss-linear-exact/exact-sid2a", include_str!("../presets/gauss-linear-exact/exact-sid2a.toml")),
    ("gauss-linear-exact/corrupted-sid", include_str!("../presets/gauss-linear-exact/corrupted-sid.toml")),
    ("gauss-linear-exact/corrupted-sida", include_str!("../presets/gauss-linear-exact/corrupted-sida.toml")),
    ("gauss-linear-exact/corrupted-sid2a", include_str!("../presets/gauss-linear-exact/corrupted-sid2a.toml")),
    ("ring-8/exact-sid", include_str!("../presets/ring-8/exact-sid.toml")),
    ("ring-8/exact-sida", include_str!("../presets/ring-8/exact-sida.toml")),
    ("ring-8/exact-sid2a", include_str!("../presets/ring-8/exact-sid2a.toml")),
    ("ring-8/corrupted-sid", include_str!("../presets/ring-8/corrupted-sid.toml")),
    ("ring-8/corrupted-sida", include_str!("../presets/ring-8/corrupted-sida.toml")),
    ("ring-8/corrupted-sid2a", include_str!("../presets/ring-8/corrupted-sid2a.toml")),
    ("grid-25/exact-sid", include_str!("../presets/grid-25/exact-sid.toml")),
    ("grid-25/exact-sida", include_str!("../presets/grid-25/exact-sida.toml")),
    ("grid-25/exact-sid2a", include_str!("../presets/grid-25/exact-sid2a.toml")),
    ("grid-25/corrupted-sid", include_str!("../presets/grid-25/corrupted-sid.toml")),
    ("grid-25/corrupted-sida", include_str!("../presets/grid-25/corrupted-sida.toml")),
    ("grid-25/corrupted-sid2a", include_str!("../presets/grid-25/corrupted-sid2a.toml")),
    ("two-moons-gmm/exact-sid", include_str!("../presets/two-moons-gmm/exact-sid.toml")),
    ("two-moons-gmm/exact-sida", include_str!("../presets/two-moons-gmm/exact-sida.toml")),
    ("two-moons-gmm/exact-sid2a", include_str!("../presets/two-moons-gmm/exact-sid2a.toml")),
    ("two-moons-gmm/corrupted-sid", include_str!("../presets/two-moons-gmm/corrupted-sid.toml")),
    ("two-moons-gmm/corrupted-sida", include_str!("../presets/two-moons-gmm/corrupted-sida.toml")),
    ("two-moons-gmm/corrupted-sid2a", include_str!("../presets/two-moons-gmm/corrupted-sid2a.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.0)
}

pub fn source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}

pub fn load(name: &str) -> Result<RunConfig> {
    let text = source(name).ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`")))?;
    RunConfig::from_toml_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        assert_eq!(PRESETS.len(), 24);
        for name in names() {
            let cfg = load(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.name, name.replace('/', "-"));
        }
        assert!(load("ring-8/nope").is_err());
    }
}
