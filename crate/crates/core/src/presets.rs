//! Shipped training configurations.

use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetKind {
    Ablation,
    AlphaSweep,
}

#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub kind: PresetKind,
    pub toml: &'static str,
}

macro_rules! preset {
    ($name:literal, $kind:ident) => {
        Preset {
            name: $name,
            kind: PresetKind::$kind,
            toml: include_str!(concat!("../presets/", $name, ".toml")),
        }
    };
}

pub const PRESETS: [Preset; 12] = [
    preset!("sdnet", Ablation),
    preset!("unet-baseline", Ablation),
    preset!("sd-only", Ablation),
    preset!("sd+scm", Ablation),
    preset!("sd+ccm", Ablation),
    preset!("overfit-smoke", Ablation),
    preset!("alpha-0.1", AlphaSweep),
    preset!("alpha-0.2", AlphaSweep),
    preset!("alpha-0.4", AlphaSweep),
    preset!("alpha-0.6", AlphaSweep),
    preset!("alpha-0.8", AlphaSweep),
    preset!("alpha-1.0", AlphaSweep),
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn load(name: &str) -> Result<TrainConfig> {
    let p = find(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
    TrainConfig::from_toml(p.toml)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ablation, Component};

    #[test]
    fn all_presets_resolve_and_are_named_consistently() {
        for p in &PRESETS {
            let c = load(p.name).unwrap();
            assert_eq!(c.name, p.name);
        }
        assert_eq!(PRESETS.iter().filter(|p| p.kind == PresetKind::Ablation).count(), 6);
        assert_eq!(PRESETS.iter().filter(|p| p.kind == PresetKind::AlphaSweep).count(), 6);
    }

    #[test]
    fn ablation_contents() {
        use Component::*;
        assert_eq!(load("sd-only").unwrap().ablation, Ablation::of(&[SD]));
        assert_eq!(load("unet-baseline").unwrap().ablation, Ablation::baseline());
        assert_eq!(load("sd+scm").unwrap().ablation, Ablation::of(&[SD, SCM]));
        let sweep: Vec<f64> = PRESETS
            .iter()
            .filter(|p| p.kind == PresetKind::AlphaSweep)
            .map(|p| load(p.name).unwrap().loss_weights.alpha)
            .collect();
        assert_eq!(sweep, [0.1, 0.2, 0.4, 0.6, 0.8, 1.0]);
        let s = load("sdnet").unwrap();
        assert_eq!((s.epochs, s.lr_step_epochs, s.batch_size, s.lr0), (120, 40, 16, 1e-4));
    }

    #[test]
    fn fewer_parameters_without_auxiliary_heads() {
        let full = load("sdnet").unwrap().architecture().unwrap().parameter_count();
        let sd = load("sd-only").unwrap().architecture().unwrap().parameter_count();
        assert!(sd < full);
    }
}
