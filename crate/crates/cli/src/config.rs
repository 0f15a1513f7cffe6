use std::path::{Path, PathBuf};

use drcf::nn::model::ModelKind;
use drcf::physics::{GaSettings, IdmBounds, IdmParams};
use drcf::regime::LabelConfig;
use drcf::synth::{FollowerLaw, LeaderSpec, ScenarioConfig};
use drcf::traj::Units;
use drcf::train::CurriculumConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const DEMO_CONFIG: &str = include_str!("../configs/demo.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory name under the runs root.
    pub name: String,
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub data: DataConfig,
    pub labeling: LabelConfig,
    pub split: SplitConfig,
    pub models: ModelsConfig,
    pub curriculum: CurriculumConfig,
    pub idm: IdmConfig,
    pub simulate: SimulateConfig,
    pub platoon: PlatoonConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            seed: 0,
            synthetic: SyntheticConfig::default(),
            data: DataConfig::default(),
            labeling: LabelConfig::default(),
            split: SplitConfig::default(),
            models: ModelsConfig::default(),
            curriculum: CurriculumConfig::default(),
            idm: IdmConfig::default(),
            simulate: SimulateConfig::default(),
            platoon: PlatoonConfig::default(),
        }
    }
}

/// Random single-lane scenarios: a leader with a random schedule and a
/// queue of followers driven by `law`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub scenarios: usize,
    pub duration_s: f64,
    pub followers: usize,
    pub law: FollowerLaw,
    pub noise_sigma: f64,
    /// Initial spacing `gap_m + headway_s * v0 + U(0, jitter_m)`.
    pub gap_m: f64,
    pub headway_s: f64,
    pub jitter_m: f64,
    /// Scenarios appended verbatim; vehicle ids are reassigned.
    pub extra: Vec<ScenarioConfig>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            scenarios: 12,
            duration_s: 40.0,
            followers: 1,
            law: FollowerLaw::Idm(IdmParams::default()),
            noise_sigma: 0.0,
            gap_m: 2.0,
            headway_s: 1.2,
            jitter_m: 3.0,
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Trajectory CSV to ingest. Without it, `ingest` reads the output of
    /// `gen-synthetic`.
    pub path: Option<PathBuf>,
    pub units: Units,
    pub min_overlap_s: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: None, units: Units::Si, min_overlap_s: 3.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Share of non-test followers used for training; the rest validates.
    pub train_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_frac: 0.8, test_frac: 0.2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub kinds: Vec<ModelKind>,
    pub layers: usize,
    pub hidden: usize,
    pub window: usize,
    pub soft_regime: bool,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            kinds: vec![ModelKind::LstmDr, ModelKind::LstmPlain],
            layers: 6,
            hidden: 16,
            window: 10,
            soft_regime: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmConfig {
    pub bounds: IdmBounds,
    pub ga: GaSettings,
    /// Calibrate on at most this many training pairs.
    pub max_pairs: usize,
}

impl Default for IdmConfig {
    fn default() -> Self {
        IdmConfig { bounds: IdmBounds::default(), ga: GaSettings::default(), max_pairs: 20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Also simulate the calibrated IDM baseline.
    pub idm: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { idm: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatoonConfig {
    /// Scenario providing the lead vehicle and the observed followers.
    pub scenario: ScenarioConfig,
}

impl Default for PlatoonConfig {
    fn default() -> Self {
        let idm = IdmParams::default();
        PlatoonConfig {
            scenario: ScenarioConfig {
                leader: LeaderSpec::stop_and_go(14.0, 2.0, 1.0, 20.0, 6.0),
                follower_count: 8,
                law: FollowerLaw::Idm(idm),
                initial_spacings: vec![idm.equilibrium_spacing(14.0)],
                initial_follower_speed: None,
                noise_sigma: 0.05,
                seed: 0,
                lane: 1,
                leader_id: 1,
            },
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the bundled demo when `None`), applies `key=value`
    /// overrides and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let (text, origin) = match path {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                p.display().to_string(),
            ),
            None => (DEMO_CONFIG.to_string(), "bundled demo config".to_string()),
        };
        let mut de = serde_json::Deserializer::from_str(&text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| CliError::Config(format!("{origin}: at `{}`: {}", e.path(), e.inner())))?;
        let cfg = if overrides.is_empty() {
            cfg
        } else {
            let mut value = serde_json::to_value(&cfg).map_err(|e| CliError::Internal(e.to_string()))?;
            for o in overrides {
                apply_override(&mut value, o)?;
            }
            serde_path_to_error::deserialize(value)
                .map_err(|e| CliError::Config(format!("override: at `{}`: {}", e.path(), e.inner())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("name: {:?} is not a valid directory name", self.name));
        }
        if self.models.kinds.is_empty() {
            return bad("models.kinds: at least one model kind is required".into());
        }
        if self.models.layers == 0 || self.models.hidden == 0 || self.models.window == 0 {
            return bad("models: layers, hidden and window must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.split.train_frac) || !(0.0..1.0).contains(&self.split.test_frac) {
            return bad("split: fractions must lie in [0, 1)".into());
        }
        if !(self.synthetic.duration_s > 0.0) || !(self.synthetic.noise_sigma >= 0.0) || !(self.synthetic.jitter_m >= 0.0) {
            return bad("synthetic: duration_s must be positive, noise_sigma and jitter_m non-negative".into());
        }
        if self.idm.max_pairs == 0 {
            return bad("idm.max_pairs must be positive".into());
        }
        let wrap = |section: &str, r: drcf::Result<()>| r.map_err(|e| CliError::Config(format!("{section}: {e}")));
        wrap("labeling.seg", self.labeling.seg.validate())?;
        wrap("curriculum", self.curriculum.validate())?;
        wrap("platoon.scenario", self.platoon.scenario.validate())?;
        Ok(())
    }
}

/// Sets the dotted `key` of `value` to the JSON (or, failing that, string)
/// right-hand side of `spec`.
fn apply_override(value: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?}: expected KEY=VALUE")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = value;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| CliError::Config(format!("override {spec:?}: unknown key `{part}`")))?,
            _ => return Err(CliError::Config(format!("override {spec:?}: `{part}` is not inside an object"))),
        };
    }
    *cur = new;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_config_is_valid() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.name, "demo");
    }

    #[test]
    fn overrides_replace_nested_values() {
        let cfg = RunConfig::load(None, &["curriculum.stage1_epochs=3".into(), "name=other".into()]).unwrap();
        assert_eq!(cfg.curriculum.stage1_epochs, 3);
        assert_eq!(cfg.name, "other");
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(RunConfig::load(None, &["curriculum.nope=1".into()]), Err(CliError::Config(_))));
        let dir = std::env::temp_dir().join(format!("drcf-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.json");
        std::fs::write(&p, r#"{"models": {"layers": "six"}}"#).unwrap();
        match RunConfig::load(Some(&p), &[]) {
            Err(CliError::Config(msg)) => assert!(msg.contains("models.layers"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
