//! Run configuration: named profiles, config files and dotted overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adaptation::{DamConfig, TtaConfig};
use crate::backbone::{BackboneConfig, BlockKind};
use crate::daam::DaamConfig;
use crate::data::RegimeConfig;
use crate::error::{Error, Result};
use crate::evaluation::SsimWindow;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Side length of synthesized images.
    pub image_size: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub target_per_task: usize,
    /// Reject regimes whose source and target ranges overlap.
    pub strict_shift: bool,
    pub regimes: RegimeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ssim_window: SsimWindow,
    pub kl_bins: usize,
    /// Images per forward pass when computing anchors and features.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ssim_window: SsimWindow::default(),
            kl_bins: 64,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Ci,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ci" => Ok(Profile::Ci),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected ci or paper)"
            ))),
        }
    }
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Ci => "ci",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    /// Master seed; `train.seed` always mirrors it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub tta: TtaConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => RunConfig {
                profile: "paper".into(),
                seed: 0,
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                data: DataConfig {
                    image_size: 128,
                    train_per_task: 200,
                    test_per_task: 50,
                    target_per_task: 50,
                    strict_shift: true,
                    regimes: RegimeConfig::default(),
                },
                tta: TtaConfig::default(),
                eval: EvalConfig::default(),
            },
            Profile::Ci => RunConfig {
                profile: "ci".into(),
                seed: 0,
                model: ModelConfig {
                    backbone: BackboneConfig {
                        base_dim: 8,
                        levels: 3,
                        blocks_per_level: 1,
                        block_kind: BlockKind::Conv,
                        heads: 1,
                        ffn_expansion: 2,
                    },
                    daam: DaamConfig {
                        code_dim: 16,
                        num_codes: 32,
                        ..DaamConfig::default()
                    },
                    dam: DamConfig::default(),
                },
                train: TrainConfig {
                    lr: 3e-3,
                    steps: 400,
                    crop: 32,
                    log_every: 20,
                    ..TrainConfig::default()
                },
                data: DataConfig {
                    image_size: 32,
                    train_per_task: 100,
                    test_per_task: 10,
                    target_per_task: 10,
                    strict_shift: true,
                    regimes: RegimeConfig::default(),
                },
                tta: TtaConfig {
                    lr: 3.0,
                    ..TtaConfig::default()
                },
                eval: EvalConfig::default(),
            },
        }
    }

    /// Profile defaults, then the config file (TOML or JSON by extension),
    /// then `key=value` overrides in order.
    pub fn resolve(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::profile(profile))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: Value = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            } else {
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            };
            merge(&mut value, parsed, "")?;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        RunConfig::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.tta.validate()?;
        self.data.regimes.validate(self.data.strict_shift)?;
        let r = self.model.backbone.reduction();
        if self.train.crop % r != 0 || self.data.image_size % r != 0 {
            return Err(Error::Config(format!(
                "crop {} and image size {} must be multiples of the {r}x reduction",
                self.train.crop, self.data.image_size
            )));
        }
        if self.train.crop > self.data.image_size {
            return Err(Error::Config(format!(
                "crop {} exceeds image size {}",
                self.train.crop, self.data.image_size
            )));
        }
        if self.eval.kl_bins == 0 || self.eval.batch == 0 {
            return Err(Error::Config(
                "eval.kl_bins and eval.batch must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes the effective configuration as `config.json` under `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        fs::write(&path, self.to_json_pretty()?).map_err(|e| Error::io(&path, e))
    }

    /// Length of the flattened contrastive feature at the training crop.
    pub fn cscl_feature_len(&self) -> usize {
        let side = self.train.crop / self.model.backbone.reduction();
        self.model.daam.code_dim * side * side
    }
}

/// Recursively overlays `over` onto `base`. Every key must already exist,
/// except inside internally tagged enums, which are replaced as a whole.
fn merge(base: &mut Value, over: Value, prefix: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            if b.contains_key("kind") {
                let mut whole = Value::Object(o.clone());
                if !o.contains_key("kind") {
                    whole = Value::Object(b.clone());
                    merge_tagged(&mut whole, o, prefix)?;
                }
                *b = whole.as_object().cloned().unwrap_or_default();
                return Ok(());
            }
            for (k, v) in o {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn merge_tagged(
    base: &mut Value,
    over: serde_json::Map<String, Value>,
    prefix: &str,
) -> Result<()> {
    let b = base.as_object_mut().expect("tagged enum is an object");
    for (k, v) in over {
        if !b.contains_key(&k) {
            return Err(Error::Config(format!(
                "unknown config key \"{prefix}.{k}\""
            )));
        }
        b.insert(k, v);
    }
    Ok(())
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(value: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let mut slot = &mut *value;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
    }
    let parsed =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    match (slot.is_object(), parsed) {
        (true, Value::Object(o)) => merge(slot, Value::Object(o), key),
        (true, _) => Err(Error::Config(format!(
            "{key:?} is a section; set one of its fields"
        ))),
        (false, p) => {
            *slot = p;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for p in [Profile::Ci, Profile::Paper] {
            RunConfig::profile(p).validate().unwrap();
        }
        assert_eq!(
            RunConfig::profile(Profile::Paper).cscl_feature_len(),
            24_576
        );
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::resolve(
            Profile::Ci,
            None,
            &[
                "train.lr=0.5".into(),
                "train.variant=baseline".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.variant, crate::model::Variant::Baseline);
        assert_eq!(cfg.train.seed, 9);
        let cfg = RunConfig::resolve(
            Profile::Ci,
            None,
            &[r#"eval.ssim_window={"kind":"gaussian","size":11,"sigma":1.5}"#.into()],
        )
        .unwrap();
        assert_eq!(
            cfg.eval.ssim_window,
            SsimWindow::Gaussian {
                size: 11,
                sigma: 1.5
            }
        );
    }

    #[test]
    fn rejects_bad_keys_and_values() {
        for bad in [
            "train.nope=1",
            "nope=1",
            "train=1",
            "train.lr=-1",
            "train.lr",
            "model.backbone.levels=x",
        ] {
            assert!(
                matches!(
                    RunConfig::resolve(Profile::Ci, None, &[bad.into()]),
                    Err(Error::Config(_))
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn file_merge() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 4\n[train]\nsteps = 7\n").unwrap();
        let cfg = RunConfig::resolve(Profile::Paper, Some(&p), &[]).unwrap();
        assert_eq!((cfg.seed, cfg.train.steps), (4, 7));
        fs::write(&p, "[train]\nstepz = 7\n").unwrap();
        assert!(RunConfig::resolve(Profile::Paper, Some(&p), &[]).is_err());
    }
}
