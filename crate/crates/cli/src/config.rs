//! The run configuration: one TOML file with `[degradation]`, `[network]`,
//! `[train]`, `[paths]` and `[eval]` tables plus a top-level `seed`.
//!
//! Values are resolved as preset defaults, then the file, then `--set`
//! overrides, then dedicated command-line flags.

use std::path::{Path, PathBuf};

use jnet_core::degradation::DegradationConfig;
use jnet_core::jnet::NetworkSpec;
use jnet_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Preset {
    /// Width 32, two encoder levels, 5K iterations at batch 8.
    #[default]
    Desk,
    /// Width 64, three encoder levels, 200K iterations at batch 32.
    Full,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Pixels ignored along every border when scoring.
    pub crop_border: usize,
    /// Center-crop evaluation images to at most this side.
    pub crop: Option<usize>,
    /// PSF width for Lucy–Richardson, in LR pixels; defaults to the middle
    /// of the blur range divided by the scale.
    pub lr_sigma: Option<f64>,
    pub lr_iters: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { crop_border: 0, crop: None, lr_sigma: None, lr_iters: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub degradation: DegradationConfig,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub paths: Paths,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (network, train) = match preset {
            Preset::Desk => (NetworkSpec { width: 32, encoder_levels: 2, ..NetworkSpec::default() }, TrainConfig::desk()),
            Preset::Full => (NetworkSpec::default(), TrainConfig::default()),
        };
        Self {
            seed: 0,
            degradation: DegradationConfig::default(),
            network,
            train,
            paths: Paths::default(),
            eval: EvalSettings::default(),
        }
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<(), String> {
        self.degradation.validate().map_err(|e| format!("[degradation] {e}"))?;
        self.network.validate().map_err(|e| format!("[network] {e}"))?;
        self.train.validate().map_err(|e| format!("[train] {e}"))?;
        if self.network.scale != self.degradation.scale {
            return Err(format!(
                "network.scale = {} but degradation.scale = {}",
                self.network.scale, self.degradation.scale
            ));
        }
        let multiple = self.network.scale * self.network.divisor();
        if self.train.patch_size % multiple != 0 {
            return Err(format!("train.patch_size = {} must be a multiple of {multiple}", self.train.patch_size));
        }
        if self.eval.lr_iters == 0 || self.eval.lr_sigma.is_some_and(|s| !(s > 0.0)) {
            return Err("eval.lr_iters must be >= 1 and eval.lr_sigma > 0".into());
        }
        Ok(())
    }

    /// Lucy–Richardson PSF width in LR pixels.
    pub fn lr_sigma(&self) -> f64 {
        self.eval
            .lr_sigma
            .unwrap_or(0.5 * (self.degradation.alpha + self.degradation.beta) / self.degradation.scale as f64)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Overlays `over` onto `base`, descending into tables.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value`; the value is read as TOML and falls back to a string.
fn parse_override(spec: &str) -> Result<Value, String> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| format!("override `{spec}` is not KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("override `{spec}` has an empty key"));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut nested = value;
    for part in key.rsplit('.') {
        let mut table = toml::Table::new();
        table.insert(part.to_string(), nested);
        nested = Value::Table(table);
    }
    Ok(nested)
}

/// Whether the file at `path` sets anything under `[section]`.
pub fn file_sets_section(path: Option<&Path>, section: &str) -> bool {
    path.and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| t.parse::<toml::Table>().ok())
        .is_some_and(|t| t.contains_key(section))
}

pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, String> {
    let mut value = Value::try_from(RunConfig::preset(preset)).map_err(|e| e.to_string())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let table: toml::Table = text.parse().map_err(|e| format!("{}: {e}", path.display()))?;
        merge(&mut value, Value::Table(table));
    }
    for spec in overrides {
        merge(&mut value, parse_override(spec)?);
    }
    let text = toml::to_string(&value).map_err(|e| e.to_string())?;
    toml::from_str(&text).map_err(|e| match file {
        Some(p) => format!("{}: {e}", p.display()),
        None => e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_preset() {
        let cfg = resolve(Preset::Desk, None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.network.width, 32);
        assert_eq!(cfg.train.total_iters, 5_000);
        assert!(cfg.validate().is_ok());
        assert!(RunConfig::preset(Preset::Full).validate().is_ok());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig { seed: 9, ..RunConfig::default() };
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn precedence_file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[train]\ntotal_iters = 10\nbatch = 2\n").unwrap();
        let sets = vec!["train.batch=3".to_string(), "network.variant=flat-unet".to_string()];
        let cfg = resolve(Preset::Desk, Some(&path), &sets).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.total_iters, 10);
        assert_eq!(cfg.train.batch, 3);
        assert_eq!(cfg.network.variant.as_str(), "flat-unet");
        assert_eq!(cfg.network.width, 32);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = resolve(Preset::Desk, None, &["train.totl_iters=3".into()]).unwrap_err();
        assert!(err.contains("totl_iters"), "{err}");
        assert!(resolve(Preset::Desk, None, &["bogus=1".into()]).is_err());
        assert!(resolve(Preset::Desk, None, &["train.batch".into()]).is_err());
    }

    #[test]
    fn inverted_rates_fail_validation() {
        let cfg = resolve(Preset::Desk, None, &["train.lr_final=0.01".into()]).unwrap();
        assert!(cfg.validate().unwrap_err().contains("lr_final"));
    }
}
