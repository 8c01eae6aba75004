use std::path::Path;

use melfix::codec::{DEFAULT_MAX_DB, DEFAULT_MIN_DB, DEFAULT_PAD_MULTIPLE};
use melfix::dsp::Profile;
use melfix::training::{ImageSettings, TrainConfig};

use crate::CliError;

/// Config file settings plus `--set` overrides. Keys not listed here go to
/// [`TrainConfig`], which rejects anything it does not know.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub min_db: f64,
    pub max_db: f64,
    pub pad_multiple: usize,
    pub sigma_t: f64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Desk16k,
            min_db: DEFAULT_MIN_DB,
            max_db: DEFAULT_MAX_DB,
            pad_multiple: DEFAULT_PAD_MULTIPLE,
            sigma_t: 3.0,
            train: TrainConfig::default(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, CliError>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("{key}={value}: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key.trim() {
            "profile" => self.profile = parse(key, value)?,
            "min_db" => self.min_db = parse(key, value)?,
            "max_db" => self.max_db = parse(key, value)?,
            "pad_multiple" => self.pad_multiple = parse(key, value)?,
            "sigma_t" => self.sigma_t = parse(key, value)?,
            k => self.train.set(k, value).map_err(|e| CliError::Usage(e.to_string()))?,
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then `k=v` overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set {o}: expected key=value")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.min_db.is_finite() && self.max_db.is_finite() && self.min_db < self.max_db) {
            return Err(CliError::Usage(format!(
                "need min_db < max_db, got {} and {}",
                self.min_db, self.max_db
            )));
        }
        if self.pad_multiple == 0 {
            return Err(CliError::Usage("pad_multiple must be >= 1".into()));
        }
        if !(self.sigma_t >= 0.0 && self.sigma_t.is_finite()) {
            return Err(CliError::Usage(format!("sigma_t must be >= 0, got {}", self.sigma_t)));
        }
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn image_settings(&self) -> ImageSettings {
        ImageSettings {
            profile: self.profile,
            min_db: self.min_db,
            max_db: self.max_db,
            pad_multiple: self.pad_multiple,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("profile = paper48k\nsteps = 5 # short\n\nlr=0.001").unwrap();
        cfg.set("steps", "7").unwrap();
        assert_eq!(cfg.profile, Profile::Paper48k);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.adam.lr, 0.001);
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.apply_text("no equals sign").is_err());
    }
}
