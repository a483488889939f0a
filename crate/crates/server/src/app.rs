//! Engine construction from command-line and environment settings.

use anyhow::{bail, Context};
use chrono::NaiveDate;
use planfirst_core::clock::{FixedClock, SharedClock, SystemClock};
use planfirst_core::engine::{Engine, EngineConfig};
use planfirst_core::gateway::{LmBackend, OpenAiBackend, OpenAiConfig, ScriptFixture, ScriptedBackend};
use planfirst_core::registry::Registry;
use planfirst_windfarm::Pack;
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Debug, Clone, Default)]
pub struct Settings {
    pub data_dir: PathBuf,
    /// Capability pack directory; defaults to the bundled wind-farm pack.
    pub pack: Option<PathBuf>,
    /// Registry manifest overriding the pack's own.
    pub registry: Option<PathBuf>,
    /// Scripted backend fixture; the live backend is used when absent.
    pub lm_script: Option<PathBuf>,
    /// Pin the clock to midnight UTC of this date.
    pub clock: Option<NaiveDate>,
    /// Overrides `AB_PLANNING_MODE`.
    pub planning_mode: Option<bool>,
    pub auto_approve: bool,
    pub verify: bool,
}

impl Settings {
    pub fn load_pack(&self) -> anyhow::Result<Pack> {
        let dir = self.pack.clone().unwrap_or_else(Pack::default_dir);
        let mut pack = Pack::load(&dir).with_context(|| format!("loading pack {}", dir.display()))?;
        if let Some(path) = &self.registry {
            pack.registry = Registry::load_manifest(path)?;
        }
        Ok(pack)
    }

    pub fn backend(&self) -> anyhow::Result<Arc<dyn LmBackend>> {
        match &self.lm_script {
            Some(path) => {
                let fixture = ScriptFixture::load(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(Arc::new(ScriptedBackend::from_fixture(&fixture)?))
            }
            None => Ok(Arc::new(OpenAiBackend::new(OpenAiConfig::from_env())?)),
        }
    }

    pub fn clock(&self) -> SharedClock {
        match self.clock {
            Some(d) => {
                Arc::new(FixedClock(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc()))
            }
            None => Arc::new(SystemClock),
        }
    }

    pub fn config(&self) -> EngineConfig {
        let mut config = EngineConfig::new(&self.data_dir).with_env();
        if let Some(on) = self.planning_mode {
            config.planning_mode = on;
        }
        config.auto_approve = self.auto_approve;
        config.verify = self.verify;
        config
    }

    pub fn engine(&self) -> anyhow::Result<Engine> {
        if self.data_dir.as_os_str().is_empty() {
            bail!("no data directory configured");
        }
        let pack = self.load_pack()?;
        Ok(pack.engine(self.config(), self.backend()?, self.clock())?)
    }
}

pub fn parse_date(s: &str) -> Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|e| format!("{s:?} is not a YYYY-MM-DD date: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_clock_is_midnight_utc() {
        let s = Settings { clock: Some(parse_date("2025-08-09").unwrap()), ..Settings::default() };
        assert_eq!(s.clock().now().to_rfc3339(), "2025-08-09T00:00:00+00:00");
        assert!(parse_date("09/08/2025").is_err());
    }

    #[test]
    fn flags_override_environment_defaults() {
        let s = Settings { data_dir: "d".into(), planning_mode: Some(false), auto_approve: true, ..Settings::default() };
        let c = s.config();
        assert!(!c.planning_mode && c.auto_approve && !c.verify);
    }
}
