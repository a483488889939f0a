//! Wind-farm maintenance analysis pack: six capabilities over seeded mock
//! turbine and weather sources, a bundled standards document, and an
//! engine-side reference ranking.

pub mod curve;
pub mod data;
pub mod fixture;
pub mod oracle;
pub mod providers;
pub mod report;
pub mod timerange;

use curve::{CurveError, PowerCurve};
use planfirst_core::clock::{FixedClock, SharedClock};
use planfirst_core::engine::{Engine, EngineConfig, EngineError};
use planfirst_core::gateway::{Gateway, LmBackend};
use planfirst_core::provider::ProviderRegistry;
use planfirst_core::script::ScriptService;
use planfirst_core::registry::{Registry, RegistryError};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Demo and test runs pin the clock here.
pub fn reference_clock() -> FixedClock {
    FixedClock::at_ymd(2025, 8, 9)
}

#[derive(Debug, thiserror::Error)]
pub enum PackError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("{0}: {1}")]
    Read(String, String),
}

#[derive(Debug, Clone)]
pub struct Pack {
    pub dir: PathBuf,
    pub registry: Registry,
    pub curve: PowerCurve,
    pub knowledge: String,
    pub seed: u64,
}

impl Pack {
    /// `packs/windfarm` in the source tree.
    pub fn default_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../packs/windfarm")
    }

    pub fn load(dir: &Path) -> Result<Pack, PackError> {
        let knowledge_path = dir.join("knowledge/performance_standards.txt");
        let knowledge = std::fs::read_to_string(&knowledge_path)
            .map_err(|e| PackError::Read(knowledge_path.display().to_string(), e.to_string()))?;
        Ok(Pack {
            dir: dir.to_path_buf(),
            registry: Registry::load_manifest(&dir.join("registry.json"))?,
            curve: PowerCurve::load(&dir.join("power_curve.json"))?,
            knowledge,
            seed: data::DEFAULT_SEED,
        })
    }

    pub fn load_default() -> Result<Pack, PackError> {
        Pack::load(&Pack::default_dir())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn fixture_path(&self) -> PathBuf {
        self.dir.join("fixtures/windfarm.json")
    }

    pub fn register_providers(&self, providers: &mut ProviderRegistry) {
        use providers::*;
        providers.register("time_range_parsing", Arc::new(TimeRangeParsing));
        providers.register("turbine_data_archiver", Arc::new(TurbineDataArchiver { seed: self.seed, curve: self.curve }));
        providers.register("weather_data_retrieval", Arc::new(WeatherDataRetrieval { seed: self.seed }));
        providers.register("knowledge_retrieval", Arc::new(KnowledgeRetrieval { document: self.knowledge.clone() }));
        providers.register("turbine_analysis", Arc::new(TurbineAnalysis { curve: self.curve }));
        providers.register("respond", Arc::new(Respond));
    }

    pub fn providers(&self) -> ProviderRegistry {
        let mut p = ProviderRegistry::new();
        self.register_providers(&mut p);
        p
    }

    /// Engine over this pack's registry and providers. Scripts run under
    /// `AB_SCRIPT_INTERPRETER` in `<data_dir>/jobs`.
    pub fn engine(&self, config: EngineConfig, backend: Arc<dyn LmBackend>, clock: SharedClock) -> Result<Engine, EngineError> {
        let scripts = ScriptService::from_env(&config.data_dir);
        Engine::new(config, Arc::new(self.registry.clone()), Arc::new(self.providers()), Gateway::new(backend), clock, scripts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_pack_loads() {
        let pack = Pack::load_default().unwrap();
        assert_eq!(pack.registry.len(), 6);
        assert_eq!(pack.curve, PowerCurve::default());
        assert!(pack.knowledge.contains("85%"));
        let providers = pack.providers();
        for c in pack.registry.iter() {
            assert!(providers.get(&c.provider).is_some(), "{}", c.name);
        }
        assert_eq!(pack.registry.iter().filter(|c| c.terminal).count(), 1);
    }
}
