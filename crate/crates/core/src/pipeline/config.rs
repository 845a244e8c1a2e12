//! Run configuration: a TOML document with optional named dataset profiles.
//!
//! ```toml
//! profile = "imagenet_lt"      # cap 300, threshold 0.8
//! seed = 7
//! num_mix_samples = 1000
//!
//! [backends]
//! generate_image = "http"      # every other kind stays on the mock
//!
//! [rate_limits]
//! generate_image = { capacity = 50, window_secs = 60.0 }
//! embed_image = { capacity = 0 }   # 0 disables limiting
//! ```
//!
//! Keys set explicitly always win over the profile.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backends::cache::{DiskCache, MemoryCache};
use crate::backends::clock::{Clock, SimulatedClock, SystemClock};
use crate::backends::http::HttpBackend;
use crate::backends::mock::{MockBackend, MockConfig};
use crate::backends::ratelimit::RateLimit;
use crate::backends::retry::RetryPolicy;
use crate::backends::{Backend, Backends, Kind};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, DEFAULT_MAX_CYCLES};
use crate::mix::{MixConfig, DEFAULT_ALPHA};
use crate::reflection::DEFAULT_BATCH_SIZE;

/// Cap and threshold presets for the common long-tail benchmarks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profile {
    pub name: &'static str,
    pub per_class_cap: usize,
    pub score_threshold: f64,
}

pub const PROFILES: [Profile; 3] = [
    Profile {
        name: "imagenet_lt",
        per_class_cap: 300,
        score_threshold: 0.8,
    },
    Profile {
        name: "places_lt",
        per_class_cap: 800,
        score_threshold: 0.8,
    },
    Profile {
        name: "inaturalist",
        per_class_cap: 100,
        score_threshold: 0.6,
    },
];

pub fn profile(name: &str) -> Option<Profile> {
    PROFILES.into_iter().find(|p| p.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Mock,
    Http,
}

impl BackendChoice {
    pub fn parse(s: &str) -> Option<BackendChoice> {
        match s {
            "mock" => Some(BackendChoice::Mock),
            "http" => Some(BackendChoice::Http),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockChoice {
    /// Simulated when every backend is the mock, system time otherwise.
    Auto,
    System,
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Disk,
    Memory,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginalSource {
    /// Image refs are files, relative refs resolved against `original_root`.
    Files,
    /// Refs are only names; pixels are synthesized from them.
    Procedural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub mode: CacheMode,
    /// Defaults to `<run dir>/cache`; point several runs here to share it.
    pub dir: Option<PathBuf>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            mode: CacheMode::Disk,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimitSetting {
    /// 0 turns limiting off for the kind.
    pub capacity: u32,
    #[serde(default = "sixty")]
    pub window_secs: f64,
}

fn sixty() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Option<String>,
    /// K_y; taken from the profile when unset.
    pub per_class_cap: Option<usize>,
    /// μ; taken from the profile when unset.
    pub score_threshold: Option<f64>,
    pub max_cycles: u32,
    pub mix_alpha: f64,
    pub batch_size: usize,
    pub num_mix_samples: usize,
    pub resolution: u32,
    pub seed: u64,
    pub worker_width: usize,
    pub clock: ClockChoice,
    pub original_images: OriginalSource,
    /// Base directory for relative original image refs; defaults to the
    /// manifest's directory.
    pub original_root: Option<PathBuf>,
    pub http_timeout_secs: u64,
    pub backends: BTreeMap<String, BackendChoice>,
    pub rate_limits: BTreeMap<String, RateLimitSetting>,
    pub retry: RetryPolicy,
    pub cache: CacheConfig,
    pub mock: MockConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            profile: None,
            per_class_cap: None,
            score_threshold: None,
            max_cycles: DEFAULT_MAX_CYCLES,
            mix_alpha: DEFAULT_ALPHA,
            batch_size: DEFAULT_BATCH_SIZE,
            num_mix_samples: 0,
            resolution: 224,
            seed: 0,
            worker_width: 8,
            clock: ClockChoice::Auto,
            original_images: OriginalSource::Files,
            original_root: None,
            http_timeout_secs: 120,
            backends: BTreeMap::new(),
            rate_limits: BTreeMap::new(),
            retry: RetryPolicy::default(),
            cache: CacheConfig::default(),
            mock: MockConfig::default(),
        }
    }
}

/// Built-in limits: 50 images and 300 text calls per minute. Embedding
/// calls are not limited unless configured.
pub fn default_rate_limit(kind: Kind) -> Option<RateLimit> {
    match kind {
        Kind::GenerateImage => Some(RateLimit::per_minute(50)),
        Kind::Caption | Kind::Expand | Kind::Summarize | Kind::Refine => {
            Some(RateLimit::per_minute(300))
        }
        Kind::EmbedImage | Kind::EmbedText => None,
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation(format!("config: {e}")))
    }

    fn profile_values(&self) -> Result<Option<Profile>> {
        match &self.profile {
            None => Ok(None),
            Some(name) => profile(name).map(Some).ok_or_else(|| {
                let known: Vec<&str> = PROFILES.iter().map(|p| p.name).collect();
                Error::validation(format!(
                    "unknown profile {name:?}; known: {}",
                    known.join(", ")
                ))
            }),
        }
    }

    pub fn cap(&self) -> Result<usize> {
        match (self.per_class_cap, self.profile_values()?) {
            (Some(cap), _) => Ok(cap),
            (None, Some(p)) => Ok(p.per_class_cap),
            (None, None) => Err(Error::validation("set per_class_cap or a profile")),
        }
    }

    pub fn threshold(&self) -> Result<f64> {
        match (self.score_threshold, self.profile_values()?) {
            (Some(mu), _) => Ok(mu),
            (None, Some(p)) => Ok(p.score_threshold),
            (None, None) => Err(Error::validation("set score_threshold or a profile")),
        }
    }

    pub fn backend_for(&self, kind: Kind) -> BackendChoice {
        self.backends
            .get(kind.as_str())
            .copied()
            .unwrap_or(BackendChoice::Mock)
    }

    pub fn rate_limit_for(&self, kind: Kind) -> Option<RateLimit> {
        match self.rate_limits.get(kind.as_str()) {
            Some(s) if s.capacity == 0 => None,
            Some(s) => Some(RateLimit {
                capacity: s.capacity,
                window_secs: s.window_secs,
            }),
            None => default_rate_limit(kind),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cap()? < 1 {
            return Err(Error::validation("per_class_cap must be at least 1"));
        }
        self.eval_config()?.validate()?;
        if self.worker_width < 1 {
            return Err(Error::validation("worker_width must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if self.resolution < 1 {
            return Err(Error::validation("resolution must be at least 1"));
        }
        if !(self.mix_alpha > 0.0 && self.mix_alpha.is_finite()) {
            return Err(Error::validation("mix_alpha must be positive"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::validation(
                "seed must fit in a signed 64-bit integer",
            ));
        }
        for key in self.backends.keys().chain(self.rate_limits.keys()) {
            if Kind::parse(key).is_none() {
                return Err(Error::validation(format!("unknown backend kind {key:?}")));
            }
        }
        for kind in Kind::ALL {
            if let Some(limit) = self.rate_limit_for(kind) {
                limit.validate()?;
            }
        }
        MockBackend::new(self.mock.clone())?;
        Ok(())
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            threshold: self.threshold()?,
            max_cycles: self.max_cycles,
            seed: self.seed,
        })
    }

    pub fn mix_config(&self, num_samples: usize, seed: u64) -> MixConfig {
        MixConfig {
            num_samples,
            alpha: self.mix_alpha,
            resolution: self.resolution,
            seed,
        }
    }

    /// Applies a `kind=mock|http` override.
    pub fn set_backend(&mut self, spec: &str) -> Result<()> {
        let (kind, choice) = spec
            .split_once('=')
            .ok_or_else(|| Error::validation(format!("expected kind=mock|http, got {spec:?}")))?;
        let kind = Kind::parse(kind.trim())
            .ok_or_else(|| Error::validation(format!("unknown backend kind {kind:?}")))?;
        let choice = BackendChoice::parse(choice.trim())
            .ok_or_else(|| Error::validation(format!("unknown backend {choice:?}")))?;
        self.backends.insert(kind.as_str().to_string(), choice);
        Ok(())
    }

    fn all_mock(&self) -> bool {
        Kind::ALL
            .into_iter()
            .all(|k| self.backend_for(k) == BackendChoice::Mock)
    }

    pub fn make_clock(&self) -> Arc<dyn Clock> {
        let simulated = match self.clock {
            ClockChoice::Simulated => true,
            ClockChoice::System => false,
            ClockChoice::Auto => self.all_mock(),
        };
        if simulated {
            Arc::new(SimulatedClock::new())
        } else {
            Arc::new(SystemClock::new())
        }
    }

    /// Builds the backend hub for a run whose directory is `run_dir`.
    pub fn build_backends(&self, run_dir: &Path) -> Result<Backends> {
        let mock: Arc<dyn Backend> = Arc::new(MockBackend::new(self.mock.clone())?);
        let mut hub = Backends::uniform(mock, self.make_clock()).with_retry(self.retry);
        let timeout = Duration::from_secs(self.http_timeout_secs.max(1));
        for kind in Kind::ALL {
            if self.backend_for(kind) == BackendChoice::Http {
                hub = hub.with_route(kind, Arc::new(HttpBackend::from_env(kind, timeout)?));
            }
            if let Some(limit) = self.rate_limit_for(kind) {
                hub = hub.with_rate_limit(kind, limit)?;
            }
        }
        Ok(match self.cache.mode {
            CacheMode::Off => hub,
            CacheMode::Memory => hub.with_cache(Arc::new(MemoryCache::new())),
            CacheMode::Disk => {
                let dir = self
                    .cache
                    .dir
                    .clone()
                    .unwrap_or_else(|| run_dir.join("cache"));
                hub.with_cache(Arc::new(DiskCache::new(dir)?))
            }
        })
    }
}
