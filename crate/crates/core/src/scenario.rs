//! The TOML scenario file: cluster, catalog source, workload, scheduler legs,
//! sweeps, seeds and output location.
//!
//! ```toml
//! seeds = [1, 2, 3]
//!
//! [catalog]
//! fixture = "images20.json"
//!
//! [[nodes]]
//! id = "edge-1"
//! cpu_capacity = 4000
//! mem_capacity = "4GB"
//! bandwidth = "12.5MB/s"
//! storage_capacity = "30GB"
//! max_containers = 110
//!
//! [workload]
//! kind = "random"
//! count = 50
//!
//! [[schedulers]]
//! policy = "default"
//!
//! [[schedulers]]
//! policy = "lr_dynamic"
//!
//! [sweeps]
//! bandwidth = ["25MB/s", "12.5MB/s"]
//! node_count = [2, 4]
//! ```
//!
//! Relative paths are resolved against the scenario file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use url::Url;

use crate::model::{ImageRef, LayerCatalog, LayerId, NodeId, NodeSpec};
use crate::registry::{self, catalog_from_cache, Fixture, RegistryClient, RegistryConfig};
use crate::scheduler::{Policy, SchedulerConfig, TieBreak};
use crate::scoring::{PluginConfig, WeightPolicy};
use crate::simulator::{NodeSetup, Scenario, ScenarioError};
use crate::units::{de_size, de_size_opt, de_size_vec};
use crate::workload::WorkloadSpec;

/// Environment variable that replaces `registry.url`.
pub const ENV_REGISTRY_URL: &str = "LRSCHED_REGISTRY_URL";
/// Environment variable that replaces `output.dir`.
pub const ENV_OUTPUT_DIR: &str = "LRSCHED_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub nodes: Vec<NodeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<RegistrySource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<CatalogSource>,
    pub workload: WorkloadSpec,
    pub schedulers: Vec<SchedulerEntry>,
    #[serde(default)]
    pub sweeps: Sweeps,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(
        default,
        deserialize_with = "de_size_opt",
        skip_serializing_if = "Option::is_none"
    )]
    pub bandwidth_override: Option<u64>,
    #[serde(default)]
    pub output: Output,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: NodeId,
    pub cpu_capacity: u64,
    #[serde(deserialize_with = "de_size")]
    pub mem_capacity: u64,
    #[serde(deserialize_with = "de_size")]
    pub bandwidth: u64,
    #[serde(deserialize_with = "de_size")]
    pub storage_capacity: u64,
    #[serde(default = "default_max_containers")]
    pub max_containers: u32,
    #[serde(default)]
    pub preload: Vec<ImageRef>,
}

fn default_max_containers() -> u32 {
    110
}

impl NodeEntry {
    fn setup(&self) -> NodeSetup {
        NodeSetup {
            spec: NodeSpec {
                id: self.id.clone(),
                cpu_capacity: self.cpu_capacity,
                mem_capacity: self.mem_capacity,
                bandwidth: self.bandwidth,
                storage_capacity: self.storage_capacity,
                max_containers: self.max_containers,
            },
            preload: self.preload.clone(),
        }
    }
}

/// A live registry, read through its `cache.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrySource {
    pub url: String,
    #[serde(default = "default_cache")]
    pub cache: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name_prefix: Option<String>,
}

fn default_cache() -> PathBuf {
    PathBuf::from("cache.json")
}

/// Exactly one of the three fields.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogSource {
    /// A `cache.json` written by `fetch-registry`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    /// A registry fixture (the fake registry's image table).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlineCatalog>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineCatalog {
    pub layers: BTreeMap<LayerId, InlineSize>,
    pub images: BTreeMap<ImageRef, Vec<LayerId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InlineSize(#[serde(deserialize_with = "de_size")] pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerEntry {
    /// Defaults to the policy name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub policy: Policy,
    #[serde(default)]
    pub weights: WeightPolicy,
    #[serde(default)]
    pub plugins: PluginConfig,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl SchedulerEntry {
    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.policy.as_str().to_string())
    }

    fn config(&self) -> SchedulerConfig {
        SchedulerConfig {
            policy: self.policy,
            weights: self.weights.clone(),
            plugins: self.plugins.clone(),
            tie_break: self.tie_break,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweeps {
    #[serde(default, deserialize_with = "de_size_vec")]
    pub bandwidth: Vec<u64>,
    #[serde(default)]
    pub node_count: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Output {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

impl Default for Output {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// One sweep point: either a bandwidth override or a node-count prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "param", content = "value", rename_all = "snake_case")]
pub enum SweepPoint {
    Bandwidth(u64),
    Nodes(usize),
}

/// A parsed scenario file together with the directory it came from.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub file: ScenarioFile,
    pub base_dir: PathBuf,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let de = toml::Deserializer::new(text);
        let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            ScenarioError::new(field, e.into_inner().message().trim())
        })?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<LoadedScenario, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::new("<file>", format!("{}: {e}", path.display())))?;
        let file = Self::parse(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedScenario { file, base_dir })
    }

    /// Structural checks that do not need the catalog.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.nodes.is_empty() {
            return Err(ScenarioError::new("nodes", "at least one node is required"));
        }
        match (&self.registry, &self.catalog) {
            (Some(_), Some(_)) => {
                return Err(ScenarioError::new(
                    "catalog",
                    "give either registry or catalog, not both",
                ))
            }
            (None, None) => {
                return Err(ScenarioError::new(
                    "catalog",
                    "a registry or catalog source is required",
                ))
            }
            (None, Some(c)) => {
                let n = [c.cache.is_some(), c.fixture.is_some(), c.inline.is_some()]
                    .iter()
                    .filter(|b| **b)
                    .count();
                if n != 1 {
                    return Err(ScenarioError::new(
                        "catalog",
                        "set exactly one of cache, fixture, inline",
                    ));
                }
            }
            (Some(_), None) => {}
        }
        if self.schedulers.is_empty() {
            return Err(ScenarioError::new(
                "schedulers",
                "at least one scheduler is required",
            ));
        }
        let mut labels = std::collections::BTreeSet::new();
        for (i, s) in self.schedulers.iter().enumerate() {
            if !labels.insert(s.label()) {
                return Err(ScenarioError::new(
                    format!("schedulers[{i}].name"),
                    format!("duplicate name {}", s.label()),
                ));
            }
            s.config()
                .validate()
                .map_err(|e| ScenarioError::new(format!("schedulers[{i}]"), e))?;
        }
        if self.seeds.is_empty() {
            return Err(ScenarioError::new("seeds", "at least one seed is required"));
        }
        if let Some(i) = self.sweeps.bandwidth.iter().position(|b| *b == 0) {
            return Err(ScenarioError::new(
                format!("sweeps.bandwidth[{i}]"),
                "must be positive",
            ));
        }
        if let Some(i) = self.sweeps.node_count.iter().position(|n| *n == 0) {
            return Err(ScenarioError::new(
                format!("sweeps.node_count[{i}]"),
                "must be positive",
            ));
        }
        Ok(())
    }

    pub fn scheduler(&self, name: &str) -> Option<&SchedulerEntry> {
        self.schedulers.iter().find(|s| s.label() == name)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Builds a catalog from a registry fixture file.
pub fn catalog_from_fixture(fixture: &Fixture) -> Result<LayerCatalog, String> {
    let mut cat = LayerCatalog::new();
    for img in &fixture.images {
        let mut layers = Vec::with_capacity(img.layers.len());
        for l in &img.layers {
            let id = LayerId::new(l.digest.clone()).map_err(|e| e.to_string())?;
            let size = u64::try_from(l.size).map_err(|_| format!("layer {} has negative size", l.digest))?;
            cat.add_layer(id.clone(), size).map_err(|e| e.to_string())?;
            layers.push(id);
        }
        let image = ImageRef::new(img.name.clone(), img.tag.clone()).map_err(|e| e.to_string())?;
        cat.add_image(image, layers).map_err(|e| e.to_string())?;
    }
    Ok(cat)
}

impl LoadedScenario {
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(ENV_OUTPUT_DIR) {
            Some(dir) => PathBuf::from(dir),
            None => resolve(&self.base_dir, &self.file.output.dir),
        }
    }

    /// Loads the layer catalog. A registry source is refreshed once; an
    /// unreachable registry falls back to its cache with a warning.
    pub fn catalog(&self) -> Result<(Arc<LayerCatalog>, Vec<String>), ScenarioError> {
        let mut warnings = Vec::new();
        let cat = if let Some(reg) = &self.file.registry {
            let raw = std::env::var(ENV_REGISTRY_URL).unwrap_or_else(|_| reg.url.clone());
            let url = Url::parse(&raw).map_err(|e| ScenarioError::new("registry.url", e))?;
            let mut cfg = RegistryConfig::new(url);
            cfg.cache_path = resolve(&self.base_dir, &reg.cache);
            cfg.name_prefix = reg.name_prefix.clone();
            let snap = RegistryClient::http(cfg)
                .refresh_cache()
                .map_err(|e| ScenarioError::new("registry", e))?;
            if snap.stale {
                warnings.push("registry unreachable; using stale cache".to_string());
            }
            warnings.extend(snap.warnings);
            catalog_from_cache(&snap.lists).map_err(|e| ScenarioError::new("registry.cache", e))?
        } else {
            let src = self.file.catalog.as_ref().expect("validated");
            if let Some(p) = &src.cache {
                let lists = registry::load_cache(&resolve(&self.base_dir, p))
                    .map_err(|e| ScenarioError::new("catalog.cache", e))?;
                catalog_from_cache(&lists).map_err(|e| ScenarioError::new("catalog.cache", e))?
            } else if let Some(p) = &src.fixture {
                let fx = Fixture::load(&resolve(&self.base_dir, p))
                    .map_err(|e| ScenarioError::new("catalog.fixture", e))?;
                catalog_from_fixture(&fx).map_err(|e| ScenarioError::new("catalog.fixture", e))?
            } else {
                let inline = src.inline.as_ref().expect("validated");
                let mut cat = LayerCatalog::new();
                for (id, size) in &inline.layers {
                    cat.add_layer(id.clone(), size.0)
                        .map_err(|e| ScenarioError::new(format!("catalog.inline.layers.{id}"), e))?;
                }
                for (img, layers) in &inline.images {
                    cat.add_image(img.clone(), layers.clone())
                        .map_err(|e| ScenarioError::new(format!("catalog.inline.images.{img}"), e))?;
                }
                cat
            }
        };
        Ok((Arc::new(cat), warnings))
    }

    /// One scenario per configured scheduler, for one seed.
    pub fn legs(&self, catalog: &Arc<LayerCatalog>, seed: u64) -> Result<Vec<Scenario>, ScenarioError> {
        let mut workload = self.file.workload.clone();
        if let Some(p) = &workload.path {
            workload.path = Some(resolve(&self.base_dir, p));
        }
        let nodes: Vec<NodeSetup> = self.file.nodes.iter().map(NodeEntry::setup).collect();
        let legs: Vec<Scenario> = self
            .file
            .schedulers
            .iter()
            .map(|s| Scenario {
                label: s.label(),
                nodes: nodes.clone(),
                catalog: Arc::clone(catalog),
                workload: workload.clone(),
                scheduler: s.config(),
                seed,
                bandwidth_override: self.file.bandwidth_override,
            })
            .collect();
        legs[0].validate()?;
        Ok(legs)
    }

    /// The legs adjusted for one sweep point.
    pub fn legs_at(
        &self,
        catalog: &Arc<LayerCatalog>,
        seed: u64,
        point: SweepPoint,
    ) -> Result<Vec<Scenario>, ScenarioError> {
        let mut legs = self.legs(catalog, seed)?;
        for leg in &mut legs {
            match point {
                SweepPoint::Bandwidth(bw) => leg.bandwidth_override = Some(bw),
                SweepPoint::Nodes(n) => {
                    if n > leg.nodes.len() {
                        return Err(ScenarioError::new(
                            "sweeps.node_count",
                            format!("{n} nodes requested but only {} defined", leg.nodes.len()),
                        ));
                    }
                    leg.nodes.truncate(n);
                }
            }
        }
        Ok(legs)
    }

    pub fn sweep_points(&self, param: SweepParam) -> Vec<SweepPoint> {
        match param {
            SweepParam::Bandwidth => self
                .file
                .sweeps
                .bandwidth
                .iter()
                .map(|b| SweepPoint::Bandwidth(*b))
                .collect(),
            SweepParam::Nodes => self
                .file
                .sweeps
                .node_count
                .iter()
                .map(|n| SweepPoint::Nodes(*n))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Bandwidth,
    Nodes,
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bandwidth" => Ok(Self::Bandwidth),
            "nodes" | "node_count" => Ok(Self::Nodes),
            _ => Err(format!(
                "unknown sweep parameter {s:?} (expected bandwidth or nodes)"
            )),
        }
    }
}
