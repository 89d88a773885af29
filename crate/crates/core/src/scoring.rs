//! Node scoring.
//!
//! A node's final score for a task is `omega * layer_score + baseline_score`,
//! where the layer score is the share of the image's bytes already cached on
//! the node (0..=100) and the baseline is the default scheduler's opinion
//! (0..=100 with unit plugin weights). `omega` is either fixed or chosen per
//! node by a gate that looks at cached bytes, CPU load and CPU/memory balance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageRef, LayerCatalog, ModelError, NodeState, TaskRequest};
use crate::units::MB;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid weight policy: {0}")]
pub struct PolicyError(pub String);

/// Bytes of `image` that `node` would have to download (layers it lacks).
pub fn download_cost(catalog: &LayerCatalog, node: &NodeState, image: &ImageRef) -> Result<u64, ModelError> {
    let missing = node.missing_layers(catalog.image_layers(image)?);
    Ok(catalog.bytes_of(&missing))
}

/// Bytes of `image` already present on `node`.
pub fn local_layer_size(
    catalog: &LayerCatalog,
    node: &NodeState,
    image: &ImageRef,
) -> Result<u64, ModelError> {
    let layers = catalog.image_layers(image)?;
    Ok(catalog.bytes_of(layers.iter().filter(|l| node.local_layers().contains(*l))))
}

/// Percentage of the image's bytes already cached on the node. An image with
/// no layers scores 0.
pub fn layer_score(catalog: &LayerCatalog, node: &NodeState, image: &ImageRef) -> Result<f64, ModelError> {
    let total = catalog.image_size(image)?;
    let local = local_layer_size(catalog, node, image)?;
    Ok(layer_score_from_bytes(local, total))
}

pub fn layer_score_from_bytes(local: u64, total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    local as f64 / total as f64 * 100.0
}

/// Half the absolute gap between CPU and memory commitment ratios.
pub fn std_score(node: &NodeState) -> f64 {
    balance_gap(
        node.cpu_committed(),
        node.spec.cpu_capacity,
        node.mem_committed(),
        node.spec.mem_capacity,
    )
}

fn balance_gap(cpu: u64, cpu_cap: u64, mem: u64, mem_cap: u64) -> f64 {
    (cpu as f64 / cpu_cap as f64 - mem as f64 / mem_cap as f64).abs() / 2.0
}

/// Fraction of CPU capacity committed.
pub fn cpu_score(node: &NodeState) -> f64 {
    node.cpu_committed() as f64 / node.spec.cpu_capacity as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Static,
    Dynamic,
    Custom,
}

/// One row of a custom weight table. All present conditions must hold (with
/// the same strict comparisons as the dynamic gate) for the row to match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightRule {
    /// Matches when local layer bytes are strictly greater.
    #[serde(default)]
    pub local_bytes_above: Option<u64>,
    /// Matches when the CPU score is strictly lower.
    #[serde(default)]
    pub cpu_below: Option<f64>,
    /// Matches when the balance score is strictly lower.
    #[serde(default)]
    pub std_below: Option<f64>,
    pub omega: f64,
}

impl WeightRule {
    fn matches(&self, inputs: &GateInputs) -> bool {
        self.local_bytes_above
            .is_none_or(|h| inputs.local_layer_bytes > h)
            && self.cpu_below.is_none_or(|h| inputs.cpu_score < h)
            && self.std_below.is_none_or(|h| inputs.std_score < h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightPolicy {
    pub mode: WeightMode,
    pub omega_static: f64,
    pub omega_high: f64,
    pub omega_low: f64,
    /// Bytes.
    pub h_size: u64,
    pub h_cpu: f64,
    pub h_std: f64,
    /// Evaluated top to bottom in `custom` mode; `omega_low` if none match.
    pub rules: Vec<WeightRule>,
}

impl Default for WeightPolicy {
    fn default() -> Self {
        Self {
            mode: WeightMode::Dynamic,
            omega_static: 4.0,
            omega_high: 2.0,
            omega_low: 0.5,
            h_size: 10 * MB,
            h_cpu: 0.6,
            h_std: 0.16,
            rules: Vec::new(),
        }
    }
}

/// Per-node values the weight gate looks at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateInputs {
    pub local_layer_bytes: u64,
    pub cpu_score: f64,
    pub std_score: f64,
}

impl WeightPolicy {
    pub fn fixed(omega: f64) -> Self {
        Self {
            mode: WeightMode::Static,
            omega_static: omega,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let finite = [
            self.omega_static,
            self.omega_high,
            self.omega_low,
            self.h_cpu,
            self.h_std,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError("weights and thresholds must be finite".into()));
        }
        if self.omega_static < 0.0 {
            return Err(PolicyError("omega_static must be >= 0".into()));
        }
        if !(self.omega_high >= self.omega_low && self.omega_low >= 0.0) {
            return Err(PolicyError("need omega_high >= omega_low >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.h_cpu) {
            return Err(PolicyError("h_cpu must lie in [0, 1]".into()));
        }
        if !(0.0..=0.5).contains(&self.h_std) {
            return Err(PolicyError("h_std must lie in [0, 0.5]".into()));
        }
        if self.mode == WeightMode::Custom && self.rules.is_empty() {
            return Err(PolicyError("custom mode needs at least one rule".into()));
        }
        if self.rules.iter().any(|r| !r.omega.is_finite() || r.omega < 0.0) {
            return Err(PolicyError("rule omega must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Returns the gate value and the weight to apply to the layer score.
    pub fn choose(&self, inputs: &GateInputs) -> (u8, f64) {
        match self.mode {
            WeightMode::Static => (0, self.omega_static),
            WeightMode::Dynamic => {
                let gate = weight_gate(self, inputs.local_layer_bytes, inputs.cpu_score, inputs.std_score);
                (
                    gate,
                    if gate == 1 {
                        self.omega_high
                    } else {
                        self.omega_low
                    },
                )
            }
            WeightMode::Custom => match self.rules.iter().find(|r| r.matches(inputs)) {
                Some(rule) => (1, rule.omega),
                None => (0, self.omega_low),
            },
        }
    }
}

/// 1 when the node already holds more than `h_size` bytes of the image, is
/// below `h_cpu` CPU commitment and below `h_std` imbalance; 0 otherwise.
pub fn weight_gate(policy: &WeightPolicy, local_layer_bytes: u64, cpu_score: f64, std_score: f64) -> u8 {
    u8::from(local_layer_bytes > policy.h_size)
        * u8::from(cpu_score < policy.h_cpu)
        * u8::from(std_score < policy.h_std)
}

/// `omega * layer_score + baseline`.
pub fn final_score(omega: f64, layer_score: f64, baseline: f64) -> f64 {
    omega * layer_score + baseline
}

/// Default-scheduler score plugins that fit this model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePlugin {
    /// Mean free CPU/memory fraction after placement, times 100.
    LeastAllocated,
    /// 100 minus the post-placement CPU/memory utilization gap.
    BalancedAllocation,
    /// 100 when the exact image is already on the node.
    ImageLocality,
}

impl BaselinePlugin {
    pub fn score(self, node: &NodeState, task: &TaskRequest) -> f64 {
        let spec = &node.spec;
        match self {
            BaselinePlugin::LeastAllocated => {
                let free = |cap: u64, used: u64, req: u64| cap.saturating_sub(used + req) as f64 / cap as f64;
                let cpu = free(spec.cpu_capacity, node.cpu_committed(), task.cpu_request);
                let mem = free(spec.mem_capacity, node.mem_committed(), task.mem_request);
                (cpu + mem) / 2.0 * 100.0
            }
            BaselinePlugin::BalancedAllocation => {
                let std_after = balance_gap(
                    node.cpu_committed() + task.cpu_request,
                    spec.cpu_capacity,
                    node.mem_committed() + task.mem_request,
                    spec.mem_capacity,
                );
                (1.0 - 2.0 * std_after) * 100.0
            }
            BaselinePlugin::ImageLocality => {
                if node.local_images().contains(&task.image) {
                    100.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginWeight {
    pub plugin: BaselinePlugin,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Enabled baseline plugins. The combined score is the weighted sum divided
/// by the number of enabled plugins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PluginConfig(pub Vec<PluginWeight>);

impl Default for PluginConfig {
    fn default() -> Self {
        PluginConfig(
            [
                BaselinePlugin::LeastAllocated,
                BaselinePlugin::BalancedAllocation,
                BaselinePlugin::ImageLocality,
            ]
            .into_iter()
            .map(|plugin| PluginWeight { plugin, weight: 1.0 })
            .collect(),
        )
    }
}

impl PluginConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.0.iter().any(|p| !p.weight.is_finite() || p.weight < 0.0) {
            return Err(PolicyError("plugin weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

pub fn baseline_score(node: &NodeState, task: &TaskRequest, plugins: &PluginConfig) -> f64 {
    if plugins.0.is_empty() {
        return 0.0;
    }
    let sum: f64 = plugins
        .0
        .iter()
        .map(|p| p.weight * p.plugin.score(node, task))
        .sum();
    sum / plugins.0.len() as f64
}

/// Everything that went into one node's score for one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub layer_score: f64,
    pub baseline_score: f64,
    pub std_score: f64,
    pub cpu_score: f64,
    pub weight_gate: u8,
    pub omega_used: f64,
    #[serde(rename = "final")]
    pub final_score: f64,
    pub local_layer_bytes: u64,
    pub download_bytes: u64,
}

/// Scores `node` for `task` under `policy`.
pub fn score_node(
    catalog: &LayerCatalog,
    node: &NodeState,
    task: &TaskRequest,
    policy: &WeightPolicy,
    plugins: &PluginConfig,
) -> Result<ScoreBreakdown, ModelError> {
    let total = catalog.image_size(&task.image)?;
    let local = local_layer_size(catalog, node, &task.image)?;
    let layer = layer_score_from_bytes(local, total);
    let inputs = GateInputs {
        local_layer_bytes: local,
        cpu_score: cpu_score(node),
        std_score: std_score(node),
    };
    let (gate, omega) = policy.choose(&inputs);
    let baseline = baseline_score(node, task, plugins);
    Ok(ScoreBreakdown {
        layer_score: layer,
        baseline_score: baseline,
        std_score: inputs.std_score,
        cpu_score: inputs.cpu_score,
        weight_gate: gate,
        omega_used: omega,
        final_score: final_score(omega, layer, baseline),
        local_layer_bytes: local,
        download_bytes: total - local,
    })
}
