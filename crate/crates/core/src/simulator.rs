//! Deterministic replay of a task sequence against a cluster, with per-step
//! metrics, max-pods probing and side-by-side policy comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    Cluster, ImageRef, LayerCatalog, ModelError, NodeId, NodeSpec, NodeState, TaskId, TaskRequest,
};
use crate::scheduler::{schedule_one, FilterVerdict, Policy, Scheduler, SchedulerConfig, TraceStep};
use crate::scoring::std_score;
use crate::workload::{self, TaskStream, WorkloadError, WorkloadKind, WorkloadSpec};

/// Header row of the per-step CSV table.
pub const CSV_HEADER: &str = "step,task,node,download_bytes,download_seconds,cluster_std";

/// A scenario problem, located by the path of the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct ScenarioError {
    pub field: String,
    pub message: String,
}

impl ScenarioError {
    pub fn new(field: impl Into<String>, message: impl ToString) -> Self {
        Self {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A node plus the images already on it when the run starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeSetup {
    pub spec: NodeSpec,
    pub preload: Vec<ImageRef>,
}

impl From<NodeSpec> for NodeSetup {
    fn from(spec: NodeSpec) -> Self {
        Self {
            spec,
            preload: Vec::new(),
        }
    }
}

/// Everything one run needs. The catalog is shared so that comparison legs
/// and sweep points do not copy it.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Name of the scheduler leg, used in comparison tables.
    pub label: String,
    pub nodes: Vec<NodeSetup>,
    pub catalog: Arc<LayerCatalog>,
    pub workload: WorkloadSpec,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    /// Replaces every node's bandwidth, in bytes per second.
    pub bandwidth_override: Option<u64>,
}

impl Scenario {
    pub fn new(
        nodes: Vec<NodeSetup>,
        catalog: Arc<LayerCatalog>,
        workload: WorkloadSpec,
        policy: Policy,
    ) -> Self {
        Self {
            label: policy.as_str().to_string(),
            nodes,
            catalog,
            workload,
            scheduler: SchedulerConfig::new(policy),
            seed: 0,
            bandwidth_override: None,
        }
    }

    /// The same scenario with a different scheduler policy.
    pub fn with_policy(&self, policy: Policy) -> Self {
        let mut s = self.clone();
        s.label = policy.as_str().to_string();
        s.scheduler.policy = policy;
        s
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.nodes.is_empty() {
            return Err(ScenarioError::new("nodes", "at least one node is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            n.spec
                .validate()
                .map_err(|e| ScenarioError::new(format!("nodes[{i}]"), e))?;
            if !seen.insert(&n.spec.id) {
                return Err(ScenarioError::new(
                    format!("nodes[{i}].id"),
                    format!("duplicate node id {}", n.spec.id),
                ));
            }
            for (j, img) in n.preload.iter().enumerate() {
                if !self.catalog.contains_image(img) {
                    return Err(ScenarioError::new(
                        format!("nodes[{i}].preload[{j}]"),
                        format!("unknown image {img}"),
                    ));
                }
            }
        }
        if self.bandwidth_override == Some(0) {
            return Err(ScenarioError::new("bandwidth_override", "must be positive"));
        }
        self.workload
            .validate()
            .map_err(|e| ScenarioError::new("workload", e))?;
        if let Some(weights) = &self.workload.image_weights {
            if let Some(img) = weights.keys().find(|i| !self.catalog.contains_image(i)) {
                return Err(ScenarioError::new(
                    "workload.image_weights",
                    format!("unknown image {img}"),
                ));
            }
        }
        self.scheduler
            .validate()
            .map_err(|e| ScenarioError::new("scheduler", e))?;
        Ok(())
    }

    fn effective_specs(&self) -> Vec<NodeSetup> {
        let mut nodes = self.nodes.clone();
        if let Some(bw) = self.bandwidth_override {
            for n in &mut nodes {
                n.spec.bandwidth = bw;
            }
        }
        nodes
    }

    /// Fresh cluster state with preloaded images in place.
    pub fn build_cluster(&self) -> Result<Cluster, SimError> {
        let mut states = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.effective_specs().into_iter().enumerate() {
            let mut state = NodeState::new(n.spec)?;
            for img in &n.preload {
                state
                    .preload_image(img, &self.catalog)
                    .map_err(|e| ScenarioError::new(format!("nodes[{i}].preload"), e))?;
            }
            states.push(state);
        }
        Ok(Cluster::new(states)?)
    }

    pub fn tasks(&self) -> Result<Vec<TaskRequest>, SimError> {
        Ok(workload::generate(&self.workload, &self.catalog, self.seed)?)
    }

    fn scheduler(&self) -> Result<Scheduler, ScenarioError> {
        Scheduler::new(self.scheduler.clone(), self.seed).map_err(|e| ScenarioError::new("scheduler", e))
    }

    /// Hash over everything except the scheduler: equal for legs that may be
    /// compared with each other.
    pub fn environment_fingerprint(&self, tasks: &[TaskRequest]) -> String {
        let env = serde_json::json!({
            "nodes": self.effective_specs(),
            "catalog": &*self.catalog,
            "tasks": tasks,
            "seed": self.seed,
            "max_pods_workload": self.max_pods_stream_spec(),
        });
        sha256_hex(&env)
    }

    fn fingerprint(&self, env: &str) -> String {
        sha256_hex(&serde_json::json!({ "environment": env, "scheduler": &self.scheduler }))
    }

    fn max_pods_stream_spec(&self) -> Option<&WorkloadSpec> {
        (self.workload.kind == WorkloadKind::Random).then_some(&self.workload)
    }
}

fn sha256_hex(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// Utilisation ratios of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeUsage {
    pub node_id: NodeId,
    pub cpu: f64,
    pub mem: f64,
    /// Stored layer bytes over storage capacity.
    pub disk: f64,
    pub containers: usize,
}

impl NodeUsage {
    fn of(node: &NodeState) -> Self {
        Self {
            node_id: node.id().clone(),
            cpu: node.cpu_committed() as f64 / node.spec.cpu_capacity as f64,
            mem: node.mem_committed() as f64 / node.spec.mem_capacity as f64,
            disk: node.stored_bytes() as f64 / node.spec.storage_capacity as f64,
            containers: node.running().len(),
        }
    }
}

/// Mean over nodes of the per-node CPU/memory imbalance.
pub fn cluster_std(cluster: &Cluster) -> f64 {
    if cluster.is_empty() {
        return 0.0;
    }
    cluster.nodes().iter().map(std_score).sum::<f64>() / cluster.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based position in the trace.
    pub step: usize,
    pub task_id: TaskId,
    /// `None` when the task was unschedulable.
    pub node_id: Option<NodeId>,
    pub download_bytes: u64,
    pub download_seconds: f64,
    pub cluster_std: f64,
    pub usage: Vec<NodeUsage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<FilterVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub tasks: usize,
    pub placed: usize,
    pub unschedulable: usize,
    pub download_bytes: u64,
    pub download_seconds: f64,
    pub mean_cluster_std: f64,
    pub final_cluster_std: f64,
    pub mean_disk_usage: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPods {
    pub per_node: BTreeMap<NodeId, usize>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub label: String,
    pub policy: Policy,
    pub seed: u64,
    pub fingerprint: String,
    pub environment: String,
    pub steps: Vec<StepMetrics>,
    /// Running sum of `download_bytes` after each step.
    pub cumulative_download_bytes: Vec<u64>,
    pub download_bytes_per_node: BTreeMap<NodeId, u64>,
    pub totals: Totals,
    /// Absent for trace-file workloads, which cannot be extended.
    pub max_pods: Option<MaxPods>,
    pub final_usage: Vec<NodeUsage>,
}

impl SimulationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            let node = s.node_id.as_ref().map_or("", NodeId::as_str);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.step, s.task_id, node, s.download_bytes, s.download_seconds, s.cluster_std
            );
        }
        out
    }
}

/// Replays the scenario's workload and records metrics after every task.
pub fn run(scenario: &Scenario) -> Result<SimulationReport, SimError> {
    scenario.validate()?;
    let tasks = scenario.tasks()?;
    let environment = scenario.environment_fingerprint(&tasks);
    let mut cluster = scenario.build_cluster()?;
    let mut scheduler = scenario.scheduler()?;

    let mut steps = Vec::with_capacity(tasks.len());
    let mut cumulative = Vec::with_capacity(tasks.len());
    let mut per_node: BTreeMap<NodeId, u64> = cluster.nodes().iter().map(|n| (n.id().clone(), 0)).collect();
    let mut total_bytes = 0u64;
    let mut total_seconds = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        let step = schedule_one(task, &mut cluster, &scenario.catalog, &mut scheduler)?;
        let (node_id, bytes, seconds, rejected) = match step {
            TraceStep::Placed(p) => (Some(p.node_id), p.download_bytes, p.download_seconds, Vec::new()),
            TraceStep::Unschedulable { verdicts, .. } => (None, 0, 0.0, verdicts),
        };
        if let Some(n) = &node_id {
            *per_node.get_mut(n).expect("known node") += bytes;
        }
        total_bytes += bytes;
        total_seconds += seconds;
        cumulative.push(total_bytes);
        steps.push(StepMetrics {
            step: i + 1,
            task_id: task.task_id.clone(),
            node_id,
            download_bytes: bytes,
            download_seconds: seconds,
            cluster_std: cluster_std(&cluster),
            usage: cluster.nodes().iter().map(NodeUsage::of).collect(),
            rejected,
        });
    }

    let final_usage: Vec<NodeUsage> = cluster.nodes().iter().map(NodeUsage::of).collect();
    let placed = steps.iter().filter(|s| s.node_id.is_some()).count();
    let totals = Totals {
        tasks: steps.len(),
        placed,
        unschedulable: steps.len() - placed,
        download_bytes: total_bytes,
        download_seconds: total_seconds,
        mean_cluster_std: mean(steps.iter().map(|s| s.cluster_std)),
        final_cluster_std: cluster_std(&cluster),
        mean_disk_usage: mean(final_usage.iter().map(|u| u.disk)),
    };
    let max_pods = match scenario.workload.kind {
        WorkloadKind::Random => Some(max_pods(scenario)?),
        WorkloadKind::TraceFile => None,
    };
    Ok(SimulationReport {
        label: scenario.label.clone(),
        policy: scenario.scheduler.policy,
        seed: scenario.seed,
        fingerprint: scenario.fingerprint(&environment),
        environment,
        steps,
        cumulative_download_bytes: cumulative,
        download_bytes_per_node: per_node,
        totals,
        max_pods,
        final_usage,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Deploys generated tasks on a fresh cluster until one fits nowhere, and
/// counts containers per node at that point. The generator is the scenario's
/// own, restarted from its seed.
pub fn max_pods(scenario: &Scenario) -> Result<MaxPods, SimError> {
    scenario.validate()?;
    if scenario.workload.kind != WorkloadKind::Random {
        return Err(ScenarioError::new("workload.kind", "max pods needs a random workload").into());
    }
    let mut cluster = scenario.build_cluster()?;
    let mut scheduler = scenario.scheduler()?;
    let preexisting: usize = cluster.nodes().iter().map(|n| n.running().len()).sum();
    // the container-count filter bounds the loop; this is a backstop
    let cap: usize = cluster
        .nodes()
        .iter()
        .map(|n| n.spec.max_containers as usize)
        .sum::<usize>()
        + 1;
    let stream = TaskStream::new(&scenario.workload, &scenario.catalog, scenario.seed)?;
    for task in stream.take(cap) {
        if let TraceStep::Unschedulable { .. } =
            schedule_one(&task, &mut cluster, &scenario.catalog, &mut scheduler)?
        {
            break;
        }
    }
    let per_node: BTreeMap<NodeId, usize> = cluster
        .nodes()
        .iter()
        .map(|n| (n.id().clone(), n.running().len()))
        .collect();
    let total = per_node.values().sum::<usize>() - preexisting;
    Ok(MaxPods { per_node, total })
}

/// Runs independent scenarios on up to `jobs` threads (0 = one per CPU).
/// Results come back in input order.
pub fn run_many(scenarios: &[Scenario], jobs: usize) -> Vec<Result<SimulationReport, SimError>> {
    let jobs = if jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        jobs
    }
    .min(scenarios.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SimulationReport, SimError>>>> =
        Mutex::new((0..scenarios.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(s) = scenarios.get(i) else { break };
                let r = run(s);
                results.lock().expect("no panics while locked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

#[derive(Debug, Error)]
pub enum ComparisonError {
    #[error("nothing to compare")]
    Empty,
    #[error("duplicate scheduler label {0:?}")]
    DuplicateLabel(String),
    #[error("scheduler {label:?} differs from {first:?} in {field}; compared runs may differ only in the scheduler")]
    Mismatch {
        label: String,
        first: String,
        field: &'static str,
    },
    #[error("scheduler {label:?}: {source}")]
    Run {
        label: String,
        #[source]
        source: SimError,
    },
}

/// Aggregates of one leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub label: String,
    pub policy: Policy,
    pub download_bytes: u64,
    pub download_seconds: f64,
    pub mean_cluster_std: f64,
    pub mean_disk_usage: f64,
    pub max_pods: Option<usize>,
    pub placed: usize,
    pub unschedulable: usize,
}

impl PolicySummary {
    fn of(r: &SimulationReport) -> Self {
        Self {
            label: r.label.clone(),
            policy: r.policy,
            download_bytes: r.totals.download_bytes,
            download_seconds: r.totals.download_seconds,
            mean_cluster_std: r.totals.mean_cluster_std,
            mean_disk_usage: r.totals.mean_disk_usage,
            max_pods: r.max_pods.as_ref().map(|m| m.total),
            placed: r.totals.placed,
            unschedulable: r.totals.unschedulable,
        }
    }
}

/// Percentage change of each aggregate relative to the baseline leg.
/// `None` where the baseline is zero and the value is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDelta {
    pub label: String,
    pub download_bytes_pct: Option<f64>,
    pub download_seconds_pct: Option<f64>,
    pub mean_cluster_std_pct: Option<f64>,
    pub mean_disk_usage_pct: Option<f64>,
    pub max_pods_pct: Option<f64>,
}

pub fn pct_delta(value: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 {
        (value == 0.0).then_some(0.0)
    } else {
        Some((value - baseline) / baseline * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub environment: String,
    pub seed: u64,
    pub baseline: String,
    pub summaries: Vec<PolicySummary>,
    pub deltas: Vec<PolicyDelta>,
    #[serde(skip)]
    pub reports: Vec<SimulationReport>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn summary(&self, label: &str) -> Option<&PolicySummary> {
        self.summaries.iter().find(|s| s.label == label)
    }

    /// One row per leg with the aggregates and deltas.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scheduler,policy,download_bytes,download_seconds,mean_cluster_std,mean_disk_usage,max_pods,\
             download_bytes_pct,download_seconds_pct,mean_cluster_std_pct,max_pods_pct\n",
        );
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for (s, d) in self.summaries.iter().zip(&self.deltas) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                s.label,
                s.policy,
                s.download_bytes,
                s.download_seconds,
                s.mean_cluster_std,
                s.mean_disk_usage,
                s.max_pods.map(|m| m.to_string()).unwrap_or_default(),
                opt(d.download_bytes_pct),
                opt(d.download_seconds_pct),
                opt(d.mean_cluster_std_pct),
                opt(d.max_pods_pct),
            );
        }
        out
    }
}

fn mismatch(a: &Scenario, b: &Scenario) -> Option<&'static str> {
    if a.effective_specs() != b.effective_specs() {
        Some("nodes")
    } else if a.catalog != b.catalog {
        Some("catalog")
    } else if a.workload != b.workload {
        Some("workload")
    } else if a.seed != b.seed {
        Some("seed")
    } else {
        None
    }
}

/// Checks that legs differ only in scheduler configuration and have
/// distinct labels.
pub fn check_comparable(legs: &[Scenario]) -> Result<(), ComparisonError> {
    let first = legs.first().ok_or(ComparisonError::Empty)?;
    let mut labels = BTreeSet::new();
    for leg in legs {
        if !labels.insert(leg.label.as_str()) {
            return Err(ComparisonError::DuplicateLabel(leg.label.clone()));
        }
        if let Some(field) = mismatch(first, leg) {
            return Err(ComparisonError::Mismatch {
                label: leg.label.clone(),
                first: first.label.clone(),
                field,
            });
        }
    }
    Ok(())
}

/// Side-by-side table of finished legs. Deltas are relative to the first
/// `default`-policy leg, or the first leg when there is none.
pub fn tabulate(reports: Vec<SimulationReport>) -> Result<ComparisonReport, ComparisonError> {
    let first = reports.first().ok_or(ComparisonError::Empty)?;
    let summaries: Vec<PolicySummary> = reports.iter().map(PolicySummary::of).collect();
    let base = summaries
        .iter()
        .find(|s| s.policy == Policy::Default)
        .unwrap_or(&summaries[0])
        .clone();
    let deltas = summaries
        .iter()
        .map(|s| PolicyDelta {
            label: s.label.clone(),
            download_bytes_pct: pct_delta(s.download_bytes as f64, base.download_bytes as f64),
            download_seconds_pct: pct_delta(s.download_seconds, base.download_seconds),
            mean_cluster_std_pct: pct_delta(s.mean_cluster_std, base.mean_cluster_std),
            mean_disk_usage_pct: pct_delta(s.mean_disk_usage, base.mean_disk_usage),
            max_pods_pct: match (s.max_pods, base.max_pods) {
                (Some(v), Some(b)) => pct_delta(v as f64, b as f64),
                _ => None,
            },
        })
        .collect();
    Ok(ComparisonReport {
        environment: first.environment.clone(),
        seed: first.seed,
        baseline: base.label,
        summaries,
        deltas,
        reports,
    })
}

/// Runs legs that differ only in scheduler configuration and tabulates them.
pub fn compare(legs: &[Scenario], jobs: usize) -> Result<ComparisonReport, ComparisonError> {
    check_comparable(legs)?;
    let mut reports = Vec::with_capacity(legs.len());
    for (leg, r) in legs.iter().zip(run_many(legs, jobs)) {
        reports.push(r.map_err(|source| ComparisonError::Run {
            label: leg.label.clone(),
            source,
        })?);
    }
    tabulate(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::*;

    fn one_node(bandwidth: u64) -> Vec<NodeSetup> {
        let mut s = spec("n1", 4000, 4000 * MB);
        s.bandwidth = bandwidth;
        vec![s.into()]
    }

    fn single_image_workload(count: usize) -> WorkloadSpec {
        let mut w = WorkloadSpec::random(count);
        w.image_weights = Some([(image("app:1"), 1.0)].into());
        w.cpu_millicores = [100, 100];
        w.mem_bytes = [MB, MB];
        w
    }

    #[test]
    fn preloaded_image_downloads_nothing() {
        let mut nodes = one_node(10 * MB);
        nodes[0].preload.push(image("app:1"));
        let sc = Scenario::new(
            nodes,
            Arc::new(small_catalog()),
            single_image_workload(1),
            Policy::LrDynamic,
        );
        let r = run(&sc).unwrap();
        assert_eq!(r.steps[0].download_bytes, 0);
        assert_eq!(r.steps[0].download_seconds, 0.0);
    }

    #[test]
    fn download_time_is_bytes_over_bandwidth() {
        let mut cat = LayerCatalog::new();
        cat.add_layer(layer("big"), 100 * MB).unwrap();
        cat.add_image(image("app:1"), vec![layer("big")]).unwrap();
        let sc = Scenario::new(
            one_node(10 * MB),
            Arc::new(cat),
            single_image_workload(1),
            Policy::Default,
        );
        let r = run(&sc).unwrap();
        assert_eq!(r.steps[0].download_bytes, 100 * MB);
        assert_eq!(r.steps[0].download_seconds, 10.0);
    }

    #[test]
    fn equal_seeds_give_equal_reports() {
        let mut w = WorkloadSpec::random(30);
        w.mem_bytes = [MB, 100 * MB];
        let nodes = vec![spec("a", 4000, 4 * GB_).into(), spec("b", 2000, 2 * GB_).into()];
        let mut sc = Scenario::new(nodes, Arc::new(small_catalog()), w, Policy::LrDynamic);
        sc.seed = 11;
        let a = run(&sc).unwrap();
        let b = run(&sc).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_csv(), b.to_csv());
        sc.seed = 12;
        assert_ne!(run(&sc).unwrap().fingerprint, a.fingerprint);
    }

    const GB_: u64 = 1000 * MB;

    #[test]
    fn max_pods_bound_by_container_count() {
        let mut nodes = one_node(10 * MB);
        nodes[0].spec.max_containers = 3;
        let sc = Scenario::new(
            nodes,
            Arc::new(small_catalog()),
            single_image_workload(0),
            Policy::Default,
        );
        assert_eq!(max_pods(&sc).unwrap().total, 3);
    }

    #[test]
    fn storage_admits_exactly_two_disjoint_images() {
        let mut cat = LayerCatalog::new();
        for l in ["x", "y", "z"] {
            cat.add_layer(layer(l), 50 * MB).unwrap();
            cat.add_image(image(&format!("{l}:1")), vec![layer(l)]).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let trace: Vec<_> = ["x:1", "y:1", "z:1"]
            .iter()
            .enumerate()
            .map(|(i, img)| task(&format!("t{i}"), img, 100, MB))
            .collect();
        workload::save_trace(&trace, &path).unwrap();
        let mut w = WorkloadSpec::random(0);
        w.kind = WorkloadKind::TraceFile;
        w.path = Some(path);
        let mut nodes = one_node(10 * MB);
        nodes[0].spec.storage_capacity = 100 * MB;
        let r = run(&Scenario::new(nodes, Arc::new(cat), w, Policy::Default)).unwrap();
        assert_eq!(r.totals.placed, 2);
        assert_eq!(
            r.steps[2].rejected[0].rejected_by,
            Some(crate::Constraint::Storage)
        );
        assert!(r.max_pods.is_none());
    }

    #[test]
    fn identical_legs_have_zero_delta() {
        let w = single_image_workload(5);
        let sc = Scenario::new(one_node(10 * MB), Arc::new(small_catalog()), w, Policy::Default);
        let mut twin = sc.clone();
        twin.label = "again".into();
        let cmp = compare(&[sc, twin], 2).unwrap();
        for d in &cmp.deltas {
            assert_eq!(d.download_bytes_pct, Some(0.0));
            assert_eq!(d.download_seconds_pct, Some(0.0));
            assert_eq!(d.mean_cluster_std_pct, Some(0.0));
            assert_eq!(d.max_pods_pct, Some(0.0));
        }
    }

    #[test]
    fn mismatched_legs_are_rejected() {
        let sc = Scenario::new(
            one_node(10 * MB),
            Arc::new(small_catalog()),
            single_image_workload(5),
            Policy::Default,
        );
        let mut other = sc.with_policy(Policy::LrDynamic);
        other.seed = 9;
        assert!(matches!(
            compare(&[sc.clone(), other], 1),
            Err(ComparisonError::Mismatch { field: "seed", .. })
        ));
        assert!(matches!(
            compare(&[sc.clone(), sc], 1),
            Err(ComparisonError::DuplicateLabel(_))
        ));
    }

    #[test]
    fn invalid_scenario_names_field() {
        let sc = Scenario::new(
            Vec::new(),
            Arc::new(small_catalog()),
            single_image_workload(1),
            Policy::Default,
        );
        match run(&sc) {
            Err(SimError::Scenario(e)) => assert_eq!(e.field, "nodes"),
            other => panic!("{other:?}"),
        }
        let mut nodes = one_node(MB);
        nodes[0].preload.push(image("nope:1"));
        let sc = Scenario::new(
            nodes,
            Arc::new(small_catalog()),
            single_image_workload(1),
            Policy::Default,
        );
        match run(&sc) {
            Err(SimError::Scenario(e)) => assert_eq!(e.field, "nodes[0].preload[0]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_has_fixed_header_and_blank_node_for_unschedulable() {
        let mut nodes = one_node(10 * MB);
        nodes[0].spec.max_containers = 1;
        let sc = Scenario::new(
            nodes,
            Arc::new(small_catalog()),
            single_image_workload(2),
            Policy::Default,
        );
        let csv = run(&sc).unwrap().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        let std = (100.0 / 4000.0 - 1.0 / 4000.0) / 2.0;
        assert_eq!(lines[1], format!("1,task-0001,n1,100000000,10,{std}"));
        assert_eq!(lines[2], format!("2,task-0002,,0,0,{std}"));
    }

    #[test]
    fn pct_delta_edges() {
        assert_eq!(pct_delta(0.0, 0.0), Some(0.0));
        assert_eq!(pct_delta(1.0, 0.0), None);
        assert_eq!(pct_delta(75.0, 100.0), Some(-25.0));
    }
}
