//! Filter, score and select: the per-task scheduling pipeline and its
//! sequential application over a task stream.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Cluster, Constraint, LayerCatalog, ModelError, NodeId, NodeState, Placement, TaskId, TaskRequest,
};
use crate::scoring::{score_node, PluginConfig, PolicyError, WeightMode, WeightPolicy};

/// Scores within this distance of the best are treated as tied.
pub const TIE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Baseline plugins only; the layer term is weighted by zero.
    Default,
    /// Fixed layer weight `omega_static`.
    LayerStatic,
    /// Layer weight chosen per node by the gate (or custom rule table).
    LrDynamic,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Default, Policy::LayerStatic, Policy::LrDynamic];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Default => "default",
            Policy::LayerStatic => "layer_static",
            Policy::LrDynamic => "lr_dynamic",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown scheduler {s:?} (expected default, layer_static or lr_dynamic)"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestNodeId,
    RandomSeeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub policy: Policy,
    #[serde(default)]
    pub weights: WeightPolicy,
    #[serde(default)]
    pub plugins: PluginConfig,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl SchedulerConfig {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            weights: WeightPolicy::default(),
            plugins: PluginConfig::default(),
            tie_break: TieBreak::default(),
        }
    }

    /// The weight policy actually applied for this scheduler's policy.
    pub fn effective_weights(&self) -> WeightPolicy {
        match self.policy {
            Policy::Default => WeightPolicy::fixed(0.0),
            Policy::LayerStatic => WeightPolicy::fixed(self.weights.omega_static),
            Policy::LrDynamic => WeightPolicy {
                mode: if self.weights.mode == WeightMode::Custom {
                    WeightMode::Custom
                } else {
                    WeightMode::Dynamic
                },
                ..self.weights.clone()
            },
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        self.effective_weights().validate()?;
        self.plugins.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub node_id: NodeId,
    pub feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejected_by: Option<Constraint>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("task {task} is unschedulable: {}", describe(.verdicts))]
    Unschedulable {
        task: TaskId,
        verdicts: Vec<FilterVerdict>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn describe(verdicts: &[FilterVerdict]) -> String {
    if verdicts.is_empty() {
        return "no nodes".into();
    }
    verdicts
        .iter()
        .map(|v| format!("{}={}", v.node_id, v.rejected_by.map_or("ok", Constraint::as_str)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Storage, container count, CPU and memory fit, in that order.
pub fn filter(
    node: &NodeState,
    task: &TaskRequest,
    catalog: &LayerCatalog,
) -> Result<FilterVerdict, ModelError> {
    let rejected_by = node.check_fit(task, catalog)?;
    Ok(FilterVerdict {
        node_id: node.id().clone(),
        feasible: rejected_by.is_none(),
        rejected_by,
    })
}

/// A configured scheduler. Holds the tie-break RNG, so repeated runs with the
/// same seed make identical choices.
#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    weights: WeightPolicy,
    rng: ChaCha8Rng,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        Ok(Self {
            weights: config.effective_weights(),
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    /// Picks a node for `task`. `nodes` must be sorted by id (as [`Cluster`]
    /// keeps them) for the lowest-id tie-break to mean what it says.
    pub fn schedule(
        &mut self,
        task: &TaskRequest,
        nodes: &[NodeState],
        catalog: &LayerCatalog,
    ) -> Result<Placement, ScheduleError> {
        task.validate()?;
        let mut verdicts = Vec::with_capacity(nodes.len());
        let mut scored = Vec::new();
        for node in nodes {
            let verdict = filter(node, task, catalog)?;
            if verdict.feasible {
                let breakdown = score_node(catalog, node, task, &self.weights, &self.config.plugins)?;
                scored.push((node, breakdown));
            }
            verdicts.push(verdict);
        }
        let best = scored
            .iter()
            .map(|(_, b)| b.final_score)
            .fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..scored.len())
            .filter(|&i| scored[i].1.final_score >= best - TIE_EPSILON)
            .collect();
        let pick = match self.config.tie_break {
            TieBreak::LowestNodeId => tied.first().copied(),
            TieBreak::RandomSeeded => tied.choose(&mut self.rng).copied(),
        };
        let Some(pick) = pick else {
            return Err(ScheduleError::Unschedulable {
                task: task.task_id.clone(),
                verdicts,
            });
        };
        let (node, chosen) = scored[pick];
        Ok(Placement {
            task_id: task.task_id.clone(),
            node_id: node.id().clone(),
            download_bytes: chosen.download_bytes,
            download_seconds: chosen.download_bytes as f64 / node.spec.bandwidth as f64,
            scores: scored
                .iter()
                .map(|(n, b)| (n.id().clone(), *b))
                .collect::<BTreeMap<_, _>>(),
        })
    }
}

/// Outcome of one task in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TraceStep {
    Placed(Placement),
    Unschedulable {
        task_id: TaskId,
        verdicts: Vec<FilterVerdict>,
    },
}

impl TraceStep {
    pub fn placement(&self) -> Option<&Placement> {
        match self {
            TraceStep::Placed(p) => Some(p),
            TraceStep::Unschedulable { .. } => None,
        }
    }
}

/// Schedules `tasks` in order, committing each placement to `cluster` before
/// the next task is considered. Unschedulable tasks are recorded and skipped.
pub fn schedule_trace(
    tasks: &[TaskRequest],
    cluster: &mut Cluster,
    catalog: &LayerCatalog,
    scheduler: &mut Scheduler,
) -> Result<Vec<TraceStep>, ModelError> {
    let mut steps = Vec::with_capacity(tasks.len());
    schedule_trace_with(tasks, cluster, catalog, scheduler, |step, _| {
        steps.push(step.clone())
    })?;
    Ok(steps)
}

/// Like [`schedule_trace`], calling `observe` after each task with the step
/// and the cluster state it produced.
pub fn schedule_trace_with(
    tasks: &[TaskRequest],
    cluster: &mut Cluster,
    catalog: &LayerCatalog,
    scheduler: &mut Scheduler,
    mut observe: impl FnMut(&TraceStep, &Cluster),
) -> Result<(), ModelError> {
    for task in tasks {
        let step = schedule_one(task, cluster, catalog, scheduler)?;
        observe(&step, cluster);
    }
    Ok(())
}

/// Schedules and commits a single task.
pub fn schedule_one(
    task: &TaskRequest,
    cluster: &mut Cluster,
    catalog: &LayerCatalog,
    scheduler: &mut Scheduler,
) -> Result<TraceStep, ModelError> {
    match scheduler.schedule(task, cluster.nodes(), catalog) {
        Ok(placement) => {
            let node = cluster
                .node_mut(&placement.node_id)
                .expect("placement names a cluster node");
            let pulled = node.commit_placement(task, catalog)?;
            debug_assert_eq!(pulled, placement.download_bytes);
            Ok(TraceStep::Placed(placement))
        }
        Err(ScheduleError::Unschedulable { task, verdicts }) => Ok(TraceStep::Unschedulable {
            task_id: task,
            verdicts,
        }),
        Err(ScheduleError::Model(e)) => Err(e),
    }
}
