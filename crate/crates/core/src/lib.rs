//! Layer-aware, resource-adaptive container scheduling for edge clusters.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] – layers, images, nodes, tasks and the placement state transition.
//! * [`scoring`] – download cost, layer-sharing score, baseline plugins, the
//!   dynamic weight gate and the blended final score.
//! * [`scheduler`] – filter, score and argmax selection, applied per task or
//!   over a whole trace.
//! * [`registry`] – Docker Registry v2 metadata client and the `cache.json`
//!   metadata cache.
//! * [`workload`] – seeded task generation and JSON-lines trace files.
//! * [`simulator`] – deterministic trace replay with per-step metrics,
//!   max-pods probing and policy comparison.
//! * [`scenario`] – the TOML scenario file used by the CLI.

pub mod model;
pub mod registry;
pub mod scenario;
pub mod scheduler;
pub mod scoring;
pub mod simulator;
pub mod units;
pub mod workload;

pub use model::{
    Cluster, Constraint, ImageRef, LayerCatalog, LayerId, ModelError, NodeId, NodeSpec, NodeState, Placement,
    TaskId, TaskRequest,
};
pub use scheduler::{Policy, Scheduler, SchedulerConfig};
pub use scoring::{ScoreBreakdown, WeightPolicy};
