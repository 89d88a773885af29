//! Domain model: layers, images, nodes, tasks and placements.
//!
//! Everything here is a plain value type. The only state transition is
//! [`NodeState::commit_placement`], which the scheduler calls after a node has
//! been chosen for a task.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::ScoreBreakdown;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown image {0}")]
    UnknownImage(ImageRef),
    #[error("image {image} references unknown layer {layer}")]
    UnknownLayer { image: ImageRef, layer: LayerId },
    #[error("image {image} lists layer {layer} more than once")]
    DuplicateLayer { image: ImageRef, layer: LayerId },
    #[error("layer {layer} registered with size {existing} and {conflicting}")]
    DigestSizeConflict {
        layer: LayerId,
        existing: u64,
        conflicting: u64,
    },
    #[error("layer {0} has zero size")]
    ZeroSizedLayer(LayerId),
    #[error("invalid identifier: {0}")]
    InvalidId(String),
    #[error("invalid image reference {0:?}")]
    InvalidImageRef(String),
    #[error("node spec {node}: {field} must be positive")]
    InvalidNodeSpec { node: NodeId, field: &'static str },
    #[error("task {task}: {field} is invalid")]
    InvalidTask { task: TaskId, field: &'static str },
    #[error("node id {0} appears more than once")]
    DuplicateNode(NodeId),
    #[error("placing task {task} on node {node} violates {constraint}")]
    CapacityViolation {
        node: NodeId,
        task: TaskId,
        constraint: Constraint,
    },
}

/// The feasibility constraints checked before a container may land on a node,
/// in the order they are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Storage,
    ContainerCount,
    CpuFit,
    MemFit,
}

impl Constraint {
    pub fn as_str(self) -> &'static str {
        match self {
            Constraint::Storage => "storage",
            Constraint::ContainerCount => "container_count",
            Constraint::CpuFit => "cpu_fit",
            Constraint::MemFit => "mem_fit",
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Result<Self, ModelError> {
                let id = id.into();
                if id.is_empty() {
                    return Err(ModelError::InvalidId(stringify!($name).to_string()));
                }
                Ok(Self(id))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = ModelError;
            fn try_from(s: String) -> Result<Self, Self::Error> {
                Self::new(s)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

string_id!(
    /// Content digest of a layer, e.g. `sha256:4f4fb700ef54...`.
    LayerId
);
string_id!(NodeId);
string_id!(TaskId);

/// An image reference, `name:tag`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageRef {
    name: String,
    tag: String,
}

impl ImageRef {
    pub fn new(name: impl Into<String>, tag: impl Into<String>) -> Result<Self, ModelError> {
        let (name, tag) = (name.into(), tag.into());
        if name.is_empty() || tag.is_empty() {
            return Err(ModelError::InvalidImageRef(format!("{name}:{tag}")));
        }
        Ok(Self { name, tag })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.tag)
    }
}

impl FromStr for ImageRef {
    type Err = ModelError;

    /// Splits on the last `:` that follows the last `/`, so `host:5000/redis:7`
    /// parses as name `host:5000/redis`, tag `7`. A missing tag means `latest`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let path_start = s.rfind('/').map_or(0, |i| i + 1);
        match s[path_start..].rfind(':') {
            Some(i) => ImageRef::new(&s[..path_start + i], &s[path_start + i + 1..]),
            None => ImageRef::new(s, "latest"),
        }
        .map_err(|_| ModelError::InvalidImageRef(s.to_string()))
    }
}

impl Serialize for ImageRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ImageRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The universe of layers with their sizes, and every known image as an
/// ordered layer list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LayerCatalog {
    layers: BTreeMap<LayerId, u64>,
    images: BTreeMap<ImageRef, Vec<LayerId>>,
}

impl LayerCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a layer. Re-registering the same digest with the same size is
    /// a no-op; with a different size it is a conflict.
    pub fn add_layer(&mut self, id: LayerId, size: u64) -> Result<(), ModelError> {
        if size == 0 {
            return Err(ModelError::ZeroSizedLayer(id));
        }
        match self.layers.get(&id) {
            Some(&existing) if existing != size => Err(ModelError::DigestSizeConflict {
                layer: id,
                existing,
                conflicting: size,
            }),
            Some(_) => Ok(()),
            None => {
                self.layers.insert(id, size);
                Ok(())
            }
        }
    }

    /// Registers an image whose layers must already be known.
    pub fn add_image(&mut self, image: ImageRef, layers: Vec<LayerId>) -> Result<(), ModelError> {
        let mut seen = BTreeSet::new();
        for layer in &layers {
            if !self.layers.contains_key(layer) {
                return Err(ModelError::UnknownLayer {
                    image,
                    layer: layer.clone(),
                });
            }
            if !seen.insert(layer) {
                return Err(ModelError::DuplicateLayer {
                    image,
                    layer: layer.clone(),
                });
            }
        }
        self.images.insert(image, layers);
        Ok(())
    }

    pub fn layer_size(&self, id: &LayerId) -> Option<u64> {
        self.layers.get(id).copied()
    }

    pub fn contains_image(&self, image: &ImageRef) -> bool {
        self.images.contains_key(image)
    }

    /// The image's layers with their sizes, in manifest order.
    pub fn layers_of(&self, image: &ImageRef) -> Result<Vec<(LayerId, u64)>, ModelError> {
        Ok(self
            .image_layers(image)?
            .iter()
            .map(|l| (l.clone(), self.layers[l]))
            .collect())
    }

    pub fn image_layers(&self, image: &ImageRef) -> Result<&[LayerId], ModelError> {
        self.images
            .get(image)
            .map(Vec::as_slice)
            .ok_or_else(|| ModelError::UnknownImage(image.clone()))
    }

    /// Sum of the image's layer sizes.
    pub fn image_size(&self, image: &ImageRef) -> Result<u64, ModelError> {
        Ok(self.image_layers(image)?.iter().map(|l| self.layers[l]).sum())
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.images.keys()
    }

    pub fn layers(&self) -> impl Iterator<Item = (&LayerId, u64)> {
        self.layers.iter().map(|(id, &size)| (id, size))
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    /// Sum of the sizes of `layers`; unknown layers count as zero.
    pub fn bytes_of<'a>(&self, layers: impl IntoIterator<Item = &'a LayerId>) -> u64 {
        layers.into_iter().filter_map(|l| self.layer_size(l)).sum()
    }

    /// Returns a catalog where every layer size is multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> LayerCatalog {
        LayerCatalog {
            layers: self
                .layers
                .iter()
                .map(|(id, &s)| (id.clone(), s * factor))
                .collect(),
            images: self.images.clone(),
        }
    }
}

/// Static description of an edge node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Millicores.
    pub cpu_capacity: u64,
    /// Bytes.
    #[serde(deserialize_with = "crate::units::de_size")]
    pub mem_capacity: u64,
    /// Bytes per second.
    #[serde(deserialize_with = "crate::units::de_size")]
    pub bandwidth: u64,
    /// Bytes.
    #[serde(deserialize_with = "crate::units::de_size")]
    pub storage_capacity: u64,
    pub max_containers: u32,
}

impl NodeSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let field = if self.cpu_capacity == 0 {
            "cpu_capacity"
        } else if self.mem_capacity == 0 {
            "mem_capacity"
        } else if self.bandwidth == 0 {
            "bandwidth"
        } else if self.storage_capacity == 0 {
            "storage_capacity"
        } else if self.max_containers == 0 {
            "max_containers"
        } else {
            return Ok(());
        };
        Err(ModelError::InvalidNodeSpec {
            node: self.id.clone(),
            field,
        })
    }
}

/// A single deployment request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub task_id: TaskId,
    pub image: ImageRef,
    /// Millicores.
    pub cpu_request: u64,
    /// Bytes.
    pub mem_request: u64,
}

impl TaskRequest {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cpu_request == 0 {
            return Err(ModelError::InvalidTask {
                task: self.task_id.clone(),
                field: "cpu_request",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedContainer {
    pub task_id: TaskId,
    pub image: ImageRef,
    pub cpu_request: u64,
    pub mem_request: u64,
}

/// Mutable view of a node: what it stores and what it runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub spec: NodeSpec,
    local_layers: BTreeSet<LayerId>,
    local_images: BTreeSet<ImageRef>,
    running: Vec<PlacedContainer>,
    cpu_committed: u64,
    mem_committed: u64,
    stored_bytes: u64,
}

impl NodeState {
    pub fn new(spec: NodeSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        Ok(Self {
            spec,
            local_layers: BTreeSet::new(),
            local_images: BTreeSet::new(),
            running: Vec::new(),
            cpu_committed: 0,
            mem_committed: 0,
            stored_bytes: 0,
        })
    }

    /// Puts an image on the node without running it, as if pulled earlier.
    /// Pre-seeded layers count against storage.
    pub fn preload_image(&mut self, image: &ImageRef, catalog: &LayerCatalog) -> Result<(), ModelError> {
        let missing = self.missing_layers(catalog.image_layers(image)?);
        let extra = catalog.bytes_of(&missing);
        if self.stored_bytes + extra > self.spec.storage_capacity {
            return Err(ModelError::CapacityViolation {
                node: self.spec.id.clone(),
                task: TaskId(format!("preload:{image}")),
                constraint: Constraint::Storage,
            });
        }
        self.stored_bytes += extra;
        self.local_layers.extend(missing);
        self.local_images.insert(image.clone());
        Ok(())
    }

    pub fn id(&self) -> &NodeId {
        &self.spec.id
    }

    pub fn local_layers(&self) -> &BTreeSet<LayerId> {
        &self.local_layers
    }

    pub fn local_images(&self) -> &BTreeSet<ImageRef> {
        &self.local_images
    }

    pub fn running(&self) -> &[PlacedContainer] {
        &self.running
    }

    pub fn cpu_committed(&self) -> u64 {
        self.cpu_committed
    }

    pub fn mem_committed(&self) -> u64 {
        self.mem_committed
    }

    /// Bytes occupied by `local_layers`.
    pub fn stored_bytes(&self) -> u64 {
        self.stored_bytes
    }

    /// Requested layers not present on this node. Duplicates collapse.
    pub fn missing_layers<'a>(&self, layers: impl IntoIterator<Item = &'a LayerId>) -> BTreeSet<LayerId> {
        layers
            .into_iter()
            .filter(|l| !self.local_layers.contains(*l))
            .cloned()
            .collect()
    }

    /// First violated constraint for placing `task` here, checked in the order
    /// storage, container count, cpu, memory.
    pub fn check_fit(
        &self,
        task: &TaskRequest,
        catalog: &LayerCatalog,
    ) -> Result<Option<Constraint>, ModelError> {
        let missing = self.missing_layers(catalog.image_layers(&task.image)?);
        let download = catalog.bytes_of(&missing);
        Ok(if download + self.stored_bytes > self.spec.storage_capacity {
            Some(Constraint::Storage)
        } else if self.running.len() >= self.spec.max_containers as usize {
            Some(Constraint::ContainerCount)
        } else if self.cpu_committed + task.cpu_request > self.spec.cpu_capacity {
            Some(Constraint::CpuFit)
        } else if self.mem_committed + task.mem_request > self.spec.mem_capacity {
            Some(Constraint::MemFit)
        } else {
            None
        })
    }

    /// Binds `task` to this node: pulls missing layers, records the image and
    /// the running container, and commits the requested resources. Returns the
    /// number of bytes that had to be downloaded. On error the node is left
    /// untouched.
    pub fn commit_placement(
        &mut self,
        task: &TaskRequest,
        catalog: &LayerCatalog,
    ) -> Result<u64, ModelError> {
        if let Some(constraint) = self.check_fit(task, catalog)? {
            return Err(ModelError::CapacityViolation {
                node: self.spec.id.clone(),
                task: task.task_id.clone(),
                constraint,
            });
        }
        let missing = self.missing_layers(catalog.image_layers(&task.image)?);
        let download = catalog.bytes_of(&missing);
        self.local_layers.extend(missing);
        self.stored_bytes += download;
        self.local_images.insert(task.image.clone());
        self.running.push(PlacedContainer {
            task_id: task.task_id.clone(),
            image: task.image.clone(),
            cpu_request: task.cpu_request,
            mem_request: task.mem_request,
        });
        self.cpu_committed += task.cpu_request;
        self.mem_committed += task.mem_request;
        Ok(download)
    }

    /// Verifies every structural invariant against `catalog`. Used by tests
    /// and by the simulator in debug builds.
    pub fn check_invariants(&self, catalog: &LayerCatalog) -> Result<(), String> {
        let spec = &self.spec;
        if self.cpu_committed > spec.cpu_capacity {
            return Err("cpu_committed exceeds capacity".into());
        }
        if self.mem_committed > spec.mem_capacity {
            return Err("mem_committed exceeds capacity".into());
        }
        let stored = catalog.bytes_of(&self.local_layers);
        if stored != self.stored_bytes {
            return Err(format!(
                "stored_bytes {} != layer sum {stored}",
                self.stored_bytes
            ));
        }
        if stored > spec.storage_capacity {
            return Err("stored layers exceed storage capacity".into());
        }
        if self.running.len() > spec.max_containers as usize {
            return Err("too many running containers".into());
        }
        for image in &self.local_images {
            let layers = catalog.image_layers(image).map_err(|e| e.to_string())?;
            if let Some(l) = layers.iter().find(|l| !self.local_layers.contains(*l)) {
                return Err(format!("image {image} is local but layer {l} is not"));
            }
        }
        let cpu: u64 = self.running.iter().map(|c| c.cpu_request).sum();
        let mem: u64 = self.running.iter().map(|c| c.mem_request).sum();
        if cpu != self.cpu_committed || mem != self.mem_committed {
            return Err("committed resources differ from running containers".into());
        }
        Ok(())
    }
}

/// All nodes of a cluster, kept sorted by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Cluster {
    nodes: Vec<NodeState>,
}

impl Cluster {
    pub fn new(mut nodes: Vec<NodeState>) -> Result<Self, ModelError> {
        nodes.sort_by(|a, b| a.id().cmp(b.id()));
        if let Some(w) = nodes.windows(2).find(|w| w[0].id() == w[1].id()) {
            return Err(ModelError::DuplicateNode(w[0].id().clone()));
        }
        Ok(Self { nodes })
    }

    pub fn from_specs(specs: impl IntoIterator<Item = NodeSpec>) -> Result<Self, ModelError> {
        Self::new(specs.into_iter().map(NodeState::new).collect::<Result<_, _>>()?)
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn node(&self, id: &NodeId) -> Option<&NodeState> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, id: &NodeId) -> Option<&mut NodeState> {
        self.index_of(id).map(move |i| &mut self.nodes[i])
    }

    fn index_of(&self, id: &NodeId) -> Option<usize> {
        self.nodes.binary_search_by(|n| n.id().cmp(id)).ok()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// The decision made for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub task_id: TaskId,
    pub node_id: NodeId,
    pub download_bytes: u64,
    pub download_seconds: f64,
    /// Score breakdown for every node that passed filtering.
    pub scores: BTreeMap<NodeId, ScoreBreakdown>,
}
