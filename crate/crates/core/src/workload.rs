//! Task traces: seeded random generation and JSON-lines trace files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageRef, LayerCatalog, ModelError, TaskId, TaskRequest};
use crate::units::{de_size_vec, MB};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("workload references unknown image {0}")]
    UnknownImage(ImageRef),
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("trace line {line}: {message}")]
    TraceCorrupt { line: usize, message: String },
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    Random,
    TraceFile,
}

/// How to obtain the task sequence for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    #[serde(default)]
    pub count: usize,
    /// Trace file, for `kind = "trace_file"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Probability per image. Uniform over the catalog when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_weights: Option<BTreeMap<ImageRef, f64>>,
    /// Inclusive millicore range.
    #[serde(default = "default_cpu_range")]
    pub cpu_millicores: [u64; 2],
    /// Inclusive byte range.
    #[serde(default = "default_mem_range", deserialize_with = "de_mem_range")]
    pub mem_bytes: [u64; 2],
    /// Overrides the scenario seed for task generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_cpu_range() -> [u64; 2] {
    [100, 1000]
}

fn default_mem_range() -> [u64; 2] {
    [64 * MB, 1000 * MB]
}

fn de_mem_range<'de, D: serde::Deserializer<'de>>(d: D) -> Result<[u64; 2], D::Error> {
    let v = de_size_vec(d)?;
    <[u64; 2]>::try_from(v).map_err(|v| serde::de::Error::invalid_length(v.len(), &"a [min, max] pair"))
}

impl WorkloadSpec {
    pub fn random(count: usize) -> Self {
        Self {
            kind: WorkloadKind::Random,
            count,
            path: None,
            image_weights: None,
            cpu_millicores: default_cpu_range(),
            mem_bytes: default_mem_range(),
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let [cmin, cmax] = self.cpu_millicores;
        if cmin == 0 || cmin > cmax {
            return Err(WorkloadError::Invalid(format!(
                "cpu_millicores range [{cmin}, {cmax}] must be non-empty and positive"
            )));
        }
        let [mmin, mmax] = self.mem_bytes;
        if mmin > mmax {
            return Err(WorkloadError::Invalid(format!(
                "mem_bytes range [{mmin}, {mmax}] is empty"
            )));
        }
        if let Some(weights) = &self.image_weights {
            if weights.is_empty() {
                return Err(WorkloadError::Invalid("image_weights is empty".into()));
            }
            if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(WorkloadError::Invalid(
                    "image weights must be finite and >= 0".into(),
                ));
            }
            let sum: f64 = weights.values().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(WorkloadError::Invalid(format!(
                    "image weights sum to {sum}, not 1"
                )));
            }
        }
        if self.kind == WorkloadKind::TraceFile && self.path.is_none() {
            return Err(WorkloadError::Invalid("trace_file workload needs a path".into()));
        }
        Ok(())
    }
}

/// Endless seeded task stream for a random workload. [`generate`] takes the
/// first `count` items; max-pods probing keeps drawing until the cluster is full.
pub struct TaskStream {
    images: Vec<ImageRef>,
    index: WeightedIndex<f64>,
    cpu: [u64; 2],
    mem: [u64; 2],
    rng: ChaCha8Rng,
    next_id: usize,
}

impl TaskStream {
    pub fn new(spec: &WorkloadSpec, catalog: &LayerCatalog, seed: u64) -> Result<Self, WorkloadError> {
        spec.validate()?;
        let (images, weights): (Vec<_>, Vec<_>) = match &spec.image_weights {
            Some(w) => w.iter().map(|(i, p)| (i.clone(), *p)).unzip(),
            None => catalog.images().map(|i| (i.clone(), 1.0)).unzip(),
        };
        if let Some(missing) = images.iter().find(|i| !catalog.contains_image(i)) {
            return Err(WorkloadError::UnknownImage(missing.clone()));
        }
        let index = WeightedIndex::new(&weights)
            .map_err(|e| WorkloadError::Invalid(format!("cannot sample images: {e}")))?;
        Ok(Self {
            images,
            index,
            cpu: spec.cpu_millicores,
            mem: spec.mem_bytes,
            rng: ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(seed)),
            next_id: 0,
        })
    }
}

impl Iterator for TaskStream {
    type Item = TaskRequest;

    fn next(&mut self) -> Option<TaskRequest> {
        self.next_id += 1;
        let image = self.images[self.index.sample(&mut self.rng)].clone();
        let cpu_request = self.rng.gen_range(self.cpu[0]..=self.cpu[1]);
        let mem_request = self.rng.gen_range(self.mem[0]..=self.mem[1]);
        Some(TaskRequest {
            task_id: TaskId::new(format!("task-{:04}", self.next_id)).expect("non-empty"),
            image,
            cpu_request,
            mem_request,
        })
    }
}

/// Produces the task list described by `spec`. Random workloads are fully
/// determined by the seed; trace files are read and checked against the
/// catalog.
pub fn generate(
    spec: &WorkloadSpec,
    catalog: &LayerCatalog,
    seed: u64,
) -> Result<Vec<TaskRequest>, WorkloadError> {
    match spec.kind {
        WorkloadKind::Random => Ok(TaskStream::new(spec, catalog, seed)?.take(spec.count).collect()),
        WorkloadKind::TraceFile => {
            spec.validate()?;
            let path = spec.path.as_deref().expect("validated");
            let tasks = load_trace(path)?;
            if let Some(t) = tasks.iter().find(|t| !catalog.contains_image(&t.image)) {
                return Err(WorkloadError::UnknownImage(t.image.clone()));
            }
            Ok(tasks)
        }
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRecord {
    task_id: String,
    image_name: String,
    image_tag: String,
    cpu_millicores: u64,
    mem_bytes: u64,
}

impl From<&TaskRequest> for TraceRecord {
    fn from(t: &TaskRequest) -> Self {
        TraceRecord {
            task_id: t.task_id.to_string(),
            image_name: t.image.name().to_string(),
            image_tag: t.image.tag().to_string(),
            cpu_millicores: t.cpu_request,
            mem_bytes: t.mem_request,
        }
    }
}

impl TryFrom<TraceRecord> for TaskRequest {
    type Error = ModelError;
    fn try_from(r: TraceRecord) -> Result<Self, ModelError> {
        let task = TaskRequest {
            task_id: TaskId::new(r.task_id)?,
            image: ImageRef::new(r.image_name, r.image_tag)?,
            cpu_request: r.cpu_millicores,
            mem_request: r.mem_bytes,
        };
        task.validate()?;
        Ok(task)
    }
}

pub fn write_trace(trace: &[TaskRequest], mut out: impl Write) -> std::io::Result<()> {
    for t in trace {
        serde_json::to_writer(&mut out, &TraceRecord::from(t))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_trace(trace: &[TaskRequest], path: &Path) -> Result<(), WorkloadError> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a JSON-lines trace. Blank lines are ignored; line numbers in errors
/// are 1-based.
pub fn read_trace(input: impl BufRead) -> Result<Vec<TaskRequest>, WorkloadError> {
    let mut tasks = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| WorkloadError::TraceCorrupt { line: i + 1, message };
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        tasks.push(TaskRequest::try_from(record).map_err(|e| corrupt(e.to_string()))?);
    }
    Ok(tasks)
}

pub fn load_trace(path: &Path) -> Result<Vec<TaskRequest>, WorkloadError> {
    read_trace(BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::*;
    use proptest::prelude::*;

    fn catalog() -> LayerCatalog {
        small_catalog()
    }

    #[test]
    fn zero_count_is_empty() {
        assert!(generate(&WorkloadSpec::random(0), &catalog(), 1)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_image_weight() {
        let mut spec = WorkloadSpec::random(25);
        spec.image_weights = Some(BTreeMap::from([(image("web:1"), 1.0)]));
        let trace = generate(&spec, &catalog(), 3).unwrap();
        assert_eq!(trace.len(), 25);
        assert!(trace.iter().all(|t| t.image == image("web:1")));
    }

    #[test]
    fn weighted_frequencies_converge() {
        let mut spec = WorkloadSpec::random(10_000);
        spec.image_weights = Some(BTreeMap::from([(image("app:1"), 0.7), (image("web:1"), 0.3)]));
        let trace = generate(&spec, &catalog(), 11).unwrap();
        let app = trace.iter().filter(|t| t.image == image("app:1")).count() as f64 / 10_000.0;
        assert!((app - 0.7).abs() <= 0.02, "app frequency {app}");
    }

    #[test]
    fn unknown_image_and_bad_weights() {
        let mut spec = WorkloadSpec::random(5);
        spec.image_weights = Some(BTreeMap::from([(image("ghost:1"), 1.0)]));
        assert!(matches!(
            generate(&spec, &catalog(), 0),
            Err(WorkloadError::UnknownImage(_))
        ));
        spec.image_weights = Some(BTreeMap::from([(image("app:1"), 0.5)]));
        assert!(matches!(
            generate(&spec, &catalog(), 0),
            Err(WorkloadError::Invalid(_))
        ));
        let mut spec = WorkloadSpec::random(5);
        spec.cpu_millicores = [500, 100];
        assert!(matches!(
            generate(&spec, &catalog(), 0),
            Err(WorkloadError::Invalid(_))
        ));
    }

    #[test]
    fn trace_round_trip_and_errors() {
        let trace = generate(&WorkloadSpec::random(12), &catalog(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        save_trace(&trace, &path).unwrap();
        assert_eq!(load_trace(&path).unwrap(), trace);

        fs::write(&path, "").unwrap();
        assert!(load_trace(&path).unwrap().is_empty());

        let mut buf = Vec::new();
        write_trace(&trace[..2], &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{\"task_id\": \"x\", oops\n");
        fs::write(&path, text).unwrap();
        match load_trace(&path) {
            Err(WorkloadError::TraceCorrupt { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected TraceCorrupt, got {other:?}"),
        }
    }

    #[test]
    fn trace_line_format() {
        let t = task("task-0001", "redis:7", 250, 64 * MB);
        let mut out = Vec::new();
        write_trace(&[t], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"task_id\":\"task-0001\",\"image_name\":\"redis\",\"image_tag\":\"7\",\"cpu_millicores\":250,\"mem_bytes\":64000000}\n"
        );
    }

    proptest! {
        #[test]
        fn same_seed_same_bytes_and_ranges(seed in any::<u64>(), count in 0usize..60, lo in 1u64..500, span in 0u64..500) {
            let mut spec = WorkloadSpec::random(count);
            spec.cpu_millicores = [lo, lo + span];
            let a = generate(&spec, &catalog(), seed).unwrap();
            let b = generate(&spec, &catalog(), seed).unwrap();
            let (mut ba, mut bb) = (Vec::new(), Vec::new());
            write_trace(&a, &mut ba).unwrap();
            write_trace(&b, &mut bb).unwrap();
            prop_assert_eq!(ba, bb);
            for t in &a {
                prop_assert!((lo..=lo + span).contains(&t.cpu_request));
                prop_assert!((spec.mem_bytes[0]..=spec.mem_bytes[1]).contains(&t.mem_request));
            }
        }
    }
}
