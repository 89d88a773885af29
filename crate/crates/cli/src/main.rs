//! `lrsched`: fetch registry metadata and run, compare or sweep scheduler
//! simulations described by a scenario file.
//!
//! Exit codes: 0 success, 1 partial failure (some sweep runs failed),
//! 2 usage, configuration or registry error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use lrsched::registry::{RegistryClient, RegistryConfig, RegistryError};
use lrsched::scenario::{LoadedScenario, ScenarioFile, SweepParam, SweepPoint, ENV_REGISTRY_URL};
use lrsched::simulator::{
    check_comparable, run_many, tabulate, ComparisonReport, Scenario, SimulationReport,
};
use lrsched::LayerCatalog;
use serde::Serialize;
use url::Url;

const EXIT_PARTIAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "lrsched",
    version,
    about = "Layer-aware container scheduling simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fetch image layer metadata from a registry into cache.json.
    FetchRegistry {
        /// Registry base URL; defaults to $LRSCHED_REGISTRY_URL.
        #[arg(long)]
        registry: Option<String>,
        #[arg(long, default_value = "cache.json")]
        out: PathBuf,
        /// Keep refreshing every this many seconds.
        #[arg(long)]
        poll: Option<f64>,
        /// Stop watch mode after this many refreshes.
        #[arg(long, requires = "poll")]
        max_refreshes: Option<u64>,
        /// Repository prefix stored in `name`; defaults to the registry host.
        #[arg(long)]
        name_prefix: Option<String>,
    },
    /// Run one scheduler over the scenario's workload.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Scheduler name from the scenario; defaults to the first one.
        #[arg(long)]
        scheduler: Option<String>,
    },
    /// Run every configured scheduler and tabulate the differences.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Repeat the comparison at each point of a configured sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: SweepParam,
    },
    /// Check a scenario file and its catalog without running anything.
    Validate { scenario: PathBuf },
}

#[derive(Args)]
struct Common {
    scenario: PathBuf,
    /// Run only this seed instead of the scenario's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $LRSCHED_OUTPUT_DIR, then the scenario's output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 means one per CPU.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::config(format!("writing output: {e}"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("off")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::FetchRegistry {
            registry,
            out,
            poll,
            max_refreshes,
            name_prefix,
        } => fetch_registry(registry, out, poll, max_refreshes, name_prefix),
        Command::Simulate { common, scheduler } => simulate(&common, scheduler.as_deref()),
        Command::Compare { common } => compare(&common),
        Command::Sweep { common, param } => sweep(&common, param),
        Command::Validate { scenario } => validate(&scenario),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn fetch_registry(
    registry: Option<String>,
    out: PathBuf,
    poll: Option<f64>,
    max_refreshes: Option<u64>,
    name_prefix: Option<String>,
) -> Result<u8, Failure> {
    let raw = registry
        .or_else(|| std::env::var(ENV_REGISTRY_URL).ok())
        .ok_or_else(|| {
            Failure::config(format!(
                "no registry URL: pass --registry or set {ENV_REGISTRY_URL}"
            ))
        })?;
    let url = Url::parse(&raw).map_err(|e| Failure::config(format!("bad registry URL {raw:?}: {e}")))?;
    let mut config = RegistryConfig::new(url);
    config.cache_path = out;
    config.name_prefix = name_prefix;
    if let Some(secs) = poll {
        if !(secs.is_finite() && secs > 0.0) {
            return Err(Failure::config("--poll must be a positive number of seconds"));
        }
        config.poll_interval = Duration::from_secs_f64(secs);
    }
    let interval = config.poll_interval;
    let client = RegistryClient::http(config);
    let mut done = 0u64;
    loop {
        refresh_once(&client)?;
        done += 1;
        if poll.is_none() || max_refreshes.is_some_and(|m| done >= m) {
            return Ok(0);
        }
        std::thread::sleep(interval);
    }
}

fn refresh_once(client: &RegistryClient) -> Result<(), Failure> {
    match client.refresh_cache() {
        Ok(snap) => {
            for w in &snap.warnings {
                eprintln!("warning: {w}");
            }
            if snap.stale {
                eprintln!(
                    "warning: registry unreachable; keeping stale cache {} ({} images)",
                    client.config().cache_path.display(),
                    snap.lists.len()
                );
            } else {
                println!(
                    "wrote {} ({} images)",
                    client.config().cache_path.display(),
                    snap.lists.len()
                );
            }
            Ok(())
        }
        Err(e @ RegistryError::Unavailable(_)) => {
            Err(Failure::config(format!("{e} and no cache to fall back on")))
        }
        Err(e) => Err(Failure::config(e)),
    }
}

/// A scenario file with its catalog loaded.
struct Loaded {
    scenario: LoadedScenario,
    catalog: Arc<LayerCatalog>,
}

fn load(path: &Path) -> Result<Loaded, Failure> {
    let scenario =
        ScenarioFile::load(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let (catalog, warnings) = scenario
        .catalog()
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(Loaded { scenario, catalog })
}

impl Loaded {
    fn seeds(&self, only: Option<u64>) -> Vec<u64> {
        only.map_or_else(|| self.scenario.file.seeds.clone(), |s| vec![s])
    }

    fn out_dir(&self, flag: &Option<PathBuf>) -> Result<PathBuf, Failure> {
        let dir = flag.clone().unwrap_or_else(|| self.scenario.output_dir());
        std::fs::create_dir_all(&dir)
            .map_err(|e| Failure::config(format!("creating {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn legs(&self, seed: u64) -> Result<Vec<Scenario>, Failure> {
        self.scenario.legs(&self.catalog, seed).map_err(Failure::config)
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn simulate(common: &Common, scheduler: Option<&str>) -> Result<u8, Failure> {
    let loaded = load(&common.scenario)?;
    let label = match scheduler {
        Some(name) => loaded
            .scenario
            .file
            .scheduler(name)
            .ok_or_else(|| {
                let known: Vec<String> = loaded
                    .scenario
                    .file
                    .schedulers
                    .iter()
                    .map(|s| s.label())
                    .collect();
                Failure::config(format!(
                    "unknown scheduler {name:?} (known: {})",
                    known.join(", ")
                ))
            })?
            .label(),
        None => loaded.scenario.file.schedulers[0].label(),
    };
    let dir = loaded.out_dir(&common.out)?;
    let mut legs = Vec::new();
    for seed in loaded.seeds(common.seed) {
        let leg = loaded
            .legs(seed)?
            .into_iter()
            .find(|l| l.label == label)
            .expect("label exists");
        legs.push(leg);
    }
    let mut table = Table::new(&[
        "scheduler",
        "seed",
        "placed",
        "download MB",
        "download s",
        "mean std",
        "max pods",
    ]);
    for (leg, result) in legs.iter().zip(run_many(&legs, common.jobs)) {
        let report = result.map_err(|e| Failure::config(format!("seed {}: {e}", leg.seed)))?;
        let stem = format!("simulate_{}_seed{}", report.label, report.seed);
        write(&dir, &format!("{stem}.json"), &report.to_json())?;
        write(&dir, &format!("{stem}.csv"), &report.to_csv())?;
        table.row(report_row(&report));
    }
    print!("{}", table.render());
    Ok(0)
}

fn report_row(r: &SimulationReport) -> Vec<String> {
    vec![
        r.label.clone(),
        r.seed.to_string(),
        format!("{}/{}", r.totals.placed, r.totals.tasks),
        format!("{:.1}", r.totals.download_bytes as f64 / 1e6),
        format!("{:.2}", r.totals.download_seconds),
        format!("{:.4}", r.totals.mean_cluster_std),
        r.max_pods.as_ref().map_or("-".into(), |m| m.total.to_string()),
    ]
}

/// Legs grouped per comparison; runs every leg of every group on one pool.
fn run_groups(groups: &[Vec<Scenario>], jobs: usize) -> Vec<Result<ComparisonReport, String>> {
    let flat: Vec<Scenario> = groups.iter().flatten().cloned().collect();
    let mut results = run_many(&flat, jobs).into_iter();
    groups
        .iter()
        .map(|legs| {
            let mut reports = Vec::with_capacity(legs.len());
            let mut error = None;
            for leg in legs {
                match results.next().expect("one result per leg") {
                    Ok(r) => reports.push(r),
                    Err(e) => error = error.or(Some(format!("{}: {e}", leg.label))),
                }
            }
            match error {
                Some(e) => Err(e),
                None => tabulate(reports).map_err(|e| e.to_string()),
            }
        })
        .collect()
}

fn write_comparison(dir: &Path, stem: &str, cmp: &ComparisonReport) -> Result<(), Failure> {
    write(dir, &format!("{stem}.json"), &cmp.to_json())?;
    write(dir, &format!("{stem}.csv"), &cmp.to_csv())?;
    for r in &cmp.reports {
        write(dir, &format!("{stem}_{}.csv", r.label), &r.to_csv())?;
    }
    Ok(())
}

/// Per-scheduler means over several comparisons.
#[derive(Serialize)]
struct EnsembleRow {
    scheduler: String,
    runs: usize,
    mean_download_bytes: f64,
    mean_download_seconds: f64,
    mean_cluster_std: f64,
    mean_max_pods: Option<f64>,
}

fn ensemble(cmps: &[&ComparisonReport]) -> Vec<EnsembleRow> {
    let mut acc: BTreeMap<&str, (usize, f64, f64, f64, f64, bool)> = BTreeMap::new();
    let mut order = Vec::new();
    for c in cmps {
        for s in &c.summaries {
            let e = acc.entry(&s.label).or_insert_with(|| {
                order.push(s.label.as_str());
                (0, 0.0, 0.0, 0.0, 0.0, true)
            });
            e.0 += 1;
            e.1 += s.download_bytes as f64;
            e.2 += s.download_seconds;
            e.3 += s.mean_cluster_std;
            match s.max_pods {
                Some(m) => e.4 += m as f64,
                None => e.5 = false,
            }
        }
    }
    order
        .into_iter()
        .map(|label| {
            let (n, bytes, secs, std, pods, has_pods) = acc[label];
            let n_f = n as f64;
            EnsembleRow {
                scheduler: label.to_string(),
                runs: n,
                mean_download_bytes: bytes / n_f,
                mean_download_seconds: secs / n_f,
                mean_cluster_std: std / n_f,
                mean_max_pods: has_pods.then(|| pods / n_f),
            }
        })
        .collect()
}

fn ensemble_csv(rows: &[EnsembleRow]) -> String {
    let mut out = String::from(
        "scheduler,runs,mean_download_bytes,mean_download_seconds,mean_cluster_std,mean_max_pods\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.scheduler,
            r.runs,
            r.mean_download_bytes,
            r.mean_download_seconds,
            r.mean_cluster_std,
            r.mean_max_pods.map(|m| m.to_string()).unwrap_or_default()
        );
    }
    out
}

fn ensemble_table(rows: &[EnsembleRow]) -> Table {
    let mut t = Table::new(&[
        "scheduler",
        "runs",
        "download MB",
        "download s",
        "mean std",
        "max pods",
    ]);
    for r in rows {
        t.row(vec![
            r.scheduler.clone(),
            r.runs.to_string(),
            format!("{:.1}", r.mean_download_bytes / 1e6),
            format!("{:.2}", r.mean_download_seconds),
            format!("{:.4}", r.mean_cluster_std),
            r.mean_max_pods.map_or("-".into(), |m| format!("{m:.1}")),
        ]);
    }
    t
}

fn compare(common: &Common) -> Result<u8, Failure> {
    let loaded = load(&common.scenario)?;
    let dir = loaded.out_dir(&common.out)?;
    let seeds = loaded.seeds(common.seed);
    let mut groups = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let legs = loaded.legs(seed)?;
        check_comparable(&legs).map_err(Failure::config)?;
        groups.push(legs);
    }
    let mut cmps = Vec::new();
    for (seed, result) in seeds.iter().zip(run_groups(&groups, common.jobs)) {
        let cmp = result.map_err(|e| Failure::config(format!("seed {seed}: {e}")))?;
        write_comparison(&dir, &format!("compare_seed{seed}"), &cmp)?;
        cmps.push(cmp);
    }
    let refs: Vec<&ComparisonReport> = cmps.iter().collect();
    let rows = ensemble(&refs);
    write(&dir, "compare_summary.json", &to_json(&rows))?;
    write(&dir, "compare_summary.csv", &ensemble_csv(&rows))?;
    print!("{}", ensemble_table(&rows).render());
    if let [only] = cmps.as_slice() {
        print!("{}", delta_table(only).render());
    }
    Ok(0)
}

fn delta_table(cmp: &ComparisonReport) -> Table {
    let pct = |x: Option<f64>| x.map_or("-".into(), |v| format!("{v:+.1}%"));
    let mut t = Table::new(&[
        "vs ".to_string() + &cmp.baseline,
        "download".into(),
        "time".into(),
        "std".into(),
    ]);
    for d in &cmp.deltas {
        t.row(vec![
            d.label.clone(),
            pct(d.download_bytes_pct),
            pct(d.download_seconds_pct),
            pct(d.mean_cluster_std_pct),
        ]);
    }
    t
}

#[derive(Serialize)]
struct SweepEntry {
    #[serde(flatten)]
    point: SweepPoint,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<ComparisonReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn point_value(p: SweepPoint) -> u64 {
    match p {
        SweepPoint::Bandwidth(b) => b,
        SweepPoint::Nodes(n) => n as u64,
    }
}

fn sweep(common: &Common, param: SweepParam) -> Result<u8, Failure> {
    let loaded = load(&common.scenario)?;
    let points = loaded.scenario.sweep_points(param);
    let name = match param {
        SweepParam::Bandwidth => "bandwidth",
        SweepParam::Nodes => "nodes",
    };
    if points.is_empty() {
        return Err(Failure::config(format!(
            "scenario defines no sweeps.{}",
            match param {
                SweepParam::Bandwidth => "bandwidth",
                SweepParam::Nodes => "node_count",
            }
        )));
    }
    let dir = loaded.out_dir(&common.out)?;
    let seeds = loaded.seeds(common.seed);

    let mut entries = Vec::new();
    let mut groups = Vec::new();
    let mut slots = Vec::new();
    for &point in &points {
        for &seed in &seeds {
            let built = loaded
                .scenario
                .legs_at(&loaded.catalog, seed, point)
                .map_err(|e| e.to_string())
                .and_then(|legs| check_comparable(&legs).map(|_| legs).map_err(|e| e.to_string()));
            match built {
                Ok(legs) => {
                    slots.push(entries.len());
                    groups.push(legs);
                    entries.push(SweepEntry {
                        point,
                        seed,
                        comparison: None,
                        error: None,
                    });
                }
                Err(e) => entries.push(SweepEntry {
                    point,
                    seed,
                    comparison: None,
                    error: Some(e),
                }),
            }
        }
    }
    for (slot, result) in slots.into_iter().zip(run_groups(&groups, common.jobs)) {
        match result {
            Ok(c) => entries[slot].comparison = Some(c),
            Err(e) => entries[slot].error = Some(e),
        }
    }

    let mut csv = format!(
        "{name},seed,scheduler,download_bytes,download_seconds,mean_cluster_std,max_pods,download_bytes_pct,download_seconds_pct\n"
    );
    let mut table = Table::new(&[name, "seed", "scheduler", "download MB", "download s", "mean std"]);
    let mut failed = 0;
    for e in &entries {
        let value = point_value(e.point);
        match (&e.comparison, &e.error) {
            (Some(c), _) => {
                for (s, d) in c.summaries.iter().zip(&c.deltas) {
                    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                    let _ = writeln!(
                        csv,
                        "{value},{},{},{},{},{},{},{},{}",
                        e.seed,
                        s.label,
                        s.download_bytes,
                        s.download_seconds,
                        s.mean_cluster_std,
                        s.max_pods.map(|m| m.to_string()).unwrap_or_default(),
                        opt(d.download_bytes_pct),
                        opt(d.download_seconds_pct),
                    );
                    table.row(vec![
                        value.to_string(),
                        e.seed.to_string(),
                        s.label.clone(),
                        format!("{:.1}", s.download_bytes as f64 / 1e6),
                        format!("{:.2}", s.download_seconds),
                        format!("{:.4}", s.mean_cluster_std),
                    ]);
                }
            }
            (None, Some(err)) => {
                failed += 1;
                eprintln!("error: {name}={value} seed {}: {err}", e.seed);
            }
            (None, None) => unreachable!("every entry is resolved"),
        }
    }
    write(&dir, &format!("sweep_{name}.json"), &to_json(&entries))?;
    write(&dir, &format!("sweep_{name}.csv"), &csv)?;
    print!("{}", table.render());
    if failed > 0 {
        eprintln!("{failed} of {} sweep runs failed", entries.len());
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn validate(path: &Path) -> Result<u8, Failure> {
    let loaded = load(path)?;
    let file = &loaded.scenario.file;
    for &seed in &file.seeds {
        let legs = loaded.legs(seed)?;
        check_comparable(&legs).map_err(Failure::config)?;
        legs[0]
            .tasks()
            .map_err(|e| Failure::config(format!("workload: {e}")))?;
    }
    println!(
        "{}: ok ({} nodes, {} images, {} layers, {} schedulers, {} seeds)",
        path.display(),
        file.nodes.len(),
        loaded.catalog.image_count(),
        loaded.catalog.layer_count(),
        file.schedulers.len(),
        file.seeds.len()
    );
    Ok(0)
}

/// Plain left-aligned text table for stdout summaries.
struct Table {
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new<S: ToString>(header: &[S]) -> Self {
        Self {
            rows: vec![header.iter().map(ToString::to_string).collect()],
        }
    }

    fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    fn render(&self) -> String {
        let cols = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                self.rows
                    .iter()
                    .filter_map(|r| r.get(c))
                    .map(String::len)
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for r in &self.rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}
