use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use lrsched::registry::FakeRegistry;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lrsched"));
    cmd.env_remove("LRSCHED_REGISTRY_URL")
        .env_remove("LRSCHED_OUTPUT_DIR");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn lrsched")
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixtures() -> PathBuf {
    workspace().join("crates/core/fixtures")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every file in `dir`, by name.
fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

/// Small scenario on the three-image fixture; `extra` is appended verbatim.
fn scenario(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seeds = [1, 2]

[catalog]
fixture = "{fixture}"

[[nodes]]
id = "a"
cpu_capacity = 2000
mem_capacity = "2GB"
bandwidth = "10MB/s"
storage_capacity = "10GB"

[[nodes]]
id = "b"
cpu_capacity = 2000
mem_capacity = "1GB"
bandwidth = "10MB/s"
storage_capacity = "10GB"

[workload]
kind = "random"
count = 12
cpu_millicores = [50, 300]
mem_bytes = ["16MB", "128MB"]

[[schedulers]]
policy = "default"

[[schedulers]]
policy = "lr_dynamic"
{extra}
"#,
        fixture = fixtures().join("registry/images3.json").display()
    );
    let path = dir.join("scenario.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn fetch_registry_writes_golden_cache() {
    let reg = Arc::new(FakeRegistry::from_fixture(&fixtures().join("registry/images3.json")).unwrap());
    let server = reg.serve().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cache.json");
    let o = run(&[
        "fetch-registry",
        "--registry",
        server.url().as_str(),
        "--out",
        out.to_str().unwrap(),
        "--name-prefix",
        "registry.local:5000",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let golden = std::fs::read(fixtures().join("golden/cache3.json")).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), golden);
}

#[test]
fn fetch_registry_reads_url_from_environment() {
    let reg = Arc::new(FakeRegistry::from_fixture(&fixtures().join("registry/images3.json")).unwrap());
    let server = reg.serve().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cache.json");
    let o = bin()
        .args(["fetch-registry", "--out", out.to_str().unwrap()])
        .env("LRSCHED_REGISTRY_URL", server.url().as_str())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.exists());
}

#[test]
fn unreachable_registry_without_cache_exits_2_and_stale_cache_exits_0() {
    let reg = Arc::new(FakeRegistry::from_fixture(&fixtures().join("registry/images3.json")).unwrap());
    let dead = reg.serve().unwrap().url();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cache.json");
    let args = [
        "fetch-registry",
        "--registry",
        dead.as_str(),
        "--out",
        out.to_str().unwrap(),
    ];

    let o = run(&args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());

    std::fs::copy(fixtures().join("golden/cache3.json"), &out).unwrap();
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("stale"), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(fixtures().join("golden/cache3.json")).unwrap()
    );
}

#[test]
fn missing_registry_url_is_a_usage_error() {
    let o = run(&["fetch-registry", "--out", "/nonexistent/cache.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("LRSCHED_REGISTRY_URL"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(
        dir.path(),
        "\n[sweeps]\nbandwidth = [\"10MB/s\", \"5MB/s\"]\nnode_count = [1, 2]\n",
    );
    let path = path.to_str().unwrap();
    let commands: [&[&str]; 5] = [
        &["simulate", path],
        &["simulate", path, "--scheduler", "lr_dynamic", "--seed", "7"],
        &["compare", path],
        &["sweep", path, "--param", "bandwidth"],
        &["sweep", path, "--param", "nodes", "--jobs", "1"],
    ];
    for (i, args) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = dir.path().join(format!("out{i}_{rep}"));
            let o = bin().args(*args).arg("--out").arg(&out).output().unwrap();
            assert!(o.status.success(), "{args:?}: {}", stderr(&o));
            outputs.push((o.stdout, read_dir(&out)));
        }
        assert!(!outputs[0].1.is_empty());
        assert_eq!(outputs[0], outputs[1], "{args:?}");
    }
}

#[test]
fn output_dir_comes_from_environment_then_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(dir.path(), "\n[output]\ndir = \"results\"\n");
    let o = run(&["simulate", path.to_str().unwrap(), "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("results/simulate_default_seed1.json").exists());

    let env_out = dir.path().join("env_out");
    let o = bin()
        .args(["simulate", path.to_str().unwrap(), "--seed", "1"])
        .env("LRSCHED_OUTPUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_out.join("simulate_default_seed1.csv").exists());
}

#[test]
fn compare_writes_per_seed_and_per_leg_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(dir.path(), "");
    let out = dir.path().join("out");
    let o = bin()
        .args(["compare"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let files = read_dir(&out);
    for seed in [1, 2] {
        for suffix in ["json", "csv"] {
            assert!(files.contains_key(&format!("compare_seed{seed}.{suffix}")));
        }
        for leg in ["default", "lr_dynamic"] {
            let csv = String::from_utf8(files[&format!("compare_seed{seed}_{leg}.csv")].clone()).unwrap();
            assert!(csv.starts_with("step,task,node,download_bytes,download_seconds,cluster_std\n"));
            assert_eq!(csv.lines().count(), 13);
        }
    }
    assert!(files.contains_key("compare_summary.csv"));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("lr_dynamic"));
}

fn sweep_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn halving_bandwidth_doubles_seconds_and_keeps_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(dir.path(), "\n[sweeps]\nbandwidth = [\"8MB/s\", \"4MB/s\"]\n");
    let out = dir.path().join("out");
    let o = bin()
        .args(["sweep", "--param", "bandwidth"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = sweep_rows(&std::fs::read_to_string(out.join("sweep_bandwidth.csv")).unwrap());
    let (fast, slow): (Vec<_>, Vec<_>) = rows.iter().partition(|r| r[0] == "8000000");
    assert_eq!(fast.len(), 4);
    assert_eq!(slow.len(), 4);
    for (f, s) in fast.iter().zip(&slow) {
        assert_eq!(s[0], "4000000");
        assert_eq!((&f[1], &f[2]), (&s[1], &s[2]));
        assert_eq!(f[3], s[3], "bytes differ for {f:?}");
        let bytes: f64 = f[3].parse().unwrap();
        let (fs, ss): (f64, f64) = (f[4].parse().unwrap(), s[4].parse().unwrap());
        assert!((fs - bytes / 8e6).abs() <= 1e-9 * fs.max(1.0));
        assert!((ss - 2.0 * fs).abs() <= 1e-9 * ss.max(1.0), "{fs} vs {ss}");
    }
}

#[test]
fn node_count_overflow_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(dir.path(), "\n[sweeps]\nnode_count = [1, 5]\n");
    let out = dir.path().join("out");
    let o = bin()
        .args(["sweep", "--param", "nodes"])
        .arg(&path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("sweeps.node_count"), "{}", stderr(&o));
    let rows = sweep_rows(&std::fs::read_to_string(out.join("sweep_nodes.csv")).unwrap());
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[0] == "1"));
    let json = std::fs::read_to_string(out.join("sweep_nodes.json")).unwrap();
    assert!(json.contains("\"error\""));
}

#[test]
fn invalid_scenario_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(dir.path(), "");
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("mem_capacity = \"1GB\"", "mem_capacity = \"lots\"");
    std::fs::write(&path, text).unwrap();
    for cmd in ["validate", "simulate", "compare"] {
        let o = run(&[cmd, path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(
            stderr(&o).contains("nodes[1].mem_capacity"),
            "{cmd}: {}",
            stderr(&o)
        );
    }
}

#[test]
fn unknown_scheduler_and_missing_sweep_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario(dir.path(), "");
    let path = path.to_str().unwrap();
    let o = run(&["simulate", path, "--scheduler", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lr_dynamic"));
    let o = run(&["sweep", path, "--param", "bandwidth"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["sweep", path, "--param", "latency"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bundled_scenarios_validate() {
    for name in ["shared_layers.toml", "storage_tight.toml"] {
        let o = run(&[
            "validate",
            workspace().join("scenarios").join(name).to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}
