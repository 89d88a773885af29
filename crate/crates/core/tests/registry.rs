use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use lrsched::model::ModelError;
use lrsched::registry::*;
use url::Url;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn layer(digest: &str, size: i64) -> FixtureLayer {
    FixtureLayer {
        digest: digest.into(),
        size,
    }
}

fn image(name: &str, tag: &str, layers: Vec<FixtureLayer>) -> FixtureImage {
    FixtureImage {
        name: name.into(),
        tag: tag.into(),
        config_digest: format!("sha256:config-{name}-{tag}"),
        layers,
    }
}

fn config(cache: &Path) -> RegistryConfig {
    let mut cfg = RegistryConfig::new(Url::parse("http://registry.local:5000").unwrap());
    cfg.cache_path = cache.to_path_buf();
    cfg
}

fn client(reg: &Arc<FakeRegistry>, cache: &Path) -> RegistryClient {
    RegistryClient::new(config(cache), Arc::new(Arc::clone(reg)))
}

fn repos(names: &[&str]) -> Arc<FakeRegistry> {
    Arc::new(FakeRegistry::new(
        names
            .iter()
            .map(|n| image(n, "1", vec![layer(&format!("sha256:{n}"), 10)])),
    ))
}

#[test]
fn catalog_lists_repositories() {
    let dir = tempfile::tempdir().unwrap();
    let reg = repos(&["mysql", "redis"]);
    assert_eq!(
        client(&reg, &dir.path().join("c.json")).fetch_catalog().unwrap(),
        vec!["mysql", "redis"]
    );

    let empty = Arc::new(FakeRegistry::default());
    assert!(client(&empty, &dir.path().join("c.json"))
        .fetch_catalog()
        .unwrap()
        .is_empty());
}

#[test]
fn catalog_follows_pagination() {
    let dir = tempfile::tempdir().unwrap();
    let reg = repos(&["a", "b", "c", "d"]);
    reg.set_page_size(Some(2));
    let names = client(&reg, &dir.path().join("c.json")).fetch_catalog().unwrap();
    assert_eq!(names, vec!["a", "b", "c", "d"]);
    let catalog_calls: Vec<_> = reg
        .request_log()
        .into_iter()
        .filter(|p| p.contains("_catalog"))
        .collect();
    assert_eq!(catalog_calls, vec!["/v2/_catalog", "/v2/_catalog?last=b&n=2"]);
}

#[test]
fn image_metadata_sums_layers_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(FakeRegistry::new([
        image("app", "1", vec![layer("sha256:x", 100), layer("sha256:y", 200)]),
        image("one", "1", vec![layer("sha256:z", 123)]),
    ]));
    let c = client(&reg, &dir.path().join("c.json"));
    let meta = c.fetch_image_metadata("app", "1").unwrap();
    assert_eq!(
        meta.l_meta,
        vec![
            LayerMetadata {
                size: 100,
                layer: "sha256:x".into()
            },
            LayerMetadata {
                size: 200,
                layer: "sha256:y".into()
            },
        ]
    );
    assert_eq!(meta.total_size, 300);
    assert_eq!(meta.id, "sha256:config-app-1");
    assert_eq!(meta.name, "registry.local:5000/app");
    assert_eq!(meta.name_without_repo, "app");
    assert_eq!(c.fetch_image_metadata("one", "1").unwrap().total_size, 123);
    assert!(matches!(
        c.fetch_image_metadata("app", "2"),
        Err(RegistryError::UnknownImage { .. })
    ));
}

#[test]
fn manifest_list_resolves_first_platform() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(FakeRegistry::new([image(
        "multi",
        "1",
        vec![layer("sha256:m", 7)],
    )]));
    reg.serve_as_list("multi", "1");
    let meta = client(&reg, &dir.path().join("c.json"))
        .fetch_image_metadata("multi", "1")
        .unwrap();
    assert_eq!(meta.total_size, 7);
    let manifest_calls = reg
        .request_log()
        .iter()
        .filter(|p| p.contains("/manifests/"))
        .count();
    assert_eq!(manifest_calls, 2);
}

struct Schema1Only;

impl Transport for Schema1Only {
    fn get(&self, _url: &Url, _headers: &[(&str, String)]) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            headers: vec![],
            body: br#"{"schemaVersion":1,"name":"old","tag":"1","fsLayers":[{"blobSum":"sha256:a"}]}"#
                .to_vec(),
        })
    }
}

#[test]
fn schema1_manifest_is_unsupported() {
    let dir = tempfile::tempdir().unwrap();
    let c = RegistryClient::new(config(&dir.path().join("c.json")), Arc::new(Schema1Only));
    assert!(matches!(
        c.fetch_image_metadata("old", "1"),
        Err(RegistryError::UnsupportedManifest(_))
    ));
}

#[test]
fn bearer_token_is_sent() {
    let dir = tempfile::tempdir().unwrap();
    let reg = repos(&["redis"]);
    reg.require_bearer(Some("s3cret"));
    let mut cfg = config(&dir.path().join("c.json"));
    assert!(matches!(
        RegistryClient::new(cfg.clone(), Arc::new(Arc::clone(&reg))).fetch_catalog(),
        Err(RegistryError::Protocol { status: 401, .. })
    ));
    cfg.auth = Some(Auth::Bearer("s3cret".into()));
    let c = RegistryClient::new(cfg, Arc::new(Arc::clone(&reg)));
    assert_eq!(c.fetch_catalog().unwrap(), vec!["redis"]);
}

#[test]
fn refresh_writes_cache_keyed_by_name_and_tag() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.json");
    let reg = Arc::new(FakeRegistry::from_fixture(&fixture_dir().join("registry/images3.json")).unwrap());
    let snap = client(&reg, &path).refresh_cache().unwrap();
    assert!(!snap.stale);
    assert!(snap.warnings.is_empty());
    let keys: Vec<_> = snap.lists.lists.keys().cloned().collect();
    assert_eq!(
        keys,
        vec![
            "registry.local:5000/memcached:1.6",
            "registry.local:5000/nginx:1.25",
            "registry.local:5000/redis:7",
        ]
    );
    let on_disk = load_cache(&path).unwrap();
    assert_eq!(on_disk.lists, snap.lists.lists);
    assert_eq!(lookup(&on_disk, "redis", "7").unwrap().name_without_repo, "redis");
    assert_eq!(
        lookup(&on_disk, "registry.local:5000/redis", "7").unwrap().tag,
        "7"
    );
    assert!(matches!(
        lookup(&on_disk, "redis", "6"),
        Err(RegistryError::UnknownImage { .. })
    ));
}

#[test]
fn refresh_falls_back_to_stale_cache() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.json");
    let reg = repos(&["a", "b", "c"]);
    let c = client(&reg, &path);
    let fresh = c.refresh_cache().unwrap();
    assert_eq!(fresh.lists.len(), 3);

    reg.set_down(true);
    let stale = c.refresh_cache().unwrap();
    assert!(stale.stale);
    assert_eq!(stale.lists.lists, fresh.lists.lists);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), fresh.lists.to_json());

    let other = dir.path().join("none.json");
    let err = client(&reg, &other).refresh_cache().unwrap_err();
    assert!(matches!(err, RegistryError::Unavailable(_)));
    assert!(err.is_retryable());
}

#[test]
fn refresh_skips_missing_manifest_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let reg = repos(&["a", "b", "c"]);
    reg.fail_manifest("b", "1");
    let snap = client(&reg, &dir.path().join("cache.json"))
        .refresh_cache()
        .unwrap();
    assert_eq!(snap.lists.len(), 2);
    assert_eq!(snap.warnings.len(), 1);
    assert!(snap.warnings[0].contains("b:1"));
}

#[test]
fn catalog_from_cache_collapses_shared_digests() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Arc::new(FakeRegistry::new([
        image("x", "1", vec![layer("sha256:d", 5_000_000), layer("sha256:x", 1)]),
        image("y", "1", vec![layer("sha256:d", 5_000_000), layer("sha256:y", 2)]),
    ]));
    let snap = client(&reg, &dir.path().join("cache.json"))
        .refresh_cache()
        .unwrap();
    let catalog = catalog_from_cache(&snap.lists).unwrap();
    assert_eq!(catalog.layer_count(), 3);
    assert_eq!(catalog.image_count(), 2);

    let reg = repos(&["p", "q"]);
    let snap = client(&reg, &dir.path().join("cache2.json"))
        .refresh_cache()
        .unwrap();
    assert_eq!(catalog_from_cache(&snap.lists).unwrap().layer_count(), 2);

    let reg = Arc::new(FakeRegistry::new([
        image("x", "1", vec![layer("sha256:d", 5_000_000)]),
        image("y", "1", vec![layer("sha256:d", 6_000_000)]),
    ]));
    let snap = client(&reg, &dir.path().join("cache3.json"))
        .refresh_cache()
        .unwrap();
    assert!(matches!(
        catalog_from_cache(&snap.lists),
        Err(RegistryError::Catalog(ModelError::DigestSizeConflict { .. }))
    ));
}

#[test]
fn corrupt_cache_is_reported() {
    assert!(matches!(
        parse_cache("{ not json"),
        Err(RegistryError::CacheCorrupt(_))
    ));
    let wrong_total = r#"{"r:1":{"id":"i","name":"r","name_without_repo":"r","tag":"1","total_size":5,"l_meta":[{"size":4,"layer":"l"}]}}"#;
    assert!(matches!(
        parse_cache(wrong_total),
        Err(RegistryError::CacheCorrupt(_))
    ));
    let wrong_key = r#"{"q:1":{"id":"i","name":"r","name_without_repo":"r","tag":"1","total_size":4,"l_meta":[{"size":4,"layer":"l"}]}}"#;
    assert!(matches!(
        parse_cache(wrong_key),
        Err(RegistryError::CacheCorrupt(_))
    ));
}

/// The 20-image fixture fetched over real HTTP matches the fixture tables.
#[test]
fn http_fetch_matches_twenty_image_fixture() {
    let fixture = Fixture::load(&fixture_dir().join("registry/images20.json")).unwrap();
    assert_eq!(fixture.images.len(), 20);
    let reg = Arc::new(FakeRegistry::new(fixture.images.clone()));
    reg.set_page_size(Some(6));
    let server = reg.serve().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RegistryConfig::new(server.url());
    cfg.cache_path = dir.path().join("cache.json");
    let snap = RegistryClient::http(cfg).refresh_cache().unwrap();
    assert_eq!(snap.lists.len(), 20);
    for img in &fixture.images {
        let meta = lookup(&snap.lists, &img.name, &img.tag).unwrap();
        let expected: Vec<_> = img
            .layers
            .iter()
            .map(|l| LayerMetadata {
                size: l.size,
                layer: l.digest.clone(),
            })
            .collect();
        assert_eq!(meta.l_meta, expected, "{}:{}", img.name, img.tag);
        assert_eq!(meta.total_size, img.layers.iter().map(|l| l.size).sum::<i64>());
        assert_eq!(meta.id, img.config_digest);
    }
}

#[test]
fn unreachable_http_registry_is_unavailable() {
    let reg = Arc::new(FakeRegistry::default());
    let url = reg.serve().unwrap().url(); // server dropped: port closed
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RegistryConfig::new(url);
    cfg.cache_path = dir.path().join("cache.json");
    let client = RegistryClient::new(cfg, Arc::new(UreqTransport::new(Duration::from_secs(2))));
    assert!(matches!(
        client.fetch_catalog(),
        Err(RegistryError::Unavailable(_))
    ));
}

#[test]
fn watcher_publishes_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let reg = repos(&["a"]);
    let mut cfg = config(&dir.path().join("cache.json"));
    cfg.poll_interval = Duration::from_millis(20);
    let watcher = RegistryWatcher::spawn(RegistryClient::new(cfg, Arc::new(Arc::clone(&reg))));
    let wait_for = |n: usize| {
        for _ in 0..500 {
            if watcher.snapshot().lists.len() == n {
                return true;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        false
    };
    assert!(wait_for(1));
    let held = watcher.snapshot();
    // the next poll drops the image while old handles stay intact
    reg.fail_manifest("a", "1");
    assert!(wait_for(0));
    assert_eq!(held.lists.len(), 1);
    watcher.stop();
}

#[test]
fn cache_file_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.json");
    let reg = Arc::new(FakeRegistry::from_fixture(&fixture_dir().join("registry/images3.json")).unwrap());
    let server = reg.serve().unwrap();
    let mut cfg = RegistryConfig::new(server.url());
    cfg.cache_path = path.clone();
    cfg.name_prefix = Some("registry.local:5000".into());
    RegistryClient::http(cfg).refresh_cache().unwrap();
    let got = std::fs::read_to_string(&path).unwrap();
    let golden = fixture_dir().join("golden/cache3.json");
    if std::env::var_os("LRSCHED_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, std::fs::read_to_string(&golden).unwrap());
}

mod roundtrip {
    use super::*;
    use proptest::prelude::*;

    fn lists() -> impl Strategy<Value = ImageMetadataLists> {
        let layers = prop::collection::vec(("[0-9a-f]{8}", 1i64..1_000_000_000), 0..5);
        prop::collection::btree_map(("[a-z]{1,6}", "[a-z0-9.]{1,4}"), layers, 0..6).prop_map(|m| {
            let mut out = ImageMetadataLists::default();
            for ((name, tag), layers) in m {
                let l_meta: Vec<_> = layers
                    .into_iter()
                    .map(|(d, size)| LayerMetadata {
                        size,
                        layer: format!("sha256:{d}"),
                    })
                    .collect();
                out.insert(ImageMetadata {
                    id: format!("sha256:{name}"),
                    name: format!("host:1/{name}"),
                    name_without_repo: name,
                    tag,
                    total_size: l_meta.iter().map(|l| l.size).sum(),
                    l_meta,
                });
            }
            out
        })
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(lists in lists()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("cache.json");
            lists.save(&path).unwrap();
            let back = load_cache(&path).unwrap();
            prop_assert_eq!(&back.lists, &lists.lists);
            prop_assert_eq!(back.to_json(), std::fs::read_to_string(&path).unwrap());
        }
    }
}
