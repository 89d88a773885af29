//! Image and layer metadata from a Docker Registry v2 endpoint.
//!
//! The client walks `/v2/_catalog`, each repository's tag list and each tag's
//! manifest, keeping only layer digests and sizes. The result is stored in a
//! `cache.json` file keyed by `name:tag`; the scheduler only ever reads that
//! snapshot, never the registry directly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::model::{ImageRef, LayerCatalog, LayerId, ModelError};

pub mod fake;
pub mod transport;

pub use fake::{FakeRegistry, FakeServer, Fixture, FixtureImage, FixtureLayer};
pub use transport::{HttpResponse, Transport, TransportError, UreqTransport};

pub const MEDIA_DOCKER_V2: &str = "application/vnd.docker.distribution.manifest.v2+json";
pub const MEDIA_DOCKER_LIST: &str = "application/vnd.docker.distribution.manifest.list.v2+json";
pub const MEDIA_OCI_MANIFEST: &str = "application/vnd.oci.image.manifest.v1+json";
pub const MEDIA_OCI_INDEX: &str = "application/vnd.oci.image.index.v1+json";

const MAX_PAGES: usize = 10_000;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry unavailable: {0}")]
    Unavailable(String),
    #[error("registry returned HTTP {status} for {url}")]
    Protocol { status: u16, url: String },
    #[error("unknown image {name}:{tag}")]
    UnknownImage { name: String, tag: String },
    #[error("unsupported manifest: {0}")]
    UnsupportedManifest(String),
    #[error("malformed registry response from {url}: {message}")]
    Malformed { url: String, message: String },
    #[error("cache file is corrupt: {0}")]
    CacheCorrupt(String),
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Catalog(#[from] ModelError),
}

impl RegistryError {
    /// Network-level failures are worth retrying; protocol errors are not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, RegistryError::Unavailable(_))
    }
}

/// One layer of an image: compressed size in bytes and digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMetadata {
    pub size: i64,
    pub layer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMetadata {
    pub id: String,
    pub name: String,
    pub name_without_repo: String,
    pub tag: String,
    pub total_size: i64,
    pub l_meta: Vec<LayerMetadata>,
}

impl ImageMetadata {
    pub fn key(&self) -> String {
        format!("{}:{}", self.name, self.tag)
    }
}

/// All cached images keyed by `name:tag`. Serializes as the bare map;
/// `catch_file` is where it was loaded from or will be saved to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMetadataLists {
    #[serde(skip)]
    pub catch_file: PathBuf,
    #[serde(flatten)]
    pub lists: BTreeMap<String, ImageMetadata>,
}

impl ImageMetadataLists {
    pub fn insert(&mut self, meta: ImageMetadata) {
        self.lists.insert(meta.key(), meta);
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Checks that every entry sits under its own `name:tag` key and that
    /// `total_size` matches its layers.
    pub fn validate(&self) -> Result<(), RegistryError> {
        for (key, meta) in &self.lists {
            if *key != meta.key() {
                return Err(RegistryError::CacheCorrupt(format!(
                    "entry {} stored under key {key}",
                    meta.key()
                )));
            }
            let sum: i64 = meta.l_meta.iter().map(|l| l.size).sum();
            if sum != meta.total_size {
                return Err(RegistryError::CacheCorrupt(format!(
                    "{key}: total_size {} but layers sum to {sum}",
                    meta.total_size
                )));
            }
            if let Some(l) = meta.l_meta.iter().find(|l| l.size < 0 || l.layer.is_empty()) {
                return Err(RegistryError::CacheCorrupt(format!(
                    "{key}: bad layer entry {l:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.lists).expect("metadata serializes");
        s.push('\n');
        s
    }

    /// Writes the cache through a temporary file and an atomic rename.
    pub fn save(&self, path: &Path) -> Result<(), RegistryError> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(self.to_json().as_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| RegistryError::Io(e.error))?;
        Ok(())
    }
}

pub fn parse_cache(text: &str) -> Result<ImageMetadataLists, RegistryError> {
    let lists: BTreeMap<String, ImageMetadata> =
        serde_json::from_str(text).map_err(|e| RegistryError::CacheCorrupt(e.to_string()))?;
    let lists = ImageMetadataLists {
        catch_file: PathBuf::new(),
        lists,
    };
    lists.validate()?;
    Ok(lists)
}

pub fn load_cache(path: &Path) -> Result<ImageMetadataLists, RegistryError> {
    let text = std::fs::read_to_string(path)?;
    let mut lists = parse_cache(&text)?;
    lists.catch_file = path.to_path_buf();
    Ok(lists)
}

/// Finds `name:tag`. `name` may be the full name or the name without the
/// registry host.
pub fn lookup<'a>(
    lists: &'a ImageMetadataLists,
    name: &str,
    tag: &str,
) -> Result<&'a ImageMetadata, RegistryError> {
    lists
        .lists
        .get(&format!("{name}:{tag}"))
        .or_else(|| {
            lists
                .lists
                .values()
                .find(|m| m.name_without_repo == name && m.tag == tag)
        })
        .ok_or_else(|| RegistryError::UnknownImage {
            name: name.to_string(),
            tag: tag.to_string(),
        })
}

/// Builds the scheduler's layer catalog. Images are keyed by
/// `name_without_repo:tag`; a digest shared by several images becomes a
/// single catalog layer.
pub fn catalog_from_cache(lists: &ImageMetadataLists) -> Result<LayerCatalog, RegistryError> {
    let mut catalog = LayerCatalog::new();
    for meta in lists.lists.values() {
        let image = ImageRef::new(&meta.name_without_repo, &meta.tag)?;
        if catalog.contains_image(&image) {
            return Err(RegistryError::CacheCorrupt(format!(
                "{image} appears under two registry hosts"
            )));
        }
        let mut layers = Vec::with_capacity(meta.l_meta.len());
        for l in &meta.l_meta {
            let size = u64::try_from(l.size)
                .map_err(|_| RegistryError::CacheCorrupt(format!("{image}: negative layer size")))?;
            let id = LayerId::new(&l.layer)?;
            catalog.add_layer(id.clone(), size)?;
            layers.push(id);
        }
        catalog.add_image(image, layers)?;
    }
    Ok(catalog)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Auth {
    Bearer(String),
    Basic { username: String, password: String },
}

impl Auth {
    fn header(&self) -> String {
        match self {
            Auth::Bearer(token) => format!("Bearer {token}"),
            Auth::Basic { username, password } => format!(
                "Basic {}",
                base64::engine::general_purpose::STANDARD.encode(format!("{username}:{password}"))
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryConfig {
    pub base_url: Url,
    pub poll_interval: Duration,
    pub cache_path: PathBuf,
    pub auth: Option<Auth>,
    /// Repository prefix recorded in `ImageMetadata::name`. Defaults to the
    /// registry's `host[:port]`; set it when nodes pull through a different
    /// address than the one used to reach the registry API.
    pub name_prefix: Option<String>,
}

impl RegistryConfig {
    pub fn new(base_url: Url) -> Self {
        Self {
            base_url,
            poll_interval: Duration::from_secs(10),
            cache_path: PathBuf::from("cache.json"),
            auth: None,
            name_prefix: None,
        }
    }

    /// `host[:port]` of the registry, used as the repository prefix in
    /// `ImageMetadata::name`.
    pub fn host_prefix(&self) -> String {
        if let Some(prefix) = &self.name_prefix {
            return prefix.clone();
        }
        let host = self.base_url.host_str().unwrap_or("registry");
        match self.base_url.port() {
            Some(p) => format!("{host}:{p}"),
            None => host.to_string(),
        }
    }
}

/// Result of walking the registry.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CacheSnapshot {
    pub lists: ImageMetadataLists,
    /// True when the registry could not be reached and `lists` is the
    /// previously cached data.
    pub stale: bool,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct CatalogBody {
    #[serde(default)]
    repositories: Vec<String>,
}

#[derive(Deserialize)]
struct TagsBody {
    #[serde(default)]
    tags: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ManifestBody {
    schema_version: u32,
    #[serde(default)]
    media_type: Option<String>,
    #[serde(default)]
    config: Option<Descriptor>,
    #[serde(default)]
    layers: Vec<Descriptor>,
    #[serde(default)]
    manifests: Vec<Descriptor>,
}

#[derive(Deserialize)]
struct Descriptor {
    #[serde(default)]
    size: i64,
    digest: String,
}

/// Next-page URL from an RFC 5988 `Link` header, resolved against `base`.
fn next_link(base: &Url, link: Option<&str>) -> Option<Url> {
    let link = link?;
    link.split(',').find_map(|part| {
        let (target, params) = part.split_once(';')?;
        if !params.contains("rel=\"next\"") && !params.contains("rel=next") {
            return None;
        }
        let target = target.trim().trim_start_matches('<').trim_end_matches('>');
        base.join(target).ok()
    })
}

pub struct RegistryClient {
    config: RegistryConfig,
    transport: Arc<dyn Transport>,
}

impl RegistryClient {
    pub fn new(config: RegistryConfig, transport: Arc<dyn Transport>) -> Self {
        Self { config, transport }
    }

    /// Client over real HTTP.
    pub fn http(config: RegistryConfig) -> Self {
        Self::new(config, Arc::new(UreqTransport::default()))
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    fn get(&self, url: &Url, accept: &str) -> Result<HttpResponse, RegistryError> {
        let mut headers = vec![("Accept", accept.to_string())];
        if let Some(auth) = &self.config.auth {
            headers.push(("Authorization", auth.header()));
        }
        debug!("GET {url}");
        self.transport
            .get(url, &headers)
            .map_err(|e| RegistryError::Unavailable(e.0))
    }

    fn endpoint(&self, path: &str) -> Result<Url, RegistryError> {
        self.config
            .base_url
            .join(path)
            .map_err(|e| RegistryError::Malformed {
                url: path.to_string(),
                message: e.to_string(),
            })
    }

    fn parse<T: for<'de> Deserialize<'de>>(url: &Url, resp: &HttpResponse) -> Result<T, RegistryError> {
        serde_json::from_slice(&resp.body).map_err(|e| RegistryError::Malformed {
            url: url.to_string(),
            message: e.to_string(),
        })
    }

    fn expect_ok(url: &Url, resp: &HttpResponse) -> Result<(), RegistryError> {
        if (200..300).contains(&resp.status) {
            Ok(())
        } else {
            Err(RegistryError::Protocol {
                status: resp.status,
                url: url.to_string(),
            })
        }
    }

    /// Repository names from `/v2/_catalog`, following `Link` pagination.
    pub fn fetch_catalog(&self) -> Result<Vec<String>, RegistryError> {
        let mut url = self.endpoint("/v2/_catalog")?;
        let mut repos = Vec::new();
        for _ in 0..MAX_PAGES {
            let resp = self.get(&url, "application/json")?;
            Self::expect_ok(&url, &resp)?;
            let body: CatalogBody = Self::parse(&url, &resp)?;
            repos.extend(body.repositories);
            match next_link(&url, resp.header("Link")) {
                Some(next) => url = next,
                None => return Ok(repos),
            }
        }
        Err(RegistryError::Malformed {
            url: url.to_string(),
            message: "catalog pagination does not terminate".into(),
        })
    }

    pub fn fetch_tags(&self, name: &str) -> Result<Vec<String>, RegistryError> {
        let mut url = self.endpoint(&format!("/v2/{name}/tags/list"))?;
        let mut tags = Vec::new();
        for _ in 0..MAX_PAGES {
            let resp = self.get(&url, "application/json")?;
            Self::expect_ok(&url, &resp)?;
            let body: TagsBody = Self::parse(&url, &resp)?;
            tags.extend(body.tags.unwrap_or_default());
            match next_link(&url, resp.header("Link")) {
                Some(next) => url = next,
                None => return Ok(tags),
            }
        }
        Err(RegistryError::Malformed {
            url: url.to_string(),
            message: "tag pagination does not terminate".into(),
        })
    }

    fn fetch_manifest(
        &self,
        name: &str,
        tag: &str,
        reference: &str,
        allow_list: bool,
    ) -> Result<ManifestBody, RegistryError> {
        let url = self.endpoint(&format!("/v2/{name}/manifests/{reference}"))?;
        let accept = if allow_list {
            [
                MEDIA_DOCKER_V2,
                MEDIA_OCI_MANIFEST,
                MEDIA_DOCKER_LIST,
                MEDIA_OCI_INDEX,
            ]
            .join(", ")
        } else {
            [MEDIA_DOCKER_V2, MEDIA_OCI_MANIFEST].join(", ")
        };
        let resp = self.get(&url, &accept)?;
        if resp.status == 404 {
            return Err(RegistryError::UnknownImage {
                name: name.to_string(),
                tag: tag.to_string(),
            });
        }
        Self::expect_ok(&url, &resp)?;
        Self::parse(&url, &resp)
    }

    /// Layer digests and sizes for `name:tag`, in manifest order. Manifest
    /// lists resolve to their first platform entry.
    pub fn fetch_image_metadata(&self, name: &str, tag: &str) -> Result<ImageMetadata, RegistryError> {
        let mut manifest = self.fetch_manifest(name, tag, tag, true)?;
        let media = manifest.media_type.clone().unwrap_or_default();
        if media == MEDIA_DOCKER_LIST || media == MEDIA_OCI_INDEX || !manifest.manifests.is_empty() {
            let first = manifest.manifests.first().ok_or_else(|| {
                RegistryError::UnsupportedManifest(format!("{name}:{tag}: empty manifest list"))
            })?;
            let digest = first.digest.clone();
            manifest = self.fetch_manifest(name, tag, &digest, false)?;
        }
        if manifest.schema_version != 2 {
            return Err(RegistryError::UnsupportedManifest(format!(
                "{name}:{tag}: schemaVersion {}",
                manifest.schema_version
            )));
        }
        let media = manifest.media_type.as_deref().unwrap_or(MEDIA_OCI_MANIFEST);
        if media != MEDIA_DOCKER_V2 && media != MEDIA_OCI_MANIFEST {
            return Err(RegistryError::UnsupportedManifest(format!(
                "{name}:{tag}: media type {media}"
            )));
        }
        let config = manifest.config.ok_or_else(|| {
            RegistryError::UnsupportedManifest(format!("{name}:{tag}: manifest has no config"))
        })?;
        let l_meta: Vec<_> = manifest
            .layers
            .into_iter()
            .map(|l| LayerMetadata {
                size: l.size,
                layer: l.digest,
            })
            .collect();
        Ok(ImageMetadata {
            id: config.digest,
            name: format!("{}/{name}", self.config.host_prefix()),
            name_without_repo: name.to_string(),
            tag: tag.to_string(),
            total_size: l_meta.iter().map(|l| l.size).sum(),
            l_meta,
        })
    }

    /// Walks catalog, tags and manifests and writes the cache file.
    ///
    /// If the catalog itself cannot be fetched, the previous cache (if any)
    /// is returned marked stale. Individual images that fail are reported as
    /// warnings; a 404 drops the image, other failures keep its previous entry.
    pub fn refresh_cache(&self) -> Result<CacheSnapshot, RegistryError> {
        let path = &self.config.cache_path;
        let mut warnings = Vec::new();
        let previous = if path.exists() {
            match load_cache(path) {
                Ok(prev) => Some(prev),
                Err(e) => {
                    warnings.push(format!("ignoring unreadable cache {}: {e}", path.display()));
                    None
                }
            }
        } else {
            None
        };

        let repos = match self.fetch_catalog() {
            Ok(repos) => repos,
            Err(e) => {
                return match previous {
                    Some(lists) => {
                        warnings.push(format!("registry unreachable, serving stale cache: {e}"));
                        Ok(CacheSnapshot {
                            lists,
                            stale: true,
                            warnings,
                        })
                    }
                    None => Err(match e {
                        RegistryError::Protocol { .. } | RegistryError::Unavailable(_) => {
                            RegistryError::Unavailable(e.to_string())
                        }
                        other => other,
                    }),
                };
            }
        };

        let mut lists = ImageMetadataLists {
            catch_file: path.clone(),
            lists: BTreeMap::new(),
        };
        let keep_previous = |lists: &mut ImageMetadataLists, name: &str, tag: Option<&str>| {
            if let Some(prev) = &previous {
                for meta in prev.lists.values() {
                    if meta.name_without_repo == name && tag.is_none_or(|t| t == meta.tag) {
                        lists.insert(meta.clone());
                    }
                }
            }
        };
        for repo in repos {
            let tags = match self.fetch_tags(&repo) {
                Ok(tags) => tags,
                Err(e) => {
                    warnings.push(format!("{repo}: listing tags failed: {e}"));
                    if e.is_retryable() {
                        keep_previous(&mut lists, &repo, None);
                    }
                    continue;
                }
            };
            for tag in tags {
                match self.fetch_image_metadata(&repo, &tag) {
                    Ok(meta) => lists.insert(meta),
                    Err(e) => {
                        warnings.push(format!("{repo}:{tag}: {e}"));
                        if e.is_retryable() {
                            keep_previous(&mut lists, &repo, Some(&tag));
                        }
                    }
                }
            }
        }
        for w in &warnings {
            warn!("{w}");
        }
        lists.save(path)?;
        Ok(CacheSnapshot {
            lists,
            stale: false,
            warnings,
        })
    }
}

/// Periodically refreshes the cache on a background thread. Readers get the
/// latest complete snapshot; a refresh swaps in a new `Arc` atomically.
pub struct RegistryWatcher {
    current: Arc<RwLock<Arc<CacheSnapshot>>>,
    stop: Option<mpsc::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl RegistryWatcher {
    /// Starts watching. The first refresh happens immediately, then once per
    /// `poll_interval`.
    pub fn spawn(client: RegistryClient) -> Self {
        let initial = load_cache(&client.config.cache_path)
            .map(|lists| CacheSnapshot {
                lists,
                stale: true,
                warnings: Vec::new(),
            })
            .unwrap_or_default();
        let current = Arc::new(RwLock::new(Arc::new(initial)));
        let (tx, rx) = mpsc::channel::<()>();
        let shared = Arc::clone(&current);
        let handle = std::thread::spawn(move || loop {
            match client.refresh_cache() {
                Ok(snapshot) => *shared.write().unwrap() = Arc::new(snapshot),
                Err(e) => warn!("registry refresh failed: {e}"),
            }
            match rx.recv_timeout(client.config.poll_interval) {
                Err(RecvTimeoutError::Timeout) => continue,
                _ => break,
            }
        });
        Self {
            current,
            stop: Some(tx),
            handle: Some(handle),
        }
    }

    pub fn snapshot(&self) -> Arc<CacheSnapshot> {
        Arc::clone(&self.current.read().unwrap())
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RegistryWatcher {
    fn drop(&mut self) {
        self.shutdown();
    }
}
