//! In-memory Docker Registry v2 used by tests, fixtures and the simulator.
//!
//! It answers the three read endpoints the client uses (catalog, tags list,
//! manifests) and can inject faults: an outage, 404ing manifests, catalog
//! pagination, bearer-token enforcement and multi-arch manifest lists. The
//! same handler backs both the in-process [`Transport`] impl and a small
//! loopback HTTP server, so the real HTTP client can be exercised end to end.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use url::Url;

use super::transport::{HttpResponse, Transport, TransportError};
use super::{MEDIA_DOCKER_LIST, MEDIA_DOCKER_V2, MEDIA_OCI_INDEX, MEDIA_OCI_MANIFEST};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureLayer {
    pub digest: String,
    pub size: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureImage {
    pub name: String,
    pub tag: String,
    pub config_digest: String,
    pub layers: Vec<FixtureLayer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    pub images: Vec<FixtureImage>,
}

impl Fixture {
    pub fn load(path: &Path) -> io::Result<Fixture> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

#[derive(Default)]
struct State {
    images: BTreeMap<(String, String), FixtureImage>,
    page_size: Option<usize>,
    missing: BTreeSet<(String, String)>,
    multi_arch: BTreeSet<(String, String)>,
    token: Option<String>,
    down: bool,
    log: Vec<String>,
}

#[derive(Default)]
pub struct FakeRegistry {
    state: Mutex<State>,
}

fn digest_of(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

fn json_response(status: u16, content_type: &str, body: Vec<u8>) -> HttpResponse {
    HttpResponse {
        status,
        headers: vec![("Content-Type".into(), content_type.into())],
        body,
    }
}

fn error_response(status: u16, code: &str, message: &str) -> HttpResponse {
    let body = json!({ "errors": [{ "code": code, "message": message }] });
    json_response(status, "application/json", body.to_string().into_bytes())
}

fn v2_manifest(image: &FixtureImage) -> Vec<u8> {
    let layers: Vec<_> = image
        .layers
        .iter()
        .map(|l| {
            json!({
                "mediaType": "application/vnd.docker.image.rootfs.diff.tar.gzip",
                "size": l.size,
                "digest": l.digest,
            })
        })
        .collect();
    json!({
        "schemaVersion": 2,
        "mediaType": MEDIA_DOCKER_V2,
        "config": {
            "mediaType": "application/vnd.docker.container.image.v1+json",
            "size": 7023,
            "digest": image.config_digest,
        },
        "layers": layers,
    })
    .to_string()
    .into_bytes()
}

fn schema1_manifest(image: &FixtureImage) -> Vec<u8> {
    let fs_layers: Vec<_> = image
        .layers
        .iter()
        .map(|l| json!({ "blobSum": l.digest }))
        .collect();
    json!({
        "schemaVersion": 1,
        "name": image.name,
        "tag": image.tag,
        "architecture": "amd64",
        "fsLayers": fs_layers,
    })
    .to_string()
    .into_bytes()
}

fn manifest_list(image: &FixtureImage) -> Vec<u8> {
    let manifest = v2_manifest(image);
    json!({
        "schemaVersion": 2,
        "mediaType": MEDIA_DOCKER_LIST,
        "manifests": [
            {
                "mediaType": MEDIA_DOCKER_V2,
                "size": manifest.len(),
                "digest": digest_of(&manifest),
                "platform": { "architecture": "amd64", "os": "linux" },
            },
            {
                "mediaType": MEDIA_DOCKER_V2,
                "size": 1,
                "digest": digest_of(b"arm64 manifest is not served"),
                "platform": { "architecture": "arm64", "os": "linux" },
            },
        ],
    })
    .to_string()
    .into_bytes()
}

fn query_param<'a>(query: Option<&'a str>, key: &str) -> Option<&'a str> {
    query?
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
}

impl FakeRegistry {
    pub fn new(images: impl IntoIterator<Item = FixtureImage>) -> Self {
        let reg = Self::default();
        {
            let mut st = reg.state.lock().unwrap();
            for img in images {
                st.images.insert((img.name.clone(), img.tag.clone()), img);
            }
        }
        reg
    }

    pub fn from_fixture(path: &Path) -> io::Result<Self> {
        Ok(Self::new(Fixture::load(path)?.images))
    }

    /// Paginate `_catalog` responses `n` repositories at a time.
    pub fn set_page_size(&self, n: Option<usize>) {
        self.state.lock().unwrap().page_size = n;
    }

    /// Make the manifest for `name:tag` answer 404.
    pub fn fail_manifest(&self, name: &str, tag: &str) {
        self.state
            .lock()
            .unwrap()
            .missing
            .insert((name.into(), tag.into()));
    }

    /// Serve `name:tag` as a multi-arch manifest list.
    pub fn serve_as_list(&self, name: &str, tag: &str) {
        self.state
            .lock()
            .unwrap()
            .multi_arch
            .insert((name.into(), tag.into()));
    }

    pub fn require_bearer(&self, token: Option<&str>) {
        self.state.lock().unwrap().token = token.map(str::to_string);
    }

    /// Simulate a network outage for the in-process transport.
    pub fn set_down(&self, down: bool) {
        self.state.lock().unwrap().down = down;
    }

    /// Paths requested so far, in order.
    pub fn request_log(&self) -> Vec<String> {
        self.state.lock().unwrap().log.clone()
    }

    /// Routes one GET request. `target` is the path plus optional query.
    pub fn handle(&self, target: &str, headers: &[(&str, String)]) -> HttpResponse {
        let mut st = self.state.lock().unwrap();
        st.log.push(target.to_string());
        if let Some(token) = &st.token {
            let expected = format!("Bearer {token}");
            let ok = headers
                .iter()
                .any(|(k, v)| k.eq_ignore_ascii_case("authorization") && *v == expected);
            if !ok {
                let mut resp = error_response(401, "UNAUTHORIZED", "authentication required");
                resp.headers
                    .push(("WWW-Authenticate".into(), "Bearer realm=\"fake\"".into()));
                return resp;
            }
        }
        let accept = headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("accept"))
            .map(|(_, v)| v.as_str())
            .unwrap_or("");
        let (path, query) = match target.split_once('?') {
            Some((p, q)) => (p, Some(q)),
            None => (target, None),
        };
        let Some(rest) = path.strip_prefix("/v2/") else {
            return error_response(404, "NOT_FOUND", "not found");
        };
        if rest.is_empty() {
            return json_response(200, "application/json", b"{}".to_vec());
        }
        if rest == "_catalog" {
            return st.catalog(query);
        }
        if let Some(name) = rest.strip_suffix("/tags/list") {
            let tags: Vec<_> = st
                .images
                .keys()
                .filter(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .collect();
            if tags.is_empty() {
                return error_response(404, "NAME_UNKNOWN", "repository name not known to registry");
            }
            let body = json!({ "name": name, "tags": tags }).to_string().into_bytes();
            return json_response(200, "application/json", body);
        }
        if let Some((name, reference)) = rest.rsplit_once("/manifests/") {
            return st.manifest(name, reference, accept);
        }
        error_response(404, "NOT_FOUND", "not found")
    }

    /// Starts a loopback HTTP server backed by this registry.
    pub fn serve(self: &Arc<Self>) -> io::Result<FakeServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let (reg, flag) = (Arc::clone(self), Arc::clone(&stop));
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = conn {
                    // A broken client connection only affects that request.
                    let _ = serve_connection(&reg, stream);
                }
            }
        });
        Ok(FakeServer {
            addr,
            stop,
            handle: Some(handle),
        })
    }
}

impl State {
    fn catalog(&self, query: Option<&str>) -> HttpResponse {
        let repos: Vec<&String> = self
            .images
            .keys()
            .map(|(n, _)| n)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let n = query_param(query, "n")
            .and_then(|v| v.parse().ok())
            .or(self.page_size)
            .unwrap_or(usize::MAX);
        let start = match query_param(query, "last") {
            Some(last) => repos
                .iter()
                .position(|r| r.as_str() > last)
                .unwrap_or(repos.len()),
            None => 0,
        };
        let page: Vec<_> = repos.iter().skip(start).take(n).collect();
        let body = json!({ "repositories": page }).to_string().into_bytes();
        let mut resp = json_response(200, "application/json", body);
        if start + page.len() < repos.len() {
            let last = page.last().expect("non-empty page before the end");
            resp.headers.push((
                "Link".into(),
                format!("</v2/_catalog?last={last}&n={n}>; rel=\"next\""),
            ));
        }
        resp
    }

    fn manifest(&self, name: &str, reference: &str, accept: &str) -> HttpResponse {
        let image = if reference.starts_with("sha256:") {
            self.images
                .values()
                .find(|img| img.name == name && digest_of(&v2_manifest(img)) == reference)
        } else {
            self.images.get(&(name.to_string(), reference.to_string()))
        };
        let Some(image) = image else {
            return error_response(404, "MANIFEST_UNKNOWN", "manifest unknown");
        };
        let key = (image.name.clone(), image.tag.clone());
        if self.missing.contains(&key) {
            return error_response(404, "MANIFEST_UNKNOWN", "manifest unknown");
        }
        let wants_list = accept.contains(MEDIA_DOCKER_LIST) || accept.contains(MEDIA_OCI_INDEX);
        let wants_v2 = accept.contains(MEDIA_DOCKER_V2) || accept.contains(MEDIA_OCI_MANIFEST);
        let (media, body) =
            if !reference.starts_with("sha256:") && self.multi_arch.contains(&key) && wants_list {
                (MEDIA_DOCKER_LIST, manifest_list(image))
            } else if wants_v2 {
                (MEDIA_DOCKER_V2, v2_manifest(image))
            } else {
                (
                    "application/vnd.docker.distribution.manifest.v1+prettyjws",
                    schema1_manifest(image),
                )
            };
        let mut resp = json_response(200, media, body);
        resp.headers
            .push(("Docker-Content-Digest".into(), digest_of(&resp.body)));
        resp
    }
}

impl Transport for FakeRegistry {
    fn get(&self, url: &Url, headers: &[(&str, String)]) -> Result<HttpResponse, TransportError> {
        if self.state.lock().unwrap().down {
            return Err(TransportError(format!("GET {url}: connection refused")));
        }
        let target = match url.query() {
            Some(q) => format!("{}?{q}", url.path()),
            None => url.path().to_string(),
        };
        Ok(self.handle(&target, headers))
    }
}

impl Transport for Arc<FakeRegistry> {
    fn get(&self, url: &Url, headers: &[(&str, String)]) -> Result<HttpResponse, TransportError> {
        self.as_ref().get(url, headers)
    }
}

/// Handle to a running loopback server; stops it on drop.
pub struct FakeServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl FakeServer {
    pub fn url(&self) -> Url {
        Url::parse(&format!("http://{}", self.addr)).expect("valid loopback url")
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_connection(reg: &FakeRegistry, stream: TcpStream) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let mut parts = request_line.split_whitespace();
    let (method, target) = (parts.next().unwrap_or(""), parts.next().unwrap_or("/"));
    let resp = if method == "GET" {
        let borrowed: Vec<(&str, String)> = headers.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        reg.handle(target, &borrowed)
    } else {
        error_response(405, "UNSUPPORTED", "method not allowed")
    };
    let mut out = stream;
    write!(out, "HTTP/1.1 {} {}\r\n", resp.status, reason(resp.status))?;
    for (k, v) in &resp.headers {
        write!(out, "{k}: {v}\r\n")?;
    }
    write!(
        out,
        "Content-Length: {}\r\nConnection: close\r\n\r\n",
        resp.body.len()
    )?;
    out.write_all(&resp.body)?;
    out.flush()
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        401 => "Unauthorized",
        404 => "Not Found",
        405 => "Method Not Allowed",
        _ => "Error",
    }
}
