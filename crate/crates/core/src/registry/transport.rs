use std::time::Duration;

use url::Url;

/// A fully buffered HTTP response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Failure to get any HTTP response at all.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Minimal GET-only HTTP interface the registry client is written against.
pub trait Transport: Send + Sync {
    fn get(&self, url: &Url, headers: &[(&str, String)]) -> Result<HttpResponse, TransportError>;
}

/// Blocking HTTP(S) transport.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(30))
    }
}

impl Transport for UreqTransport {
    fn get(&self, url: &Url, headers: &[(&str, String)]) -> Result<HttpResponse, TransportError> {
        let mut req = self.agent.get(url.as_str());
        for (k, v) in headers {
            req = req.header(*k, v.as_str());
        }
        let mut resp = req
            .call()
            .map_err(|e| TransportError(format!("GET {url}: {e}")))?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
            .collect();
        let body = resp
            .body_mut()
            .with_config()
            .limit(64 << 20)
            .read_to_vec()
            .map_err(|e| TransportError(format!("GET {url}: reading body: {e}")))?;
        Ok(HttpResponse {
            status,
            headers,
            body,
        })
    }
}
