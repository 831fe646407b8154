//! Terrain elevation lookup and relative drone altitude.
//!
//! The drone only knows its GPS altitude above sea level. Subtracting the
//! terrain elevation under the GPS fix gives an approximate height above
//! ground. Elevations come either from an opentopodata-compatible HTTP API
//! (`GET {endpoint}/v1/{dataset}?locations=lat,lon`) or from a fixture table,
//! and every answer is cached under coordinates rounded to five decimals.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data_model::{write_text, Domain, Manifest};
use crate::error::{Error, Result};

pub const CACHE_DECIMALS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixturePoint {
    pub lat: f64,
    pub lon: f64,
    pub elevation: f64,
}

/// Offline elevation table, stored as `{"points": [{"lat", "lon", "elevation"}]}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureTable {
    pub points: Vec<FixturePoint>,
}

impl FixtureTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing fixture {}", path.display()), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json("writing fixture", e))?;
        text.push('\n');
        write_text(path, &text)
    }

    pub fn lookup(&self, lat: f64, lon: f64) -> Option<f64> {
        let key = cache_key(lat, lon);
        self.points
            .iter()
            .find(|p| cache_key(p.lat, p.lon) == key)
            .map(|p| p.elevation)
    }
}

pub fn cache_key(lat: f64, lon: f64) -> String {
    format!("{lat:.prec$},{lon:.prec$}", prec = CACHE_DECIMALS)
}

#[derive(Clone, Debug)]
pub struct HttpSettings {
    /// Base URL, e.g. `https://api.opentopodata.org`.
    pub endpoint: String,
    pub dataset: String,
    pub max_attempts: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff: Duration,
    /// Minimum spacing between two requests.
    pub min_interval: Duration,
    pub timeout: Duration,
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>, dataset: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            dataset: dataset.into(),
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            min_interval: Duration::from_secs(1),
            timeout: Duration::from_secs(20),
        }
    }
}

enum Backend {
    Http {
        settings: HttpSettings,
        agent: ureq::Agent,
        last_request: Mutex<Option<Instant>>,
    },
    Fixture(FixtureTable),
}

pub struct ElevationSource {
    backend: Backend,
    cache: Mutex<BTreeMap<String, f64>>,
    cache_path: Option<PathBuf>,
    lookups: AtomicUsize,
}

#[derive(Deserialize)]
struct ApiResponse {
    #[serde(default)]
    status: Option<String>,
    #[serde(default)]
    results: Vec<ApiResult>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Deserialize)]
struct ApiResult {
    elevation: Option<f64>,
}

impl ElevationSource {
    /// Offline source; never touches the network.
    pub fn fixture(table: FixtureTable) -> Self {
        Self::with_backend(Backend::Fixture(table))
    }

    pub fn http(settings: HttpSettings) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .build()
            .into();
        Self::with_backend(Backend::Http {
            settings,
            agent,
            last_request: Mutex::new(None),
        })
    }

    fn with_backend(backend: Backend) -> Self {
        Self {
            backend,
            cache: Mutex::new(BTreeMap::new()),
            cache_path: None,
            lookups: AtomicUsize::new(0),
        }
    }

    /// Persist the cache to `path` (a JSON map), loading it first if present.
    pub fn with_cache_file(mut self, path: &Path) -> Result<Self> {
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let map: BTreeMap<String, f64> =
                serde_json::from_str(&text).map_err(|e| Error::json("parsing elevation cache", e))?;
            *self.cache.lock().unwrap() = map;
        }
        self.cache_path = Some(path.to_path_buf());
        Ok(self)
    }

    /// Number of lookups that went to the backend (cache misses).
    pub fn backend_lookups(&self) -> usize {
        self.lookups.load(Ordering::SeqCst)
    }

    pub fn terrain_elevation(&self, lat: f64, lon: f64) -> Result<f64> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Domain(format!("coordinates ({lat}, {lon}) out of range")));
        }
        let key = cache_key(lat, lon);
        if let Some(&v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v);
        }
        self.lookups.fetch_add(1, Ordering::SeqCst);
        let value = match &self.backend {
            Backend::Fixture(table) => table
                .lookup(lat, lon)
                .ok_or_else(|| Error::Elevation(format!("no fixture entry for {key}")))?,
            Backend::Http {
                settings,
                agent,
                last_request,
            } => self.fetch(settings, agent, last_request, &key)?,
        };
        let mut cache = self.cache.lock().unwrap();
        cache.insert(key, value);
        if let Some(path) = &self.cache_path {
            let mut text =
                serde_json::to_string_pretty(&*cache).map_err(|e| Error::json("writing elevation cache", e))?;
            text.push('\n');
            write_text(path, &text)?;
        }
        Ok(value)
    }

    fn fetch(
        &self,
        settings: &HttpSettings,
        agent: &ureq::Agent,
        last_request: &Mutex<Option<Instant>>,
        key: &str,
    ) -> Result<f64> {
        let url = format!(
            "{}/v1/{}?locations={}",
            settings.endpoint.trim_end_matches('/'),
            settings.dataset,
            key
        );
        let mut last_err = String::new();
        for attempt in 0..settings.max_attempts.max(1) {
            if attempt > 0 {
                thread::sleep(settings.backoff * 2u32.pow(attempt - 1));
            }
            // Holding the lock across the request serializes HTTP traffic.
            let mut last = last_request.lock().unwrap();
            if let Some(t) = *last {
                let since = t.elapsed();
                if since < settings.min_interval {
                    thread::sleep(settings.min_interval - since);
                }
            }
            *last = Some(Instant::now());
            match agent.get(&url).call() {
                Ok(mut resp) => {
                    let body = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| Error::Elevation(format!("reading response: {e}")));
                    match body.and_then(|b| parse_response(&b)) {
                        Ok(v) => return Ok(v),
                        Err(e) => last_err = e.to_string(),
                    }
                }
                Err(e) => last_err = e.to_string(),
            }
            log::warn!("elevation request {url} failed (attempt {}): {last_err}", attempt + 1);
        }
        Err(Error::Elevation(format!(
            "{url}: giving up after {} attempts: {last_err}",
            settings.max_attempts.max(1)
        )))
    }

    /// Height above ground from a GPS altitude above sea level.
    pub fn relative_altitude(&self, gps_altitude_asl: f64, lat: f64, lon: f64) -> Result<f64> {
        let rel = gps_altitude_asl - self.terrain_elevation(lat, lon)?;
        if rel <= 0.0 {
            return Err(Error::ImplausibleAltitude(rel));
        }
        Ok(rel)
    }
}

fn parse_response(body: &str) -> Result<f64> {
    let resp: ApiResponse =
        serde_json::from_str(body).map_err(|e| Error::Elevation(format!("malformed response: {e}")))?;
    if let Some(status) = &resp.status {
        if status != "OK" {
            return Err(Error::Elevation(format!(
                "status {status}: {}",
                resp.error.unwrap_or_default()
            )));
        }
    }
    resp.results
        .first()
        .and_then(|r| r.elevation)
        .ok_or_else(|| Error::Elevation("response carries no elevation".into()))
}

/// Fill `altitude_m` on every drone record from its GPS fix and ASL altitude.
/// Returns the number of records annotated.
pub fn annotate_manifest(manifest: &mut Manifest, source: &ElevationSource) -> Result<usize> {
    let mut n = 0;
    for rec in manifest.records.iter_mut().filter(|r| r.domain == Domain::Drone) {
        let (lat, lon) = rec
            .gps
            .ok_or_else(|| Error::record(&rec.id, "gps", "drone record has no GPS fix"))?;
        let asl = rec
            .altitude_asl_m
            .ok_or_else(|| Error::record(&rec.id, "altitude_asl_m", "drone record has no GPS altitude"))?;
        let rel = source
            .relative_altitude(asl, lat, lon)
            .map_err(|e| Error::record(&rec.id, "altitude_m", e.to_string()))?;
        rec.altitude_m = Some(rel);
        n += 1;
    }
    manifest.validate()?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    fn fixture() -> FixtureTable {
        FixtureTable {
            points: vec![FixturePoint {
                lat: 52.0,
                lon: -8.0,
                elevation: 75.0,
            }],
        }
    }

    #[test]
    fn fixture_lookup_and_cache() {
        let src = ElevationSource::fixture(fixture());
        assert_eq!(src.terrain_elevation(52.0, -8.0).unwrap(), 75.0);
        assert_eq!(src.backend_lookups(), 1);
        assert_eq!(src.terrain_elevation(52.0, -8.0).unwrap(), 75.0);
        assert_eq!(src.backend_lookups(), 1);
        // Rounds to the same key.
        assert_eq!(src.terrain_elevation(52.000_001, -8.000_002).unwrap(), 75.0);
        assert_eq!(src.backend_lookups(), 1);
    }

    #[test]
    fn range_and_miss_errors() {
        let src = ElevationSource::fixture(fixture());
        assert!(matches!(src.terrain_elevation(95.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(src.terrain_elevation(0.0, 181.0), Err(Error::Domain(_))));
        assert!(matches!(src.terrain_elevation(10.0, 10.0), Err(Error::Elevation(_))));
    }

    #[test]
    fn relative_altitude_subtracts_terrain() {
        let src = ElevationSource::fixture(fixture());
        assert_eq!(src.relative_altitude(83.0, 52.0, -8.0).unwrap(), 8.0);
        assert!(matches!(
            src.relative_altitude(75.0, 52.0, -8.0),
            Err(Error::ImplausibleAltitude(_))
        ));
    }

    #[test]
    fn cache_file_survives_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        let src = ElevationSource::fixture(fixture()).with_cache_file(&path).unwrap();
        src.terrain_elevation(52.0, -8.0).unwrap();
        drop(src);
        // An empty fixture would miss, so a hit proves the cache served it.
        let reloaded = ElevationSource::fixture(FixtureTable::default())
            .with_cache_file(&path)
            .unwrap();
        assert_eq!(reloaded.terrain_elevation(52.0, -8.0).unwrap(), 75.0);
        assert_eq!(reloaded.backend_lookups(), 0);
    }

    /// Minimal HTTP/1.1 server answering every request with `status` and `body`.
    fn serve(status: u16, body: &'static str, count: Arc<AtomicUsize>, paths: Arc<Mutex<Vec<String>>>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                        break;
                    }
                }
                count.fetch_add(1, Ordering::SeqCst);
                paths
                    .lock()
                    .unwrap()
                    .push(request_line.split_whitespace().nth(1).unwrap_or("").to_string());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    fn fast(endpoint: String) -> HttpSettings {
        HttpSettings {
            backoff: Duration::from_millis(5),
            min_interval: Duration::from_millis(0),
            timeout: Duration::from_secs(5),
            ..HttpSettings::new(endpoint, "test30m")
        }
    }

    #[test]
    fn http_wire_format() {
        let count = Arc::new(AtomicUsize::new(0));
        let paths = Arc::new(Mutex::new(Vec::new()));
        let endpoint = serve(
            200,
            r#"{"results": [{"dataset": "test30m", "elevation": 61.5, "location": {"lat": 52.0, "lng": -8.0}}], "status": "OK"}"#,
            count.clone(),
            paths.clone(),
        );
        let src = ElevationSource::http(fast(endpoint));
        assert_eq!(src.terrain_elevation(52.0, -8.0).unwrap(), 61.5);
        assert_eq!(src.terrain_elevation(52.0, -8.0).unwrap(), 61.5);
        assert_eq!(count.load(Ordering::SeqCst), 1);
        assert_eq!(paths.lock().unwrap()[0], "/v1/test30m?locations=52.00000,-8.00000");
    }

    #[test]
    fn http_retries_then_fails() {
        let count = Arc::new(AtomicUsize::new(0));
        let paths = Arc::new(Mutex::new(Vec::new()));
        let endpoint = serve(500, r#"{"status": "SERVER_ERROR"}"#, count.clone(), paths);
        let src = ElevationSource::http(fast(endpoint));
        let err = src.terrain_elevation(52.0, -8.0).unwrap_err();
        assert!(matches!(err, Error::Elevation(_)), "{err}");
        assert_eq!(count.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn http_rate_limit_spaces_requests() {
        let count = Arc::new(AtomicUsize::new(0));
        let paths = Arc::new(Mutex::new(Vec::new()));
        let endpoint = serve(200, r#"{"results": [{"elevation": 10.0}], "status": "OK"}"#, count, paths);
        let settings = HttpSettings {
            min_interval: Duration::from_millis(150),
            ..fast(endpoint)
        };
        let src = ElevationSource::http(settings);
        let t = Instant::now();
        src.terrain_elevation(1.0, 1.0).unwrap();
        src.terrain_elevation(2.0, 2.0).unwrap();
        assert!(t.elapsed() >= Duration::from_millis(150));
    }

    #[test]
    fn parse_rejects_null_elevation() {
        assert!(parse_response(r#"{"results": [{"elevation": null}], "status": "OK"}"#).is_err());
        assert!(parse_response(r#"{"status": "INVALID_REQUEST", "error": "bad"}"#).is_err());
    }
}
