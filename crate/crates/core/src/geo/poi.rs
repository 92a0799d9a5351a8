//! Point-of-interest acquisition behind a provider interface.
//!
//! The default provider reads a fixture file of `tower_id,category` rows.
//! A category field may also hold several `;`-separated categories. The HTTP
//! provider fills a URL template, throttles requests with a token bucket and
//! retries failures with exponential backoff; its transport is pluggable and
//! the network-backed one is only compiled with the `http-poi` feature.

use std::collections::HashMap;
use std::io::Read;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::TowerSite;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PoiFetch {
    pub categories: Vec<String>,
    /// The provider had no record for this tower.
    pub missing: bool,
}

pub trait PoiProvider: Sync {
    fn fetch(&self, site: &TowerSite, radius_m: f64) -> Result<PoiFetch>;
}

/// Fetches categories within `radius_m` of `site`.
pub fn fetch_pois(provider: &dyn PoiProvider, site: &TowerSite, radius_m: f64) -> Result<PoiFetch> {
    if !(radius_m > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "crawl radius for tower {} must be > 0, got {radius_m}",
            site.tower_id
        )));
    }
    let fetched = provider.fetch(site, radius_m).map_err(|e| match e {
        e @ Error::Provider { .. } => e,
        other => Error::Provider {
            tower_id: site.tower_id.clone(),
            message: other.to_string(),
        },
    })?;
    if fetched.missing {
        log::warn!("no POI record for tower {}", site.tower_id);
    }
    Ok(fetched)
}

/// Fetches every site concurrently; results are in site order.
pub fn fetch_all(provider: &dyn PoiProvider, sites: &[TowerSite], radii: &[f64]) -> Result<Vec<PoiFetch>> {
    if sites.len() != radii.len() {
        return Err(Error::Shape(format!("{} sites but {} radii", sites.len(), radii.len())));
    }
    par::map_range(sites.len(), |i| fetch_pois(provider, &sites[i], radii[i]))
        .into_iter()
        .collect()
}

/// File-backed provider: `tower_id,category` rows.
#[derive(Debug, Clone, Default)]
pub struct FixturePoiProvider {
    by_tower: HashMap<String, Vec<String>>,
}

impl FixturePoiProvider {
    pub fn from_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Parse(format!("pois: missing header column {name:?}")))
        };
        let (tower_col, cat_col) = (col("tower_id")?, col("category")?);
        let mut by_tower: HashMap<String, Vec<String>> = HashMap::new();
        for record in rdr.records() {
            let record = record?;
            let tower = record.get(tower_col).unwrap_or("").trim();
            if tower.is_empty() {
                continue;
            }
            let entry = by_tower.entry(tower.to_string()).or_default();
            for cat in record.get(cat_col).unwrap_or("").split(';') {
                let cat = cat.trim();
                if !cat.is_empty() {
                    entry.push(cat.to_string());
                }
            }
        }
        Ok(FixturePoiProvider { by_tower })
    }

    pub fn len(&self) -> usize {
        self.by_tower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_tower.is_empty()
    }
}

impl PoiProvider for FixturePoiProvider {
    fn fetch(&self, site: &TowerSite, _radius_m: f64) -> Result<PoiFetch> {
        Ok(match self.by_tower.get(&site.tower_id) {
            Some(cats) => PoiFetch {
                categories: cats.clone(),
                missing: false,
            },
            None => PoiFetch {
                categories: Vec::new(),
                missing: true,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpProviderConfig {
    pub enabled: bool,
    /// Placeholders: `{lat}`, `{lon}`, `{radius}`, `{key}`.
    pub url_template: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub rate_limit_per_sec: f64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
}

impl Default for HttpProviderConfig {
    fn default() -> Self {
        HttpProviderConfig {
            enabled: false,
            url_template: "https://maps.googleapis.com/maps/api/place/nearbysearch/json?location={lat},{lon}&radius={radius}&key={key}".into(),
            api_key_env: "POI_API_KEY".into(),
            rate_limit_per_sec: 10.0,
            max_retries: 3,
            initial_backoff_ms: 200,
        }
    }
}

pub trait Transport: Sync {
    fn get(&self, url: &str) -> std::result::Result<String, String>;
}

/// Token bucket with capacity one token.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Option<Instant>,
}

impl RateLimiter {
    pub fn new(per_sec: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / per_sec),
            next: None,
        }
    }

    /// Reserves the next slot and returns how long the caller must wait for it.
    pub fn reserve(&mut self, now: Instant) -> Duration {
        let slot = match self.next {
            Some(next) if next > now => next,
            _ => now,
        };
        self.next = Some(slot + self.interval);
        slot - now
    }
}

pub struct HttpPoiProvider<T: Transport> {
    config: HttpProviderConfig,
    api_key: String,
    transport: T,
    limiter: Mutex<RateLimiter>,
    sleep: fn(Duration),
}

impl<T: Transport> HttpPoiProvider<T> {
    pub fn new(config: HttpProviderConfig, transport: T) -> Result<Self> {
        if !(config.rate_limit_per_sec > 0.0) {
            return Err(Error::InvalidConfig("geo.http.rate_limit_per_sec must be > 0".into()));
        }
        let api_key = std::env::var(&config.api_key_env).unwrap_or_default();
        if config.url_template.contains("{key}") && api_key.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "environment variable {} is not set",
                config.api_key_env
            )));
        }
        let limiter = Mutex::new(RateLimiter::new(config.rate_limit_per_sec));
        Ok(HttpPoiProvider {
            config,
            api_key,
            transport,
            limiter,
            sleep: std::thread::sleep,
        })
    }

    /// Replaces the blocking sleep, e.g. to run backoff logic instantly.
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn url_for(&self, site: &TowerSite, radius_m: f64) -> String {
        self.config
            .url_template
            .replace("{lat}", &format!("{:.6}", site.lat))
            .replace("{lon}", &format!("{:.6}", site.lon))
            .replace("{radius}", &format!("{:.0}", radius_m.ceil()))
            .replace("{key}", &self.api_key)
    }
}

/// Extracts categories from a places-style JSON body: `results[].types[]`.
pub fn parse_places_response(body: &str) -> Result<Vec<String>> {
    #[derive(Deserialize)]
    struct Place {
        #[serde(default)]
        types: Vec<String>,
    }
    #[derive(Deserialize)]
    struct Body {
        #[serde(default)]
        results: Vec<Place>,
    }
    let body: Body = serde_json::from_str(body)?;
    Ok(body.results.into_iter().flat_map(|p| p.types).collect())
}

impl<T: Transport> PoiProvider for HttpPoiProvider<T> {
    fn fetch(&self, site: &TowerSite, radius_m: f64) -> Result<PoiFetch> {
        let url = self.url_for(site, radius_m);
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let backoff = self.config.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                (self.sleep)(Duration::from_millis(backoff));
            }
            let wait = self.limiter.lock().expect("rate limiter poisoned").reserve(Instant::now());
            if !wait.is_zero() {
                (self.sleep)(wait);
            }
            match self.transport.get(&url) {
                Ok(body) => match parse_places_response(&body) {
                    Ok(categories) => {
                        return Ok(PoiFetch {
                            categories,
                            missing: false,
                        })
                    }
                    Err(e) => last_error = e.to_string(),
                },
                Err(e) => last_error = e,
            }
        }
        Err(Error::Provider {
            tower_id: site.tower_id.clone(),
            message: format!(
                "gave up after {} attempts: {last_error}",
                self.config.max_retries + 1
            ),
        })
    }
}

#[cfg(feature = "http-poi")]
pub struct UreqTransport {
    agent: ureq::Agent,
}

#[cfg(feature = "http-poi")]
impl Default for UreqTransport {
    fn default() -> Self {
        UreqTransport {
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
        }
    }
}

#[cfg(feature = "http-poi")]
impl Transport for UreqTransport {
    fn get(&self, url: &str) -> std::result::Result<String, String> {
        self.agent
            .get(url)
            .call()
            .map_err(|e| e.to_string())?
            .into_string()
            .map_err(|e| e.to_string())
    }
}
