//! HTTP client for the diffusion inpainting service.
//!
//! Wire protocol:
//!
//! * `POST {endpoint}/inpaint` with
//!   `{"image": <base64 RGB PNG>, "mask": <base64 8-bit gray PNG, 255 = inpaint>, "seed": <int, optional>}`
//!   answers `{"image": <base64 RGB PNG>}`.
//! * `GET {endpoint}/health` answers `{"model": ..., "ready": true, ...}`.
//!
//! No prompt field is ever sent. Any non-200 status or schema violation is a
//! backend error; connection failures and timeouts are retried.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendIdentity, InpaintBackend, InpaintRequest, Inpainted};
use crate::image::ImageBuffer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, initial_backoff_ms: 1000 }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteSettings {
    pub endpoint: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireInpaintRequest {
    pub image: String,
    pub mask: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireInpaintResponse {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub model: String,
    pub ready: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deterministic: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defaults: Option<serde_json::Value>,
}

impl WireInpaintRequest {
    pub fn encode(req: &InpaintRequest<'_>) -> Result<Self, BackendError> {
        let enc = |r: Result<Vec<u8>, crate::image::ImageError>| {
            r.map(|b| B64.encode(b)).map_err(|e| BackendError::InvalidRequest(e.to_string()))
        };
        Ok(Self {
            image: enc(req.image.encode_png())?,
            mask: enc(req.mask.encode_png())?,
            seed: req.seed,
        })
    }
}

impl WireInpaintResponse {
    pub fn decode(&self) -> Result<ImageBuffer, BackendError> {
        let bytes = B64
            .decode(self.image.as_bytes())
            .map_err(|e| BackendError::Backend(format!("response image is not base64: {e}")))?;
        ImageBuffer::decode(&bytes).map_err(|e| BackendError::Backend(format!("response image: {e}")))
    }
}

/// Counting semaphore bounding concurrent requests across all chains.
#[derive(Debug)]
struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    settings: RemoteSettings,
    client: reqwest::blocking::Client,
    in_flight: Arc<InFlight>,
    health: Mutex<Option<Health>>,
}

impl RemoteBackend {
    pub fn new(settings: RemoteSettings) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| BackendError::Backend(format!("cannot build HTTP client: {e}")))?;
        let in_flight = Arc::new(InFlight::new(settings.max_in_flight.max(1)));
        Ok(Self { settings, client, in_flight, health: Mutex::new(None) })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.settings.endpoint.trim_end_matches('/'))
    }

    fn classify(e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(e.to_string())
        } else if e.is_connect() || e.is_request() {
            BackendError::Unreachable(e.to_string())
        } else if e.is_decode() {
            BackendError::Backend(format!("malformed response body: {e}"))
        } else {
            BackendError::Backend(e.to_string())
        }
    }

    fn post_once(&self, body: &WireInpaintRequest) -> Result<ImageBuffer, BackendError> {
        let _permit = self.in_flight.acquire();
        let resp = self.client.post(self.url("inpaint")).json(body).send().map_err(Self::classify)?;
        let status = resp.status();
        if !status.is_success() || status.as_u16() != 200 {
            let text = resp.text().unwrap_or_default();
            let snippet: String = text.chars().take(200).collect();
            return Err(BackendError::Backend(format!("HTTP {status}: {snippet}")));
        }
        let parsed: WireInpaintResponse = resp.json().map_err(|e| match Self::classify(e) {
            BackendError::Backend(m) => BackendError::Backend(m),
            other => other,
        })?;
        parsed.decode()
    }
}

impl InpaintBackend for RemoteBackend {
    fn inpaint(&self, req: &InpaintRequest<'_>) -> Result<Inpainted, BackendError> {
        let body = WireInpaintRequest::encode(req)?;
        let policy = &self.settings.retry;
        let attempts = policy.attempts.max(1);
        let mut backoff = Duration::from_millis(policy.initial_backoff_ms);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.post_once(&body) {
                Ok(image) => {
                    if image.dimensions() != req.image.dimensions() {
                        return Err(BackendError::DimensionMismatch {
                            expected: req.image.dimensions(),
                            got: image.dimensions(),
                        });
                    }
                    return Ok(Inpainted { image, attempts: attempt });
                }
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("inpaint attempt {attempt}/{attempts} failed: {e}; retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn identity(&self) -> BackendIdentity {
        let health = self.health.lock().unwrap_or_else(|e| e.into_inner()).clone();
        BackendIdentity {
            kind: "RemoteDiffusion".into(),
            endpoint: Some(self.settings.endpoint.clone()),
            model: health.as_ref().map(|h| h.model.clone()),
            deterministic: health.as_ref().and_then(|h| h.deterministic),
            defaults: health.and_then(|h| h.defaults),
        }
    }

    fn health(&self) -> Result<Option<Health>, BackendError> {
        let resp = self.client.get(self.url("health")).send().map_err(Self::classify)?;
        let status = resp.status();
        if status.as_u16() != 200 {
            return Err(BackendError::Backend(format!("health probe returned HTTP {status}")));
        }
        let health: Health = resp
            .json()
            .map_err(|e| BackendError::Backend(format!("malformed health response: {e}")))?;
        if !health.ready {
            return Err(BackendError::Backend(format!("model {} is not ready", health.model)));
        }
        *self.health.lock().unwrap_or_else(|e| e.into_inner()) = Some(health.clone());
        Ok(Some(health))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::MaskRaster;

    #[test]
    fn wire_request_has_no_prompt_and_optional_seed() {
        let img = ImageBuffer::filled(4, 4, [1, 2, 3]);
        let mask = MaskRaster::from_rect(4, 4, (0, 0, 2, 2));
        let req = InpaintRequest::new(&img, &mask, None).unwrap();
        let v = serde_json::to_value(WireInpaintRequest::encode(&req).unwrap()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, vec!["image", "mask"]);

        let req = InpaintRequest::new(&img, &mask, Some(42)).unwrap();
        let v = serde_json::to_value(WireInpaintRequest::encode(&req).unwrap()).unwrap();
        assert_eq!(v["seed"], 42);
    }

    #[test]
    fn wire_mask_is_gray_png() {
        let img = ImageBuffer::filled(4, 4, [1, 2, 3]);
        let mask = MaskRaster::from_rect(4, 4, (0, 0, 2, 2));
        let req = InpaintRequest::new(&img, &mask, None).unwrap();
        let wire = WireInpaintRequest::encode(&req).unwrap();
        let bytes = B64.decode(wire.mask).unwrap();
        let decoded = ::image::load_from_memory(&bytes).unwrap();
        assert_eq!(decoded.color(), ::image::ColorType::L8);
        assert_eq!(decoded.to_luma8().into_raw(), mask.as_raw());
    }

    #[test]
    fn response_decoding_errors() {
        assert!(WireInpaintResponse { image: "%%%".into() }.decode().is_err());
        assert!(WireInpaintResponse { image: B64.encode(b"not a png") }.decode().is_err());
    }

    #[test]
    fn in_flight_bound_blocks_until_release() {
        let sem = Arc::new(InFlight::new(1));
        let p = sem.acquire();
        let s2 = sem.clone();
        let h = std::thread::spawn(move || {
            let _q = s2.acquire();
        });
        std::thread::sleep(Duration::from_millis(50));
        assert!(!h.is_finished());
        drop(p);
        h.join().unwrap();
    }
}
