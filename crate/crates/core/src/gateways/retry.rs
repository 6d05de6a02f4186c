use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use log::warn;

use super::{ChatGateway, ChatRequest, Completion, FaceAnalyzer, FaceDetection, GatewayError, ImageEncoder, ImageRef};
use crate::vector::EmbeddingVector;

pub const DEFAULT_RETRY_LIMIT: u32 = 3;
pub const DEFAULT_BACKOFF_BASE: Duration = Duration::from_millis(250);

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Exponential backoff for retryable gateway failures.
#[derive(Clone)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub retry_limit: u32,
    pub base: Duration,
    sleeper: Sleeper,
}

impl std::fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetryPolicy")
            .field("retry_limit", &self.retry_limit)
            .field("base", &self.base)
            .finish()
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self::new(DEFAULT_RETRY_LIMIT, DEFAULT_BACKOFF_BASE)
    }
}

impl RetryPolicy {
    pub fn new(retry_limit: u32, base: Duration) -> Self {
        Self {
            retry_limit,
            base,
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    /// Replaces the sleep function, mainly so tests can record delays.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    /// Delay before retry number `retry` (0-based): `base * 2^retry`.
    pub fn delay(&self, retry: u32) -> Duration {
        self.base.saturating_mul(1u32.checked_shl(retry.min(20)).unwrap_or(u32::MAX))
    }

    pub fn sleep(&self, d: Duration) {
        (self.sleeper)(d)
    }

    pub fn run<T>(&self, what: &str, mut op: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let mut retry = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && retry < self.retry_limit => {
                    let d = self.delay(retry);
                    warn!("{what}: {e}; retrying in {d:?} ({}/{})", retry + 1, self.retry_limit);
                    (self.sleeper)(d);
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Wraps any gateway role with [`RetryPolicy`].
pub struct Retrying<G> {
    inner: G,
    policy: RetryPolicy,
}

impl<G> Retrying<G> {
    pub fn new(inner: G, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<G: ChatGateway> ChatGateway for Retrying<G> {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        self.policy.run("chat", || self.inner.complete(request))
    }
}

impl<G: ImageEncoder> ImageEncoder for Retrying<G> {
    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, GatewayError> {
        self.policy.run("image embedding", || self.inner.embed_image(image))
    }
}

impl<G: FaceAnalyzer> FaceAnalyzer for Retrying<G> {
    fn detect_faces(&self, image: &ImageRef, min_confidence: f64) -> Result<Vec<FaceDetection>, GatewayError> {
        self.policy.run("face detection", || self.inner.detect_faces(image, min_confidence))
    }
}

/// Counting semaphore bounding in-flight provider calls.
#[derive(Debug, Clone)]
pub struct ConcurrencyLimit {
    state: Arc<(Mutex<usize>, Condvar)>,
    max: usize,
}

pub struct Permit<'a> {
    limit: &'a ConcurrencyLimit,
}

impl ConcurrencyLimit {
    pub fn new(max: usize) -> Self {
        Self {
            state: Arc::new((Mutex::new(0), Condvar::new())),
            max: max.max(1),
        }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn acquire(&self) -> Permit<'_> {
        let (lock, cv) = &*self.state;
        let mut in_flight = lock.lock().unwrap_or_else(|e| e.into_inner());
        while *in_flight >= self.max {
            in_flight = cv.wait(in_flight).unwrap_or_else(|e| e.into_inner());
        }
        *in_flight += 1;
        Permit { limit: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let (lock, cv) = &*self.limit.state;
        let mut in_flight = lock.lock().unwrap_or_else(|e| e.into_inner());
        *in_flight -= 1;
        cv.notify_one();
    }
}

/// Wraps a gateway so at most `limit.max()` calls run at once.
pub struct Limited<G> {
    inner: G,
    limit: ConcurrencyLimit,
}

impl<G> Limited<G> {
    pub fn new(inner: G, limit: ConcurrencyLimit) -> Self {
        Self { inner, limit }
    }
}

impl<G: ChatGateway> ChatGateway for Limited<G> {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let _permit = self.limit.acquire();
        self.inner.complete(request)
    }
}

impl<G: ImageEncoder> ImageEncoder for Limited<G> {
    fn embed_image(&self, image: &ImageRef) -> Result<EmbeddingVector, GatewayError> {
        let _permit = self.limit.acquire();
        self.inner.embed_image(image)
    }
}

impl<G: FaceAnalyzer> FaceAnalyzer for Limited<G> {
    fn detect_faces(&self, image: &ImageRef, min_confidence: f64) -> Result<Vec<FaceDetection>, GatewayError> {
        let _permit = self.limit.acquire();
        self.inner.detect_faces(image, min_confidence)
    }
}
