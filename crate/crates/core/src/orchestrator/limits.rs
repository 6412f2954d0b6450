//! Concurrency cap, request-rate limiter, retry policy and the bounded call.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::backend::{is_retryable, AnnotationBackend, AnnotationRequest, UnitAnnotation};
use crate::clock::Clock;
use crate::error::{Error, Result};

/// Error recorded on a unit whose retry budget ran out.
pub const RETRY_EXHAUSTED: &str = "retry_exhausted";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub r_max: u32,
    #[serde(with = "secs")]
    pub b_min: Duration,
    #[serde(with = "secs")]
    pub b_max: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            r_max: 3,
            b_min: Duration::from_secs(1),
            b_max: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.b_min.is_zero() || self.b_min > self.b_max {
            return Err(Error::Config(format!(
                "backoff bounds must satisfy 0 < b_min <= b_max (got {:?}, {:?})",
                self.b_min, self.b_max
            )));
        }
        Ok(())
    }

    /// Sleeps taken by a unit that fails retryably on every attempt.
    pub fn backoff_schedule(&self) -> Vec<Duration> {
        let mut b = self.b_min;
        (0..self.r_max)
            .map(|_| {
                let s = b;
                b = (b * 2).min(self.b_max);
                s
            })
            .collect()
    }
}

/// Serde helper: durations as fractional seconds.
pub(crate) mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let x = f64::deserialize(d)?;
        Duration::try_from_secs_f64(x).map_err(serde::de::Error::custom)
    }
}

/// Minimum-interval limiter: granted dispatch times are spaced by at least `1/rps`.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    state: Mutex<LimiterState>,
}

#[derive(Debug, Default)]
struct LimiterState {
    last: Option<Duration>,
    granted: Vec<Duration>,
}

impl RateLimiter {
    pub fn new(rps: f64) -> Result<Self> {
        if !(rps.is_finite() && rps > 0.0) {
            return Err(Error::Config(format!("request rate must be positive (got {rps})")));
        }
        Ok(RateLimiter {
            interval: Duration::from_secs_f64(1.0 / rps),
            state: Mutex::new(LimiterState::default()),
        })
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Reserve the earliest slot not before `now`; returns the dispatch time.
    pub fn acquire(&self, now: Duration) -> Duration {
        let mut st = self.state.lock().expect("limiter poisoned");
        let at = match st.last {
            Some(last) => now.max(last + self.interval),
            None => now,
        };
        st.last = Some(at);
        st.granted.push(at);
        at
    }

    /// Reserve a slot and sleep until it.
    pub async fn wait(&self, clock: &dyn Clock) -> Duration {
        let at = self.acquire(clock.now());
        clock.sleep_until(at).await;
        at
    }

    /// Every granted dispatch time, in grant order.
    pub fn dispatch_times(&self) -> Vec<Duration> {
        self.state.lock().expect("limiter poisoned").granted.clone()
    }
}

/// Run-wide call counters.
#[derive(Debug, Default)]
pub struct CallStats {
    pub requests_issued: AtomicU64,
    pub backend_calls: AtomicU64,
    pub retries: AtomicU64,
    pub transient_errors: AtomicU64,
    pub failed_units: AtomicU64,
    in_flight: AtomicUsize,
    pub peak_in_flight: AtomicUsize,
}

impl CallStats {
    fn enter(&self) {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
    }

    fn leave(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::SeqCst)
    }
}

/// One line of the per-call log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub unit_id: String,
    pub payload_id: String,
    pub attempt: u32,
    pub outcome: String,
    pub status: Option<u16>,
    pub dispatched_at: f64,
    pub latency: f64,
}

#[derive(Debug)]
pub struct CallLog {
    out: Mutex<BufWriter<File>>,
}

impl CallLog {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(CallLog {
            out: Mutex::new(BufWriter::new(f)),
        })
    }

    fn write(&self, rec: &CallRecord) {
        let mut out = self.out.lock().expect("call log poisoned");
        let line = serde_json::to_string(rec).expect("call record serializes");
        if let Err(e) = writeln!(out, "{line}") {
            tracing::warn!("call log write failed: {e}");
        }
    }

    pub fn flush(&self) -> Result<()> {
        self.out
            .lock()
            .expect("call log poisoned")
            .flush()
            .map_err(|e| Error::io("calls.jsonl", e))
    }
}

/// Shared limits for every backend call of a run.
pub struct Limits {
    pub semaphore: Semaphore,
    pub limiter: RateLimiter,
    pub retry: RetryPolicy,
    pub clock: Arc<dyn Clock>,
    pub stats: CallStats,
    pub log: Option<CallLog>,
}

impl Limits {
    pub fn new(concurrency: usize, rps: f64, retry: RetryPolicy, clock: Arc<dyn Clock>) -> Result<Self> {
        if concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        retry.validate()?;
        Ok(Limits {
            semaphore: Semaphore::new(concurrency),
            limiter: RateLimiter::new(rps)?,
            retry,
            clock,
            stats: CallStats::default(),
            log: None,
        })
    }

    pub fn with_log(mut self, log: CallLog) -> Self {
        self.log = Some(log);
        self
    }
}

/// A bounded call's result and the backoff sleeps it took.
#[derive(Debug, Clone)]
pub struct CallTrace {
    pub annotation: UnitAnnotation,
    pub sleeps: Vec<Duration>,
}

/// Slot, then rate limiter, then one attempt; retryable failures release the
/// slot, sleep and try again until the budget is spent. Never fails outward.
pub async fn bounded_call(
    backend: &dyn AnnotationBackend,
    request: &AnnotationRequest,
    limits: &Limits,
) -> CallTrace {
    let stats = &limits.stats;
    let mut backoff = limits.retry.b_min;
    let mut retries = 0u32;
    let mut attempts = 0u32;
    let mut sleeps = Vec::new();
    loop {
        let permit = limits
            .semaphore
            .acquire()
            .await
            .expect("run semaphore is never closed");
        let dispatched = limits.limiter.wait(limits.clock.as_ref()).await;
        attempts += 1;
        if attempts == 1 {
            stats.requests_issued.fetch_add(1, Ordering::SeqCst);
        }
        stats.backend_calls.fetch_add(1, Ordering::SeqCst);
        stats.enter();
        let result = backend.annotate(request).await;
        stats.leave();
        let latency = limits.clock.now().saturating_sub(dispatched);
        drop(permit);

        if let Some(log) = &limits.log {
            log.write(&CallRecord {
                unit_id: request.unit_id.clone(),
                payload_id: request.payload.id.to_string(),
                attempt: attempts,
                outcome: if result.is_ok() { "ok" } else { "error" }.into(),
                status: result.as_ref().err().map(|e| e.status),
                dispatched_at: dispatched.as_secs_f64(),
                latency: latency.as_secs_f64(),
            });
        }

        let err = match result {
            Ok(mut annotation) => {
                annotation.attempts = attempts;
                return CallTrace { annotation, sleeps };
            }
            Err(e) => e,
        };
        stats.transient_errors.fetch_add(1, Ordering::SeqCst);
        let fail = |msg: String| {
            stats.failed_units.fetch_add(1, Ordering::SeqCst);
            tracing::warn!(unit = %request.unit_id, payload = %request.payload.id, "{msg}");
            UnitAnnotation::failed(request, msg, attempts)
        };
        if !is_retryable(&err) {
            let annotation = fail(err.to_string());
            return CallTrace { annotation, sleeps };
        }
        if retries >= limits.retry.r_max {
            let annotation = fail(RETRY_EXHAUSTED.to_string());
            return CallTrace { annotation, sleeps };
        }
        limits.clock.sleep(backoff).await;
        sleeps.push(backoff);
        stats.retries.fetch_add(1, Ordering::SeqCst);
        retries += 1;
        backoff = (backoff * 2).min(limits.retry.b_max);
    }
}
