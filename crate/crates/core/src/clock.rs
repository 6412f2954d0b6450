//! Injectable time source for the orchestrator.
//!
//! Both clocks sit on tokio's timer. Under a runtime built with paused time
//! (see [`crate::sim::simulated_runtime`]) sleeps complete instantly in real
//! time while virtual time advances exactly, which makes rate limiting and
//! backoff deterministic and fast to test.

use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use futures::future::BoxFuture;
use tokio::time::Instant;

pub trait Clock: Send + Sync {
    /// Elapsed time since the clock's origin.
    fn now(&self) -> Duration;

    fn sleep(&self, duration: Duration) -> BoxFuture<'static, ()>;

    fn sleep_until(&self, at: Duration) -> BoxFuture<'static, ()> {
        self.sleep(at.saturating_sub(self.now()))
    }

    /// Calendar time used for index and report timestamps.
    fn wall_time(&self) -> DateTime<Utc>;

    /// Smallest distinguishable interval.
    fn resolution(&self) -> Duration {
        Duration::from_millis(1)
    }
}

#[derive(Debug, Clone)]
pub struct TokioClock {
    origin: Instant,
    epoch: DateTime<Utc>,
}

impl TokioClock {
    /// Real time; timestamps are taken from the system clock at construction.
    pub fn system() -> Self {
        TokioClock {
            origin: Instant::now(),
            epoch: Utc::now(),
        }
    }

    /// Virtual time anchored at a fixed calendar epoch. Meant for a runtime
    /// with paused time so that runs are bit-reproducible.
    pub fn simulated() -> Self {
        TokioClock {
            origin: Instant::now(),
            epoch: Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

impl Clock for TokioClock {
    fn now(&self) -> Duration {
        Instant::now().duration_since(self.origin)
    }

    fn sleep(&self, duration: Duration) -> BoxFuture<'static, ()> {
        Box::pin(tokio::time::sleep(duration))
    }

    fn sleep_until(&self, at: Duration) -> BoxFuture<'static, ()> {
        Box::pin(tokio::time::sleep_until(self.origin + at))
    }

    fn wall_time(&self) -> DateTime<Utc> {
        self.epoch + chrono::Duration::from_std(self.now()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test(start_paused = true)]
    async fn paused_clock_advances_exactly() {
        let clock = TokioClock::simulated();
        let t0 = clock.now();
        clock.sleep(Duration::from_secs(3)).await;
        assert_eq!(clock.now() - t0, Duration::from_secs(3));
        clock.sleep_until(Duration::from_millis(4500)).await;
        assert_eq!(clock.now(), Duration::from_millis(4500));
        assert_eq!(clock.wall_time().to_rfc3339(), "2025-01-01T00:00:04.500+00:00");
    }
}
