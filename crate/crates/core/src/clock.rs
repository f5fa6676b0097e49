//! Time sources. Every policy decision reads a [`Clock`], so the same code
//! runs against wall time, accelerated wall time, or a stepped virtual clock.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn from_secs(secs: u64) -> Self {
        Timestamp(secs * 1000)
    }

    pub fn as_millis(self) -> u64 {
        self.0
    }

    pub fn plus(self, d: Duration) -> Timestamp {
        Timestamp(self.0.saturating_add(d.as_millis() as u64))
    }

    /// Elapsed time since `earlier`, zero if `earlier` is in the future.
    pub fn since(self, earlier: Timestamp) -> Duration {
        Duration::from_millis(self.0.saturating_sub(earlier.0))
    }

    pub fn to_datetime(self) -> chrono::DateTime<chrono::Utc> {
        chrono::DateTime::from_timestamp_millis(self.0 as i64).unwrap_or_default()
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format("%Y-%m-%dT%H:%M:%S%.3fZ"))
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;

    /// Wall time that corresponds to `d` of clock time.
    fn to_wall(&self, d: Duration) -> Duration;

    fn sleep(&self, d: Duration) {
        let wall = self.to_wall(d);
        if !wall.is_zero() {
            std::thread::sleep(wall);
        }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Timestamp(ms)
    }

    fn to_wall(&self, d: Duration) -> Duration {
        d
    }
}

/// Wall clock running `factor` times faster than real time from `origin`.
#[derive(Debug)]
pub struct ScaledClock {
    origin: Timestamp,
    started: Instant,
    factor: f64,
}

impl ScaledClock {
    pub fn new(origin: Timestamp, factor: f64) -> Self {
        assert!(factor >= 1.0, "acceleration factor must be >= 1");
        ScaledClock {
            origin,
            started: Instant::now(),
            factor,
        }
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> Timestamp {
        let virt = self.started.elapsed().as_secs_f64() * self.factor * 1000.0;
        Timestamp(self.origin.0 + virt as u64)
    }

    fn to_wall(&self, d: Duration) -> Duration {
        d.div_f64(self.factor)
    }
}

/// Virtual clock advanced explicitly by its owner. Sleeping returns
/// immediately: durations are modeled by the caller as events.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock {
            now: AtomicU64::new(start.0),
        }
    }

    pub fn set(&self, t: Timestamp) {
        self.now.store(t.0, Ordering::SeqCst);
    }

    pub fn advance(&self, d: Duration) -> Timestamp {
        let ms = d.as_millis() as u64;
        Timestamp(self.now.fetch_add(ms, Ordering::SeqCst) + ms)
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now.load(Ordering::SeqCst))
    }

    fn to_wall(&self, _d: Duration) -> Duration {
        Duration::ZERO
    }
}

/// Virtual clock for work run ahead of time: sleeping advances it
/// instantly, and `elapsed` tells how much clock time the work represents.
#[derive(Debug)]
pub struct RecordingClock {
    start: Timestamp,
    slept_ms: AtomicU64,
}

impl RecordingClock {
    pub fn new(start: Timestamp) -> Self {
        RecordingClock {
            start,
            slept_ms: AtomicU64::new(0),
        }
    }

    pub fn elapsed(&self) -> Duration {
        Duration::from_millis(self.slept_ms.load(Ordering::SeqCst))
    }
}

impl Clock for RecordingClock {
    fn now(&self) -> Timestamp {
        self.start.plus(self.elapsed())
    }

    fn to_wall(&self, _d: Duration) -> Duration {
        Duration::ZERO
    }

    fn sleep(&self, d: Duration) {
        self.slept_ms
            .fetch_add(d.as_millis() as u64, Ordering::SeqCst);
    }
}

/// Cancellation flag that sleepers can wait on.
#[derive(Debug, Default)]
pub struct CancelToken {
    cancelled: Mutex<bool>,
    cv: Condvar,
}

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        *self.cancelled.lock().unwrap() = true;
        self.cv.notify_all();
    }

    pub fn is_cancelled(&self) -> bool {
        *self.cancelled.lock().unwrap()
    }

    /// Sleeps `d` of clock time; returns true if cancelled first.
    pub fn sleep(&self, clock: &dyn Clock, d: Duration) -> bool {
        let wall = clock.to_wall(d);
        if wall.is_zero() {
            clock.sleep(d);
            return self.is_cancelled();
        }
        let deadline = Instant::now() + wall;
        let mut guard = self.cancelled.lock().unwrap();
        loop {
            if *guard {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            guard = self.cv.wait_timeout(guard, deadline - now).unwrap().0;
        }
    }
}
