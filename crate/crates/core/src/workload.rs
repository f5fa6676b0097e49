//! Synthetic arrival schedules: a non-homogeneous Poisson process with a
//! piecewise-constant hourly rate, working-hours and seasonal multipliers,
//! and a marker-count mixture that decides the local/remote split.
//!
//! Each simulated day draws from its own ChaCha stream, so days can be
//! generated in parallel and the schedule does not depend on thread count.

use std::collections::BTreeMap;
use std::time::Duration;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::kernels::ExecMode;
use crate::manager::Submission;
use crate::model::JobKind;

const DAY_MS: u64 = 86_400_000;
const HOUR_MS: u64 = 3_600_000;

/// Inclusive `(month, day)` range within a year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeasonalWindow {
    pub from: (u32, u32),
    pub to: (u32, u32),
}

impl SeasonalWindow {
    pub fn contains(&self, date: NaiveDate) -> bool {
        let md = (date.month(), date.day());
        self.from <= md && md <= self.to
    }
}

/// Mixture over `max_markers`: uniform on `[1, local_max]` with the
/// profile's local mass, log-uniform on `[remote_min, remote_max]` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerDistribution {
    pub local_max: u32,
    pub remote_min: u32,
    pub remote_max: u32,
}

impl Default for MarkerDistribution {
    fn default() -> Self {
        MarkerDistribution {
            local_max: 100,
            remote_min: 101,
            remote_max: 3000,
        }
    }
}

impl MarkerDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, remote_fraction: f64, rng: &mut R) -> u32 {
        if rng.random_bool(remote_fraction) {
            let lo = f64::from(self.remote_min).ln();
            let hi = (f64::from(self.remote_max) + 1.0).ln();
            let m = rng.random_range(lo..hi).exp().floor() as u32;
            m.clamp(self.remote_min, self.remote_max)
        } else {
            rng.random_range(1..=self.local_max)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadProfile {
    pub base_jobs_per_day: f64,
    /// Share of jobs above the local marker threshold.
    pub remote_fraction: f64,
    pub working_hours_multiplier: f64,
    /// `[start_hour, end_hour)` in UTC.
    pub working_hours_window: (u32, u32),
    pub seasonal_multiplier: f64,
    pub seasonal_windows: Vec<SeasonalWindow>,
    pub marker_distribution: MarkerDistribution,
    /// Log-normal job duration: median and shape, capped at `max_duration_s`.
    pub median_duration_s: f64,
    pub duration_sigma: f64,
    pub max_duration_s: f64,
    pub sample_size: u32,
    /// First simulated day, `YYYY-MM-DD`.
    pub start_date: String,
}

impl Default for WorkloadProfile {
    fn default() -> Self {
        WorkloadProfile {
            base_jobs_per_day: 60.0,
            remote_fraction: 40.0 / 60.0,
            working_hours_multiplier: 1.5,
            working_hours_window: (9, 17),
            seasonal_multiplier: 2.0,
            seasonal_windows: vec![
                SeasonalWindow {
                    from: (7, 1),
                    to: (7, 31),
                },
                SeasonalWindow {
                    from: (11, 1),
                    to: (11, 30),
                },
            ],
            marker_distribution: MarkerDistribution::default(),
            median_duration_s: 600.0,
            duration_sigma: 1.0,
            max_duration_s: 86_400.0,
            sample_size: 100,
            start_date: "2014-01-06".into(),
        }
    }
}

impl WorkloadProfile {
    pub fn paper_daily() -> Self {
        WorkloadProfile::default()
    }

    /// `paper-daily` or a path to a JSON profile (missing fields default).
    pub fn load(name: &str) -> Result<Self, String> {
        let profile = if name == "paper-daily" {
            WorkloadProfile::paper_daily()
        } else {
            let text = std::fs::read_to_string(name).map_err(|e| format!("{name}: {e}"))?;
            serde_json::from_str(&text).map_err(|e| format!("{name}: {e}"))?
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_jobs_per_day >= 0.0 && self.base_jobs_per_day.is_finite()) {
            return Err("base_jobs_per_day must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.remote_fraction) {
            return Err("remote_fraction must be in [0, 1]".into());
        }
        if !(self.working_hours_multiplier >= 1.0) || !(self.seasonal_multiplier >= 1.0) {
            return Err("multipliers must be at least 1".into());
        }
        let (s, e) = self.working_hours_window;
        if !(s < e && e <= 24) {
            return Err("working_hours_window must satisfy start < end <= 24".into());
        }
        let m = &self.marker_distribution;
        if !(m.local_max >= 1 && m.local_max < m.remote_min && m.remote_min <= m.remote_max) {
            return Err("marker_distribution ranges must be ordered and disjoint".into());
        }
        if !(self.median_duration_s > 0.0 && self.duration_sigma >= 0.0) {
            return Err("duration parameters must be positive".into());
        }
        if self.sample_size < 3 {
            return Err("sample_size must be at least 3".into());
        }
        self.start()?;
        Ok(())
    }

    pub fn start(&self) -> Result<Timestamp, String> {
        let d = NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| format!("bad start_date {:?}: {e}", self.start_date))?;
        let ms = d
            .and_hms_opt(0, 0, 0)
            .expect("midnight")
            .and_utc()
            .timestamp_millis();
        u64::try_from(ms)
            .map(Timestamp)
            .map_err(|_| "start_date before 1970".to_string())
    }

    fn in_window(&self, hour: u32) -> bool {
        let (s, e) = self.working_hours_window;
        (s..e).contains(&hour)
    }

    /// Expected arrivals over the whole day.
    pub fn daily_total(&self, date: NaiveDate) -> f64 {
        let seasonal = self.seasonal_windows.iter().any(|w| w.contains(date));
        self.base_jobs_per_day
            * if seasonal {
                self.seasonal_multiplier
            } else {
                1.0
            }
    }

    /// Expected arrivals in `hour` of `date`. The working-hours multiplier
    /// reshapes the day without changing its total.
    pub fn hourly_rate(&self, date: NaiveDate, hour: u32) -> f64 {
        let (s, e) = self.working_hours_window;
        let w = f64::from(e - s);
        let weight_sum = w * self.working_hours_multiplier + (24.0 - w);
        let weight = if self.in_window(hour) {
            self.working_hours_multiplier
        } else {
            1.0
        };
        self.daily_total(date) * weight / weight_sum
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub at: Timestamp,
    pub kind: JobKind,
    pub params: BTreeMap<String, String>,
    pub markers: u32,
    pub samples: u32,
}

impl Arrival {
    pub fn duration(&self) -> Duration {
        crate::kernels::nominal_duration(self.kind, &self.params)
    }

    pub fn submission(&self) -> Submission {
        Submission {
            kind: Some(self.kind.as_str().into()),
            params: self.params.clone(),
            markers: Some(self.markers),
            samples: Some(self.samples),
            owner: Some("workload".into()),
            ..Submission::default()
        }
    }
}

fn day_arrivals(profile: &WorkloadProfile, start: Timestamp, day: u64, seed: u64) -> Vec<Arrival> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(day);
    let day_start = Timestamp(start.0 + day * DAY_MS);
    let date = day_start.to_datetime().date_naive();
    let mut times = Vec::new();
    for hour in 0..24u32 {
        let rate = profile.hourly_rate(date, hour);
        let n = if rate > 0.0 {
            Poisson::new(rate).expect("positive rate").sample(&mut rng) as u64
        } else {
            0
        };
        let hour_start = day_start.0 + u64::from(hour) * HOUR_MS;
        times.extend((0..n).map(|_| hour_start + rng.random_range(0..HOUR_MS)));
    }
    times.sort_unstable();

    let durations = LogNormal::new(profile.median_duration_s.ln(), profile.duration_sigma)
        .expect("validated duration parameters");
    times
        .into_iter()
        .map(|t| {
            let markers = profile
                .marker_distribution
                .sample(profile.remote_fraction, &mut rng);
            let secs = durations.sample(&mut rng).min(profile.max_duration_s);
            let mut params = BTreeMap::new();
            params.insert(
                "duration_ms".into(),
                ((secs * 1000.0).round() as u64).to_string(),
            );
            Arrival {
                at: Timestamp(t),
                kind: JobKind::Sleep,
                params,
                markers,
                samples: profile.sample_size,
            }
        })
        .collect()
}

/// Arrivals in `[start, start + horizon)`, ordered by time. A pure function
/// of its arguments; `mode` only changes how days are spread over threads.
pub fn generate_workload(
    profile: &WorkloadProfile,
    horizon: Duration,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<Arrival>, String> {
    profile.validate()?;
    let start = profile.start()?;
    let horizon_ms = horizon.as_millis() as u64;
    let days = horizon_ms.div_ceil(DAY_MS);
    let per_day = |d: u64| day_arrivals(profile, start, d, seed);
    let chunks: Vec<Vec<Arrival>> = match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..days).into_par_iter().map(per_day).collect()
        }
        _ => (0..days).map(per_day).collect(),
    };
    let end = start.0 + horizon_ms;
    Ok(chunks
        .into_iter()
        .flatten()
        .filter(|a| a.at.0 < end)
        .collect())
}
