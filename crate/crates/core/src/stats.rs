//! Wall-clock latency summaries.

use std::time::{Duration, Instant};

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Pixels per rendered frame; zero for non-render measurements.
    pub pixels: usize,
    /// Million pixels per second at the mean latency.
    pub mpix_per_s: f64,
}

impl LatencyStats {
    /// Summarizes samples; percentiles use the nearest-rank method.
    pub fn from_samples(samples: &[Duration], pixels: usize) -> Self {
        assert!(!samples.is_empty(), "latency stats need at least one sample");
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let rank = |p: f64| ms[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        let mean_ms = ms.iter().sum::<f64>() / n as f64;
        let mpix_per_s = if pixels > 0 && mean_ms > 0.0 {
            pixels as f64 / (mean_ms * 1e3)
        } else {
            0.0
        };
        Self {
            samples: n,
            mean_ms,
            p50_ms: if n == 1 { mean_ms } else { rank(0.5) },
            p99_ms: rank(0.99),
            min_ms: ms[0],
            max_ms: ms[n - 1],
            pixels,
            mpix_per_s,
        }
    }
}

/// Runs `f` `iterations` times and times each call.
pub fn time_iterations<T>(iterations: usize, mut f: impl FnMut() -> T) -> (Vec<Duration>, Option<T>) {
    let mut samples = Vec::with_capacity(iterations);
    let mut last = None;
    for _ in 0..iterations {
        let start = Instant::now();
        let out = f();
        samples.push(start.elapsed());
        last = Some(out);
    }
    (samples, last)
}
