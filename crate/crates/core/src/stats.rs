//! Summary statistics for mask and error values.

use serde::{Deserialize, Serialize};

pub const HISTOGRAM_BINS: usize = 20;

/// Mean, spread and a 20-bin histogram over `[0, 1]` of a set of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub p95: f64,
    pub histogram: [u64; HISTOGRAM_BINS],
}

impl Summary {
    /// Summarize `values`. Values outside `[0, 1]` are clamped into the
    /// end bins of the histogram; the moments use them unchanged.
    pub fn of(values: &[f64]) -> Summary {
        let count = values.len();
        if count == 0 {
            return Summary {
                count,
                mean: 0.0,
                std: 0.0,
                p95: 0.0,
                histogram: [0; HISTOGRAM_BINS],
            };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        Summary {
            count,
            mean,
            std: var.sqrt(),
            p95: percentile(values, 0.95),
            histogram: histogram(values),
        }
    }
}

pub fn histogram(values: &[f64]) -> [u64; HISTOGRAM_BINS] {
    let mut bins = [0u64; HISTOGRAM_BINS];
    for &v in values {
        let idx = (v * HISTOGRAM_BINS as f64).floor();
        let idx = idx.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize;
        bins[idx] += 1;
    }
    bins
}

/// Nearest-rank percentile, `q ∈ (0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_conserves_count() {
        let v = [0.0, 0.05, 0.5, 0.999, 1.0, 0.51];
        let h = histogram(&v);
        assert_eq!(h.iter().sum::<u64>(), v.len() as u64);
        assert_eq!(h[0], 1);
        assert_eq!(h[1], 1);
        assert_eq!(h[10], 2);
        assert_eq!(h[19], 2);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn summary_moments() {
        let s = Summary::of(&[0.5, 0.5, 1.0, 0.0]);
        assert_eq!(s.mean, 0.5);
        assert!((s.std - (0.125f64).sqrt()).abs() < 1e-15);
        assert_eq!(s.p95, 1.0);
    }
}
