use serde::{Deserialize, Serialize};

use super::log::SessionRecord;
use crate::beamform::Method;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodShare {
    pub method: Method,
    pub count: u64,
    /// `100 * count / rounds`; 0 when there are no rounds.
    pub percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub round_id: u64,
    pub loss: f64,
    pub step_skipped: bool,
}

/// Mean and sample standard deviation of a set of durations, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub count: usize,
    pub mean_s: f64,
    pub sd_s: f64,
}

impl TimingSummary {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let sd = if samples.len() > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(TimingSummary { count: samples.len(), mean_s: mean, sd_s: sd })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub rounds: u64,
    /// One entry per method, in [`Method::ALL`] order.
    pub shares: Vec<MethodShare>,
    pub losses: Vec<LossPoint>,
    /// Duration of the training steps actually taken.
    pub train_timing: Option<TimingSummary>,
    /// Candidate rendering plus training, per round.
    pub round_timing: Option<TimingSummary>,
}

impl SessionStats {
    pub fn from_records(records: &[SessionRecord]) -> Self {
        let rounds = records.len() as u64;
        let shares = Method::ALL
            .iter()
            .map(|&method| {
                let count = records.iter().filter(|r| r.selected_method == method).count() as u64;
                let percent = if rounds == 0 { 0.0 } else { count as f64 * 100.0 / rounds as f64 };
                MethodShare { method, count, percent }
            })
            .collect();
        let losses = records
            .iter()
            .map(|r| LossPoint { round_id: r.round_id, loss: r.loss, step_skipped: r.step_skipped })
            .collect();
        let train: Vec<f64> = records.iter().filter(|r| !r.step_skipped).map(|r| r.timing.train_s).collect();
        let total: Vec<f64> = records.iter().map(|r| r.timing.render_s + r.timing.train_s).collect();
        SessionStats {
            rounds,
            shares,
            losses,
            train_timing: TimingSummary::from_samples(&train),
            round_timing: TimingSummary::from_samples(&total),
        }
    }

    pub fn count(&self, method: Method) -> u64 {
        self.shares.iter().find(|s| s.method == method).map_or(0, |s| s.count)
    }

    pub fn percent(&self, method: Method) -> f64 {
        self.shares.iter().find(|s| s.method == method).map_or(0.0, |s| s.percent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_summary_uses_sample_sd() {
        let s = TimingSummary::from_samples(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean_s, 2.0);
        assert_eq!(s.sd_s, 1.0);
        assert!(TimingSummary::from_samples(&[]).is_none());
    }

    #[test]
    fn empty_session_has_zero_counts() {
        let s = SessionStats::from_records(&[]);
        assert_eq!(s.rounds, 0);
        assert_eq!(s.shares.len(), 5);
        assert!(s.shares.iter().all(|m| m.count == 0 && m.percent == 0.0));
    }
}
