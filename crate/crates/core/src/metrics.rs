//! Average-reward tracking and scaling metrics.
//!
//! A run is summarized by a [`RunLog`]: smoothed average reward sampled every
//! `interval` steps. From logs we compute the first timestep after which the
//! smoothed reward stays at or above a threshold, and the ratio of those
//! timesteps when the problem size doubles.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("timesteps must strictly increase (line {line})")]
    NotIncreasing { line: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Smoothing {
    /// Mean over the last `window` rewards (fewer at the start of a run).
    #[default]
    Trailing,
    /// Exponentially weighted mean with step size `1 / window`, bias-corrected.
    Ewma,
}

/// Streaming smoother. Rewards are summed exactly when they are integers,
/// so the trailing mean does not drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTracker {
    window: usize,
    interval: u64,
    smoothing: Smoothing,
    recent: VecDeque<f64>,
    sum: f64,
    ewma: f64,
    ewma_weight: f64,
    t: u64,
    points: Vec<EvalPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub timestep: u64,
    pub avg_reward: f64,
}

impl RewardTracker {
    pub fn new(window: usize, interval: u64, smoothing: Smoothing) -> Self {
        assert!(window >= 1 && interval >= 1, "window and interval must be positive");
        RewardTracker {
            window,
            interval,
            smoothing,
            recent: VecDeque::with_capacity(if smoothing == Smoothing::Trailing { window } else { 0 }),
            sum: 0.0,
            ewma: 0.0,
            ewma_weight: 0.0,
            t: 0,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, reward: f64) {
        self.t += 1;
        match self.smoothing {
            Smoothing::Trailing => {
                if self.recent.len() == self.window {
                    self.sum -= self.recent.pop_front().expect("window is non-empty");
                }
                self.recent.push_back(reward);
                self.sum += reward;
            }
            Smoothing::Ewma => {
                let beta = 1.0 / self.window as f64;
                self.ewma += beta * (reward - self.ewma);
                self.ewma_weight += beta * (1.0 - self.ewma_weight);
            }
        }
        if self.t % self.interval == 0 {
            self.points.push(EvalPoint { timestep: self.t, avg_reward: self.current() });
        }
    }

    pub fn current(&self) -> f64 {
        match self.smoothing {
            Smoothing::Trailing if self.recent.is_empty() => 0.0,
            Smoothing::Trailing => self.sum / self.recent.len() as f64,
            Smoothing::Ewma if self.ewma_weight == 0.0 => 0.0,
            Smoothing::Ewma => self.ewma / self.ewma_weight,
        }
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    pub fn points(&self) -> &[EvalPoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<EvalPoint> {
        self.points
    }
}

/// Batch form of [`RewardTracker`] with trailing-window smoothing.
pub fn smoothed_average(rewards: &[f64], window: usize, interval: u64) -> Vec<EvalPoint> {
    let mut tracker = RewardTracker::new(window, interval, Smoothing::Trailing);
    for &r in rewards {
        tracker.push(r);
    }
    tracker.into_points()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub n: usize,
    pub algorithm: String,
    pub seed: u64,
    pub config_hash: String,
    pub window: usize,
    pub interval: u64,
    #[serde(default)]
    pub smoothing: Smoothing,
    /// Timestep at which weights became non-finite, if the run diverged.
    #[serde(default)]
    pub diverged_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub points: Vec<EvalPoint>,
    pub meta: RunMeta,
}

impl RunLog {
    /// `timestep,avg_reward` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestep,avg_reward\n");
        for p in &self.points {
            writeln!(out, "{},{}", p.timestep, p.avg_reward).expect("writing to a String");
        }
        out
    }

    pub fn points_from_csv(text: &str) -> Result<Vec<EvalPoint>, LogError> {
        let mut points: Vec<EvalPoint> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || (i == 0 && line.starts_with("timestep")) {
                continue;
            }
            let (t, r) = line
                .split_once(',')
                .ok_or_else(|| LogError::Parse { line: line_no, reason: "expected `timestep,avg_reward`".into() })?;
            let timestep = t
                .trim()
                .parse::<u64>()
                .map_err(|e| LogError::Parse { line: line_no, reason: format!("timestep: {e}") })?;
            let avg_reward = r
                .trim()
                .parse::<f64>()
                .map_err(|e| LogError::Parse { line: line_no, reason: format!("avg_reward: {e}") })?;
            if points.last().is_some_and(|p| p.timestep >= timestep) {
                return Err(LogError::NotIncreasing { line: line_no });
            }
            points.push(EvalPoint { timestep, avg_reward });
        }
        Ok(points)
    }

    pub fn final_reward(&self) -> Option<f64> {
        self.points.last().map(|p| p.avg_reward)
    }
}

/// Earliest eval timestep from which every later smoothed value is at least
/// `r_thresh`. `None` if the final value is below the threshold.
pub fn timesteps_to_threshold(points: &[EvalPoint], r_thresh: f64) -> Option<u64> {
    let mut earliest = None;
    for p in points.iter().rev() {
        if p.avg_reward >= r_thresh {
            earliest = Some(p.timestep);
        } else {
            break;
        }
    }
    earliest
}

/// `t_2n / t_n`; `None` when either run never sustained the threshold.
pub fn doubling_ratio(t_2n: Option<u64>, t_n: Option<u64>) -> Option<f64> {
    match (t_2n, t_n) {
        (Some(a), Some(b)) if b > 0 => Some(a as f64 / b as f64),
        _ => None,
    }
}

/// Per-seed thresholds combined across seeds. Seeds that never reached the
/// threshold count as infinitely late.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub median: Option<f64>,
    pub min: Option<u64>,
    pub max: Option<u64>,
    pub reached: usize,
    pub seeds: usize,
}

pub fn aggregate_thresholds(per_seed: &[Option<u64>]) -> ThresholdSummary {
    let mut values: Vec<f64> = per_seed.iter().map(|t| t.map_or(f64::INFINITY, |v| v as f64)).collect();
    values.sort_by(f64::total_cmp);
    let median = if values.is_empty() {
        None
    } else if values.len() % 2 == 1 {
        Some(values[values.len() / 2])
    } else {
        Some(0.5 * (values[values.len() / 2 - 1] + values[values.len() / 2]))
    }
    .filter(|m| m.is_finite());
    let reached: Vec<u64> = per_seed.iter().flatten().copied().collect();
    ThresholdSummary {
        median,
        min: reached.iter().min().copied(),
        max: if reached.len() == per_seed.len() { reached.iter().max().copied() } else { None },
        reached: reached.len(),
        seeds: per_seed.len(),
    }
}

/// Metric output for one `(n, algorithm)` group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n: usize,
    pub algorithm: String,
    pub t_threshold: ThresholdSummary,
    pub seeds: Vec<u64>,
    /// Median threshold at `2n` over median threshold at `n`, keyed by `n`.
    pub doubling_ratios: Vec<(usize, Option<f64>)>,
}

/// Groups logs by `(algorithm, n)` and computes thresholds and doubling ratios.
pub fn summarize(logs: &[RunLog], r_thresh: f64) -> Vec<MetricsSummary> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, usize), Vec<&RunLog>> = BTreeMap::new();
    for log in logs {
        groups.entry((log.meta.algorithm.clone(), log.meta.n)).or_default().push(log);
    }
    let medians: BTreeMap<(String, usize), Option<f64>> = groups
        .iter()
        .map(|(k, runs)| {
            let per_seed: Vec<Option<u64>> = runs.iter().map(|l| threshold_of(l, r_thresh)).collect();
            (k.clone(), aggregate_thresholds(&per_seed).median)
        })
        .collect();
    groups
        .iter()
        .map(|((algorithm, n), runs)| {
            let per_seed: Vec<Option<u64>> = runs.iter().map(|l| threshold_of(l, r_thresh)).collect();
            let ratio = medians.get(&(algorithm.clone(), 2 * n)).map(|t2n| match (t2n, medians[&(algorithm.clone(), *n)]) {
                (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                _ => None,
            });
            MetricsSummary {
                n: *n,
                algorithm: algorithm.clone(),
                t_threshold: aggregate_thresholds(&per_seed),
                seeds: runs.iter().map(|l| l.meta.seed).collect(),
                doubling_ratios: ratio.map(|r| vec![(*n, r)]).unwrap_or_default(),
            }
        })
        .collect()
}

fn threshold_of(log: &RunLog, r_thresh: f64) -> Option<u64> {
    if log.meta.diverged_at.is_some() {
        None
    } else {
        timesteps_to_threshold(&log.points, r_thresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(values: &[f64]) -> Vec<EvalPoint> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| EvalPoint { timestep: (i as u64 + 1) * 10, avg_reward: v })
            .collect()
    }

    #[test]
    fn smoothing_cases() {
        let s = smoothed_average(&[0.5; 40], 7, 5);
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|p| p.avg_reward == 0.5));

        let alt: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let s = smoothed_average(&alt, 10, 10);
        assert!(s.iter().all(|p| p.avg_reward == 0.0));

        let raw = [1.0, -1.0, 0.0, 2.0];
        let s = smoothed_average(&raw, 1, 1);
        assert_eq!(s.iter().map(|p| p.avg_reward).collect::<Vec<_>>(), raw);
        assert_eq!(s.iter().map(|p| p.timestep).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn short_runs_use_available_rewards() {
        let s = smoothed_average(&[1.0, 0.0, 0.0, 0.0], 100, 2);
        assert_eq!(s[0].avg_reward, 0.5);
        assert_eq!(s[1].avg_reward, 0.25);
    }

    #[test]
    fn ewma_tracks_constant() {
        let mut t = RewardTracker::new(50, 10, Smoothing::Ewma);
        for _ in 0..100 {
            t.push(-0.3);
        }
        assert!(t.points().iter().all(|p| (p.avg_reward + 0.3).abs() < 1e-12));
    }

    #[test]
    fn threshold_cases() {
        assert_eq!(timesteps_to_threshold(&pts(&[0.1, 0.2, 0.3]), 0.0), Some(10));
        assert_eq!(timesteps_to_threshold(&pts(&[-0.1, -0.2]), 0.0), None);
        assert_eq!(timesteps_to_threshold(&pts(&[-1.0, -1.0, 0.1, 0.2]), 0.0), Some(30));
        assert_eq!(timesteps_to_threshold(&pts(&[0.5, -0.1, 0.1, 0.2]), 0.0), Some(30));
        assert_eq!(timesteps_to_threshold(&pts(&[0.5, 0.4, -0.1]), 0.0), None);
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(doubling_ratio(Some(4_000_000), Some(2_000_000)), Some(2.0));
        assert_eq!(doubling_ratio(Some(7), Some(7)), Some(1.0));
        assert_eq!(doubling_ratio(None, Some(7)), None);
        assert_eq!(doubling_ratio(Some(7), None), None);
    }

    #[test]
    fn aggregation() {
        let s = aggregate_thresholds(&[Some(30), Some(10), Some(20)]);
        assert_eq!((s.median, s.min, s.max, s.reached), (Some(20.0), Some(10), Some(30), 3));
        let s = aggregate_thresholds(&[Some(30), None, Some(10)]);
        assert_eq!((s.median, s.min, s.max, s.reached), (Some(30.0), Some(10), None, 2));
        let s = aggregate_thresholds(&[None, None, Some(10)]);
        assert_eq!(s.median, None);
    }

    #[test]
    fn csv_round_trip() {
        let log = RunLog {
            points: pts(&[0.1, -0.25, 1.0 / 3.0]),
            meta: RunMeta {
                n: 2,
                algorithm: "nibbler".into(),
                seed: 1,
                config_hash: "abc".into(),
                window: 10,
                interval: 10,
                smoothing: Smoothing::Trailing,
                diverged_at: None,
            },
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("timestep,avg_reward\n10,0.1\n"));
        assert_eq!(RunLog::points_from_csv(&csv).unwrap(), log.points);
        assert!(RunLog::points_from_csv("timestep,avg_reward\n10,1\n10,2\n").is_err());
        assert!(RunLog::points_from_csv("10;1\n").is_err());
    }

    #[test]
    fn summary_groups_and_ratios() {
        let make = |n, seed, values: &[f64]| RunLog {
            points: pts(values),
            meta: RunMeta {
                n,
                algorithm: "nibbler".into(),
                seed,
                config_hash: String::new(),
                window: 1,
                interval: 10,
                smoothing: Smoothing::Trailing,
                diverged_at: None,
            },
        };
        let logs = vec![
            make(2, 1, &[-1.0, 0.5, 0.5, 0.5]),
            make(2, 2, &[-1.0, 0.5, 0.5, 0.5]),
            make(4, 1, &[-1.0, -1.0, -1.0, 0.5]),
            make(4, 2, &[-1.0, -1.0, -1.0, 0.5]),
        ];
        let s = summarize(&logs, 0.0);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].n, 2);
        assert_eq!(s[0].doubling_ratios, vec![(2, Some(2.0))]);
        assert!(s[1].doubling_ratios.is_empty());
    }

    proptest! {
        #[test]
        fn threshold_monotone_in_level(
            values in prop::collection::vec(-1.0f64..1.0, 1..50),
            a in -1.0f64..1.0,
            b in -1.0f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p = pts(&values);
            match (timesteps_to_threshold(&p, lo), timesteps_to_threshold(&p, hi)) {
                (Some(t_lo), Some(t_hi)) => prop_assert!(t_hi >= t_lo),
                (None, Some(_)) => prop_assert!(false, "higher threshold reached when lower was not"),
                _ => {}
            }
        }

        #[test]
        fn ratio_scale_invariant(t_n in 1u64..1_000_000, t_2n in 1u64..1_000_000, k in 1u64..100) {
            let r = doubling_ratio(Some(t_2n), Some(t_n)).unwrap();
            let scaled = doubling_ratio(Some(t_2n * k), Some(t_n * k)).unwrap();
            prop_assert!((r - scaled).abs() <= 1e-12 * r.max(1.0));
        }
    }
}
