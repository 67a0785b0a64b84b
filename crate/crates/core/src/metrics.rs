//! Per-run summaries, useful availability and cross-seed aggregation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::engine::Cycle;
use crate::overlay::OverlayKind;
use crate::workload::RequestOutcome;

/// Latency budgets at which U_Δ is sampled.
pub const DELTA_GRID: [Cycle; 12] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64];

/// Index of the mid-grid budget (Δ = 8).
pub const MID_GRID: usize = 5;

/// Fraction of requests served within `delta`; failures count as misses.
/// `None` for an empty batch.
pub fn useful_availability(outcomes: &[RequestOutcome], delta: Cycle) -> Option<f64> {
    if outcomes.is_empty() {
        return None;
    }
    let hits = outcomes.iter().filter(|o| o.success && o.l_total.is_some_and(|l| l <= delta)).count();
    Some(hits as f64 / outcomes.len() as f64)
}

/// Nearest-rank percentile (`p` in (0, 100]) of a sorted sample.
pub fn percentile_nearest_rank(sorted: &[Cycle], p: f64) -> Option<Cycle> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Keeps outcomes of requests issued at or after `warmup`.
pub fn warmup_filter<'a>(
    outcomes: impl IntoIterator<Item = &'a RequestOutcome>,
    warmup: Cycle,
) -> impl Iterator<Item = &'a RequestOutcome> {
    outcomes.into_iter().filter(move |o| o.request.issued_at >= warmup)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub regime: String,
    pub overlay: OverlayKind,
    pub seed: u64,
    pub n_requests: usize,
    pub success_rate: f64,
    pub p50: Option<Cycle>,
    pub p95: Option<Cycle>,
    pub req_msgs_per_request: f64,
    pub maint_msgs_per_cycle: f64,
    /// U_Δ at each point of [`DELTA_GRID`].
    pub u_delta: Vec<f64>,
    /// Mean discovery hops over successful requests.
    pub mean_hops: f64,
}

impl RunSummary {
    /// Builds a summary from post-warmup outcomes and the maintenance traffic
    /// counted over `measured_cycles`.
    pub fn from_outcomes(
        regime: &str,
        overlay: OverlayKind,
        seed: u64,
        outcomes: &[RequestOutcome],
        maintenance_msgs: u64,
        measured_cycles: Cycle,
    ) -> Self {
        let n = outcomes.len();
        let mut lat: Vec<Cycle> = outcomes.iter().filter_map(|o| o.l_total).collect();
        lat.sort_unstable();
        let successes = outcomes.iter().filter(|o| o.success).count();
        let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
        Self {
            regime: regime.to_string(),
            overlay,
            seed,
            n_requests: n,
            success_rate: ratio(successes as f64, n),
            p50: percentile_nearest_rank(&lat, 50.0),
            p95: percentile_nearest_rank(&lat, 95.0),
            req_msgs_per_request: ratio(outcomes.iter().map(|o| o.request_msgs).sum::<u64>() as f64, n),
            maint_msgs_per_cycle: ratio(maintenance_msgs as f64, measured_cycles as usize),
            u_delta: DELTA_GRID.iter().map(|&d| useful_availability(outcomes, d).unwrap_or(0.0)).collect(),
            mean_hops: ratio(outcomes.iter().filter(|o| o.success).map(|o| o.hops as f64).sum(), successes),
        }
    }

    pub fn u_at(&self, delta: Cycle) -> Option<f64> {
        DELTA_GRID.iter().position(|&d| d == delta).map(|i| self.u_delta[i])
    }

    /// U_Δ non-decreasing and bounded by the success rate.
    pub fn u_delta_is_consistent(&self) -> bool {
        self.u_delta.windows(2).all(|w| w[0] <= w[1]) && self.u_delta.iter().all(|&u| u <= self.success_rate + 1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    /// Student-t 95% half-width; absent with fewer than two seeds.
    pub ci95_half_width: Option<f64>,
    pub n_seeds: usize,
}

impl AggregateStat {
    pub fn from_samples(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        // Shifted by the first sample so equal inputs give an exact mean.
        let mean = values[0] + values.iter().map(|v| v - values[0]).sum::<f64>() / n as f64;
        let ci95_half_width = (n >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof > 0").inverse_cdf(0.975);
            t * var.sqrt() / (n as f64).sqrt()
        });
        Some(Self { mean, ci95_half_width, n_seeds: n })
    }
}

/// Cross-seed statistics for one (regime, overlay) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub regime: String,
    pub overlay: OverlayKind,
    pub success_rate: AggregateStat,
    pub p50: Option<AggregateStat>,
    pub p95: Option<AggregateStat>,
    pub req_msgs_per_request: AggregateStat,
    pub maint_msgs_per_cycle: AggregateStat,
    pub u_delta: Vec<(Cycle, AggregateStat)>,
}

/// Groups summaries by (regime, overlay), in first-seen order of the sorted
/// input, and aggregates each metric over seeds.
pub fn aggregate(summaries: &[RunSummary]) -> Vec<GroupAggregate> {
    let mut keys: Vec<(String, OverlayKind)> = summaries.iter().map(|s| (s.regime.clone(), s.overlay)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(regime, overlay)| {
            let group: Vec<&RunSummary> =
                summaries.iter().filter(|s| s.regime == regime && s.overlay == overlay).collect();
            let stat = |f: &dyn Fn(&RunSummary) -> f64| {
                AggregateStat::from_samples(&group.iter().map(|s| f(s)).collect::<Vec<_>>()).expect("non-empty group")
            };
            let opt_stat = |f: &dyn Fn(&RunSummary) -> Option<Cycle>| {
                let v: Vec<f64> = group.iter().filter_map(|s| f(s)).map(|c| c as f64).collect();
                AggregateStat::from_samples(&v)
            };
            GroupAggregate {
                success_rate: stat(&|s| s.success_rate),
                p50: opt_stat(&|s| s.p50),
                p95: opt_stat(&|s| s.p95),
                req_msgs_per_request: stat(&|s| s.req_msgs_per_request),
                maint_msgs_per_cycle: stat(&|s| s.maint_msgs_per_cycle),
                u_delta: DELTA_GRID.iter().enumerate().map(|(i, &d)| (d, stat(&|s| s.u_delta[i]))).collect(),
                regime,
                overlay,
            }
        })
        .collect()
}
