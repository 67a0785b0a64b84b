//! Request generation and candidate selection.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::engine::{mix64, Cycle, RngStream};
use crate::error::{Error, Result};
use crate::lifecycle::{AgentId, Sigma, SkillId};
use crate::overlay::AgentRecord;
use crate::substrate::HostIdx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub source: HostIdx,
    pub skill: SkillId,
    pub issued_at: Cycle,
}

/// End-to-end result of one request. Latency fields are `None` on failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestOutcome {
    pub request: Request,
    pub success: bool,
    pub agent: Option<AgentRecord>,
    pub l_disc: Option<Cycle>,
    pub l_route: Option<Cycle>,
    pub l_start: Option<Cycle>,
    pub l_total: Option<Cycle>,
    pub request_msgs: u64,
    pub hops: u32,
}

impl RequestOutcome {
    pub fn failed(request: Request, agent: Option<AgentRecord>, request_msgs: u64, hops: u32) -> Self {
        Self {
            request,
            success: false,
            agent,
            l_disc: None,
            l_route: None,
            l_start: None,
            l_total: None,
            request_msgs,
            hops,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn served(
        request: Request,
        agent: AgentRecord,
        l_disc: Cycle,
        l_route: Cycle,
        l_start: Cycle,
        request_msgs: u64,
        hops: u32,
    ) -> Self {
        Self {
            request,
            success: true,
            agent: Some(agent),
            l_disc: Some(l_disc),
            l_route: Some(l_route),
            l_start: Some(l_start),
            l_total: Some(l_disc + l_route + l_start),
            request_msgs,
            hops,
        }
    }

    /// Latency terms add up on success and are all absent on failure.
    pub fn is_consistent(&self) -> bool {
        match (self.success, self.l_disc, self.l_route, self.l_start, self.l_total) {
            (true, Some(d), Some(r), Some(s), Some(t)) => self.agent.is_some() && d + r + s == t,
            (false, None, None, None, None) => true,
            _ => false,
        }
    }
}

/// Knobs for request skill selection. Defaults give a uniform draw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadParams {
    /// Zipf exponent over skill ranks; `None` is uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zipf_exponent: Option<f64>,
    /// Temporal locality: with probability `locality_repeat` a request reuses
    /// a skill requested within the last `locality_window` cycles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locality_window: Option<u32>,
    #[serde(default = "default_repeat")]
    pub locality_repeat: f64,
}

fn default_repeat() -> f64 {
    0.5
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.zipf_exponent {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("zipf exponent must be positive, got {s}")));
            }
        }
        if !(0.0..=1.0).contains(&self.locality_repeat) {
            return Err(Error::InvalidConfig(format!("locality_repeat {} outside [0,1]", self.locality_repeat)));
        }
        Ok(())
    }
}

/// Draws request skills; keeps the short history used for locality.
#[derive(Debug, Clone)]
pub struct SkillSampler {
    catalog: u32,
    zipf: Option<Zipf<f64>>,
    locality: Option<(u32, f64)>,
    recent: VecDeque<(Cycle, SkillId)>,
}

impl SkillSampler {
    pub fn new(catalog: u32, params: &WorkloadParams) -> Result<Self> {
        if catalog == 0 {
            return Err(Error::InvalidConfig("empty skill catalog".into()));
        }
        params.validate()?;
        let zipf = params
            .zipf_exponent
            .map(|s| Zipf::new(catalog as f64, s).map_err(|e| Error::InvalidConfig(format!("zipf: {e}"))))
            .transpose()?;
        Ok(Self {
            catalog,
            zipf,
            locality: params.locality_window.filter(|&w| w > 0).map(|w| (w, params.locality_repeat)),
            recent: VecDeque::new(),
        })
    }

    pub fn uniform(catalog: u32) -> Self {
        Self::new(catalog, &WorkloadParams::default()).expect("non-empty catalog")
    }

    pub fn sample(&mut self, now: Cycle, rng: &mut RngStream) -> SkillId {
        if let Some((window, repeat)) = self.locality {
            while self.recent.front().is_some_and(|&(t, _)| t + window as Cycle <= now) {
                self.recent.pop_front();
            }
            if !self.recent.is_empty() && rng.random_bool(repeat) {
                let i = rng.random_range(0..self.recent.len());
                let skill = self.recent[i].1;
                self.recent.push_back((now, skill));
                return skill;
            }
        }
        let skill = match &self.zipf {
            // Zipf ranks start at 1; rank r maps to skill r - 1.
            Some(z) => SkillId((z.sample(rng) as u32).clamp(1, self.catalog) - 1),
            None => SkillId(rng.random_range(0..self.catalog)),
        };
        if self.locality.is_some() {
            self.recent.push_back((now, skill));
        }
        skill
    }
}

/// Every alive host issues a request with probability `rate` this cycle.
pub fn generate_requests(
    alive: impl IntoIterator<Item = HostIdx>,
    rate: f64,
    sampler: &mut SkillSampler,
    rng: &mut RngStream,
    now: Cycle,
    next_id: &mut u64,
) -> Vec<Request> {
    let mut out = Vec::new();
    for source in alive {
        if rng.random_bool(rate) {
            let skill = sampler.sample(now, rng);
            out.push(Request { id: *next_id, source, skill, issued_at: now });
            *next_id += 1;
        }
    }
    out
}

fn tie_hash(request_id: u64, agent: AgentId) -> u64 {
    mix64(request_id.rotate_left(32) ^ agent.0 as u64)
}

/// Orders candidates: believed warm first, then lower expected startup,
/// then more recently refreshed records, then a per-request hash.
pub fn rank_candidates(candidates: &[AgentRecord], request_id: u64, warming_mean: f64) -> Vec<AgentRecord> {
    let expected_start = |r: &AgentRecord| match r.believed {
        Sigma::Warm => 0.0,
        _ => warming_mean,
    };
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|a, b| {
        (b.believed == Sigma::Warm)
            .cmp(&(a.believed == Sigma::Warm))
            .then(expected_start(a).total_cmp(&expected_start(b)))
            .then(b.refreshed_at.cmp(&a.refreshed_at))
            .then(tie_hash(request_id, a.agent).cmp(&tie_hash(request_id, b.agent)))
            .then(a.agent.cmp(&b.agent))
    });
    ranked
}

/// Best `k` candidates for a request.
pub fn top_k_select(candidates: &[AgentRecord], k: usize, request_id: u64, warming_mean: f64) -> Vec<AgentRecord> {
    let mut ranked = rank_candidates(candidates, request_id, warming_mean);
    ranked.truncate(k);
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::StreamLabel;

    fn rec(agent: u32, believed: Sigma) -> AgentRecord {
        AgentRecord { agent: AgentId(agent), host: HostIdx(agent), skill: SkillId(0), believed, refreshed_at: 0 }
    }

    #[test]
    fn empty_selects_nothing() {
        assert!(top_k_select(&[], 1, 7, 2.0).is_empty());
    }

    #[test]
    fn warm_preferred() {
        let pick = top_k_select(&[rec(1, Sigma::Cold), rec(2, Sigma::Warm)], 1, 0, 2.0);
        assert_eq!(pick[0].agent, AgentId(2));
    }

    #[test]
    fn ties_replay_identically() {
        let c: Vec<_> = (0..6).map(|i| rec(i, Sigma::Warm)).collect();
        let mut differs = false;
        for id in 0..50 {
            let a = top_k_select(&c, 1, id, 2.0);
            let b = top_k_select(&c, 1, id, 2.0);
            assert_eq!(a, b);
            differs |= a[0].agent != top_k_select(&c, 1, 0, 2.0)[0].agent;
        }
        assert!(differs, "tie-break should vary across requests");
    }

    #[test]
    fn request_volume_matches_rate() {
        let mut rng = RngStream::new(3, StreamLabel::Workload);
        let mut sampler = SkillSampler::uniform(50);
        let mut id = 0;
        let hosts: Vec<HostIdx> = (0..2048).map(HostIdx).collect();
        let cycles = 1000;
        let total: usize = (0..cycles)
            .map(|t| generate_requests(hosts.iter().copied(), 0.15, &mut sampler, &mut rng, t, &mut id).len())
            .sum();
        let mean = total as f64 / cycles as f64;
        let expected = 2048.0 * 0.15;
        assert!((mean - expected).abs() / expected < 0.05, "mean {mean}");
        assert_eq!(id as usize, total);
        assert!(generate_requests(std::iter::empty(), 0.15, &mut sampler, &mut rng, 0, &mut id).is_empty());
    }

    #[test]
    fn uniform_skill_frequencies() {
        let mut rng = RngStream::new(5, StreamLabel::Workload);
        let mut sampler = SkillSampler::uniform(50);
        let n = 100_000;
        let mut counts = [0u32; 50];
        for _ in 0..n {
            counts[sampler.sample(0, &mut rng).0 as usize] += 1;
        }
        for (s, &c) in counts.iter().enumerate() {
            let f = c as f64 / n as f64;
            assert!((f - 0.02).abs() <= 0.005, "skill {s}: {f}");
        }
    }

    #[test]
    fn zipf_favours_low_ranks() {
        let params = WorkloadParams { zipf_exponent: Some(1.2), ..Default::default() };
        let mut sampler = SkillSampler::new(50, &params).unwrap();
        let mut rng = RngStream::new(6, StreamLabel::Workload);
        let mut counts = [0u32; 50];
        for _ in 0..20_000 {
            counts[sampler.sample(0, &mut rng).0 as usize] += 1;
        }
        assert!(counts[0] > counts[1] && counts[1] > counts[10] && counts[10] > counts[49]);
    }

    #[test]
    fn locality_repeats_recent_skills() {
        let params = WorkloadParams { locality_window: Some(5), locality_repeat: 1.0, ..Default::default() };
        let mut sampler = SkillSampler::new(50, &params).unwrap();
        let mut rng = RngStream::new(7, StreamLabel::Workload);
        let first = sampler.sample(0, &mut rng);
        for t in 0..5 {
            assert_eq!(sampler.sample(t, &mut rng), first);
        }
        assert!(SkillSampler::new(50, &WorkloadParams { locality_repeat: 2.0, ..Default::default() }).is_err());
    }

    #[test]
    fn outcome_consistency() {
        let r = Request { id: 0, source: HostIdx(0), skill: SkillId(0), issued_at: 3 };
        let ok = RequestOutcome::served(r, rec(1, Sigma::Warm), 0, 1, 0, 1, 0);
        assert_eq!(ok.l_total, Some(1));
        assert!(ok.is_consistent());
        assert!(RequestOutcome::failed(r, None, 4, 2).is_consistent());
    }
}
