//! Node churn (sessions and downtimes) and the agent warm/cold/off lifecycle.
//!
//! Every duration is a geometric number of cycles (support `1..`) with the
//! configured mean. Agent timers carry the agent's epoch at creation; a timer
//! whose epoch no longer matches is stale and ignored.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::engine::{Cycle, RngStream};
use crate::error::{Error, Result};
use crate::substrate::HostIdx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SkillId(pub u32);

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u32);

impl AgentId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma {
    Warm,
    Cold,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentState {
    pub sigma: Sigma,
    pub idle_since: Cycle,
    /// Set only while a cold agent is warming up.
    pub warming_until: Option<Cycle>,
    pub epoch: u32,
}

impl AgentState {
    fn warm(now: Cycle) -> Self {
        Self { sigma: Sigma::Warm, idle_since: now, warming_until: None, epoch: 0 }
    }
}

/// Means in cycles; `None` is a disabled process.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_mean: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downtime_mean: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ready_mean: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suspended_mean: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warming_mean: Option<u32>,
}

impl ChurnParams {
    pub const STABLE: ChurnParams = ChurnParams {
        session_mean: None,
        downtime_mean: None,
        ready_mean: None,
        suspended_mean: None,
        warming_mean: None,
    };

    pub const fn node(session: u32, downtime: u32) -> Self {
        ChurnParams { session_mean: Some(session), downtime_mean: Some(downtime), ..Self::STABLE }
    }

    pub const fn cooling(ready: u32, suspended: u32, warming: u32) -> Self {
        ChurnParams {
            ready_mean: Some(ready),
            suspended_mean: Some(suspended),
            warming_mean: Some(warming),
            ..Self::STABLE
        }
    }

    pub const fn combined(session: u32, downtime: u32, ready: u32, suspended: u32, warming: u32) -> Self {
        ChurnParams {
            session_mean: Some(session),
            downtime_mean: Some(downtime),
            ready_mean: Some(ready),
            suspended_mean: Some(suspended),
            warming_mean: Some(warming),
        }
    }

    pub fn node_churn_enabled(&self) -> bool {
        self.session_mean.is_some()
    }

    pub fn lifecycle_enabled(&self) -> bool {
        self.ready_mean.is_some()
    }

    /// Zero means "disabled" in hand-written overrides.
    pub fn normalized(mut self) -> Self {
        for m in [
            &mut self.session_mean,
            &mut self.downtime_mean,
            &mut self.ready_mean,
            &mut self.suspended_mean,
            &mut self.warming_mean,
        ] {
            if *m == Some(0) {
                *m = None;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.session_mean.is_some() != self.downtime_mean.is_some() {
            return Err(Error::InvalidConfig("session and downtime must be enabled together".into()));
        }
        let l = [self.ready_mean, self.suspended_mean, self.warming_mean];
        if l.iter().any(Option::is_some) && !l.iter().all(Option::is_some) {
            return Err(Error::InvalidConfig("ready, suspended and warming must be enabled together".into()));
        }
        Ok(())
    }
}

/// Geometric duration on `{1, 2, ...}` with the given mean.
pub fn draw_duration(mean: u32, rng: &mut RngStream) -> Cycle {
    assert!(mean >= 1, "duration mean must be at least one cycle");
    if mean == 1 {
        return 1;
    }
    let geo = Geometric::new(1.0 / mean as f64).expect("p in (0, 1]");
    1 + geo.sample(rng)
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: AgentId,
    pub host: HostIdx,
    /// Sorted, non-empty.
    pub skills: Vec<SkillId>,
    pub state: AgentState,
}

impl Agent {
    pub fn has_skill(&self, skill: SkillId) -> bool {
        self.skills.binary_search(&skill).is_ok()
    }

    pub fn sigma(&self) -> Sigma {
        self.state.sigma
    }
}

/// Spreads agents round-robin over hosts and draws each agent's skills
/// uniformly without replacement; the set size is uniform in
/// `skills_per_agent` (inclusive), clamped to the catalog.
pub fn assign_agents(
    n_agents: usize,
    n_hosts: usize,
    skills_per_agent: (u32, u32),
    catalog: u32,
    rng: &mut RngStream,
) -> Result<Vec<Agent>> {
    if n_hosts == 0 {
        return Err(Error::InvalidConfig("cannot place agents on an empty host set".into()));
    }
    if n_agents == 0 || catalog == 0 {
        return Err(Error::InvalidConfig("need at least one agent and one skill".into()));
    }
    let (lo, hi) = skills_per_agent;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidConfig(format!("bad skills-per-agent range [{lo},{hi}]")));
    }
    let agents = (0..n_agents)
        .map(|i| {
            let size = rng.random_range(lo..=hi).min(catalog) as usize;
            let mut skills: Vec<SkillId> =
                index::sample(rng, catalog as usize, size).into_iter().map(|s| SkillId(s as u32)).collect();
            skills.sort_unstable();
            Agent { id: AgentId(i as u32), host: HostIdx((i % n_hosts) as u32), skills, state: AgentState::warm(0) }
        })
        .collect();
    Ok(agents)
}

/// Union of the skills of every agent on each host.
pub fn host_profiles(agents: &[Agent], n_hosts: usize) -> Vec<Vec<SkillId>> {
    let mut sets = vec![BTreeSet::new(); n_hosts];
    for a in agents {
        sets[a.host.index()].extend(a.skills.iter().copied());
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChurnTransition {
    FailAt(Cycle),
    RecoverAt(Cycle),
    Never,
}

/// Next churn event for a host that is currently `alive`.
pub fn node_churn_step(alive: bool, params: &ChurnParams, now: Cycle, rng: &mut RngStream) -> ChurnTransition {
    match (params.session_mean, params.downtime_mean) {
        (Some(session), Some(_)) if alive => ChurnTransition::FailAt(now + draw_duration(session, rng)),
        (Some(_), Some(downtime)) => ChurnTransition::RecoverAt(now + draw_duration(downtime, rng)),
        _ => ChurnTransition::Never,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    /// Idle past the ready time: warm becomes cold.
    Cool,
    /// Suspended dwell over: a cold agent starts warming on its own.
    Reactivate,
    /// Warming finished: cold becomes warm.
    Warm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LifecycleTimer {
    pub agent: AgentId,
    pub kind: TimerKind,
    pub at: Cycle,
    pub epoch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeStart {
    pub l_start: Cycle,
    pub timer: Option<LifecycleTimer>,
}

impl Agent {
    fn timer(&self, kind: TimerKind, at: Cycle) -> LifecycleTimer {
        LifecycleTimer { agent: self.id, kind, at, epoch: self.state.epoch }
    }

    fn bump_epoch(&mut self) {
        self.state.epoch = self.state.epoch.wrapping_add(1);
    }

    /// Becomes (or stays) warm with a fresh idle clock. Cools once idle for
    /// longer than a drawn ready time.
    pub fn settle_warm(&mut self, now: Cycle, params: &ChurnParams, rng: &mut RngStream) -> Option<LifecycleTimer> {
        self.bump_epoch();
        self.state.sigma = Sigma::Warm;
        self.state.warming_until = None;
        self.state.idle_since = now;
        params.ready_mean.map(|ready| {
            let r = draw_duration(ready, rng);
            self.timer(TimerKind::Cool, now + r + 1)
        })
    }

    fn start_warming(&mut self, now: Cycle, params: &ChurnParams, rng: &mut RngStream) -> (Cycle, LifecycleTimer) {
        let d = params.warming_mean.map_or(1, |m| draw_duration(m, rng));
        self.bump_epoch();
        self.state.warming_until = Some(now + d);
        (d, self.timer(TimerKind::Warm, now + d))
    }

    /// Applies a fired timer. Returns the follow-up timer, if any. Timers from
    /// an older epoch are ignored.
    pub fn apply_timer(
        &mut self,
        timer: &LifecycleTimer,
        params: &ChurnParams,
        rng: &mut RngStream,
    ) -> Option<LifecycleTimer> {
        if timer.epoch != self.state.epoch || timer.agent != self.id {
            return None;
        }
        let now = timer.at;
        match (timer.kind, self.state.sigma) {
            (TimerKind::Cool, Sigma::Warm) => {
                self.bump_epoch();
                self.state.sigma = Sigma::Cold;
                params.suspended_mean.map(|m| self.timer(TimerKind::Reactivate, now + draw_duration(m, rng)))
            }
            (TimerKind::Reactivate, Sigma::Cold) if self.state.warming_until.is_none() => {
                Some(self.start_warming(now, params, rng).1)
            }
            (TimerKind::Warm, Sigma::Cold) => self.settle_warm(now, params, rng),
            _ => None,
        }
    }

    /// Host failure: every hosted agent goes off.
    pub fn go_off(&mut self) {
        self.bump_epoch();
        self.state.sigma = Sigma::Off;
        self.state.warming_until = None;
    }

    /// Host recovery. With a lifecycle the agent re-enters cold; without one
    /// there is no cold state and it comes back warm.
    pub fn recover(&mut self, now: Cycle, params: &ChurnParams, rng: &mut RngStream) -> Option<LifecycleTimer> {
        if !params.lifecycle_enabled() {
            return self.settle_warm(now, params, rng);
        }
        self.bump_epoch();
        self.state.sigma = Sigma::Cold;
        self.state.warming_until = None;
        self.state.idle_since = now;
        params.suspended_mean.map(|m| self.timer(TimerKind::Reactivate, now + draw_duration(m, rng)))
    }

    /// Cycles before this agent can serve a request arriving at `now`:
    /// zero when warm, the residual while warming, a fresh warming draw when
    /// idle-cold. Off agents have no startup delay.
    pub fn startup_delay(&self, now: Cycle, params: &ChurnParams, rng: &mut RngStream) -> Result<Cycle> {
        match self.state.sigma {
            Sigma::Warm => Ok(0),
            Sigma::Cold => match self.state.warming_until {
                Some(until) => Ok(until.saturating_sub(now)),
                None => Ok(params.warming_mean.map_or(1, |m| draw_duration(m, rng))),
            },
            Sigma::Off => Err(Error::Lifecycle(format!("startup delay requested for off agent {}", self.id))),
        }
    }

    /// Starts serving a request at `now`. A warm agent's idle clock resets;
    /// an idle cold agent starts warming; requests to an agent that is
    /// already warming share its interval and pay the residual.
    pub fn begin_serve(&mut self, now: Cycle, params: &ChurnParams, rng: &mut RngStream) -> Result<ServeStart> {
        match (self.state.sigma, self.state.warming_until) {
            (Sigma::Warm, _) => Ok(ServeStart { l_start: 0, timer: self.settle_warm(now, params, rng) }),
            (Sigma::Cold, Some(until)) => Ok(ServeStart { l_start: until.saturating_sub(now), timer: None }),
            (Sigma::Cold, None) => {
                let (d, timer) = self.start_warming(now, params, rng);
                Ok(ServeStart { l_start: d, timer: Some(timer) })
            }
            (Sigma::Off, _) => Err(Error::Lifecycle(format!("serve attempted on off agent {}", self.id))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::StreamLabel;

    fn rng(seed: u64) -> RngStream {
        RngStream::new(seed, StreamLabel::Lifecycle)
    }

    fn lone_agent() -> Agent {
        Agent { id: AgentId(0), host: HostIdx(0), skills: vec![SkillId(0)], state: AgentState::warm(0) }
    }

    #[test]
    fn main_setup_two_single_skill_agents_per_host() {
        let agents = assign_agents(4096, 2048, (1, 1), 50, &mut rng(1)).unwrap();
        let mut per_host = vec![0; 2048];
        for a in &agents {
            per_host[a.host.index()] += 1;
            assert_eq!(a.skills.len(), 1);
            assert!(a.skills[0].0 < 50);
        }
        assert!(per_host.iter().all(|&c| c == 2));
    }

    #[test]
    fn catalog_of_one_shares_skill_zero() {
        let agents = assign_agents(4, 2, (1, 1), 1, &mut rng(2)).unwrap();
        assert!(agents.iter().all(|a| a.skills == vec![SkillId(0)]));
    }

    #[test]
    fn empty_host_set_rejected() {
        assert!(assign_agents(4, 0, (1, 1), 5, &mut rng(2)).is_err());
        assert!(assign_agents(4, 2, (3, 1), 5, &mut rng(2)).is_err());
    }

    #[test]
    fn generalist_range_has_expected_mean_size() {
        // Uniform on {2,..,5}: expectation 3.5.
        for seed in 0..20 {
            let agents = assign_agents(1024, 512, (2, 5), 200, &mut rng(seed)).unwrap();
            let mean = agents.iter().map(|a| a.skills.len() as f64).sum::<f64>() / agents.len() as f64;
            assert!((mean - 3.5).abs() <= 0.2, "seed {seed}: mean {mean}");
            for a in &agents {
                let mut s = a.skills.clone();
                s.dedup();
                assert_eq!(s.len(), a.skills.len());
            }
        }
    }

    #[test]
    fn session_draws_match_mean() {
        let mut r = rng(9);
        let n = 10_000;
        let mean = (0..n).map(|_| draw_duration(60, &mut r) as f64).sum::<f64>() / n as f64;
        assert!((mean - 60.0).abs() / 60.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn node_churn_transitions() {
        let mild = ChurnParams::node(180, 10);
        let mut r = rng(4);
        assert!(matches!(node_churn_step(true, &mild, 5, &mut r), ChurnTransition::FailAt(t) if t > 5));
        assert!(matches!(node_churn_step(false, &mild, 5, &mut r), ChurnTransition::RecoverAt(t) if t > 5));
        assert_eq!(node_churn_step(true, &ChurnParams::STABLE, 5, &mut r), ChurnTransition::Never);
    }

    #[test]
    fn disabled_lifecycle_stays_warm() {
        let mut a = lone_agent();
        assert!(a.settle_warm(0, &ChurnParams::STABLE, &mut rng(1)).is_none());
        assert_eq!(a.sigma(), Sigma::Warm);
        a.go_off();
        assert!(a.recover(10, &ChurnParams::STABLE, &mut rng(1)).is_none());
        assert_eq!(a.sigma(), Sigma::Warm);
    }

    #[test]
    fn aggressive_cooling_cycle() {
        let p = ChurnParams::cooling(8, 10, 4);
        let mut r = rng(5);
        let mut a = lone_agent();
        let cool = a.settle_warm(0, &p, &mut r).unwrap();
        assert_eq!(cool.kind, TimerKind::Cool);
        assert!(cool.at >= 2);
        let react = a.apply_timer(&cool, &p, &mut r).unwrap();
        assert_eq!(a.sigma(), Sigma::Cold);
        assert_eq!(react.kind, TimerKind::Reactivate);
        let warm = a.apply_timer(&react, &p, &mut r).unwrap();
        assert_eq!(warm.kind, TimerKind::Warm);
        assert_eq!(a.state.warming_until, Some(warm.at));
        // Stale timer is ignored.
        assert!(a.apply_timer(&cool, &p, &mut r).is_none());
        a.apply_timer(&warm, &p, &mut r);
        assert_eq!(a.sigma(), Sigma::Warm);
        assert_eq!(a.state.idle_since, warm.at);
    }

    #[test]
    fn busy_agent_rarely_cools() {
        // Served every cycle with ready mean 20: cooling needs an idle gap
        // longer than the ready draw, which never happens.
        let p = ChurnParams::cooling(20, 6, 2);
        let mut cooled = 0;
        for seed in 0..50 {
            let mut r = rng(seed);
            let mut a = lone_agent();
            let mut pending = a.settle_warm(0, &p, &mut r);
            let mut did_cool = false;
            for t in 1..80 {
                if let Some(timer) = pending.filter(|tm| tm.at == t) {
                    pending = a.apply_timer(&timer, &p, &mut r);
                    if a.sigma() == Sigma::Cold {
                        did_cool = true;
                    }
                }
                if let Some(next) = a.begin_serve(t, &p, &mut r).unwrap().timer {
                    pending = Some(next);
                }
            }
            cooled += did_cool as u32;
        }
        assert!((cooled as f64) / 50.0 < 0.05, "{cooled} of 50 cooled");
    }

    #[test]
    fn startup_delay_by_state() {
        let p = ChurnParams::cooling(20, 6, 2);
        let mut r = rng(3);
        let mut a = lone_agent();
        assert_eq!(a.startup_delay(0, &p, &mut r).unwrap(), 0);

        a.state.sigma = Sigma::Cold;
        let n = 10_000;
        let mean = (0..n).map(|_| a.startup_delay(0, &p, &mut r).unwrap() as f64).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.1, "mean {mean}");

        a.go_off();
        assert!(a.startup_delay(0, &p, &mut r).is_err());
        assert!(a.begin_serve(0, &p, &mut r).is_err());
    }

    #[test]
    fn warming_delay_p95_matches_geometric_quantile() {
        // Empirical nearest-rank p95 against the closed-form geometric quantile:
        // smallest k with 1 - (3/4)^k >= 0.95, i.e. k = 11.
        let p = ChurnParams::cooling(8, 10, 4);
        let mut r = rng(77);
        let mut a = lone_agent();
        a.state.sigma = Sigma::Cold;
        let mut samples: Vec<Cycle> = (0..10_000).map(|_| a.startup_delay(0, &p, &mut r).unwrap()).collect();
        samples.sort_unstable();
        let p95 = samples[(0.95 * samples.len() as f64).ceil() as usize - 1];
        let analytic = (1..).find(|&k| 1.0 - 0.75f64.powi(k) >= 0.95).unwrap() as u64;
        assert_eq!(analytic, 11);
        assert!(p95.abs_diff(analytic) <= 1, "p95 {p95}");
    }

    #[test]
    fn concurrent_serves_share_warming() {
        let p = ChurnParams::cooling(8, 10, 4);
        let mut r = rng(8);
        let mut a = lone_agent();
        a.state.sigma = Sigma::Cold;
        let first = a.begin_serve(10, &p, &mut r).unwrap();
        let until = 10 + first.l_start;
        let second = a.begin_serve(11, &p, &mut r).unwrap();
        assert_eq!(second.l_start, until.saturating_sub(11));
        assert!(second.timer.is_none());
    }

    #[test]
    fn validate_requires_paired_means() {
        let mut p = ChurnParams::node(10, 5);
        p.downtime_mean = None;
        assert!(p.validate().is_err());
        let mut q = ChurnParams::cooling(8, 10, 4);
        q.warming_mean = None;
        assert!(q.validate().is_err());
        assert!(ChurnParams::combined(100, 30, 8, 10, 4).validate().is_ok());
    }
}
