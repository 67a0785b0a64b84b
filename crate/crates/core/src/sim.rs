//! One simulation run: wires substrate, lifecycle, overlay and workload to the
//! event scheduler and collects per-request outcomes.
//!
//! Discovery is evaluated when a request is issued. Its messages carry future
//! send cycles, and liveness at those cycles is answered from the scheduled
//! churn flips. The serve step is a separate event at the cycle the contact
//! message reaches the chosen host, so a host failing in between is observed.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::RegimeConfig;
use crate::engine::{Cycle, EventHandle, Priority, RngStream, Scheduler, StreamLabel};
use crate::error::Result;
use crate::lifecycle::{
    assign_agents, host_profiles, node_churn_step, Agent, AgentId, ChurnTransition, LifecycleTimer, Sigma,
};
use crate::metrics::{warmup_filter, RunSummary};
use crate::overlay::gossip::GossipNet;
use crate::overlay::kademlia::{KademliaNet, LookupMode, SkillRecord};
use crate::overlay::{AgentRecord, DiscoveryOutcome, NetCtx, OverlayKind};
use crate::substrate::{generate_topology, DeliveryTicket, HostIdx, MessageKind, Plane, PlaneCounts, Substrate};
use crate::workload::{generate_requests, top_k_select, Request, RequestOutcome, SkillSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    NodeFail(HostIdx),
    NodeRecover(HostIdx),
    Timer(LifecycleTimer),
    Republish { agent: AgentId, epoch: u32 },
    CyclonShuffle { host: HostIdx, epoch: u32 },
    VicinityShuffle { host: HostIdx, epoch: u32 },
    Refresh { host: HostIdx, epoch: u32 },
    GenerateRequests,
    Serve(u64),
    MetricsFlush,
}

impl Event {
    fn priority(&self) -> Priority {
        match self {
            Event::NodeFail(_) | Event::NodeRecover(_) => Priority::Churn,
            Event::Timer(_) => Priority::Lifecycle,
            Event::Republish { .. }
            | Event::CyclonShuffle { .. }
            | Event::VicinityShuffle { .. }
            | Event::Refresh { .. } => Priority::Maintenance,
            Event::GenerateRequests | Event::Serve(_) => Priority::Requests,
            Event::MetricsFlush => Priority::Metrics,
        }
    }

    fn is_maintenance(&self) -> bool {
        self.priority() == Priority::Maintenance
    }
}

enum Net {
    Kademlia(KademliaNet),
    Gossip(GossipNet),
}

#[derive(Debug, Clone, Copy)]
struct PendingServe {
    request: Request,
    pick: AgentRecord,
    l_disc: Cycle,
    l_route: Cycle,
    msgs: u64,
    hops: u32,
}

/// Run-level counters that are not part of the summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub events_executed: u64,
    pub shuffles: u64,
    pub view_checks: u64,
    pub view_violations: u64,
    pub first_view_violation: Option<String>,
    pub off_equivalence_violations: u64,
    pub routing_table_violation: Option<String>,
    pub publishes: u64,
    pub degraded_publishes: u64,
    /// Post-warmup discoveries and the hops they took.
    pub discoveries: u64,
    pub discovery_hops: u64,
    /// Selected candidates whose host was down at serve time.
    pub stale_picks: u64,
    pub max_search_msgs: u64,
    pub alive_hosts: Vec<usize>,
}

impl Diagnostics {
    pub fn mean_discovery_hops(&self) -> f64 {
        if self.discoveries == 0 {
            0.0
        } else {
            self.discovery_hops as f64 / self.discoveries as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub regime: String,
    pub overlay: OverlayKind,
    pub seed: u64,
    /// Every request issued before the horizon, warmup included.
    pub outcomes: Vec<RequestOutcome>,
    pub summary: RunSummary,
    pub diagnostics: Diagnostics,
    pub traffic: PlaneCounts,
    pub substrate_conserves: bool,
    pub ledger_consistent: bool,
    pub event_log: Option<Vec<String>>,
}

impl RunReport {
    pub fn measured(&self, warmup: Cycle) -> Vec<RequestOutcome> {
        warmup_filter(&self.outcomes, warmup).cloned().collect()
    }

    /// Checks the accounting identities every run must satisfy.
    pub fn check_identities(&self) -> std::result::Result<(), String> {
        if !self.summary.u_delta_is_consistent() {
            return Err(format!("U_delta not monotone or above success: {:?}", self.summary.u_delta));
        }
        if let Some(o) = self.outcomes.iter().find(|o| !o.is_consistent()) {
            return Err(format!("latency terms do not add up for request {}", o.request.id));
        }
        let req: u64 = self.outcomes.iter().map(|o| o.request_msgs).sum();
        if req != self.traffic.request {
            return Err(format!("request msgs {req} != ledger request plane {}", self.traffic.request));
        }
        if !self.substrate_conserves || !self.ledger_consistent {
            return Err("message ledger does not balance".into());
        }
        Ok(())
    }
}

pub struct Simulation {
    cfg: RegimeConfig,
    overlay: OverlayKind,
    seed: u64,
    sched: Scheduler<Event>,
    substrate: Substrate,
    agents: Vec<Agent>,
    host_agents: Vec<Vec<AgentId>>,
    net: Net,
    churn_rng: RngStream,
    life_rng: RngStream,
    work_rng: RngStream,
    overlay_rng: RngStream,
    sampler: SkillSampler,
    next_request: u64,
    host_epoch: Vec<u32>,
    pending: BTreeMap<u64, PendingServe>,
    outcomes: Vec<RequestOutcome>,
    diag: Diagnostics,
    draining: bool,
    log: Option<Vec<String>>,
}

impl Simulation {
    pub fn new(cfg: &RegimeConfig, overlay: OverlayKind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut topo_rng = RngStream::new(seed, StreamLabel::Topology);
        let graph = generate_topology(cfg.n_hosts, cfg.edge_probability(), &mut topo_rng)?;
        let agents = assign_agents(cfg.n_agents, cfg.n_hosts, cfg.skills_range(), cfg.skill_catalog, &mut topo_rng)?;
        let mut host_agents = vec![Vec::new(); cfg.n_hosts];
        for a in &agents {
            host_agents[a.host.index()].push(a.id);
        }
        let substrate = Substrate::new(graph, cfg.timeout_window);
        let net = match overlay {
            OverlayKind::Kademlia => Net::Kademlia(KademliaNet::new(cfg.kademlia, &substrate)),
            OverlayKind::CyclonVicinity => Net::Gossip(GossipNet::new(cfg.gossip, host_profiles(&agents, cfg.n_hosts))),
        };
        Ok(Self {
            sampler: SkillSampler::new(cfg.skill_catalog, &cfg.workload)?,
            cfg: cfg.clone(),
            overlay,
            seed,
            sched: Scheduler::new(cfg.horizon),
            substrate,
            agents,
            host_agents,
            net,
            churn_rng: RngStream::new(seed, StreamLabel::Churn),
            life_rng: RngStream::new(seed, StreamLabel::Lifecycle),
            work_rng: RngStream::new(seed, StreamLabel::Workload),
            overlay_rng: RngStream::new(seed, StreamLabel::Overlay),
            next_request: 0,
            host_epoch: vec![0; cfg.n_hosts],
            pending: BTreeMap::new(),
            outcomes: Vec::new(),
            diag: Diagnostics::default(),
            draining: false,
            log: None,
        })
    }

    /// Records one line per executed event.
    pub fn with_event_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn now(&self) -> Cycle {
        self.sched.now()
    }

    pub fn substrate(&self) -> &Substrate {
        &self.substrate
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn kademlia(&self) -> Option<&KademliaNet> {
        match &self.net {
            Net::Kademlia(k) => Some(k),
            Net::Gossip(_) => None,
        }
    }

    pub fn gossip(&self) -> Option<&GossipNet> {
        match &self.net {
            Net::Gossip(g) => Some(g),
            Net::Kademlia(_) => None,
        }
    }

    /// Direct access for probing a live Kademlia network between events.
    pub fn kademlia_parts(&mut self) -> Option<(&mut KademliaNet, &mut Substrate)> {
        match &mut self.net {
            Net::Kademlia(k) => Some((k, &mut self.substrate)),
            Net::Gossip(_) => None,
        }
    }

    /// Runs a gossip search outside the workload, e.g. from tests.
    pub fn gossip_search(&mut self, origin: HostIdx, skill: crate::lifecycle::SkillId) -> Option<DiscoveryOutcome> {
        let now = self.sched.now();
        let Net::Gossip(g) = &mut self.net else { return None };
        let mut ctx = NetCtx {
            substrate: &mut self.substrate,
            agents: &self.agents,
            host_agents: &self.host_agents,
            rng: &mut self.overlay_rng,
        };
        Some(g.search(&mut ctx, origin, skill, now))
    }

    fn schedule(&mut self, event: Event, at: Cycle) -> EventHandle {
        self.sched.schedule(event, at, event.priority())
    }

    fn schedule_timer(&mut self, timer: Option<LifecycleTimer>) {
        if let Some(t) = timer {
            self.schedule(Event::Timer(t), t.at);
        }
    }

    /// Cycle-0 setup: lifecycle timers, churn, overlay bootstrap, workload.
    pub fn initialize(&mut self) {
        let churn = self.cfg.churn;
        for i in 0..self.agents.len() {
            let t = self.agents[i].settle_warm(0, &churn, &mut self.life_rng);
            self.schedule_timer(t);
        }
        for h in 0..self.cfg.n_hosts {
            self.schedule_churn(HostIdx(h as u32), true, 0);
        }
        match &mut self.net {
            Net::Kademlia(kad) => {
                let mut ctx = NetCtx {
                    substrate: &mut self.substrate,
                    agents: &self.agents,
                    host_agents: &self.host_agents,
                    rng: &mut self.overlay_rng,
                };
                for h in 0..self.cfg.n_hosts {
                    kad.seed_table(HostIdx(h as u32), &mut ctx, 0);
                }
                for h in 0..self.cfg.n_hosts {
                    let host = HostIdx(h as u32);
                    let id = ctx.substrate.id(host);
                    kad.iterative_lookup(ctx.substrate, host, id, LookupMode::FindNode, Plane::Maintenance, 0);
                }
            }
            Net::Gossip(g) => {
                let mut ctx = NetCtx {
                    substrate: &mut self.substrate,
                    agents: &self.agents,
                    host_agents: &self.host_agents,
                    rng: &mut self.overlay_rng,
                };
                for h in 0..self.cfg.n_hosts {
                    g.bootstrap(HostIdx(h as u32), &mut ctx);
                }
            }
        }
        for h in 0..self.cfg.n_hosts {
            self.start_overlay_timers(HostIdx(h as u32), 0, true);
        }
        self.schedule(Event::GenerateRequests, 0);
        self.schedule(Event::MetricsFlush, 0);
    }

    fn schedule_churn(&mut self, host: HostIdx, alive: bool, now: Cycle) {
        let next = node_churn_step(alive, &self.cfg.churn, now, &mut self.churn_rng);
        let at = match next {
            ChurnTransition::FailAt(t) => {
                self.schedule(Event::NodeFail(host), t);
                Some(t)
            }
            ChurnTransition::RecoverAt(t) => {
                self.schedule(Event::NodeRecover(host), t);
                Some(t)
            }
            ChurnTransition::Never => None,
        };
        self.substrate.liveness.set_next_flip(host, at);
    }

    /// Publishes hosted agents (Kademlia) or starts shuffles (gossip), with
    /// per-host or per-agent phase offsets.
    fn start_overlay_timers(&mut self, host: HostIdx, now: Cycle, publish_now: bool) {
        let epoch = self.host_epoch[host.index()];
        match self.overlay {
            OverlayKind::Kademlia => {
                let period = self.cfg.kademlia.republish_period;
                for a in self.host_agents[host.index()].clone() {
                    if publish_now {
                        self.publish(a, now);
                    }
                    let phase = self.overlay_rng.random_range(1..=period);
                    self.schedule(Event::Republish { agent: a, epoch }, now + phase);
                }
                if let Some(p) = self.cfg.kademlia.refresh_period {
                    let phase = self.overlay_rng.random_range(1..=p);
                    self.schedule(Event::Refresh { host, epoch }, now + phase);
                }
            }
            OverlayKind::CyclonVicinity => {
                let cp = self.cfg.gossip.cyclon_period;
                let vp = self.cfg.gossip.vicinity_period;
                let c = self.overlay_rng.random_range(0..cp);
                let v = self.overlay_rng.random_range(0..vp);
                self.schedule(Event::CyclonShuffle { host, epoch }, now + c);
                self.schedule(Event::VicinityShuffle { host, epoch }, now + v);
            }
        }
    }

    fn publish(&mut self, agent: AgentId, now: Cycle) {
        let Net::Kademlia(kad) = &mut self.net else { return };
        let a = &self.agents[agent.index()];
        if a.sigma() == Sigma::Off {
            return;
        }
        for &skill in &a.skills {
            let record = SkillRecord {
                skill,
                agent: AgentRecord { agent: a.id, host: a.host, skill, believed: a.sigma(), refreshed_at: now },
                published_at: now,
                ttl: self.cfg.kademlia.record_ttl,
            };
            let receipt = kad.publish(&mut self.substrate, a.host, record, now);
            self.diag.publishes += 1;
            self.diag.degraded_publishes += receipt.degraded as u64;
        }
    }

    /// Runs the whole horizon, then serves requests still in flight.
    pub fn run(mut self) -> RunReport {
        self.initialize();
        self.run_to(self.cfg.horizon);
        self.drain();
        self.finish()
    }

    /// Executes all events before `limit`.
    pub fn run_to(&mut self, limit: Cycle) {
        while let Some((handle, event)) = self.sched.next_before(limit) {
            self.handle(handle, event);
        }
        if limit > self.sched.now() {
            self.sched.advance_to(limit);
        }
    }

    fn drain(&mut self) {
        self.draining = true;
        while !self.pending.is_empty() {
            let next = self.sched.now() + 1;
            self.run_to(next);
        }
    }

    fn handle(&mut self, handle: EventHandle, event: Event) {
        self.diag.events_executed += 1;
        if self.draining && (event.is_maintenance() || matches!(event, Event::GenerateRequests | Event::MetricsFlush)) {
            return;
        }
        if let Some(log) = &mut self.log {
            log.push(format!("{} {:?} {} {:?}", handle.at, handle.priority, handle.seq, event));
        }
        let now = handle.at;
        match event {
            Event::NodeFail(h) => self.on_fail(h, now),
            Event::NodeRecover(h) => self.on_recover(h, now),
            Event::Timer(t) => {
                let next = self.agents[t.agent.index()].apply_timer(&t, &self.cfg.churn, &mut self.life_rng);
                self.schedule_timer(next);
            }
            Event::Republish { agent, epoch } => {
                let host = self.agents[agent.index()].host;
                if self.host_epoch[host.index()] != epoch {
                    return;
                }
                self.publish(agent, now);
                self.reschedule(Event::Republish { agent, epoch }, now + self.cfg.kademlia.republish_period);
            }
            Event::Refresh { host, epoch } => {
                if self.host_epoch[host.index()] != epoch {
                    return;
                }
                if let Net::Kademlia(kad) = &mut self.net {
                    let mut ctx = NetCtx {
                        substrate: &mut self.substrate,
                        agents: &self.agents,
                        host_agents: &self.host_agents,
                        rng: &mut self.overlay_rng,
                    };
                    kad.refresh(host, &mut ctx, now);
                }
                let p = self.cfg.kademlia.refresh_period.unwrap_or(1);
                self.reschedule(Event::Refresh { host, epoch }, now + p);
            }
            Event::CyclonShuffle { host, epoch } | Event::VicinityShuffle { host, epoch } => {
                if self.host_epoch[host.index()] != epoch {
                    return;
                }
                let cyclon = matches!(event, Event::CyclonShuffle { .. });
                self.shuffle(host, cyclon, now);
                let p = if cyclon { self.cfg.gossip.cyclon_period } else { self.cfg.gossip.vicinity_period };
                self.reschedule(event, now + p);
            }
            Event::GenerateRequests => {
                let alive: Vec<HostIdx> = self.substrate.liveness.alive_hosts().collect();
                let reqs = generate_requests(
                    alive,
                    self.cfg.request_rate,
                    &mut self.sampler,
                    &mut self.work_rng,
                    now,
                    &mut self.next_request,
                );
                for r in reqs {
                    self.issue(r);
                }
                self.reschedule(Event::GenerateRequests, now + 1);
            }
            Event::Serve(id) => self.serve(id, now),
            Event::MetricsFlush => {
                self.check_off_equivalence();
                self.diag.alive_hosts.push(self.substrate.liveness.n_alive());
                self.reschedule(Event::MetricsFlush, now + 1);
            }
        }
    }

    /// Periodic events stop at the horizon.
    fn reschedule(&mut self, event: Event, at: Cycle) {
        if at < self.cfg.horizon {
            self.schedule(event, at);
        }
    }

    fn on_fail(&mut self, host: HostIdx, now: Cycle) {
        self.substrate.liveness.set(host, false);
        self.host_epoch[host.index()] += 1;
        for &a in &self.host_agents[host.index()] {
            self.agents[a.index()].go_off();
        }
        match &mut self.net {
            Net::Kademlia(k) => k.on_host_down(host, &self.substrate),
            Net::Gossip(g) => g.on_host_down(host),
        }
        self.schedule_churn(host, false, now);
    }

    fn on_recover(&mut self, host: HostIdx, now: Cycle) {
        self.substrate.liveness.set(host, true);
        self.host_epoch[host.index()] += 1;
        self.schedule_churn(host, true, now);
        for a in self.host_agents[host.index()].clone() {
            let t = self.agents[a.index()].recover(now, &self.cfg.churn, &mut self.life_rng);
            self.schedule_timer(t);
        }
        if self.draining {
            return;
        }
        let mut ctx = NetCtx {
            substrate: &mut self.substrate,
            agents: &self.agents,
            host_agents: &self.host_agents,
            rng: &mut self.overlay_rng,
        };
        match &mut self.net {
            Net::Kademlia(k) => {
                k.bootstrap(host, &mut ctx, now);
            }
            Net::Gossip(g) => g.bootstrap(host, &mut ctx),
        }
        self.start_overlay_timers(host, now, true);
    }

    fn shuffle(&mut self, host: HostIdx, cyclon: bool, now: Cycle) {
        let Net::Gossip(g) = &mut self.net else { return };
        let mut ctx = NetCtx {
            substrate: &mut self.substrate,
            agents: &self.agents,
            host_agents: &self.host_agents,
            rng: &mut self.overlay_rng,
        };
        let report =
            if cyclon { g.cyclon_shuffle(host, &mut ctx, now) } else { g.vicinity_shuffle(host, &mut ctx, now) };
        self.diag.shuffles += 1;
        let mut touched = vec![host];
        touched.extend(report.partner);
        for h in touched {
            self.diag.view_checks += 1;
            if let Err(e) = g.check_node(h) {
                self.diag.view_violations += 1;
                self.diag.first_view_violation.get_or_insert(format!("cycle {now}: {e}"));
            }
        }
    }

    fn discover(&mut self, req: &Request) -> DiscoveryOutcome {
        match &mut self.net {
            Net::Kademlia(k) => k.discover(&mut self.substrate, req.source, req.skill, req.issued_at),
            Net::Gossip(g) => {
                let mut ctx = NetCtx {
                    substrate: &mut self.substrate,
                    agents: &self.agents,
                    host_agents: &self.host_agents,
                    rng: &mut self.overlay_rng,
                };
                g.search(&mut ctx, req.source, req.skill, req.issued_at)
            }
        }
    }

    fn issue(&mut self, req: Request) {
        let disc = self.discover(&req);
        if req.issued_at >= self.cfg.warmup {
            self.diag.discoveries += 1;
            self.diag.discovery_hops += disc.hops as u64;
        }
        if self.overlay == OverlayKind::CyclonVicinity {
            self.diag.max_search_msgs = self.diag.max_search_msgs.max(disc.msgs);
        }
        let warming = self.cfg.churn.warming_mean.unwrap_or(1) as f64;
        let picks = top_k_select(&disc.candidates, self.cfg.top_k, req.id, warming);
        let Some(&pick) = picks.first() else {
            self.outcomes.push(RequestOutcome::failed(req, None, disc.msgs, disc.hops));
            return;
        };
        let contact_at = req.issued_at + disc.elapsed;
        if !self.substrate.alive_at(req.source, contact_at) {
            self.outcomes.push(RequestOutcome::failed(req, Some(pick), disc.msgs, disc.hops));
            return;
        }
        let ticket = self.substrate.send(req.source, pick.host, MessageKind::ServeContact, Plane::Request, contact_at);
        let msgs = disc.msgs + 1;
        match ticket {
            DeliveryTicket::Delivered { at } => {
                self.pending.insert(
                    req.id,
                    PendingServe {
                        request: req,
                        pick,
                        l_disc: disc.elapsed,
                        l_route: at - contact_at,
                        msgs,
                        hops: disc.hops,
                    },
                );
                self.schedule(Event::Serve(req.id), at);
            }
            DeliveryTicket::TimedOut { .. } => {
                self.diag.stale_picks += 1;
                self.outcomes.push(RequestOutcome::failed(req, Some(pick), msgs, disc.hops));
            }
        }
    }

    fn serve(&mut self, id: u64, now: Cycle) {
        let p = self.pending.remove(&id).expect("serve for unknown request");
        let agent = &mut self.agents[p.pick.agent.index()];
        if !self.substrate.liveness.is_alive(p.pick.host) || agent.sigma() == Sigma::Off {
            self.diag.stale_picks += 1;
            self.outcomes.push(RequestOutcome::failed(p.request, Some(p.pick), p.msgs, p.hops));
            return;
        }
        let start = agent.begin_serve(now, &self.cfg.churn, &mut self.life_rng).expect("agent is not off");
        self.schedule_timer(start.timer);
        self.outcomes.push(RequestOutcome::served(
            p.request,
            p.pick,
            p.l_disc,
            p.l_route,
            start.l_start,
            p.msgs,
            p.hops,
        ));
    }

    fn check_off_equivalence(&mut self) {
        for a in &self.agents {
            let off = a.sigma() == Sigma::Off;
            if off == self.substrate.liveness.is_alive(a.host) {
                self.diag.off_equivalence_violations += 1;
            }
        }
    }

    fn finish(mut self) -> RunReport {
        self.outcomes.sort_by_key(|o| o.request.id);
        if let Net::Kademlia(k) = &self.net {
            if let Err(e) = k.check_invariants() {
                self.diag.routing_table_violation = Some(e);
            }
        }
        let measured: Vec<RequestOutcome> = warmup_filter(&self.outcomes, self.cfg.warmup).cloned().collect();
        let window = self.substrate.ledger.window(self.cfg.warmup, self.cfg.horizon);
        let summary = RunSummary::from_outcomes(
            &self.cfg.name,
            self.overlay,
            self.seed,
            &measured,
            window.maintenance,
            self.cfg.horizon - self.cfg.warmup,
        );
        RunReport {
            regime: self.cfg.name.clone(),
            overlay: self.overlay,
            seed: self.seed,
            summary,
            diagnostics: self.diag,
            traffic: self.substrate.ledger.totals(),
            substrate_conserves: self.substrate.conserves_messages(),
            ledger_consistent: self.substrate.ledger.is_consistent(),
            event_log: self.log,
            outcomes: self.outcomes,
        }
    }
}

/// Convenience wrapper: one full run.
pub fn run_once(cfg: &RegimeConfig, overlay: OverlayKind, seed: u64) -> Result<RunReport> {
    Ok(Simulation::new(cfg, overlay, seed)?.run())
}
