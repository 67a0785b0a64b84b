//! Physical network: host population, Erdős–Rényi connectivity, liveness,
//! unit-latency delivery and per-plane traffic accounting.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Cycle, RngStream};
use crate::error::{Error, Result};

/// Dense index of a physical host inside one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HostIdx(pub u32);

impl HostIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for HostIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.0)
    }
}

pub const ID_BYTES: usize = 20;

/// 160-bit identifier. Doubles as a Kademlia key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub [u8; ID_BYTES]);

impl NodeId {
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut b = [0u8; ID_BYTES];
        rng.fill(&mut b[..]);
        NodeId(b)
    }

    /// Id whose low 64 bits are `v` and all other bits zero.
    pub fn from_low_u64(v: u64) -> Self {
        let mut b = [0u8; ID_BYTES];
        b[ID_BYTES - 8..].copy_from_slice(&v.to_be_bytes());
        NodeId(b)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..")
    }
}

#[derive(Debug, Clone)]
pub struct SubstrateGraph {
    ids: Vec<NodeId>,
    adjacency: Vec<Vec<HostIdx>>,
    /// Edges added after resampling failed to produce a connected graph.
    pub bridged_edges: usize,
}

impl SubstrateGraph {
    pub fn n_hosts(&self) -> usize {
        self.ids.len()
    }

    pub fn id(&self, host: HostIdx) -> NodeId {
        self.ids[host.index()]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn neighbors(&self, host: HostIdx) -> &[HostIdx] {
        &self.adjacency[host.index()]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, a: HostIdx, b: HostIdx) -> bool {
        self.adjacency[a.index()].binary_search(&b).is_ok()
    }

    pub fn components(&self) -> Vec<Vec<HostIdx>> {
        components(&self.adjacency)
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }
}

fn components(adjacency: &[Vec<HostIdx>]) -> Vec<Vec<HostIdx>> {
    let n = adjacency.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![HostIdx(start as u32)];
        let mut i = 0;
        while i < comp.len() {
            for &nb in &adjacency[comp[i].index()] {
                if !seen[nb.index()] {
                    seen[nb.index()] = true;
                    comp.push(nb);
                }
            }
            i += 1;
        }
        out.push(comp);
    }
    out
}

fn sample_gnp(n: usize, p: f64, rng: &mut RngStream) -> Vec<Vec<HostIdx>> {
    let mut adjacency = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(p) {
                adjacency[i].push(HostIdx(j as u32));
                adjacency[j].push(HostIdx(i as u32));
            }
        }
    }
    adjacency
}

/// Connectivity-threshold edge probability `2 ln n / n`, capped at 1.
pub fn default_edge_probability(n_hosts: usize) -> f64 {
    let n = n_hosts as f64;
    (2.0 * n.ln() / n).min(1.0)
}

pub const TOPOLOGY_RETRIES: usize = 16;

/// Samples `G(n, p)` with fresh 160-bit ids. A disconnected sample is redrawn
/// up to [`TOPOLOGY_RETRIES`] times; after that, one bridging edge per extra
/// component joins it to the first.
pub fn generate_topology(n_hosts: usize, edge_probability: f64, rng: &mut RngStream) -> Result<SubstrateGraph> {
    if n_hosts < 2 {
        return Err(Error::InvalidConfig(format!("substrate needs at least 2 hosts, got {n_hosts}")));
    }
    if !(edge_probability > 0.0 && edge_probability <= 1.0) {
        return Err(Error::InvalidConfig(format!("edge probability {edge_probability} outside (0, 1]")));
    }
    let mut ids: Vec<NodeId> = Vec::with_capacity(n_hosts);
    while ids.len() < n_hosts {
        let id = NodeId::random(rng);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }

    let mut adjacency = sample_gnp(n_hosts, edge_probability, rng);
    let mut attempts = 1;
    while components(&adjacency).len() > 1 && attempts < TOPOLOGY_RETRIES {
        adjacency = sample_gnp(n_hosts, edge_probability, rng);
        attempts += 1;
    }
    let comps = components(&adjacency);
    let mut bridged_edges = 0;
    if comps.len() > 1 {
        let anchor = &comps[0];
        for comp in &comps[1..] {
            let a = anchor[rng.random_range(0..anchor.len())];
            let b = comp[rng.random_range(0..comp.len())];
            adjacency[a.index()].push(b);
            adjacency[b.index()].push(a);
            bridged_edges += 1;
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    Ok(SubstrateGraph { ids, adjacency, bridged_edges })
}

/// Which traffic plane a message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plane {
    Request,
    Maintenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    FindNode,
    FindValue,
    FoundNodes,
    Store,
    Ping,
    Pong,
    CyclonShuffle,
    CyclonReply,
    VicinityShuffle,
    VicinityReply,
    SearchForward,
    SearchHit,
    ServeContact,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneCounts {
    pub request: u64,
    pub maintenance: u64,
}

impl PlaneCounts {
    pub fn total(&self) -> u64 {
        self.request + self.maintenance
    }

    fn bump(&mut self, plane: Plane) {
        match plane {
            Plane::Request => self.request += 1,
            Plane::Maintenance => self.maintenance += 1,
        }
    }
}

/// Message counts by plane, with a per-cycle breakdown keyed by send cycle.
#[derive(Debug, Clone, Default)]
pub struct TrafficLedger {
    totals: PlaneCounts,
    per_cycle: BTreeMap<Cycle, PlaneCounts>,
    per_kind: BTreeMap<MessageKind, u64>,
}

impl TrafficLedger {
    pub fn record(&mut self, plane: Plane, kind: MessageKind, at: Cycle) {
        self.totals.bump(plane);
        self.per_cycle.entry(at).or_default().bump(plane);
        *self.per_kind.entry(kind).or_default() += 1;
    }

    pub fn totals(&self) -> PlaneCounts {
        self.totals
    }

    pub fn per_cycle(&self) -> &BTreeMap<Cycle, PlaneCounts> {
        &self.per_cycle
    }

    pub fn per_kind(&self) -> &BTreeMap<MessageKind, u64> {
        &self.per_kind
    }

    /// Sum of per-cycle entries whose send cycle lies in `[from, to)`.
    pub fn window(&self, from: Cycle, to: Cycle) -> PlaneCounts {
        let mut out = PlaneCounts::default();
        for c in self.per_cycle.range(from..to).map(|(_, c)| c) {
            out.request += c.request;
            out.maintenance += c.maintenance;
        }
        out
    }

    /// Totals agree with the per-cycle breakdown.
    pub fn is_consistent(&self) -> bool {
        self.window(0, Cycle::MAX) == self.totals
    }
}

/// Host up/down state, including the cycle of the next scheduled flip so
/// that liveness at a near-future delivery cycle can be answered exactly.
#[derive(Debug, Clone)]
pub struct Liveness {
    alive: Vec<bool>,
    next_flip: Vec<Option<Cycle>>,
    n_alive: usize,
}

impl Liveness {
    pub fn all_alive(n: usize) -> Self {
        Self { alive: vec![true; n], next_flip: vec![None; n], n_alive: n }
    }

    pub fn is_alive(&self, host: HostIdx) -> bool {
        self.alive[host.index()]
    }

    /// Liveness at cycle `at`, given the currently scheduled flip.
    pub fn alive_at(&self, host: HostIdx, at: Cycle) -> bool {
        let i = host.index();
        match self.next_flip[i] {
            Some(flip) if at >= flip => !self.alive[i],
            _ => self.alive[i],
        }
    }

    pub fn set(&mut self, host: HostIdx, alive: bool) {
        let i = host.index();
        if self.alive[i] != alive {
            if alive {
                self.n_alive += 1;
            } else {
                self.n_alive -= 1;
            }
        }
        self.alive[i] = alive;
        self.next_flip[i] = None;
    }

    pub fn set_next_flip(&mut self, host: HostIdx, at: Option<Cycle>) {
        self.next_flip[host.index()] = at;
    }

    pub fn n_alive(&self) -> usize {
        self.n_alive
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    pub fn alive_hosts(&self) -> impl Iterator<Item = HostIdx> + '_ {
        self.alive.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| HostIdx(i as u32))
    }
}

/// Outcome of a send, as observed by the sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryTicket {
    Delivered { at: Cycle },
    TimedOut { observed_at: Cycle },
}

impl DeliveryTicket {
    pub fn delivered(&self) -> bool {
        matches!(self, DeliveryTicket::Delivered { .. })
    }

    /// Cycle at which the sender learns the outcome.
    pub fn resolved_at(&self) -> Cycle {
        match *self {
            DeliveryTicket::Delivered { at } => at,
            DeliveryTicket::TimedOut { observed_at } => observed_at,
        }
    }
}

pub const BASE_LATENCY: Cycle = 1;

/// Graph, liveness and ledger for one run. Loss rate is zero: every send is
/// either delivered after [`BASE_LATENCY`] or times out because the
/// destination is down.
#[derive(Debug, Clone)]
pub struct Substrate {
    pub graph: SubstrateGraph,
    pub liveness: Liveness,
    pub ledger: TrafficLedger,
    timeout_window: Cycle,
    delivered: u64,
    timed_out: u64,
}

impl Substrate {
    pub fn new(graph: SubstrateGraph, timeout_window: Cycle) -> Self {
        let n = graph.n_hosts();
        Self {
            graph,
            liveness: Liveness::all_alive(n),
            ledger: TrafficLedger::default(),
            timeout_window,
            delivered: 0,
            timed_out: 0,
        }
    }

    pub fn timeout_window(&self) -> Cycle {
        self.timeout_window
    }

    pub fn n_hosts(&self) -> usize {
        self.graph.n_hosts()
    }

    pub fn id(&self, host: HostIdx) -> NodeId {
        self.graph.id(host)
    }

    pub fn alive_at(&self, host: HostIdx, at: Cycle) -> bool {
        self.liveness.alive_at(host, at)
    }

    /// Sends one message at cycle `at`. The ledger is charged on `plane` at
    /// send time whatever the outcome.
    ///
    /// Panics if `from` is down at `at`.
    pub fn send(&mut self, from: HostIdx, to: HostIdx, kind: MessageKind, plane: Plane, at: Cycle) -> DeliveryTicket {
        assert!(self.liveness.alive_at(from, at), "send from dead host {from} at cycle {at}");
        self.ledger.record(plane, kind, at);
        let arrival = at + BASE_LATENCY;
        if self.liveness.alive_at(to, arrival) {
            self.delivered += 1;
            DeliveryTicket::Delivered { at: arrival }
        } else {
            self.timed_out += 1;
            DeliveryTicket::TimedOut { observed_at: at + self.timeout_window }
        }
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }

    pub fn timed_out_count(&self) -> u64 {
        self.timed_out
    }

    /// Delivered plus timed-out equals sent.
    pub fn conserves_messages(&self) -> bool {
        self.delivered + self.timed_out == self.ledger.totals().total()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::StreamLabel;

    fn graph(n: usize, p: f64, seed: u64) -> SubstrateGraph {
        generate_topology(n, p, &mut RngStream::new(seed, StreamLabel::Topology)).unwrap()
    }

    #[test]
    fn rejects_tiny_population_and_bad_probability() {
        let mut r = RngStream::new(1, StreamLabel::Topology);
        assert!(generate_topology(1, 0.5, &mut r).is_err());
        assert!(generate_topology(10, 0.0, &mut r).is_err());
        assert!(generate_topology(10, 1.5, &mut r).is_err());
    }

    #[test]
    fn probability_one_gives_complete_graph() {
        let g = graph(4, 1.0, 3);
        assert_eq!(g.edge_count(), 6);
        for a in 0..4u32 {
            for b in 0..4u32 {
                if a != b {
                    assert!(g.has_edge(HostIdx(a), HostIdx(b)));
                }
            }
        }
    }

    #[test]
    fn main_population_is_connected_with_unique_ids() {
        let g = graph(2048, default_edge_probability(2048), 11);
        assert_eq!(g.n_hosts(), 2048);
        assert!(g.is_connected());
        let mut ids = g.ids().to_vec();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 2048);
    }

    #[test]
    fn raw_gnp_at_threshold_is_usually_connected() {
        // Monte Carlo over 100 seeds on the raw sample, before any repair.
        let n = 64;
        let p = default_edge_probability(n);
        let connected = (0..100u64)
            .filter(|&s| {
                let mut r = RngStream::new(s, StreamLabel::Topology);
                components(&sample_gnp(n, p, &mut r)).len() == 1
            })
            .count();
        assert!(connected >= 95, "only {connected}/100 connected");
    }

    #[test]
    fn sparse_graph_gets_bridged() {
        let g = graph(50, 0.01, 5);
        assert!(g.is_connected());
        assert!(g.bridged_edges > 0);
    }

    #[test]
    fn send_accounting() {
        let mut s = Substrate::new(graph(4, 1.0, 1), 2);
        let t = s.send(HostIdx(0), HostIdx(1), MessageKind::FindValue, Plane::Request, 5);
        assert_eq!(t, DeliveryTicket::Delivered { at: 6 });
        assert_eq!(s.ledger.totals().request, 1);

        s.liveness.set(HostIdx(2), false);
        let t = s.send(HostIdx(0), HostIdx(2), MessageKind::Ping, Plane::Request, 5);
        assert_eq!(t, DeliveryTicket::TimedOut { observed_at: 7 });
        assert_eq!(s.ledger.totals().request, 2);

        for i in 0..8 {
            s.send(HostIdx(1), HostIdx(3), MessageKind::Ping, Plane::Maintenance, i);
        }
        assert_eq!(s.ledger.totals().total(), 10);
        assert_eq!(s.ledger.totals().maintenance, 8);
        assert!(s.ledger.is_consistent());
        assert!(s.conserves_messages());
    }

    #[test]
    fn delivery_sees_scheduled_failure() {
        let mut s = Substrate::new(graph(4, 1.0, 1), 2);
        s.liveness.set_next_flip(HostIdx(1), Some(6));
        assert!(!s.send(HostIdx(0), HostIdx(1), MessageKind::Ping, Plane::Request, 5).delivered());
        assert!(s.send(HostIdx(0), HostIdx(1), MessageKind::Ping, Plane::Request, 4).delivered());
    }

    #[test]
    #[should_panic(expected = "send from dead host")]
    fn send_from_dead_host_is_violation() {
        let mut s = Substrate::new(graph(4, 1.0, 1), 2);
        s.liveness.set(HostIdx(0), false);
        s.send(HostIdx(0), HostIdx(1), MessageKind::Ping, Plane::Request, 0);
    }
}
