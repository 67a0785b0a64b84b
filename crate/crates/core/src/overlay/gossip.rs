//! Unstructured discovery: Cyclon peer sampling, Vicinity similarity
//! neighbourhoods, and a TTL-bounded walk that searches the combined views.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ceil_log2, AgentRecord, DiscoveryOutcome, NetCtx};
use crate::engine::{mix64, Cycle};
use crate::lifecycle::{Sigma, SkillId};
use crate::substrate::{DeliveryTicket, HostIdx, MessageKind, Plane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GossipParams {
    pub cyclon_cache: usize,
    pub cyclon_shuffle_len: usize,
    pub cyclon_period: Cycle,
    pub vicinity_cache: usize,
    /// Vicinity entries offered per exchange, on top of the self descriptor.
    pub vicinity_exchange_len: usize,
    pub vicinity_period: Cycle,
    pub forward_k: usize,
    /// Search TTL; `None` means ⌈log2 n_hosts⌉.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_ttl: Option<u32>,
}

impl Default for GossipParams {
    fn default() -> Self {
        Self {
            cyclon_cache: 20,
            cyclon_shuffle_len: 5,
            cyclon_period: 20,
            vicinity_cache: 10,
            vicinity_exchange_len: 10,
            vicinity_period: 20,
            forward_k: 1,
            search_ttl: None,
        }
    }
}

impl GossipParams {
    pub fn ttl_for(&self, n_hosts: usize) -> u32 {
        self.search_ttl.unwrap_or_else(|| ceil_log2(n_hosts))
    }
}

/// Jaccard index of two sorted skill sets; zero when either is empty.
pub fn similarity(a: &[SkillId], b: &[SkillId]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CyclonEntry {
    pub node: HostIdx,
    pub age: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VicinityEntry {
    pub node: HostIdx,
    pub profile: Arc<[SkillId]>,
    pub similarity: f64,
}

#[derive(Debug, Clone)]
pub struct GossipNode {
    pub cyclon: Vec<CyclonEntry>,
    pub vicinity: Vec<VicinityEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ShuffleReport {
    pub partner: Option<HostIdx>,
    pub partner_dead: bool,
    pub msgs: u64,
}

#[derive(Debug, Clone)]
pub struct GossipNet {
    pub params: GossipParams,
    nodes: Vec<GossipNode>,
    profiles: Vec<Arc<[SkillId]>>,
    ttl: u32,
    bootstrap_randoms: usize,
}

impl GossipNet {
    pub fn new(params: GossipParams, profiles: Vec<Vec<SkillId>>) -> Self {
        let n = profiles.len();
        Self {
            params,
            nodes: vec![GossipNode { cyclon: Vec::new(), vicinity: Vec::new() }; n],
            profiles: profiles.into_iter().map(Arc::from).collect(),
            ttl: params.ttl_for(n),
            bootstrap_randoms: ceil_log2(n) as usize,
        }
    }

    pub fn ttl(&self) -> u32 {
        self.ttl
    }

    pub fn node(&self, host: HostIdx) -> &GossipNode {
        &self.nodes[host.index()]
    }

    pub fn node_mut(&mut self, host: HostIdx) -> &mut GossipNode {
        &mut self.nodes[host.index()]
    }

    pub fn profile(&self, host: HostIdx) -> &[SkillId] {
        &self.profiles[host.index()]
    }

    fn vicinity_entry(&self, owner: HostIdx, node: HostIdx) -> VicinityEntry {
        let profile = Arc::clone(&self.profiles[node.index()]);
        let similarity = similarity(&self.profiles[owner.index()], &profile);
        VicinityEntry { node, profile, similarity }
    }

    /// Keeps the `vicinity_cache` candidates most similar to the owner;
    /// ties break on a per-owner hash so no host is globally favoured.
    fn select_vicinity(&self, owner: HostIdx, mut cands: Vec<VicinityEntry>) -> Vec<VicinityEntry> {
        cands.retain(|e| e.node != owner);
        let tie = |e: &VicinityEntry| mix64(((owner.0 as u64) << 32) | e.node.0 as u64);
        cands.sort_by(|a, b| {
            b.similarity
                .partial_cmp(&a.similarity)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| tie(a).cmp(&tie(b)))
        });
        let mut seen = BTreeSet::new();
        cands.retain(|e| seen.insert(e.node));
        cands.truncate(self.params.vicinity_cache);
        cands
    }

    /// Fresh join: Cyclon view from alive substrate neighbours plus
    /// ⌈log2 n⌉ random alive hosts; Vicinity view ranks the same set.
    pub fn bootstrap(&mut self, host: HostIdx, ctx: &mut NetCtx<'_>) {
        let substrate = &*ctx.substrate;
        let mut seeds: Vec<HostIdx> =
            substrate.graph.neighbors(host).iter().copied().filter(|&h| substrate.liveness.is_alive(h)).collect();
        let alive: Vec<HostIdx> = substrate.liveness.alive_hosts().filter(|&h| h != host).collect();
        let want = self.bootstrap_randoms.min(alive.len());
        for i in index::sample(ctx.rng, alive.len(), want) {
            if !seeds.contains(&alive[i]) {
                seeds.push(alive[i]);
            }
        }
        seeds.retain(|&h| h != host);
        if seeds.len() > self.params.cyclon_cache {
            seeds.shuffle(ctx.rng);
            seeds.truncate(self.params.cyclon_cache);
            seeds.sort_unstable();
        }
        let vicinity = self.select_vicinity(host, seeds.iter().map(|&h| self.vicinity_entry(host, h)).collect());
        let node = &mut self.nodes[host.index()];
        node.cyclon = seeds.into_iter().map(|node| CyclonEntry { node, age: 0 }).collect();
        node.vicinity = vicinity;
    }

    pub fn on_host_down(&mut self, host: HostIdx) {
        let node = &mut self.nodes[host.index()];
        node.cyclon.clear();
        node.vicinity.clear();
    }

    fn forget(&mut self, owner: HostIdx, gone: HostIdx) {
        let node = &mut self.nodes[owner.index()];
        node.cyclon.retain(|e| e.node != gone);
        node.vicinity.retain(|e| e.node != gone);
    }

    /// Picks up to `n` random entries from `owner`'s Cyclon view, skipping `except`.
    fn sample_cyclon(&self, owner: HostIdx, n: usize, except: Option<HostIdx>, rng: &mut impl Rng) -> Vec<CyclonEntry> {
        let pool: Vec<CyclonEntry> =
            self.nodes[owner.index()].cyclon.iter().copied().filter(|e| Some(e.node) != except).collect();
        let take = n.min(pool.len());
        index::sample(rng, pool.len(), take).into_iter().map(|i| pool[i]).collect()
    }

    /// Cyclon merge: drop self pointers, keep the fresher age of duplicates,
    /// fill free slots, then overwrite entries that were sent away.
    fn cyclon_merge(&mut self, owner: HostIdx, received: &[CyclonEntry], sent: &[CyclonEntry]) {
        let cache = self.params.cyclon_cache;
        let view = &mut self.nodes[owner.index()].cyclon;
        let mut replaceable: Vec<HostIdx> = sent.iter().map(|e| e.node).filter(|&n| n != owner).collect();
        for r in received {
            if r.node == owner {
                continue;
            }
            if let Some(e) = view.iter_mut().find(|e| e.node == r.node) {
                e.age = e.age.min(r.age);
                continue;
            }
            if view.len() < cache {
                view.push(*r);
                continue;
            }
            while let Some(victim) = replaceable.pop() {
                if let Some(pos) = view.iter().position(|e| e.node == victim) {
                    view[pos] = *r;
                    break;
                }
            }
        }
    }

    /// One Cyclon shuffle initiated by `initiator` at `now`.
    pub fn cyclon_shuffle(&mut self, initiator: HostIdx, ctx: &mut NetCtx<'_>, now: Cycle) -> ShuffleReport {
        let mut report = ShuffleReport::default();
        if !ctx.substrate.alive_at(initiator, now) || self.nodes[initiator.index()].cyclon.is_empty() {
            return report;
        }
        let len = self.params.cyclon_shuffle_len.max(1);
        let view = &mut self.nodes[initiator.index()].cyclon;
        for e in view.iter_mut() {
            e.age += 1;
        }
        let oldest = view
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.age.cmp(&b.1.age).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("non-empty view");
        let partner = view.remove(oldest).node;
        report.partner = Some(partner);

        let mut offer = self.sample_cyclon(initiator, len - 1, None, ctx.rng);
        offer.push(CyclonEntry { node: initiator, age: 0 });
        report.msgs += 1;
        let ticket = ctx.substrate.send(initiator, partner, MessageKind::CyclonShuffle, Plane::Maintenance, now);
        let DeliveryTicket::Delivered { at } = ticket else {
            report.partner_dead = true;
            return report;
        };
        let mut reply = self.sample_cyclon(partner, len - 1, Some(initiator), ctx.rng);
        reply.push(CyclonEntry { node: partner, age: 0 });
        report.msgs += 1;
        let back = ctx.substrate.send(partner, initiator, MessageKind::CyclonReply, Plane::Maintenance, at);
        self.cyclon_merge(partner, &offer, &reply);
        if back.delivered() {
            self.cyclon_merge(initiator, &reply, &offer);
        }
        report
    }

    fn vicinity_offer(&self, owner: HostIdx) -> Vec<VicinityEntry> {
        let mut offer: Vec<VicinityEntry> =
            self.nodes[owner.index()].vicinity.iter().take(self.params.vicinity_exchange_len).cloned().collect();
        offer.push(VicinityEntry { node: owner, profile: Arc::clone(&self.profiles[owner.index()]), similarity: 0.0 });
        offer
    }

    fn vicinity_merge(&mut self, owner: HostIdx, received: Vec<VicinityEntry>) {
        let own = Arc::clone(&self.profiles[owner.index()]);
        let mut cands = self.nodes[owner.index()].vicinity.clone();
        cands.extend(received.into_iter().map(|mut e| {
            e.similarity = similarity(&own, &e.profile);
            e
        }));
        self.nodes[owner.index()].vicinity = self.select_vicinity(owner, cands);
    }

    /// One Vicinity exchange with a partner drawn from the union of both views.
    pub fn vicinity_shuffle(&mut self, initiator: HostIdx, ctx: &mut NetCtx<'_>, now: Cycle) -> ShuffleReport {
        let mut report = ShuffleReport::default();
        if !ctx.substrate.alive_at(initiator, now) {
            return report;
        }
        let node = &self.nodes[initiator.index()];
        let pool: BTreeSet<HostIdx> =
            node.cyclon.iter().map(|e| e.node).chain(node.vicinity.iter().map(|e| e.node)).collect();
        if pool.is_empty() {
            return report;
        }
        let pool: Vec<HostIdx> = pool.into_iter().collect();
        let partner = pool[ctx.rng.random_range(0..pool.len())];
        report.partner = Some(partner);

        let offer = self.vicinity_offer(initiator);
        report.msgs += 1;
        let ticket = ctx.substrate.send(initiator, partner, MessageKind::VicinityShuffle, Plane::Maintenance, now);
        let DeliveryTicket::Delivered { at } = ticket else {
            report.partner_dead = true;
            self.forget(initiator, partner);
            return report;
        };
        let reply = self.vicinity_offer(partner);
        report.msgs += 1;
        let back = ctx.substrate.send(partner, initiator, MessageKind::VicinityReply, Plane::Maintenance, at);
        self.vicinity_merge(partner, offer);
        if back.delivered() {
            self.vicinity_merge(initiator, reply);
        }
        report
    }

    /// View bounds, no self entry, no duplicates, Vicinity sorted by similarity.
    pub fn check_node(&self, host: HostIdx) -> Result<(), String> {
        let node = &self.nodes[host.index()];
        if node.cyclon.len() > self.params.cyclon_cache {
            return Err(format!("{host}: cyclon view {} > {}", node.cyclon.len(), self.params.cyclon_cache));
        }
        if node.vicinity.len() > self.params.vicinity_cache {
            return Err(format!("{host}: vicinity view {} > {}", node.vicinity.len(), self.params.vicinity_cache));
        }
        let mut seen = BTreeSet::new();
        for e in &node.cyclon {
            if e.node == host {
                return Err(format!("{host}: self in cyclon view"));
            }
            if !seen.insert(e.node) {
                return Err(format!("{host}: duplicate {} in cyclon view", e.node));
            }
        }
        seen.clear();
        for e in &node.vicinity {
            if e.node == host {
                return Err(format!("{host}: self in vicinity view"));
            }
            if !seen.insert(e.node) {
                return Err(format!("{host}: duplicate {} in vicinity view", e.node));
            }
        }
        if node.vicinity.windows(2).any(|w| w[0].similarity < w[1].similarity) {
            return Err(format!("{host}: vicinity view not sorted by similarity"));
        }
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        (0..self.nodes.len()).try_for_each(|i| self.check_node(HostIdx(i as u32)))
    }

    fn local_hits(ctx: &NetCtx<'_>, host: HostIdx, skill: SkillId, at: Cycle) -> Vec<AgentRecord> {
        ctx.agents_on(host)
            .filter(|a| a.sigma() != Sigma::Off && a.has_skill(skill))
            .map(|a| AgentRecord { agent: a.id, host, skill, believed: a.sigma(), refreshed_at: at })
            .collect()
    }

    /// Forwarding order at `node` for `skill`: Vicinity neighbours whose
    /// profile matches the target, best first; then Cyclon neighbours in
    /// random order; then the remaining Vicinity neighbours.
    fn forward_order(&self, node: HostIdx, skill: SkillId, rng: &mut impl Rng) -> Vec<HostIdx> {
        let n = &self.nodes[node.index()];
        let target = [skill];
        let mut scored: Vec<(f64, usize, HostIdx)> =
            n.vicinity.iter().enumerate().map(|(i, e)| (similarity(&e.profile, &target), i, e.node)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        let mut order: Vec<HostIdx> = scored.iter().filter(|s| s.0 > 0.0).map(|s| s.2).collect();
        let mut cyclon: Vec<HostIdx> = n.cyclon.iter().map(|e| e.node).collect();
        cyclon.shuffle(rng);
        order.extend(cyclon);
        order.extend(scored.iter().filter(|s| s.0 <= 0.0).map(|s| s.2));
        let mut seen = BTreeSet::new();
        order.retain(|h| seen.insert(*h));
        order
    }

    /// TTL-bounded search for an alive agent exposing `skill`.
    ///
    /// Each reached node forwards the token to `forward_k` unvisited
    /// neighbours. A dead neighbour costs a timeout and the token moves to the
    /// next candidate without spending TTL. Tokens are processed in arrival
    /// order and the search ends at the first node hosting a matching agent.
    pub fn search(&mut self, ctx: &mut NetCtx<'_>, origin: HostIdx, skill: SkillId, now: Cycle) -> DiscoveryOutcome {
        let mut out = DiscoveryOutcome::default();
        let hits = Self::local_hits(ctx, origin, skill, now);
        if !hits.is_empty() {
            out.candidates = hits;
            return out;
        }
        let forward_k = self.params.forward_k.max(1);
        let mut visited: BTreeSet<HostIdx> = BTreeSet::from([origin]);
        // (arrival offset, depth, sequence, node)
        let mut tokens: BinaryHeap<Reverse<(Cycle, u32, u64, HostIdx)>> = BinaryHeap::new();
        tokens.push(Reverse((0, 0, 0, origin)));
        let mut seq = 1u64;
        let mut forwards = 0u64;

        while let Some(Reverse((offset, depth, _, node))) = tokens.pop() {
            let at = now + offset;
            if depth > 0 {
                let hits = Self::local_hits(ctx, node, skill, at);
                if !hits.is_empty() {
                    out.msgs += 1;
                    let back = ctx.substrate.send(node, origin, MessageKind::SearchHit, Plane::Request, at);
                    if back.delivered() {
                        out.candidates = hits;
                        out.hops = depth;
                        out.elapsed = offset;
                    }
                    break;
                }
            }
            if depth >= self.ttl {
                continue;
            }
            let mut t = at;
            let mut sent = 0;
            for cand in self.forward_order(node, skill, ctx.rng) {
                if sent == forward_k {
                    break;
                }
                if visited.contains(&cand) {
                    continue;
                }
                if !ctx.substrate.alive_at(node, t) {
                    break;
                }
                visited.insert(cand);
                out.msgs += 1;
                match ctx.substrate.send(node, cand, MessageKind::SearchForward, Plane::Request, t) {
                    DeliveryTicket::Delivered { at: arrival } => {
                        tokens.push(Reverse((arrival - now, depth + 1, seq, cand)));
                        seq += 1;
                        sent += 1;
                        forwards += 1;
                    }
                    DeliveryTicket::TimedOut { observed_at } => {
                        t = observed_at;
                        self.forget(node, cand);
                    }
                }
            }
        }
        debug_assert!(forwards <= forward_cap(forward_k, self.ttl));
        if out.candidates.is_empty() {
            out.hops = 0;
            out.elapsed = 0;
        }
        out
    }

    /// Ground truth for tests: every host within `ttl` hops of `origin` over
    /// the current views that hosts a live agent with `skill`.
    pub fn reachable_holders(&self, ctx: &NetCtx<'_>, origin: HostIdx, skill: SkillId, ttl: u32) -> BTreeSet<HostIdx> {
        let mut seen = BTreeSet::from([origin]);
        let mut frontier = vec![origin];
        let mut found = BTreeSet::new();
        for depth in 0..=ttl {
            let mut next = Vec::new();
            for &h in &frontier {
                if !Self::local_hits(ctx, h, skill, 0).is_empty() {
                    found.insert(h);
                }
                if depth < ttl {
                    let n = &self.nodes[h.index()];
                    for nb in n.cyclon.iter().map(|e| e.node).chain(n.vicinity.iter().map(|e| e.node)) {
                        if ctx.substrate.liveness.is_alive(nb) && seen.insert(nb) {
                            next.push(nb);
                        }
                    }
                }
            }
            frontier = next;
        }
        found
    }
}

/// Upper bound on successful forwards for branching factor `k` and depth `ttl`.
pub fn forward_cap(k: usize, ttl: u32) -> u64 {
    (1..=ttl).map(|d| (k as u64).saturating_pow(d)).fold(0u64, |a, b| a.saturating_add(b))
}
