//! Structured discovery: XOR-metric k-buckets, α-parallel iterative lookups
//! and skill records replicated on the nodes closest to the skill's key.
//!
//! Lookups proceed in synchronous rounds. A round queries up to α contacts
//! and lasts one cycle, or the timeout window when any queried contact is
//! down. Replies are counted as messages but add no latency of their own.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ceil_log2, AgentRecord, DiscoveryOutcome, NetCtx};
use crate::engine::Cycle;
use crate::lifecycle::SkillId;
use crate::substrate::{HostIdx, MessageKind, NodeId, Plane, Substrate, ID_BYTES};

pub const KEY_BITS: usize = ID_BYTES * 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KademliaParams {
    /// Bucket size.
    pub k: usize,
    pub alpha: usize,
    pub replication: usize,
    pub record_ttl: Cycle,
    pub republish_period: Cycle,
    /// Periodic random-key lookup per node; off unless set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refresh_period: Option<Cycle>,
}

impl Default for KademliaParams {
    fn default() -> Self {
        Self { k: 8, alpha: 3, replication: 3, record_ttl: 60, republish_period: 20, refresh_period: None }
    }
}

/// XOR distance, ordered as an unsigned 160-bit integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Distance(pub [u8; ID_BYTES]);

impl Distance {
    pub const ZERO: Distance = Distance([0; ID_BYTES]);

    pub fn leading_zeros(&self) -> u32 {
        let mut n = 0;
        for b in self.0 {
            if b == 0 {
                n += 8;
            } else {
                return n + b.leading_zeros();
            }
        }
        n
    }

    /// Index `i` such that the distance lies in `[2^i, 2^(i+1))`; `None` for zero.
    pub fn bucket_index(&self) -> Option<usize> {
        let lz = self.leading_zeros() as usize;
        (lz < KEY_BITS).then(|| KEY_BITS - 1 - lz)
    }
}

pub fn xor_distance(a: &NodeId, b: &NodeId) -> Distance {
    let mut out = [0u8; ID_BYTES];
    for (o, (x, y)) in out.iter_mut().zip(a.0.iter().zip(b.0.iter())) {
        *o = x ^ y;
    }
    Distance(out)
}

/// Key under which records for `skill` are stored: SHA-256 truncated to 160 bits.
pub fn skill_key(skill: SkillId) -> NodeId {
    let digest = Sha256::digest(format!("skill:{}", skill.0).as_bytes());
    let mut b = [0u8; ID_BYTES];
    b.copy_from_slice(&digest[..ID_BYTES]);
    NodeId(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Contact {
    pub host: HostIdx,
    pub id: NodeId,
    pub last_seen: Cycle,
    /// Failed to answer a query; replaced first and never handed out.
    pub stale: bool,
}

impl Contact {
    pub fn new(host: HostIdx, id: NodeId, last_seen: Cycle) -> Self {
        Self { host, id, last_seen, stale: false }
    }
}

#[derive(Debug, Clone)]
pub struct RoutingTable {
    owner: NodeId,
    owner_host: HostIdx,
    k: usize,
    buckets: Vec<Vec<Contact>>,
}

impl RoutingTable {
    pub fn new(owner_host: HostIdx, owner: NodeId, k: usize) -> Self {
        Self { owner, owner_host, k, buckets: vec![Vec::new(); KEY_BITS] }
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn owner_host(&self) -> HostIdx {
        self.owner_host
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bucket(&self, i: usize) -> &[Contact] {
        &self.buckets[i]
    }

    pub fn bucket_of(&self, id: &NodeId) -> Option<usize> {
        xor_distance(&self.owner, id).bucket_index()
    }

    pub fn contacts(&self) -> impl Iterator<Item = &Contact> + '_ {
        self.buckets.iter().flatten()
    }

    pub fn get(&self, host: HostIdx, id: &NodeId) -> Option<&Contact> {
        let b = self.bucket_of(id)?;
        self.buckets[b].iter().find(|c| c.host == host)
    }

    /// Adds a contact without probing anyone; dropped when its bucket is full.
    pub fn insert_unchecked(&mut self, contact: Contact) -> bool {
        let Some(b) = self.bucket_of(&contact.id) else { return false };
        let bucket = &mut self.buckets[b];
        if bucket.iter().any(|c| c.host == contact.host) || bucket.len() >= self.k {
            return false;
        }
        bucket.push(contact);
        true
    }

    pub fn mark_stale(&mut self, host: HostIdx, id: &NodeId) {
        if let Some(b) = self.bucket_of(id) {
            if let Some(c) = self.buckets[b].iter_mut().find(|c| c.host == host) {
                c.stale = true;
            }
        }
    }

    pub fn remove(&mut self, host: HostIdx, id: &NodeId) -> bool {
        let Some(b) = self.bucket_of(id) else { return false };
        let before = self.buckets[b].len();
        self.buckets[b].retain(|c| c.host != host);
        before != self.buckets[b].len()
    }

    /// Up to `n` non-stale contacts closest to `key`.
    pub fn closest(&self, key: &NodeId, n: usize) -> Vec<Contact> {
        let mut all: Vec<(Distance, Contact)> =
            self.contacts().filter(|c| !c.stale).map(|c| (xor_distance(&c.id, key), *c)).collect();
        all.sort_unstable_by_key(|c| c.0);
        all.into_iter().take(n).map(|(_, c)| c).collect()
    }

    /// Bucket bounds, no self entry, bucket index agrees with distance, and
    /// no host listed twice.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut hosts = Vec::with_capacity(self.len());
        for (i, bucket) in self.buckets.iter().enumerate() {
            if bucket.len() > self.k {
                return Err(format!("bucket {i} holds {} > k={}", bucket.len(), self.k));
            }
            for c in bucket {
                if c.id == self.owner || c.host == self.owner_host {
                    return Err(format!("bucket {i} contains the owner"));
                }
                if self.bucket_of(&c.id) != Some(i) {
                    return Err(format!("contact {:?} misplaced in bucket {i}", c.id));
                }
                hosts.push(c.host);
            }
        }
        hosts.sort_unstable();
        let n = hosts.len();
        hosts.dedup();
        if hosts.len() != n {
            return Err("duplicate contact".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BucketUpdate {
    /// Already known: moved to the tail.
    Refreshed,
    Inserted,
    /// Replaced a stale or unresponsive contact.
    Evicted(HostIdx),
    /// Bucket full of live contacts; the newcomer was dropped.
    Dropped,
    /// Observed contact is the owner itself.
    Ignored,
}

/// Standard k-bucket update on direct contact with `observed` at `now`.
///
/// When the bucket is full, a stale entry is replaced outright; otherwise the
/// least-recently-seen entry is pinged on the maintenance plane (skipped if it
/// was seen this very cycle) and evicted only if it fails to answer.
pub fn bucket_maintenance(
    table: &mut RoutingTable,
    observed: Contact,
    now: Cycle,
    substrate: &mut Substrate,
) -> BucketUpdate {
    let Some(b) = table.bucket_of(&observed.id) else { return BucketUpdate::Ignored };
    if observed.host == table.owner_host {
        return BucketUpdate::Ignored;
    }
    let k = table.k;
    let owner_host = table.owner_host;
    let bucket = &mut table.buckets[b];
    if let Some(pos) = bucket.iter().position(|c| c.host == observed.host) {
        let mut c = bucket.remove(pos);
        c.last_seen = c.last_seen.max(observed.last_seen);
        c.stale = false;
        bucket.push(c);
        return BucketUpdate::Refreshed;
    }
    if bucket.len() < k {
        bucket.push(Contact { stale: false, ..observed });
        return BucketUpdate::Inserted;
    }
    if let Some(pos) = bucket.iter().position(|c| c.stale) {
        let gone = bucket.remove(pos).host;
        bucket.push(Contact { stale: false, ..observed });
        return BucketUpdate::Evicted(gone);
    }
    let head = bucket[0];
    if head.last_seen >= now {
        return BucketUpdate::Dropped;
    }
    let ping = substrate.send(owner_host, head.host, MessageKind::Ping, Plane::Maintenance, now);
    if let crate::substrate::DeliveryTicket::Delivered { at } = ping {
        substrate.send(head.host, owner_host, MessageKind::Pong, Plane::Maintenance, at);
        let mut h = bucket.remove(0);
        h.last_seen = at;
        bucket.push(h);
        BucketUpdate::Dropped
    } else {
        bucket.remove(0);
        bucket.push(Contact { stale: false, ..observed });
        BucketUpdate::Evicted(head.host)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkillRecord {
    pub skill: SkillId,
    pub agent: AgentRecord,
    pub published_at: Cycle,
    pub ttl: Cycle,
}

impl SkillRecord {
    pub fn is_live(&self, now: Cycle) -> bool {
        now.saturating_sub(self.published_at) <= self.ttl
    }
}

#[derive(Debug, Clone)]
pub struct KadNode {
    pub table: RoutingTable,
    store: BTreeMap<NodeId, Vec<SkillRecord>>,
}

impl KadNode {
    fn new(host: HostIdx, id: NodeId, k: usize) -> Self {
        Self { table: RoutingTable::new(host, id, k), store: BTreeMap::new() }
    }

    /// Inserts or replaces the record for the same agent.
    pub fn store_record(&mut self, key: NodeId, record: SkillRecord) {
        let list = self.store.entry(key).or_default();
        match list.iter_mut().find(|r| r.agent.agent == record.agent.agent) {
            Some(slot) if slot.published_at <= record.published_at => *slot = record,
            Some(_) => {}
            None => list.push(record),
        }
    }

    /// Unexpired records for `key`, purging expired ones.
    pub fn live_records(&mut self, key: &NodeId, now: Cycle) -> Vec<SkillRecord> {
        match self.store.get_mut(key) {
            Some(list) => {
                list.retain(|r| r.is_live(now));
                list.clone()
            }
            None => Vec::new(),
        }
    }

    /// Non-mutating view of unexpired records for `key`.
    pub fn peek_records(&self, key: &NodeId, now: Cycle) -> Vec<SkillRecord> {
        self.store.get(key).map(|l| l.iter().filter(|r| r.is_live(now)).copied().collect()).unwrap_or_default()
    }

    pub fn stored_record_count(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Probe {
    Pending,
    Responded,
    Failed,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist: Distance,
    host: HostIdx,
    id: NodeId,
    probe: Probe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupMode {
    FindNode,
    FindValue,
}

#[derive(Debug, Clone, Default)]
pub struct LookupResult {
    pub rounds: u32,
    pub msgs: u64,
    pub elapsed: Cycle,
    /// Responsive nodes, closest first.
    pub responded: Vec<(Distance, HostIdx)>,
    pub records: Vec<SkillRecord>,
    /// The initiator went down mid-lookup.
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishReceipt {
    pub stored_on: Vec<HostIdx>,
    pub degraded: bool,
    pub msgs: u64,
}

#[derive(Debug, Clone)]
pub struct KademliaNet {
    pub params: KademliaParams,
    nodes: Vec<KadNode>,
    bootstrap_randoms: usize,
}

impl KademliaNet {
    pub fn new(params: KademliaParams, substrate: &Substrate) -> Self {
        let n = substrate.n_hosts();
        let nodes =
            (0..n).map(|i| KadNode::new(HostIdx(i as u32), substrate.id(HostIdx(i as u32)), params.k)).collect();
        Self { params, nodes, bootstrap_randoms: ceil_log2(n) as usize }
    }

    pub fn node(&self, host: HostIdx) -> &KadNode {
        &self.nodes[host.index()]
    }

    pub fn node_mut(&mut self, host: HostIdx) -> &mut KadNode {
        &mut self.nodes[host.index()]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, n) in self.nodes.iter().enumerate() {
            n.table.check_invariants().map_err(|e| format!("host {i}: {e}"))?;
        }
        Ok(())
    }

    /// Seeds the routing table with alive substrate neighbours plus
    /// ⌈log2 n⌉ random alive hosts. No messages.
    pub fn seed_table(&mut self, host: HostIdx, ctx: &mut NetCtx<'_>, now: Cycle) {
        let id = ctx.substrate.id(host);
        let mut table = RoutingTable::new(host, id, self.params.k);
        let substrate = &*ctx.substrate;
        for &nb in substrate.graph.neighbors(host) {
            if substrate.liveness.is_alive(nb) {
                table.insert_unchecked(Contact::new(nb, substrate.id(nb), now));
            }
        }
        let alive: Vec<HostIdx> = substrate.liveness.alive_hosts().filter(|&h| h != host).collect();
        let want = self.bootstrap_randoms.min(alive.len());
        for i in index::sample(ctx.rng, alive.len(), want) {
            let h = alive[i];
            table.insert_unchecked(Contact::new(h, substrate.id(h), now));
        }
        self.nodes[host.index()].table = table;
    }

    /// Fresh join: seeded table followed by a self-lookup on the maintenance plane.
    pub fn bootstrap(&mut self, host: HostIdx, ctx: &mut NetCtx<'_>, now: Cycle) -> LookupResult {
        self.seed_table(host, ctx, now);
        let id = ctx.substrate.id(host);
        self.iterative_lookup(ctx.substrate, host, id, LookupMode::FindNode, Plane::Maintenance, now)
    }

    /// Host went down: its table and store are lost.
    pub fn on_host_down(&mut self, host: HostIdx, substrate: &Substrate) {
        self.nodes[host.index()] = KadNode::new(host, substrate.id(host), self.params.k);
    }

    /// α-parallel iterative lookup for `key` started by `initiator` at `start`.
    ///
    /// Terminates when the k closest non-failed candidates have all answered,
    /// or, in value mode, after the first round that returns records.
    pub fn iterative_lookup(
        &mut self,
        substrate: &mut Substrate,
        initiator: HostIdx,
        key: NodeId,
        mode: LookupMode,
        plane: Plane,
        start: Cycle,
    ) -> LookupResult {
        let KademliaParams { k, alpha, .. } = self.params;
        let init_id = substrate.id(initiator);
        let mut out = LookupResult::default();
        let mut shortlist: Vec<Candidate> = self.nodes[initiator.index()]
            .table
            .closest(&key, k)
            .into_iter()
            .map(|c| Candidate { dist: xor_distance(&c.id, &key), host: c.host, id: c.id, probe: Probe::Pending })
            .collect();
        let mut t = start;
        let (query_kind, reply_kind) = match mode {
            LookupMode::FindNode => (MessageKind::FindNode, MessageKind::FoundNodes),
            LookupMode::FindValue => (MessageKind::FindValue, MessageKind::FoundNodes),
        };

        loop {
            let batch: Vec<usize> = shortlist
                .iter()
                .enumerate()
                .filter(|(_, c)| c.probe != Probe::Failed)
                .take(k)
                .filter(|(_, c)| c.probe == Probe::Pending)
                .map(|(i, _)| i)
                .take(alpha)
                .collect();
            if batch.is_empty() {
                break;
            }
            if !substrate.alive_at(initiator, t) {
                out.aborted = true;
                break;
            }
            out.rounds += 1;
            let mut round_end = t;
            let mut learned: Vec<Contact> = Vec::new();
            for &ci in &batch {
                let cand = shortlist[ci];
                let ticket = substrate.send(initiator, cand.host, query_kind, plane, t);
                out.msgs += 1;
                round_end = round_end.max(ticket.resolved_at());
                let crate::substrate::DeliveryTicket::Delivered { at } = ticket else {
                    shortlist[ci].probe = Probe::Failed;
                    self.nodes[initiator.index()].table.mark_stale(cand.host, &cand.id);
                    continue;
                };
                // Responder side, at delivery time.
                let responder = &mut self.nodes[cand.host.index()];
                bucket_maintenance(&mut responder.table, Contact::new(initiator, init_id, at), at, substrate);
                if mode == LookupMode::FindValue {
                    out.records.extend(responder.live_records(&key, at));
                }
                learned.extend(responder.table.closest(&key, k));
                let reply = substrate.send(cand.host, initiator, reply_kind, plane, at);
                out.msgs += 1;
                if !reply.delivered() {
                    // Initiator died while waiting.
                    out.aborted = true;
                    continue;
                }
                shortlist[ci].probe = Probe::Responded;
                out.responded.push((cand.dist, cand.host));
                let init_table = &mut self.nodes[initiator.index()].table;
                bucket_maintenance(init_table, Contact::new(cand.host, cand.id, at), at, substrate);
            }
            // One hop per round; a timeout stretches the round.
            t = round_end;
            if out.aborted {
                break;
            }
            for c in learned {
                if c.host == initiator || shortlist.iter().any(|s| s.host == c.host) {
                    continue;
                }
                shortlist.push(Candidate {
                    dist: xor_distance(&c.id, &key),
                    host: c.host,
                    id: c.id,
                    probe: Probe::Pending,
                });
            }
            shortlist.sort_by(|a, b| a.dist.cmp(&b.dist).then(a.host.cmp(&b.host)));
            if mode == LookupMode::FindValue && !out.records.is_empty() {
                break;
            }
        }
        out.elapsed = t - start;
        out.responded.sort();
        if out.aborted {
            out.records.clear();
        }
        dedup_records(&mut out.records);
        out
    }

    /// Value lookup for a skill. A record held by the initiator itself is a
    /// zero-hop local hit.
    pub fn lookup(&mut self, substrate: &mut Substrate, initiator: HostIdx, key: NodeId, now: Cycle) -> LookupResult {
        let local = self.nodes[initiator.index()].live_records(&key, now);
        if !local.is_empty() {
            let mut records = local;
            dedup_records(&mut records);
            return LookupResult { records, ..LookupResult::default() };
        }
        self.iterative_lookup(substrate, initiator, key, LookupMode::FindValue, Plane::Request, now)
    }

    pub fn discover(
        &mut self,
        substrate: &mut Substrate,
        initiator: HostIdx,
        skill: SkillId,
        now: Cycle,
    ) -> DiscoveryOutcome {
        let r = self.lookup(substrate, initiator, skill_key(skill), now);
        DiscoveryOutcome {
            candidates: r.records.iter().map(|rec| rec.agent).collect(),
            hops: r.rounds,
            msgs: r.msgs,
            elapsed: r.elapsed,
        }
    }

    /// Stores `record` on the `replication` closest responsive nodes found by
    /// a node lookup from `publisher` (itself included). Maintenance plane.
    pub fn publish(
        &mut self,
        substrate: &mut Substrate,
        publisher: HostIdx,
        record: SkillRecord,
        now: Cycle,
    ) -> PublishReceipt {
        let key = skill_key(record.skill);
        let found = self.iterative_lookup(substrate, publisher, key, LookupMode::FindNode, Plane::Maintenance, now);
        let mut msgs = found.msgs;
        if found.aborted {
            return PublishReceipt { stored_on: Vec::new(), degraded: true, msgs };
        }
        let mut targets = found.responded.clone();
        targets.push((xor_distance(&substrate.id(publisher), &key), publisher));
        targets.sort();
        targets.dedup_by_key(|t| t.1);
        let send_at = now + found.elapsed;
        let mut stored_on = Vec::new();
        for &(_, host) in targets.iter().take(self.params.replication) {
            if host == publisher {
                self.nodes[host.index()].store_record(key, record);
                stored_on.push(host);
                continue;
            }
            if !substrate.alive_at(publisher, send_at) {
                break;
            }
            msgs += 1;
            if substrate.send(publisher, host, MessageKind::Store, Plane::Maintenance, send_at).delivered() {
                self.nodes[host.index()].store_record(key, record);
                stored_on.push(host);
            }
        }
        let degraded = stored_on.len() < self.params.replication.min(substrate.liveness.n_alive());
        PublishReceipt { stored_on, degraded, msgs }
    }

    /// Random-key node lookup used as periodic bucket refresh.
    pub fn refresh(&mut self, host: HostIdx, ctx: &mut NetCtx<'_>, now: Cycle) -> LookupResult {
        let target = NodeId::random(ctx.rng);
        self.iterative_lookup(ctx.substrate, host, target, LookupMode::FindNode, Plane::Maintenance, now)
    }

    /// Brute-force oracle: union of unexpired records for `key` held by the
    /// `replication` alive nodes closest to it.
    pub fn oracle_records(&self, substrate: &Substrate, key: &NodeId, now: Cycle) -> Vec<SkillRecord> {
        let mut hosts: Vec<(Distance, HostIdx)> =
            substrate.liveness.alive_hosts().map(|h| (xor_distance(&substrate.id(h), key), h)).collect();
        hosts.sort();
        let mut out: Vec<SkillRecord> = hosts
            .iter()
            .take(self.params.replication)
            .flat_map(|&(_, h)| self.nodes[h.index()].peek_records(key, now))
            .collect();
        dedup_records(&mut out);
        out
    }
}

/// One record per agent, keeping the most recently published.
fn dedup_records(records: &mut Vec<SkillRecord>) {
    records.sort_by(|a, b| a.agent.agent.cmp(&b.agent.agent).then(b.published_at.cmp(&a.published_at)));
    records.dedup_by_key(|r| r.agent.agent);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{RngStream, StreamLabel};
    use crate::lifecycle::{AgentId, Sigma};
    use crate::substrate::{generate_topology, Substrate};

    fn id4(v: u8) -> NodeId {
        let mut b = [0u8; ID_BYTES];
        b[ID_BYTES - 1] = v;
        NodeId(b)
    }

    fn low(d: &Distance) -> u32 {
        d.0[ID_BYTES - 1] as u32
    }

    #[test]
    fn xor_basics() {
        let x = NodeId::random(&mut RngStream::new(1, StreamLabel::Topology));
        assert_eq!(xor_distance(&x, &x), Distance::ZERO);
        assert_eq!(low(&xor_distance(&id4(0b0011), &id4(0b0101))), 6);
    }

    #[test]
    fn xor_triangle_inequality_exhaustive_4bit() {
        for x in 0..16u8 {
            for y in 0..16u8 {
                for z in 0..16u8 {
                    let xz = low(&xor_distance(&id4(x), &id4(z)));
                    let xy = low(&xor_distance(&id4(x), &id4(y)));
                    let yz = low(&xor_distance(&id4(y), &id4(z)));
                    assert!(xz <= xy + yz, "{x} {y} {z}");
                }
            }
        }
    }

    #[test]
    fn bucket_index_matches_prefix() {
        assert_eq!(xor_distance(&id4(0), &id4(1)).bucket_index(), Some(0));
        assert_eq!(xor_distance(&id4(0), &id4(0b1000)).bucket_index(), Some(3));
        let mut hi = [0u8; ID_BYTES];
        hi[0] = 0x80;
        assert_eq!(Distance(hi).bucket_index(), Some(159));
        assert_eq!(Distance::ZERO.bucket_index(), None);
    }

    fn small_substrate(n: usize) -> Substrate {
        let g = generate_topology(n, 1.0, &mut RngStream::new(3, StreamLabel::Topology)).unwrap();
        Substrate::new(g, 2)
    }

    /// Table owned by id 0 with contacts whose ids all land in bucket 3.
    fn full_bucket() -> RoutingTable {
        let mut t = RoutingTable::new(HostIdx(0), id4(0), 2);
        assert!(t.insert_unchecked(Contact::new(HostIdx(1), id4(0b1000), 1)));
        assert!(t.insert_unchecked(Contact::new(HostIdx(2), id4(0b1001), 2)));
        assert!(!t.insert_unchecked(Contact::new(HostIdx(3), id4(0b1010), 3)));
        t
    }

    #[test]
    fn bucket_insert_into_non_full() {
        let mut s = small_substrate(4);
        let mut t = RoutingTable::new(HostIdx(0), id4(0), 2);
        let r = bucket_maintenance(&mut t, Contact::new(HostIdx(1), id4(0b1000), 5), 5, &mut s);
        assert_eq!(r, BucketUpdate::Inserted);
        assert_eq!(t.bucket(3).last().unwrap().host, HostIdx(1));
        assert_eq!(s.ledger.totals().total(), 0);
    }

    #[test]
    fn bucket_full_dead_head_evicted() {
        let mut s = small_substrate(4);
        let mut t = full_bucket();
        s.liveness.set(HostIdx(1), false);
        let r = bucket_maintenance(&mut t, Contact::new(HostIdx(3), id4(0b1010), 10), 10, &mut s);
        assert_eq!(r, BucketUpdate::Evicted(HostIdx(1)));
        let hosts: Vec<_> = t.bucket(3).iter().map(|c| c.host).collect();
        assert_eq!(hosts, vec![HostIdx(2), HostIdx(3)]);
        assert_eq!(s.ledger.totals().maintenance, 1);
    }

    #[test]
    fn bucket_full_live_head_kept() {
        let mut s = small_substrate(4);
        let mut t = full_bucket();
        let r = bucket_maintenance(&mut t, Contact::new(HostIdx(3), id4(0b1010), 10), 10, &mut s);
        assert_eq!(r, BucketUpdate::Dropped);
        let hosts: Vec<_> = t.bucket(3).iter().map(|c| c.host).collect();
        assert_eq!(hosts, vec![HostIdx(2), HostIdx(1)]);
        assert_eq!(t.bucket(3)[1].last_seen, 11);
        assert_eq!(s.ledger.totals().maintenance, 2);
        t.check_invariants().unwrap();
    }

    #[test]
    fn stale_contact_replaced_without_ping() {
        let mut s = small_substrate(4);
        let mut t = full_bucket();
        t.mark_stale(HostIdx(2), &id4(0b1001));
        assert!(t.closest(&id4(0b1001), 8).iter().all(|c| c.host != HostIdx(2)));
        let r = bucket_maintenance(&mut t, Contact::new(HostIdx(3), id4(0b1010), 10), 10, &mut s);
        assert_eq!(r, BucketUpdate::Evicted(HostIdx(2)));
        assert_eq!(s.ledger.totals().total(), 0);
    }

    fn record(agent: u32, host: u32, skill: u32, at: Cycle) -> SkillRecord {
        SkillRecord {
            skill: SkillId(skill),
            agent: AgentRecord {
                agent: AgentId(agent),
                host: HostIdx(host),
                skill: SkillId(skill),
                believed: Sigma::Warm,
                refreshed_at: at,
            },
            published_at: at,
            ttl: 60,
        }
    }

    #[test]
    fn expired_records_hidden() {
        let mut n = KadNode::new(HostIdx(0), id4(0), 8);
        let key = skill_key(SkillId(1));
        n.store_record(key, record(1, 0, 1, 10));
        assert_eq!(n.peek_records(&key, 70).len(), 1);
        assert!(n.peek_records(&key, 71).is_empty());
        assert!(n.live_records(&key, 71).is_empty());
        assert_eq!(n.stored_record_count(), 0);
    }

    #[test]
    fn single_node_network_stores_locally() {
        let g = generate_topology(2, 1.0, &mut RngStream::new(1, StreamLabel::Topology)).unwrap();
        let mut s = Substrate::new(g, 2);
        s.liveness.set(HostIdx(1), false);
        let mut net = KademliaNet::new(KademliaParams::default(), &s);
        let rec = record(0, 0, 4, 0);
        let receipt = net.publish(&mut s, HostIdx(0), rec, 0);
        assert_eq!(receipt.stored_on, vec![HostIdx(0)]);
        assert!(!receipt.degraded);
        let found = net.lookup(&mut s, HostIdx(0), skill_key(SkillId(4)), 1);
        assert_eq!(found.rounds, 0);
        assert_eq!(found.records.len(), 1);
    }

    #[test]
    fn skill_keys_are_distinct() {
        let mut keys: Vec<NodeId> = (0..200).map(|s| skill_key(SkillId(s))).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 200);
    }
}
