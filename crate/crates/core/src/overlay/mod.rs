//! Discovery overlays and the record type they return.

pub mod gossip;
pub mod kademlia;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{Cycle, RngStream};
use crate::error::Error;
use crate::lifecycle::{Agent, AgentId, Sigma, SkillId};
use crate::substrate::{HostIdx, Substrate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlayKind {
    Kademlia,
    CyclonVicinity,
}

impl OverlayKind {
    pub const ALL: [OverlayKind; 2] = [OverlayKind::Kademlia, OverlayKind::CyclonVicinity];

    pub fn as_str(self) -> &'static str {
        match self {
            OverlayKind::Kademlia => "kademlia",
            OverlayKind::CyclonVicinity => "cyclon_vicinity",
        }
    }
}

impl fmt::Display for OverlayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OverlayKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "kademlia" | "kad" => Ok(OverlayKind::Kademlia),
            "cyclon_vicinity" | "cyclon+vicinity" | "gossip" | "cv" => Ok(OverlayKind::CyclonVicinity),
            other => Err(Error::InvalidConfig(format!("unknown overlay `{other}`"))),
        }
    }
}

/// What discovery hands back: an agent, its host, and the last state the
/// overlay knew for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AgentRecord {
    pub agent: AgentId,
    pub host: HostIdx,
    pub skill: SkillId,
    pub believed: Sigma,
    pub refreshed_at: Cycle,
}

/// Result of one discovery attempt.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiscoveryOutcome {
    pub candidates: Vec<AgentRecord>,
    /// Query rounds (Kademlia) or forwarding depth (gossip).
    pub hops: u32,
    /// Request-plane messages sent by this discovery.
    pub msgs: u64,
    /// Cycles from issue until the initiator holds the result.
    pub elapsed: Cycle,
}

/// Borrowed run state an overlay operation may touch.
pub struct NetCtx<'a> {
    pub substrate: &'a mut Substrate,
    pub agents: &'a [Agent],
    pub host_agents: &'a [Vec<AgentId>],
    pub rng: &'a mut RngStream,
}

impl NetCtx<'_> {
    pub fn agents_on(&self, host: HostIdx) -> impl Iterator<Item = &Agent> + '_ {
        self.host_agents[host.index()].iter().map(move |a| &self.agents[a.index()])
    }
}

/// Smallest integer `t` with `2^t >= n`.
pub fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}
