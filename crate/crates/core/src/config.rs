//! Run configuration: population, protocol parameters, churn and workload.

use serde::{Deserialize, Serialize};

use crate::engine::Cycle;
use crate::error::{Error, Result};
use crate::lifecycle::ChurnParams;
use crate::overlay::gossip::GossipParams;
use crate::overlay::kademlia::KademliaParams;
use crate::substrate::default_edge_probability;
use crate::workload::WorkloadParams;

/// Everything a run needs besides the seed and the overlay family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub name: String,
    pub n_agents: usize,
    pub n_hosts: usize,
    pub skill_catalog: u32,
    /// Inclusive range of skills per agent.
    pub skills_per_agent: [u32; 2],
    /// `None` uses `2 ln n / n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_probability: Option<f64>,
    pub timeout_window: Cycle,
    pub horizon: Cycle,
    pub warmup: Cycle,
    pub request_rate: f64,
    pub top_k: usize,
    pub seeds: Vec<u64>,
    pub churn: ChurnParams,
    pub kademlia: KademliaParams,
    pub gossip: GossipParams,
    #[serde(default)]
    pub workload: WorkloadParams,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            n_agents: 4096,
            n_hosts: 2048,
            skill_catalog: 50,
            skills_per_agent: [1, 1],
            edge_probability: None,
            timeout_window: 2,
            horizon: 80,
            warmup: 25,
            request_rate: 0.15,
            top_k: 1,
            seeds: vec![1, 2, 3, 4, 5],
            churn: ChurnParams::STABLE,
            kademlia: KademliaParams::default(),
            gossip: GossipParams::default(),
            workload: WorkloadParams::default(),
        }
    }
}

impl RegimeConfig {
    pub fn edge_probability(&self) -> f64 {
        self.edge_probability.unwrap_or_else(|| default_edge_probability(self.n_hosts))
    }

    pub fn skills_range(&self) -> (u32, u32) {
        (self.skills_per_agent[0], self.skills_per_agent[1])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("{}: {m}", self.name)));
        if self.n_hosts < 2 {
            return bad(format!("need at least 2 hosts, got {}", self.n_hosts));
        }
        if self.n_agents < self.n_hosts {
            return bad(format!("{} agents cannot cover {} hosts", self.n_agents, self.n_hosts));
        }
        let [lo, hi] = self.skills_per_agent;
        if self.skill_catalog == 0 || lo == 0 || lo > hi {
            return bad(format!("bad skills [{lo},{hi}] over catalog {}", self.skill_catalog));
        }
        if let Some(p) = self.edge_probability {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("edge probability {p} outside (0,1]"));
            }
        }
        if !(self.request_rate > 0.0 && self.request_rate <= 1.0) {
            return bad(format!("request rate {} outside (0,1]", self.request_rate));
        }
        if self.warmup >= self.horizon {
            return bad(format!("warmup {} leaves nothing of horizon {}", self.warmup, self.horizon));
        }
        if self.timeout_window == 0 || self.top_k == 0 || self.seeds.is_empty() {
            return bad("timeout window, top_k and seed list must be non-empty".into());
        }
        let k = &self.kademlia;
        if k.k == 0 || k.alpha == 0 || k.replication == 0 || k.republish_period == 0 || k.refresh_period == Some(0) {
            return bad("kademlia parameters must be positive".into());
        }
        let g = &self.gossip;
        if g.cyclon_cache == 0
            || g.cyclon_shuffle_len == 0
            || g.cyclon_period == 0
            || g.vicinity_cache == 0
            || g.vicinity_period == 0
            || g.forward_k == 0
        {
            return bad("gossip parameters must be positive".into());
        }
        self.churn.validate()?;
        self.workload.validate()
    }

    /// Applies a TOML document on top of this config. Keys absent from the
    /// document keep their current value; nested tables merge recursively.
    pub fn apply_overrides(&self, doc: &str) -> Result<Self> {
        let patch: toml::Table = doc.parse()?;
        let mut base = toml::Table::try_from(self)?;
        merge_tables(&mut base, patch);
        let mut cfg: RegimeConfig = base.try_into()?;
        cfg.churn = cfg.churn.normalized();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn merge_tables(base: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge_tables(b, p),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RegimeConfig::default().validate().unwrap();
    }

    #[test]
    fn infeasible_population_rejected() {
        let c = RegimeConfig { n_agents: 10, n_hosts: 20, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_merge() {
        let base = RegimeConfig::default();
        let c = base
            .apply_overrides("n_hosts = 64\nn_agents = 128\n[churn]\nsession_mean = 50\ndowntime_mean = 5\n[gossip]\nforward_k = 2\n")
            .unwrap();
        assert_eq!(c.n_hosts, 64);
        assert_eq!(c.churn, ChurnParams::node(50, 5));
        assert_eq!(c.gossip.forward_k, 2);
        assert_eq!(c.gossip.cyclon_cache, 20);
        assert_eq!(c.kademlia, base.kademlia);
    }

    #[test]
    fn zero_mean_disables() {
        let base = RegimeConfig { churn: ChurnParams::node(100, 30), ..Default::default() };
        let c = base.apply_overrides("[churn]\nsession_mean = 0\ndowntime_mean = 0\n").unwrap();
        assert!(!c.churn.node_churn_enabled());
    }

    #[test]
    fn toml_round_trip() {
        let c = RegimeConfig { churn: ChurnParams::combined(100, 30, 8, 10, 4), ..Default::default() };
        let back: RegimeConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_override_rejected() {
        assert!(RegimeConfig::default().apply_overrides("request_rate = 1.5").is_err());
        assert!(RegimeConfig::default().apply_overrides("not toml [").is_err());
    }
}
