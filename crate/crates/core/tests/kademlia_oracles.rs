use std::collections::BTreeSet;

use discovery_sim::experiments::{desk, find_regime};
use discovery_sim::lifecycle::{AgentId, Sigma, SkillId};
use discovery_sim::overlay::kademlia::{skill_key, xor_distance, SkillRecord};
use discovery_sim::overlay::AgentRecord;
use discovery_sim::substrate::HostIdx;
use discovery_sim::{OverlayKind, RegimeConfig, Simulation};

fn small_stable(n_hosts: usize) -> RegimeConfig {
    RegimeConfig {
        name: "small".into(),
        n_agents: 2 * n_hosts,
        n_hosts,
        skill_catalog: 6,
        horizon: 40,
        warmup: 20,
        seeds: vec![1],
        ..RegimeConfig::default()
    }
}

/// Brute force: the `r` hosts whose ids are XOR-closest to `key`.
fn closest_hosts(sim: &Simulation, key: &discovery_sim::substrate::NodeId, r: usize) -> BTreeSet<HostIdx> {
    let sub = sim.substrate();
    let mut all: Vec<_> =
        (0..sub.n_hosts() as u32).map(|h| (xor_distance(&sub.id(HostIdx(h)), key), HostIdx(h))).collect();
    all.sort();
    all.into_iter().take(r).map(|(_, h)| h).collect()
}

#[test]
fn records_sit_on_exactly_the_three_closest_nodes() {
    for seed in 1..=5 {
        let cfg = small_stable(16);
        let mut sim = Simulation::new(&cfg, OverlayKind::Kademlia, seed).unwrap();
        sim.initialize();
        sim.run_to(cfg.warmup);
        let kad = sim.kademlia().unwrap();
        let published: BTreeSet<SkillId> = sim.agents().iter().flat_map(|a| a.skills.iter().copied()).collect();
        for skill in published {
            let key = skill_key(skill);
            let holders: BTreeSet<HostIdx> =
                (0..16u32).map(HostIdx).filter(|&h| !kad.node(h).peek_records(&key, cfg.warmup).is_empty()).collect();
            assert_eq!(holders, closest_hosts(&sim, &key, 3), "seed {seed}, skill {skill}");
        }
    }
}

#[test]
fn single_host_network_stores_locally() {
    // Two hosts is the smallest valid substrate; with replication 1 the
    // record lands on exactly one node, the XOR-closer of the two.
    let mut cfg = small_stable(2);
    cfg.kademlia.replication = 1;
    let mut sim = Simulation::new(&cfg, OverlayKind::Kademlia, 3).unwrap();
    sim.initialize();
    sim.run_to(1);
    let kad = sim.kademlia().unwrap();
    for a in sim.agents() {
        let key = skill_key(a.skills[0]);
        let holders: Vec<u32> = (0..2).filter(|&h| !kad.node(HostIdx(h)).peek_records(&key, 0).is_empty()).collect();
        assert_eq!(holders.len(), 1);
        assert!(closest_hosts(&sim, &key, 1).contains(&HostIdx(holders[0])));
    }
}

#[test]
fn absent_key_returns_nothing() {
    let cfg = small_stable(16);
    let mut sim = Simulation::new(&cfg, OverlayKind::Kademlia, 2).unwrap();
    sim.initialize();
    sim.run_to(cfg.warmup);
    let now = sim.now();
    let (kad, sub) = sim.kademlia_parts().unwrap();
    let r = kad.discover(sub, HostIdx(0), SkillId(999), now);
    assert!(r.candidates.is_empty());
}

#[test]
fn stable_lookups_stay_within_hop_bound() {
    let cfg = desk(&find_regime("stable").unwrap());
    let bound = (cfg.n_hosts as f64).log2() + 2.0;
    for seed in cfg.seeds.clone() {
        let r = discovery_sim::run_once(&cfg, OverlayKind::Kademlia, seed).unwrap();
        let rounds = r.diagnostics.mean_discovery_hops();
        assert!(rounds <= bound, "seed {seed}: mean rounds {rounds} > {bound}");
        let worst = r.outcomes.iter().map(|o| o.hops).max().unwrap();
        assert!(worst as f64 <= (cfg.n_hosts as f64).log2().ceil() + 2.0, "seed {seed}: worst {worst}");
    }
}

#[test]
fn republish_every_cycle_costs_at_least_one_message_per_record() {
    let mut cfg = desk(&find_regime("maint-republish-plus").unwrap());
    cfg.seeds = vec![1];
    let r = discovery_sim::run_once(&cfg, OverlayKind::Kademlia, 1).unwrap();
    let sim = Simulation::new(&cfg, OverlayKind::Kademlia, 1).unwrap();
    let records = sim.agents().iter().map(|a| a.skills.len()).sum::<usize>() as f64;
    assert!(r.summary.maint_msgs_per_cycle >= records, "{} < {records}", r.summary.maint_msgs_per_cycle);
}

#[test]
fn expired_records_are_never_returned() {
    let cfg = small_stable(16);
    let mut sim = Simulation::new(&cfg, OverlayKind::Kademlia, 4).unwrap();
    sim.initialize();
    sim.run_to(5);
    let skill = SkillId(500);
    let agent = AgentRecord { agent: AgentId(0), host: HostIdx(0), skill, believed: Sigma::Warm, refreshed_at: 5 };
    let (kad, sub) = sim.kademlia_parts().unwrap();
    let receipt = kad.publish(sub, HostIdx(0), SkillRecord { skill, agent, published_at: 5, ttl: 10 }, 5);
    assert_eq!(receipt.stored_on.len(), 3);
    assert!(!receipt.degraded);
    // Queries land one round after issue, so ask well inside the lifetime.
    assert_eq!(kad.discover(sub, HostIdx(7), skill, 11).candidates, vec![agent]);
    assert!(kad.discover(sub, HostIdx(7), skill, 16).candidates.is_empty());
    assert!(kad.oracle_records(sub, &skill_key(skill), 16).is_empty());
}

#[test]
fn lookups_agree_with_brute_force_oracle() {
    let cfg = small_stable(16);
    let mut sim = Simulation::new(&cfg, OverlayKind::Kademlia, 9).unwrap();
    sim.initialize();
    sim.run_to(cfg.warmup);
    let now = sim.now();
    let (kad, sub) = sim.kademlia_parts().unwrap();
    for i in 0..100u32 {
        let key = skill_key(SkillId(i % cfg.skill_catalog));
        let want: BTreeSet<AgentId> = kad.oracle_records(sub, &key, now).iter().map(|r| r.agent.agent).collect();
        let got: BTreeSet<AgentId> =
            kad.lookup(sub, HostIdx(i % 16), key, now).records.iter().map(|r| r.agent.agent).collect();
        assert_eq!(got, want, "lookup {i}");
    }
}
