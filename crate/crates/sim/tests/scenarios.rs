use std::collections::BTreeSet;

use creditnet_core::ledger::Ledger;
use creditnet_core::prefix::PrefixEmbedding;
use creditnet_core::protocol::{forward, PrefixRouter, World};
use creditnet_core::{CreditNetwork, NodeId, Rate, RequestId};
use creditnet_sim::config::{CorruptNode, Offer};
use creditnet_sim::{
    inject_adversary, run_audit, run_scenario, AdversarySpec, Behavior, EventKind, Scheduler,
    SimConfig, SimError,
};
use proptest::prelude::*;

fn cfg(scenario: &str, n: usize, seed: u64) -> SimConfig {
    let mut c = SimConfig {
        scenario: scenario.into(),
        seed,
        ..Default::default()
    };
    c.network.nodes = n;
    c.bailout.reps = 10;
    c.ring.bits = 24;
    c
}

#[test]
fn replay_is_deterministic() {
    for s in ["prefix-bt", "chord-bt", "bailout"] {
        let a = run_scenario(&cfg(s, 300, 11)).unwrap();
        let b = run_scenario(&cfg(s, 300, 11)).unwrap();
        assert_eq!(a.trace, b.trace, "{s}");
        assert_eq!(
            format!("{:?}", a.world.trace),
            format!("{:?}", b.world.trace),
            "{s}"
        );
        let lines = |o: &creditnet_sim::RunOutput| {
            o.records
                .iter()
                .map(|r| r.stable_line())
                .collect::<Vec<_>>()
        };
        assert_eq!(lines(&a), lines(&b), "{s}");
        assert_eq!(a.ledger_text(), b.ledger_text(), "{s}");
        assert!(!a.trace.is_empty());
    }
    let c = run_scenario(&cfg("prefix-bt", 300, 12)).unwrap();
    let a = run_scenario(&cfg("prefix-bt", 300, 11)).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn prefix_bt_emits_four_named_rows() {
    let out = run_scenario(&cfg("prefix-bt", 1000, 3)).unwrap();
    let ops: Vec<&str> = out.records.iter().map(|r| r.op.as_str()).collect();
    assert_eq!(
        ops,
        vec!["setup", "broadcast", "findroute", "findroute+response"]
    );
    assert!(out
        .records
        .iter()
        .all(|r| r.node_count == 1000 && r.scenario == "prefix-bt"));
    let resp = out.record("findroute+response").unwrap();
    assert_eq!(resp.ledger_writes, out.completed.len());
    assert_eq!(resp.links_created, out.completed.len());
    assert_eq!(resp.links_destroyed, out.completed.len());
    assert_eq!(out.record("broadcast").unwrap().cost, 1);
    assert_eq!(out.record("broadcast").unwrap().messages, 999);
}

#[test]
fn bailout_findroute_covers_all_ten_candidates() {
    let out = run_scenario(&cfg("bailout", 1000, 5)).unwrap();
    let b = out.bailout.as_ref().unwrap();
    assert!(!b.failed);
    assert_eq!(b.candidates[0].len(), 10);
    assert_eq!(b.links.len(), 10);
    assert_eq!(b.fee, 10);
    let ops: Vec<&str> = out.records.iter().map(|r| r.op.as_str()).collect();
    assert_eq!(ops, vec!["setup", "findroute", "create-edges"]);
    let fr = out.record("findroute").unwrap();
    assert!(fr.hops_min >= 1 && fr.hops_max >= fr.hops_min);
    assert_eq!(out.record("create-edges").unwrap().ledger_writes, 10);
    assert!(out
        .world
        .net
        .links()
        .all(|l| l.borrower != b.landmark && l.lender != b.landmark));
}

#[test]
fn chord_bt_on_two_nodes_completes() {
    let out = run_scenario(&cfg("chord-bt", 2, 1)).unwrap();
    assert_eq!(out.records.len(), 4);
    assert_eq!(out.world.audit_single_write(), Ok(out.completed.len()));
}

#[test]
fn chord_bt_repositions_every_completed_responder() {
    let out = run_scenario(&cfg("chord-bt", 400, 8)).unwrap();
    assert!(!out.completed.is_empty());
    let reassigns = out
        .trace
        .iter()
        .filter(|l| l.contains(" bailout-step Reassign"))
        .count();
    assert_eq!(reassigns, out.completed.len());
    assert!(out.trace.iter().any(|l| l.contains(" stabilize ")));
}

#[test]
fn config_errors_surface() {
    let mut c = cfg("prefix-bt", 100, 1);
    c.scenario = "gossip".into();
    assert!(matches!(
        run_scenario(&c),
        Err(SimError::UnknownScenario(_))
    ));
    let c = cfg("prefix-bt", 1, 1);
    assert!(run_scenario(&c).is_err());
}

#[test]
fn honest_run_has_empty_audit() {
    let out = run_scenario(&cfg("prefix-bt", 300, 2)).unwrap();
    assert!(out.deliveries.iter().all(|d| d.delivered));
    assert!(out.audit.is_empty());
}

#[test]
fn adversary_may_not_take_the_landmark_or_everyone() {
    let mut c = cfg("bailout", 3, 1);
    c.adversary.corrupt = (0..3)
        .map(|n| CorruptNode {
            node: n,
            behavior: "drop".into(),
            counterparty: None,
            claimed: None,
        })
        .collect();
    assert!(matches!(run_scenario(&c), Err(SimError::Adversary(_))));
}

#[test]
fn dropping_hub_is_in_every_suspect_segment() {
    let base = run_scenario(&cfg("prefix-bt", 500, 4)).unwrap();
    // the relay carrying the most responses
    let mut counts = std::collections::BTreeMap::new();
    for d in &base.deliveries {
        for &n in &d.path[1..d.path.len() - 1] {
            *counts.entry(n).or_insert(0) += 1;
        }
    }
    let (&hub, _) = counts.iter().max_by_key(|(_, &c)| c).unwrap();
    let mut c = cfg("prefix-bt", 500, 4);
    c.adversary.corrupt.push(CorruptNode {
        node: hub.0,
        behavior: "drop".into(),
        counterparty: None,
        claimed: None,
    });
    let out = run_scenario(&c).unwrap();
    let failed = out.deliveries.iter().filter(|d| !d.delivered).count();
    assert!(failed > 0);
    assert_eq!(out.audit.segments.len(), failed);
    assert!(out.audit.unlocated.is_empty());
    assert!(out.audit.segments.iter().all(|s| s.contains(hub)));
    assert!(!out.completed.contains(&hub));
}

#[test]
fn selective_responder_never_answers() {
    let base = run_scenario(&cfg("prefix-bt", 300, 6)).unwrap();
    let j = base.deliveries[0].path[0];
    let mut c = cfg("prefix-bt", 300, 6);
    c.adversary.corrupt.push(CorruptNode {
        node: j.0,
        behavior: "selective-response".into(),
        counterparty: None,
        claimed: None,
    });
    let out = run_scenario(&c).unwrap();
    assert!(out.deliveries.iter().all(|d| d.path[0] != j));
    assert_eq!(out.deliveries.len() + 1, base.deliveries.len());
}

fn path_world(n: u32) -> World {
    let mut net = CreditNetwork::with_nodes(n, 1);
    for k in 1..n {
        net.create_link(NodeId(k), NodeId(k - 1), 20, Rate(900))
            .unwrap();
    }
    World::deterministic(net)
}

#[test]
fn one_dropper_on_a_five_hop_route() {
    let mut w = path_world(7);
    let emb = PrefixEmbedding::build(&w.net, NodeId(0), 2).unwrap();
    let router = PrefixRouter {
        embedding: &emb,
        target: emb.hashed_id_seeded(NodeId(0), 2).unwrap(),
        alternates: true,
    };
    let spec = AdversarySpec::single(NodeId(3), Behavior::Drop);
    inject_adversary(&mut w, &spec);
    let d = forward(&mut w, &router, NodeId(5), &RequestId::new("r"));
    assert!(!d.delivered);
    let report = run_audit(&mut w, &[d], &router, &spec);
    assert_eq!(report.segments.len(), 1);
    assert!(report.segments[0].contains(NodeId(3)));
    assert!(report.misreports.is_empty());
}

#[test]
fn misreport_twenty_to_thirty_five_is_flagged() {
    let mut w = path_world(3);
    let spec = AdversarySpec::single(
        NodeId(1),
        Behavior::MisreportLink {
            counterparty: NodeId(0),
            claimed: 35,
        },
    );
    spec.validate(&w, None).unwrap();
    let emb = PrefixEmbedding::build(&w.net, NodeId(0), 2).unwrap();
    let router = PrefixRouter {
        embedding: &emb,
        target: emb.hashed_id_seeded(NodeId(0), 2).unwrap(),
        alternates: true,
    };
    let report = run_audit(&mut w, &[], &router, &spec);
    assert_eq!(report.misreports.len(), 1);
    let m = &report.misreports[0];
    assert_eq!((m.claimer, m.claimed, m.signed), (NodeId(1), 35, 20));
    // a truthful claim passes
    let honest = AdversarySpec::single(
        NodeId(1),
        Behavior::MisreportLink {
            counterparty: NodeId(0),
            claimed: 20,
        },
    );
    assert!(run_audit(&mut w, &[], &router, &honest).is_empty());
}

#[test]
fn scripted_lending_from_config() {
    let mut c = cfg("bailout", 200, 3);
    c.bailout.m_out = 3;
    c.lending.default = None;
    let first = run_scenario(&c).unwrap();
    let b = first.bailout.unwrap();
    assert!(b.failed);
    assert_eq!(b.fee, 0);
    assert!(first.world.ledger.is_empty());

    // only a node outside the first list lends
    let pool =
        creditnet_core::protocol::bailout::candidate_pool(&first.world, b.requestor, b.landmark);
    c.lending.offer.push(Offer {
        node: pool[4].0,
        amount: 33,
    });
    let out = run_scenario(&c).unwrap();
    let b = out.bailout.unwrap();
    assert_eq!(
        (b.rounds, b.links.clone(), b.fee),
        (2, vec![(pool[4], 33)], 1)
    );
}

#[test]
fn cli_writes_metrics_and_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.txt");
    let ledger = dir.path().join("l.txt");
    let conf = dir.path().join("c.toml");
    std::fs::write(&conf, "[network]\nnodes = 200\n[bailout]\nreps = 5\n").unwrap();
    let bin = env!("CARGO_BIN_EXE_creditnet");
    let st = std::process::Command::new(bin)
        .args(["bt-prefix", "--seed", "4", "--config"])
        .arg(&conf)
        .arg("--out")
        .arg(&metrics)
        .arg("--ledger")
        .arg(&ledger)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text
        .lines()
        .all(|l| l.starts_with("scenario=prefix-bt nodes=200 op=")));
    let l = Ledger::load(&ledger).unwrap();
    assert!(l.verify_chain());

    let gen = std::process::Command::new(bin)
        .args(["gen", "--nodes", "30"])
        .output()
        .unwrap();
    assert!(gen.status.success());
    let net = CreditNetwork::parse(&String::from_utf8(gen.stdout).unwrap()).unwrap();
    assert_eq!(net.node_count(), 30);

    let bad = std::process::Command::new(bin)
        .args(["bailout", "--nodes", "1"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[derive(Clone, Debug)]
struct Ev(u64);

proptest! {
    #[test]
    fn scheduler_pops_in_tick_then_insertion_order(ticks in prop::collection::vec(0u64..20, 1..60)) {
        let mut s = Scheduler::new();
        for (k, &t) in ticks.iter().enumerate() {
            s.schedule(t, EventKind::Deliver, Ev(k as u64)).unwrap();
        }
        let mut popped = Vec::new();
        while let Some(e) = s.pop() {
            popped.push((e.at, e.seq, e.payload.0));
        }
        let mut expect: Vec<(u64, u64, u64)> =
            ticks.iter().enumerate().map(|(k, &t)| (t, k as u64, k as u64)).collect();
        expect.sort();
        prop_assert_eq!(popped, expect);
        let seqs: BTreeSet<u64> = (0..ticks.len() as u64).collect();
        prop_assert_eq!(seqs.len(), ticks.len());
    }
}
