use std::collections::{BTreeMap, BTreeSet};

use creditnet_core::chord::ChordRing;
use creditnet_core::crypto::Ciphertext;
use creditnet_core::model::{generate_network, AuditVerdict, NetworkConfig};
use creditnet_core::prefix::PrefixEmbedding;
use creditnet_core::protocol::{
    bailout, bt_accept, bt_broadcast, bt_respond, forward, out_req, run_balance_transfer,
    transfer_subject, BailoutConfig, BalanceTransferRequest, ChordRouter, OutlinkRequest,
    PrefixRouter, ProtocolError, RelayBehavior, ResponsePolicy, ScriptedLending, TraceEvent,
    TransferResponse, World,
};
use creditnet_core::{Amount, CreditLink, CreditNetwork, NodeId, Rate, RequestId};

fn bt(i: NodeId, amt: Amount, intr: u32, tp: u64) -> BalanceTransferRequest {
    BalanceTransferRequest {
        requestor: i,
        amt,
        intr: Rate(intr),
        tp,
        issued_at: 0,
        key: None,
        request_id: RequestId::new("bt"),
    }
}

/// Path 0 - 1 - 2 - ... - (n-1), each node borrowing from its predecessor.
fn path_net(n: u32, rate: u32) -> CreditNetwork {
    let mut net = CreditNetwork::with_nodes(n, 3);
    for k in 1..n {
        net.create_link(NodeId(k), NodeId(k - 1), 10 * k as u64, Rate(rate))
            .unwrap();
    }
    net
}

#[test]
fn broadcast_reaches_everyone_once() {
    let mut w = World::deterministic(CreditNetwork::with_nodes(2, 1));
    assert_eq!(
        bt_broadcast(&mut w, &bt(NodeId(0), 10, 1, 5)),
        vec![NodeId(1)]
    );

    let net = generate_network(&NetworkConfig::new(1000, 3.0, 2)).unwrap();
    let mut w = World::deterministic(net);
    let got = bt_broadcast(&mut w, &bt(NodeId(7), 10, 1, 5));
    let uniq: BTreeSet<NodeId> = got.iter().copied().collect();
    assert_eq!(got.len(), 999);
    assert_eq!(uniq.len(), 999);
    assert!(!uniq.contains(&NodeId(7)));
    // a node added afterwards was never a recipient
    w.net.add_node(NodeId(1000)).unwrap();
    assert!(!uniq.contains(&NodeId(1000)));
}

#[test]
fn adjacent_responder_takes_one_hop() {
    let mut w = World::deterministic(path_net(6, 900));
    let emb = PrefixEmbedding::build(&w.net, NodeId(0), 1).unwrap();
    let req = bt(NodeId(2), 1000, 100, 50);
    let router = PrefixRouter {
        embedding: &emb,
        target: emb.hashed_id_seeded(NodeId(2), 1).unwrap(),
        alternates: true,
    };
    // node 3 borrows from the requestor itself and stays out
    assert!(bt_respond(&mut w, &req, NodeId(3), &router, &ResponsePolicy::Rule).is_none());
    let (resp, d) = bt_respond(&mut w, &req, NodeId(1), &router, &ResponsePolicy::Rule).unwrap();
    assert!(d.delivered);
    assert_eq!(d.hops(), 1);
    // one forwarding entry plus the requestor's receipt
    let entries = w.logs.for_request(&req.response_id(NodeId(1)));
    assert_eq!(entries.len(), 2);
    assert_eq!(entries.iter().filter(|e| e.writer == NodeId(1)).count(), 1);
    assert_eq!(resp.unwrap().arrival_ts, 2);
}

#[test]
fn four_hop_response_is_fully_logged_and_audits() {
    let mut w = World::deterministic(path_net(8, 900));
    let emb = PrefixEmbedding::build(&w.net, NodeId(0), 1).unwrap();
    let req = bt(NodeId(1), 1000, 100, 50);
    let router = PrefixRouter {
        embedding: &emb,
        target: emb.hashed_id_seeded(NodeId(1), 1).unwrap(),
        alternates: true,
    };
    let (_, d) = bt_respond(&mut w, &req, NodeId(5), &router, &ResponsePolicy::Rule).unwrap();
    assert_eq!(
        d.path,
        vec![NodeId(5), NodeId(4), NodeId(3), NodeId(2), NodeId(1)]
    );
    let entries = w.logs.for_request(&d.request_id);
    assert_eq!(entries.len(), 5);
    assert!(entries.iter().all(|e| e.verify(&w.keys)));
    assert_eq!(
        d.audit(&w, &router),
        AuditVerdict::Verified {
            path: d.path.clone()
        }
    );
}

#[test]
fn drop_without_alternate_abandons_and_localizes() {
    let mut w = World::deterministic(path_net(8, 900));
    w.behaviors.insert(NodeId(3), RelayBehavior::DropAfterLog);
    let emb = PrefixEmbedding::build(&w.net, NodeId(0), 1).unwrap();
    let req = bt(NodeId(1), 1000, 100, 50);
    let router = PrefixRouter {
        embedding: &emb,
        target: emb.hashed_id_seeded(NodeId(1), 1).unwrap(),
        alternates: true,
    };
    let (resp, d) = bt_respond(&mut w, &req, NodeId(5), &router, &ResponsePolicy::Rule).unwrap();
    assert!(resp.is_none());
    assert_eq!(d.lost_at, Some(NodeId(3)));
    assert_eq!(d.audit(&w, &router).suspect(), Some((NodeId(3), NodeId(2))));
}

#[test]
fn silent_relay_is_routed_around_when_possible() {
    // 0 <- 1 <- 2 and 0 <- 3 <- 2: two ways from 2 to 0
    let mut net = CreditNetwork::with_nodes(4, 1);
    for (b, l) in [(1, 0), (2, 1), (3, 0), (2, 3)] {
        net.create_link(NodeId(b), NodeId(l), 5, Rate(900)).unwrap();
    }
    let emb = PrefixEmbedding::build(&net, NodeId(0), 1).unwrap();
    let first = emb.tree().parent(NodeId(2)).unwrap();
    let mut w = World::deterministic(net);
    w.behaviors.insert(first, RelayBehavior::Silent);
    let router = PrefixRouter {
        embedding: &emb,
        target: emb.hashed_id_seeded(NodeId(0), 1).unwrap(),
        alternates: true,
    };
    let d = forward(&mut w, &router, NodeId(2), &RequestId::new("r"));
    assert!(d.delivered);
    assert_eq!(d.reroutes, 1);
    assert!(!d.path.contains(&first));
}

fn response(w: &mut World, i: NodeId, from: u32, amt: Amount, ts: u64) -> TransferResponse {
    TransferResponse {
        request_id: RequestId::new(format!("bt/{from}")),
        envelope: Vec::new(),
        responder: NodeId(from),
        ciphertext: w.keys.encrypt_for(i, amt),
        arrival_ts: ts,
        hops: 1,
        subject: CreditLink {
            borrower: NodeId(from),
            lender: NodeId(0),
            weight: amt,
            interest: Rate(900),
        },
    }
}

/// Sequential-budget rule restated independently.
fn oracle_accept(budget: Amount, tp: u64, mut rs: Vec<(u64, u32, Amount)>) -> Vec<u32> {
    rs.sort();
    let mut left = budget;
    let mut out = Vec::new();
    for (ts, who, amt) in rs {
        if ts < tp && amt <= left {
            left -= amt;
            out.push(who);
        }
    }
    out
}

#[test]
fn acceptance_follows_arrival_order_and_budget() {
    let i = NodeId(9);
    let mut w = World::deterministic(CreditNetwork::with_nodes(10, 1));
    let req = bt(i, 100, 100, 10);
    let rs = vec![response(&mut w, i, 1, 60, 3), response(&mut w, i, 2, 50, 4)];
    let out = bt_accept(&mut w, &req, &rs, 11).unwrap();
    assert_eq!(
        out.accepted.iter().map(|a| a.amount).collect::<Vec<_>>(),
        vec![60]
    );
    assert_eq!(out.remaining, 40);
    assert_eq!(
        oracle_accept(100, 10, vec![(3, 1, 60), (4, 2, 50)]),
        vec![1]
    );

    let rs = vec![
        response(&mut w, i, 1, 60, 3),
        response(&mut w, i, 2, 40, 4),
        response(&mut w, i, 3, 1, 5),
    ];
    let out = bt_accept(&mut w, &req, &rs, 11).unwrap();
    assert_eq!(out.accepted.len(), 2);
    assert_eq!(out.remaining, 0);
    assert_eq!(out.rejected, vec![NodeId(3)]);

    let rs = vec![response(&mut w, i, 1, 10, 10)];
    assert!(bt_accept(&mut w, &req, &rs, 11)
        .unwrap()
        .accepted
        .is_empty());
    assert_eq!(
        bt_accept(&mut w, &req, &rs, 10),
        Err(ProtocolError::DeadlineNotReached { now: 10, tp: 10 })
    );
}

#[test]
fn ties_break_by_responder_and_garbage_is_discarded() {
    let i = NodeId(9);
    let mut w = World::deterministic(CreditNetwork::with_nodes(10, 1));
    let req = bt(i, 50, 100, 10);
    let mut rs = vec![response(&mut w, i, 4, 50, 3), response(&mut w, i, 2, 50, 3)];
    rs.push(TransferResponse {
        ciphertext: Ciphertext(vec![1, 2, 3]),
        ..response(&mut w, i, 1, 5, 1)
    });
    let out = bt_accept(&mut w, &req, &rs, 11).unwrap();
    assert_eq!(out.accepted[0].responder, NodeId(2));
    assert_eq!(out.discarded, vec![NodeId(1)]);
}

#[test]
fn full_pipeline_conserves_debt_and_writes_once() {
    // E(4) owes A(0) 20 at 900bp; D(3) offers 100bp
    let mut net = CreditNetwork::with_nodes(5, 1);
    net.create_link(NodeId(4), NodeId(0), 20, Rate(900))
        .unwrap();
    net.create_link(NodeId(3), NodeId(0), 5, Rate(50)).unwrap();
    net.create_link(NodeId(1), NodeId(0), 5, Rate(50)).unwrap();
    net.create_link(NodeId(2), NodeId(1), 5, Rate(50)).unwrap();
    let mut w = World::deterministic(net);
    let emb = PrefixEmbedding::build(&w.net, NodeId(0), 1).unwrap();
    let req = bt(NodeId(3), 100, 100, 20);
    let router = PrefixRouter {
        embedding: &emb,
        target: emb.hashed_id_seeded(NodeId(3), 1).unwrap(),
        alternates: true,
    };
    let before = w.net.total_debt(NodeId(4));
    let out = run_balance_transfer(&mut w, &req, &router, &ResponsePolicy::Rule).unwrap();
    assert_eq!(out.completed.len(), 1);
    assert_eq!(w.net.link(NodeId(4), NodeId(3)).unwrap().weight, 20);
    assert!(w.net.link(NodeId(4), NodeId(0)).is_none());
    assert_eq!(w.net.total_debt(NodeId(4)), before);
    assert_eq!(w.ledger.len(), 1);
    assert_eq!(w.audit_single_write(), Ok(1));
    assert!(w.verify_bilaterality().violations.is_empty());
    w.net.check_consistency().unwrap();
    // the ledger alone rebuilds the post-transfer graph
    let mut base = CreditNetwork::with_nodes(5, 1);
    base.create_link(NodeId(4), NodeId(0), 20, Rate(900))
        .unwrap();
    base.create_link(NodeId(3), NodeId(0), 5, Rate(50)).unwrap();
    base.create_link(NodeId(1), NodeId(0), 5, Rate(50)).unwrap();
    base.create_link(NodeId(2), NodeId(1), 5, Rate(50)).unwrap();
    assert_eq!(
        w.ledger.replay(&base).unwrap().serialize(),
        w.net.serialize()
    );
}

#[test]
fn randomized_transfers_hold_protocol_invariants() {
    for seed in 0..6u64 {
        let net = generate_network(&NetworkConfig::new(300, 3.0, seed)).unwrap();
        let before: BTreeMap<NodeId, Amount> =
            net.nodes().map(|n| (n, net.total_debt(n))).collect();
        let subjects: BTreeMap<NodeId, CreditLink> = net
            .nodes()
            .filter_map(|n| transfer_subject(&net, n).map(|s| (n, s)))
            .collect();
        let mut w = World::deterministic(net);
        let emb = PrefixEmbedding::build(&w.net, NodeId(0), seed).unwrap();
        let i = NodeId(seed as u32 * 7 % 300);
        let req = BalanceTransferRequest {
            requestor: i,
            amt: 400,
            intr: Rate(1200),
            tp: 12,
            issued_at: 0,
            key: None,
            request_id: RequestId::new(format!("bt-{seed}")),
        };
        let router = PrefixRouter {
            embedding: &emb,
            target: emb.hashed_id_seeded(i, seed).unwrap(),
            alternates: true,
        };
        let out = run_balance_transfer(&mut w, &req, &router, &ResponsePolicy::Rule).unwrap();
        let accepted: Amount = out.accept.accepted.iter().map(|a| a.amount).sum();
        assert!(accepted <= req.amt);
        for a in &out.accept.accepted {
            let s = subjects[&a.responder];
            assert_eq!(a.amount, s.weight, "partial transfer by {}", a.responder);
            assert!(w.net.link(a.responder, s.lender).is_none());
            let new = w.net.link(a.responder, i).unwrap();
            assert!(new.interest < s.interest);
        }
        for n in w.net.nodes() {
            assert_eq!(w.net.total_debt(n), before[&n], "debt of {n}");
        }
        assert_eq!(w.audit_single_write(), Ok(out.completed.len()));
        let sweep = w.verify_bilaterality();
        assert!(sweep.violations.is_empty(), "{:?}", sweep.violations);
        assert_eq!(sweep.covered, 2 * out.completed.len());
        w.net.check_consistency().unwrap();
    }
}

#[test]
fn chord_variant_delivers_and_repositions() {
    let net = generate_network(&NetworkConfig::new(200, 3.0, 4)).unwrap();
    let mut ring = ChordRing::new(16).unwrap();
    for n in net.nodes() {
        ring.join(n).unwrap();
    }
    ring.stabilize_until_quiescent(64);
    let mut w = World::deterministic(net);
    let i = NodeId(17);
    let key = ring.ring_id(i).unwrap();
    let req = BalanceTransferRequest {
        key: Some(key),
        ..bt(i, 300, 1200, 20)
    };
    let out = {
        let router = ChordRouter { ring: &ring, key };
        let out = run_balance_transfer(&mut w, &req, &router, &ResponsePolicy::Rule).unwrap();
        for d in &out.deliveries {
            assert!(d.delivered);
            assert!(d.hops() <= 16);
            assert_eq!(
                d.audit(&w, &router),
                AuditVerdict::Verified {
                    path: d.path.clone()
                }
            );
        }
        out
    };
    assert!(!out.completed.is_empty());
    for &(j, _) in &out.completed {
        let old = ring.ring_id(j).unwrap();
        let (new, _) = ring.reposition(j).unwrap();
        assert_ne!(old, new);
    }
    assert_eq!(ring.oracle_mismatches(), 0);
}

fn star_for_bailout() -> World {
    // requestor 0 has no lenders; 1..=12 with varied degree
    let mut net = CreditNetwork::with_nodes(13, 5);
    for k in 2..13 {
        net.create_link(NodeId(k), NodeId(1), 3, Rate(500)).unwrap();
    }
    for k in 3..13 {
        net.create_link(NodeId(k), NodeId(2), 3, Rate(500)).unwrap();
    }
    net.create_link(NodeId(1), NodeId(0), 3, Rate(500)).unwrap();
    World::deterministic(net)
}

fn no_landmark_links(w: &World, lm: NodeId) -> bool {
    !w.net.contains(lm) && w.net.links().all(|l| l.borrower != lm && l.lender != lm)
}

#[test]
fn bailout_first_round_success() {
    let mut w = star_for_bailout();
    let cfg = BailoutConfig {
        m_out: 3,
        fee_per_link: 7,
        ..Default::default()
    };
    let mut policy = ScriptedLending {
        offers: BTreeMap::from([(NodeId(1), 30)]),
        default: None,
    };
    let out = bailout(&mut w, NodeId(0), &cfg, &mut policy).unwrap();
    assert_eq!(out.rounds, 1);
    assert_eq!(out.links, vec![(NodeId(1), 30)]);
    assert_eq!(out.fee, 7);
    assert_eq!(w.net.link(NodeId(0), NodeId(1)).unwrap().weight, 30);
    assert!(no_landmark_links(&w, out.landmark));
    assert_eq!(w.ledger.len(), 1);
    assert_eq!(w.audit_single_write(), Ok(1));
    assert!(w.verify_bilaterality().violations.is_empty());
}

#[test]
fn bailout_needs_a_second_list() {
    let mut w = star_for_bailout();
    let cfg = BailoutConfig {
        m_out: 3,
        fee_per_link: 2,
        ..Default::default()
    };
    // the first list is the three best connected nodes; only a later one lends
    let pool =
        creditnet_core::protocol::bailout::candidate_pool(&w, NodeId(0), w.net.next_free_id());
    let late = pool[4];
    let mut policy = ScriptedLending {
        offers: BTreeMap::from([(late, 12)]),
        default: None,
    };
    let out = bailout(&mut w, NodeId(0), &cfg, &mut policy).unwrap();
    assert_eq!(out.rounds, 2);
    assert_eq!(out.candidates[0], pool[..3].to_vec());
    assert_eq!(out.links, vec![(late, 12)]);
    assert_eq!(out.fee, 2);
    assert!(no_landmark_links(&w, out.landmark));
}

#[test]
fn bailout_total_failure_cleans_up() {
    let mut w = star_for_bailout();
    let before = w.net.serialize();
    let cfg = BailoutConfig {
        m_out: 2,
        ..Default::default()
    };
    let mut policy = ScriptedLending::default();
    let lm = w.net.next_free_id();
    let err = bailout(&mut w, NodeId(0), &cfg, &mut policy).unwrap_err();
    assert_eq!(err, ProtocolError::BailoutFailed { rounds: 3 });
    assert!(no_landmark_links(&w, lm));
    assert_eq!(w.net.serialize(), before);
    assert!(w.ledger.is_empty());
    assert!(w.verify_bilaterality().violations.is_empty());
}

#[test]
fn out_req_answers() {
    let mut w = star_for_bailout();
    let lm = NodeId(99);
    w.net.add_node(lm).unwrap();
    let mut willing = ScriptedLending {
        offers: BTreeMap::from([(NodeId(4), 30)]),
        default: None,
    };
    let req = OutlinkRequest::signed(&mut w, NodeId(0), NodeId(4), 1);
    assert_eq!(out_req(&mut w, lm, &req, 10, 0, &mut willing), Ok(Some(30)));
    let req5 = OutlinkRequest::signed(&mut w, NodeId(0), NodeId(5), 1);
    assert_eq!(out_req(&mut w, lm, &req5, 10, 0, &mut willing), Ok(None));
    // signed by someone other than the requestor
    let mut forged = OutlinkRequest::signed(&mut w, NodeId(3), NodeId(4), 1);
    forged.requestor = NodeId(0);
    let logged = w.trace.len();
    assert_eq!(out_req(&mut w, lm, &forged, 10, 0, &mut willing), Ok(None));
    assert!(w.trace[logged..]
        .iter()
        .any(|e| matches!(e, TraceEvent::Discarded { .. })));
    assert_eq!(
        out_req(&mut w, lm, &req, 1, 0, &mut willing),
        Err(ProtocolError::WindowClosed { t: 1, tr: 1 })
    );
}
