use creditnet_core::model::{generate_network, NetworkConfig};
use creditnet_core::{CreditNetwork, NodeId, Rate};
use proptest::prelude::*;

#[derive(Clone, Debug)]
enum Op {
    Create(u32, u32, u64),
    Update(u32, u32, i64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u32..12, 0u32..12, 0u64..50).prop_map(|(b, l, w)| Op::Create(b, l, w)),
        (0u32..12, 0u32..12, -5i64..50).prop_map(|(b, l, w)| Op::Update(b, l, w)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn tables_always_rederive_from_edges(ops in prop::collection::vec(op(), 0..120)) {
        let mut net = CreditNetwork::with_nodes(12, 0);
        for o in ops {
            let _ = match o {
                Op::Create(b, l, w) => net.create_link(NodeId(b), NodeId(l), w, Rate(100)).map(|_| ()),
                Op::Update(b, l, w) => net.apply_link_update(NodeId(b), NodeId(l), w).map(|_| ()),
            };
            prop_assert!(net.check_consistency().is_ok());
            prop_assert!(net.links().all(|l| l.weight > 0));
            for n in net.nodes() {
                for e in net.table(n).unwrap().entries() {
                    prop_assert!(e.weight > 0);
                }
            }
        }
        let back = CreditNetwork::parse(&net.serialize()).unwrap();
        prop_assert_eq!(back.serialize(), net.serialize());
    }

    #[test]
    fn at_most_one_link_per_ordered_pair(b in 0u32..5, l in 0u32..5, w1 in 1u64..9, w2 in 1u64..9) {
        prop_assume!(b != l);
        let mut net = CreditNetwork::with_nodes(5, 0);
        net.create_link(NodeId(b), NodeId(l), w1, Rate(1)).unwrap();
        prop_assert!(net.create_link(NodeId(b), NodeId(l), w2, Rate(1)).is_err());
        prop_assert_eq!(net.link(NodeId(b), NodeId(l)).unwrap().weight, w1);
        // the reverse direction is a different link
        prop_assert!(net.create_link(NodeId(l), NodeId(b), w2, Rate(1)).is_ok());
        prop_assert_eq!(net.table(NodeId(b)).unwrap().len(), 2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn generation_is_seed_deterministic(n in 2usize..300, seed in any::<u64>()) {
        let cfg = NetworkConfig::new(n, 2.5, seed);
        let a = generate_network(&cfg).unwrap();
        prop_assert_eq!(a.serialize(), generate_network(&cfg).unwrap().serialize());
        prop_assert_eq!(a.node_count(), n);
        prop_assert!(a.links().all(|l| l.weight > 0));
    }
}
